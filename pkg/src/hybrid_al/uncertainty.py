"""Class-wise MC-dropout uncertainty and candidate ranking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import VOLUME_WISE, SLICE_WISE, SampleKey, key_order


@dataclass(frozen=True)
class UncertaintyScore:
    key: SampleKey
    per_class: np.ndarray  # m_unc for classes 0..C
    scalar: float


def class_uncertainty(probs) -> np.ndarray:
    """Mean over pixels of the across-pass variance, for every class.

    ``probs`` has shape ``(T, C + 1, N)`` (or a :class:`PredictiveSamples`);
    the variance is the population variance over the ``T`` passes.
    Computed in float64 so identical passes give exactly zero.
    """
    probs = getattr(probs, "probs", probs)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"expected (T, C+1, N) probabilities, got {p.shape}")
    return _pass_variance(p).mean(axis=1)


def _pass_variance(p: np.ndarray) -> np.ndarray:
    # shifting by the first pass makes identical passes exactly zero
    d = p - p[0]
    return np.square(d - d.mean(axis=0)).mean(axis=0)


def slice_class_uncertainty(probs, n_slices: int) -> np.ndarray:
    """Per-slice class uncertainty for a stack scored in one pass.

    ``probs`` is ``(T, C + 1, n_slices * pixels_per_slice)`` in slice-major
    pixel order; returns ``(n_slices, C + 1)``.
    """
    probs = getattr(probs, "probs", probs)
    p = np.asarray(probs, dtype=np.float64)
    T, K, N = p.shape
    if N % n_slices:
        raise ValueError("pixel count is not a multiple of the slice count")
    return _pass_variance(p).reshape(K, n_slices, N // n_slices).mean(axis=2).T


def scalar_score(per_class: np.ndarray) -> float:
    """Mean of the foreground entries; background is excluded."""
    per_class = np.asarray(per_class)
    return float(per_class[1:].mean()) if per_class.size > 1 else float(per_class[0])


def aggregate_unit_score(scores: Sequence[UncertaintyScore], rule: str) -> float:
    if not scores:
        raise ValueError("no scores to aggregate")
    if rule == SLICE_WISE:
        if len(scores) != 1:
            raise ValueError("a slice-wise unit has exactly one slice score")
        return scores[0].scalar
    if rule == VOLUME_WISE:
        return float(np.mean([s.scalar for s in scores]))
    raise ValueError(f"unknown acquisition rule {rule!r}")


def select_candidates(
    unlabeled: Sequence[SampleKey],
    unit_scores: Mapping[SampleKey, float],
    candidate_factor: float,
    k: int,
) -> list[SampleKey]:
    """Top ``ceil(candidate_factor * k)`` unlabeled units by descending score.

    Ties go to the smaller key.  The result is ordered by rank.
    """
    if candidate_factor < 1:
        raise ValueError("candidate_factor must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(unlabeled):
        raise ValueError(f"k={k} exceeds the {len(unlabeled)} unlabeled units")
    n = min(math.ceil(candidate_factor * k - 1e-9), len(unlabeled))
    ranked = sorted(unlabeled, key=lambda key: (-unit_scores[key], key_order(key)))
    return ranked[:n]


def write_scores_csv(path, scores: Sequence[UncertaintyScore]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        K = len(scores[0].per_class) if scores else 0
        w.writerow(["key"] + [f"m_unc_{c}" for c in range(K)] + ["scalar"])
        for s in scores:
            w.writerow([str(s.key)] + [repr(float(x)) for x in s.per_class] + [repr(s.scalar)])
