"""Representativeness: cosine density, mutual-information redundancy, greedy selection.

The greedy selector maximizes, one candidate at a time,

    F(S) - lam * R(S)

where ``F(S)`` is the mean over unlabeled units of their best normalized
similarity to any selected candidate (max-coverage) and ``R(S)`` is the
mean over selected candidates of their largest normalized mutual
information with any training unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SampleKey

HYBRID = "hybrid"
DENSITY = "density-only"
DIVERSITY = "diversity-only"
MODES = (HYBRID, DENSITY, DIVERSITY)

DESCRIPTOR_SIZE = 32
DESCRIPTOR_DEPTH = 8
NORM_EPS = 1e-12


def _area_bins(n: int, target: int) -> np.ndarray:
    target = min(target, n)
    return np.linspace(0, n, target + 1).astype(int)[:-1]


def downsample(unit) -> np.ndarray:
    """Area-average a slice to 32x32 or a volume to 8x32x32.

    Axes shorter than the target are left at native resolution.
    """
    a = np.asarray(unit, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError(f"unit must be 2-D or 3-D, got {a.shape}")
    targets = (DESCRIPTOR_SIZE, DESCRIPTOR_SIZE) if a.ndim == 2 else (DESCRIPTOR_DEPTH, DESCRIPTOR_SIZE, DESCRIPTOR_SIZE)
    for axis, target in enumerate(targets):
        n = a.shape[axis]
        starts = _area_bins(n, target)
        counts = np.diff(np.append(starts, n))
        shape = [1] * a.ndim
        shape[axis] = -1
        a = np.add.reduceat(a, starts, axis=axis) / counts.reshape(shape)
    return a


@dataclass(frozen=True)
class DescriptorVector:
    key: SampleKey | None
    values: np.ndarray  # zero-mean, flattened
    intensities: np.ndarray  # downsampled, flattened, before mean removal


def descriptor(unit, key: SampleKey | None = None) -> DescriptorVector:
    small = downsample(unit).ravel()
    # shifting by one entry first makes a constant unit exactly zero
    shifted = small - small[0]
    return DescriptorVector(key, shifted - shifted.mean(), small)


def cosine_similarity(a, b) -> float:
    a = getattr(a, "values", a)
    b = getattr(b, "values", b)
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((np.clip(x, 0.0, 1.0) * bins).astype(np.intp), bins - 1)


def _mi_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    pxy = joint / joint.sum()
    px, py = pxy.sum(axis=1), pxy.sum(axis=0)
    nz = pxy > 0
    return float(max(np.sum(pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])), 0.0))


def mutual_information(a, b, bins: int = 32) -> float:
    """Histogram MI (nats) between co-located intensities in [0, 1]."""
    a = getattr(a, "intensities", a)
    b = getattr(b, "intensities", b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    return _mi_from_indices(_bin_index(a.ravel(), bins), _bin_index(b.ravel(), bins), bins)


@dataclass(frozen=True)
class PairwiseMatrix:
    rows: list
    cols: list
    raw: np.ndarray
    normalized: np.ndarray
    kind: str

    def save(self, path) -> None:
        """Write ``raw`` then ``normalized`` as little-endian f64, keys alongside."""
        path = Path(path)
        header = np.array(self.raw.shape, dtype="<u8")
        path.write_bytes(header.tobytes() + self.raw.astype("<f8").tobytes() + self.normalized.astype("<f8").tobytes())
        path.with_suffix(path.suffix + ".keys").write_text(
            "rows\t" + "\t".join(map(str, self.rows)) + "\ncols\t" + "\t".join(map(str, self.cols)) + "\n"
        )


def min_max(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def normalize(matrix) -> PairwiseMatrix:
    if isinstance(matrix, PairwiseMatrix):
        return PairwiseMatrix(matrix.rows, matrix.cols, matrix.raw, min_max(matrix.raw), matrix.kind)
    raw = np.asarray(matrix, dtype=np.float64)
    return PairwiseMatrix([], [], raw, min_max(raw), "raw")


def similarity_matrix(cand: Sequence[DescriptorVector], pool: Sequence[DescriptorVector]) -> np.ndarray:
    def unit_rows(ds):
        M = np.array([d.values for d in ds], dtype=np.float64).reshape(len(ds), -1)
        norms = np.linalg.norm(M, axis=1, keepdims=True)
        return np.where(norms < NORM_EPS, 0.0, M / np.where(norms < NORM_EPS, 1.0, norms))

    if not cand or not pool:
        return np.zeros((len(cand), len(pool)))
    return np.clip(unit_rows(cand) @ unit_rows(pool).T, -1.0, 1.0)


def mi_matrix(cand: Sequence[DescriptorVector], pool: Sequence[DescriptorVector], bins: int = 32) -> np.ndarray:
    out = np.zeros((len(cand), len(pool)))
    if not cand or not pool:
        return out
    ci = [_bin_index(d.intensities, bins) for d in cand]
    pi = [_bin_index(d.intensities, bins) for d in pool]
    for r, a in enumerate(ci):
        for c, b in enumerate(pi):
            if a.shape != b.shape:
                raise ValueError("resolution mismatch between descriptors")
            out[r, c] = _mi_from_indices(a, b, bins)
    return out


def pairwise_matrices(
    cand: Sequence[DescriptorVector],
    unlabeled: Sequence[DescriptorVector],
    training: Sequence[DescriptorVector],
    bins: int = 32,
) -> tuple[PairwiseMatrix, PairwiseMatrix]:
    """Normalized candidate-by-unlabeled similarity and candidate-by-training MI."""
    if not cand:
        raise ValueError("candidate set is empty")
    rows = [d.key for d in cand]
    sim = similarity_matrix(cand, unlabeled)
    mi = mi_matrix(cand, training, bins)
    return (
        PairwiseMatrix(rows, [d.key for d in unlabeled], sim, min_max(sim), "similarity"),
        PairwiseMatrix(rows, [d.key for d in training], mi, min_max(mi), "mutual-information"),
    )


@dataclass(frozen=True)
class HybridConfig:
    lam: float = 0.5
    k: int = 1
    mode: str = HYBRID

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def greedy_hybrid_select(sim, mi, config: HybridConfig) -> list[int]:
    """Greedy selection of ``config.k`` candidate row indices.

    ``sim`` is the normalized ``|D_c| x |D_u|`` matrix and ``mi`` the
    normalized ``|D_c| x |D_t|`` matrix (zero columns when the training
    pool is empty).  Ties go to the smaller row index.
    """
    sim = np.asarray(getattr(sim, "normalized", sim), dtype=np.float64)
    mi = np.asarray(getattr(mi, "normalized", mi), dtype=np.float64)
    n = sim.shape[0]
    if mi.shape[0] != n and mi.size:
        raise ValueError("sim and mi disagree on the candidate count")
    if config.k > n:
        raise ValueError(f"k={config.k} exceeds {n} candidates")
    redundancy = mi.max(axis=1) if mi.ndim == 2 and mi.shape[1] else np.zeros(n)
    lam = 0.0 if config.mode == DENSITY else config.lam
    n_cols = sim.shape[1]

    selected: list[int] = []
    covered = np.full(n_cols, -np.inf)
    red_sum = 0.0
    remaining = list(range(n))
    for _ in range(config.k):
        idx = np.array(remaining)
        red = (red_sum + redundancy[idx]) / (len(selected) + 1)
        if config.mode == DIVERSITY:
            objective = -red
        else:
            if n_cols:
                coverage = np.maximum(covered, sim[idx]).mean(axis=1)
            else:
                coverage = np.zeros(len(idx))
            objective = coverage - lam * red
        pos = int(np.argmax(objective))  # first maximum, i.e. smallest index
        best = remaining.pop(pos)
        selected.append(best)
        red_sum += redundancy[best]
        if n_cols:
            covered = np.maximum(covered, sim[best])
    return selected


def coverage(sim, S: Sequence[int]) -> float:
    sim = np.asarray(getattr(sim, "normalized", sim))
    if not S or sim.shape[1] == 0:
        return 0.0
    return float(sim[list(S)].max(axis=0).mean())


def redundancy(mi, S: Sequence[int]) -> float:
    mi = np.asarray(getattr(mi, "normalized", mi))
    if not S or mi.ndim < 2 or mi.shape[1] == 0:
        return 0.0
    return float(mi[list(S)].max(axis=1).mean())
