"""Brute-force reference computations and the built-in self-check.

The references here are written independently of the vectorized code
paths they check: plain Python loops over pixels, passes and candidate
sets.  :func:`run_checks` compares both on random instances and on
hand-computed cases.
"""

from __future__ import annotations

import math
import time

import numpy as np


def class_uncertainty_reference(probs) -> list[float]:
    """Triple loop over classes, pixels and passes; population variance."""
    probs = np.asarray(probs, dtype=np.float64)
    T, K, N = probs.shape
    out = []
    for l in range(K):
        total = 0.0
        for n in range(N):
            vals = [float(probs[t, l, n]) for t in range(T)]
            mu = sum(vals) / T
            total += sum((v - mu) ** 2 for v in vals) / T
        out.append(total / N)
    return out


def _coverage(sim, S):
    if not S:
        return 0.0
    n_cols = len(sim[0]) if len(sim) else 0
    if n_cols == 0:
        return 0.0
    return sum(max(sim[i][j] for i in S) for j in range(n_cols)) / n_cols


def _redundancy(mi, S):
    if not S or not len(mi) or len(mi[0]) == 0:
        return 0.0
    return sum(max(mi[i]) for i in S) / len(S)


def greedy_reference(sim, mi, lam: float, k: int, mode: str = "hybrid") -> list[int]:
    """Step-by-step greedy over explicit candidate sets."""
    sim = [list(map(float, row)) for row in np.asarray(sim)]
    mi = [list(map(float, row)) for row in np.asarray(mi)]
    n = len(sim)
    if mode == "density-only":
        lam = 0.0
    S: list[int] = []
    for _ in range(k):
        best, best_val = None, None
        for i in range(n):
            if i in S:
                continue
            T = S + [i]
            if mode == "diversity-only":
                val = -_redundancy(mi, T)
            else:
                val = _coverage(sim, T) - lam * _redundancy(mi, T)
            if best_val is None or val > best_val:
                best, best_val = i, val
        S.append(best)
    return S


def exhaustive_best_single(sim, mi, lam: float) -> int:
    vals = [_coverage(sim, [i]) - lam * _redundancy(mi, [i]) for i in range(len(sim))]
    return int(max(range(len(vals)), key=lambda i: (vals[i], -i)))


def mi_reference(a, b, bins: int) -> float:
    a, b = np.ravel(a), np.ravel(b)
    n = len(a)
    joint: dict = {}
    for x, y in zip(a, b):
        ix = min(int(float(x) * bins), bins - 1)
        iy = min(int(float(y) * bins), bins - 1)
        joint[(ix, iy)] = joint.get((ix, iy), 0) + 1
    px: dict = {}
    py: dict = {}
    for (ix, iy), c in joint.items():
        px[ix] = px.get(ix, 0) + c
        py[iy] = py.get(iy, 0) + c
    return sum(c / n * math.log((c / n) / ((px[ix] / n) * (py[iy] / n))) for (ix, iy), c in joint.items())


def random_greedy_instance(rng: np.random.Generator, max_c=10, max_u=16, max_t=5):
    nc = int(rng.integers(1, max_c + 1))
    nu = int(rng.integers(1, max_u + 1))
    nt = int(rng.integers(0, max_t + 1))
    from .represent import min_max

    sim = min_max(rng.uniform(-1, 1, (nc, nu)))
    mi = min_max(rng.uniform(0, 2, (nc, nt)))
    return sim, mi


# Central differences at h=1e-5 carry ~1e-11 rounding error, so relative
# error is measured against at least 1e-6 to keep vanishing gradients honest.
GRAD_FLOOR = 1e-6


def _relative_error(a, b, floor: float = GRAD_FLOOR) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def focal_gradient_check(rng: np.random.Generator, n_configs: int = 100, h: float = 1e-5, grad_fn=None):
    """Worst relative error of analytic vs central-difference parameter gradients.

    Each configuration draws a small network, a batch, labels, focal
    parameters and (half the time) fixed dropout masks, all in float64.
    """
    from .model import forward_backward, init_params

    grad_fn = grad_fn or forward_backward
    worst = 0.0
    for _ in range(n_configs):
        F, H, C, N = int(rng.integers(2, 9)), int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        params = init_params(F, H, C, rng)
        for name in ("b1", "b2", "b3"):
            params[name] = rng.normal(0, 0.3, params[name].shape)
        X = rng.normal(size=(N, F))
        y = rng.integers(0, C + 1, N)
        alpha = float(rng.uniform(0.05, 1.0))
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, rng.uniform(0, 4)]))
        masks, scale = None, 1.0
        if rng.random() < 0.5:
            masks = (rng.random((N, H)) < 0.5, rng.random((N, H)) < 0.5)
            scale = 2.0
        _, grads = grad_fn(params, X, y, alpha, gamma, masks, scale)
        for name, p in params.items():
            numeric = np.empty_like(p)
            for i in np.ndindex(p.shape):
                orig = p[i]
                p[i] = orig + h
                up, _ = forward_backward(params, X, y, alpha, gamma, masks, scale)
                p[i] = orig - h
                down, _ = forward_backward(params, X, y, alpha, gamma, masks, scale)
                p[i] = orig
                numeric[i] = (up - down) / (2 * h)
            worst = max(worst, _relative_error(grads[name], numeric))
    return worst


def run_checks(inject_fault: bool = False, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run every oracle comparison; ``inject_fault`` perturbs the implementation side."""
    from . import metrics
    from .represent import HybridConfig, greedy_hybrid_select, mutual_information
    from .uncertainty import class_uncertainty

    rng = np.random.default_rng(seed)
    eps = 1e-6 if inject_fault else 0.0
    results = []

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T, K, N = int(rng.integers(2, 11)), int(rng.integers(2, 6)), int(rng.integers(1, 65))
        logits = rng.normal(size=(T, K, N))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        got = class_uncertainty(p) + eps
        worst = max(worst, float(np.max(np.abs(got - class_uncertainty_reference(p)))))
    results.append(("class uncertainty vs triple loop", worst < 1e-12, f"max abs err {worst:.2e} ({time.perf_counter() - t0:.2f}s)"))

    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        sim, mi = random_greedy_instance(rng)
        lam = float(rng.choice([0.0, 0.25, 0.5, 2.0]))
        k = int(rng.integers(1, min(3, sim.shape[0]) + 1))
        got = greedy_hybrid_select(sim, mi, HybridConfig(lam=lam, k=k))
        if inject_fault:
            got = [(g + 1) % sim.shape[0] for g in got]
        if got != greedy_reference(sim, mi, lam, k):
            mismatches += 1
        elif got[0] != exhaustive_best_single(sim, mi, lam):
            mismatches += 1
    results.append(("greedy vs brute force", mismatches == 0, f"{mismatches} mismatches ({time.perf_counter() - t0:.2f}s)"))

    t0 = time.perf_counter()
    grad_fn = None
    if inject_fault:
        from .model import forward_backward

        def grad_fn(*args):
            loss, g = forward_backward(*args)
            return loss, {k: v * 1.001 for k, v in g.items()}

    err = focal_gradient_check(rng, 20, grad_fn=grad_fn)
    results.append(("focal gradient vs central differences", err < 1e-4, f"max rel err {err:.2e} ({time.perf_counter() - t0:.2f}s)"))

    mi_cases = [
        ([0, 0, 1, 1], [0, 0, 1, 1], 2, math.log(2)),
        ([0, 0, 1, 1], [0, 1, 0, 1], 2, 0.0),
    ]
    ok = all(abs(mutual_information(np.array(a, float), np.array(b, float), bins) + eps - want) < 1e-12 for a, b, bins, want in mi_cases)
    for _ in range(20):
        a, b = rng.uniform(0, 1, 64), rng.uniform(0, 1, 64)
        ok &= abs(mutual_information(a, b, 8) + eps - mi_reference(a, b, 8)) < 1e-12
    results.append(("mutual information hand cases", bool(ok), "ln2 / independence / random vs reference"))

    pred = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    truth = np.array([0, 0, 1, 1, 1, 1, 0, 0])
    dice_ok = (
        metrics.dice(truth, truth, 1) + eps == 1.0
        and metrics.dice(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) + eps == 0.0
        and metrics.dice(pred, truth, 1) + eps == 0.5
    )
    results.append(("dice hand cases", bool(dice_ok), "identity / disjoint / half overlap"))

    truth_r = np.zeros(200, dtype=np.uint8)
    truth_r[:100] = 1
    pred_r = truth_r.copy()
    pred_r[:25] = 0
    rac_ok = (
        metrics.rac(truth_r, truth_r) + eps == 1.0
        and metrics.rac(pred_r, truth_r) + eps == 0.75
        and metrics.rac(np.zeros_like(truth_r), truth_r) + eps == 0.0
    )
    results.append(("rac hand cases", bool(rac_ok), "perfect / 25 of 100 revised / all background"))
    return results
