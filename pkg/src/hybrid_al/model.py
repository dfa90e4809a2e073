"""Dropout per-pixel classifier with focal-loss training and MC-dropout inference.

The classifier maps an 8-dimensional local feature vector per pixel to
``C + 1`` class probabilities through two ReLU layers, each followed by
dropout.  Dropout is "inverted": kept activations are scaled by
``1 / keep`` during stochastic passes, so deterministic inference uses
the weights unchanged.

Dropout masks are drawn from raw generator output.  A unit is kept when
its random byte is ``>= round(256 * rate)``, so the effective rate is
quantized to multiples of 1/256.  For rate 0.5 each mask entry consumes a
single random bit instead of a byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import metrics

N_FEATURES = 8
_CHUNK = 16384
_CKPT_MAGIC = b"BALM"
_CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# -- features ---------------------------------------------------------------


def extract_features(image) -> np.ndarray:
    """Per-pixel features of a 2-D slice or a (depth, H, W) stack.

    Columns: intensity, 3x3 box mean, 3x3 box std, 7x7 box mean, 7x7 box
    std, Gaussian-smoothed intensity (sigma 2), row and column coordinates
    scaled to [0, 1].  Filters act within each slice with edge
    replication.  Returns ``(n_pixels, 8)`` float32 in row-major pixel
    order.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or min(img.shape[1:]) < 2:
        raise ValueError(f"expected a 2-D slice or 3-D stack, got shape {np.shape(image)}")
    D, H, W = img.shape
    feats = np.empty((D, H, W, N_FEATURES), dtype=np.float64)
    feats[..., 0] = img
    for j, size in ((1, 3), (3, 7)):
        mean = ndimage.uniform_filter(img, size=(1, size, size), mode="nearest")
        sq = ndimage.uniform_filter(img * img, size=(1, size, size), mode="nearest")
        feats[..., j] = mean
        feats[..., j + 1] = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    feats[..., 5] = ndimage.gaussian_filter(img, sigma=(0, 2, 2), mode="nearest")
    feats[..., 6] = (np.arange(H) / (H - 1))[None, :, None]
    feats[..., 7] = (np.arange(W) / (W - 1))[None, None, :]
    return feats.reshape(-1, N_FEATURES).astype(np.float32)


# -- configuration and parameters ------------------------------------------


@dataclass
class TrainConfig:
    alpha: float = 0.67
    gamma: float = 2.0
    lr: float = 4e-4
    weight_decay: float = 1e-5
    batch_size: int = 512
    steps: int = 2000
    eval_every: int = 200
    dropout: float = 0.5
    mc_passes: int = 10
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mc_passes < 1:
            raise ValueError("mc_passes must be >= 1")
        if min(self.batch_size, self.steps, self.eval_every, self.hidden) < 1:
            raise ValueError("batch_size, steps, eval_every and hidden must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class Classifier:
    params: dict[str, np.ndarray]
    n_classes: int  # foreground classes; output width is n_classes + 1
    dropout: float = 0.5
    history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @staticmethod
    def expected_n_params(n_features: int, hidden: int, n_classes: int) -> int:
        return (n_features + 1) * hidden + (hidden + 1) * hidden + (hidden + 1) * (n_classes + 1)

    @property
    def keep_threshold(self) -> int:
        return int(round(256 * self.dropout))

    @property
    def keep_scale(self) -> float:
        return 256.0 / (256 - self.keep_threshold)

    def save(self, path) -> None:
        F, H = self.params["W1"].shape
        K = self.params["W3"].shape[1]
        head = _CKPT_MAGIC + struct.pack("<IIIId", _CKPT_VERSION, F, H, K, self.dropout)
        body = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
        Path(path).write_bytes(head + body)

    @classmethod
    def load(cls, path) -> "Classifier":
        raw = Path(path).read_bytes()
        if raw[:4] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a classifier checkpoint")
        version, F, H, K, dropout = struct.unpack_from("<IIIId", raw, 4)
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        shapes = {"W1": (F, H), "b1": (H,), "W2": (H, H), "b2": (H,), "W3": (H, K), "b3": (K,)}
        offset = 4 + struct.calcsize("<IIIId")
        params = {}
        for name in PARAM_NAMES:
            n = int(np.prod(shapes[name]))
            params[name] = np.frombuffer(raw, "<f8", n, offset).reshape(shapes[name]).astype(np.float64)
            offset += 8 * n
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return cls(params, n_classes=K - 1, dropout=dropout)


def init_params(n_features: int, hidden: int, n_classes: int, rng: np.random.Generator) -> dict:
    """He-normal weights, zero biases."""
    K = n_classes + 1
    return {
        "W1": rng.normal(0, np.sqrt(2.0 / n_features), (n_features, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0, np.sqrt(2.0 / hidden), (hidden, hidden)),
        "b2": np.zeros(hidden),
        "W3": rng.normal(0, np.sqrt(1.0 / hidden), (hidden, K)),
        "b3": np.zeros(K),
    }


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_masks(rng: np.random.Generator, shape, threshold: int) -> np.ndarray:
    """Boolean keep-mask; each entry kept with probability ``1 - threshold/256``."""
    n = int(np.prod(shape))
    if threshold == 0:
        return np.ones(shape, dtype=bool)
    if threshold == 128:
        words = rng.bit_generator.random_raw(-(-n // 64))
        bits = np.unpackbits(words.view(np.uint8), count=n)
        return bits.view(bool).reshape(shape)
    words = rng.bit_generator.random_raw(-(-n // 8))
    return (words.view(np.uint8)[:n] >= threshold).reshape(shape)


# -- loss -------------------------------------------------------------------

P_FLOOR = 1e-12


def focal_loss(probs: np.ndarray, labels: np.ndarray, alpha: float, gamma: float):
    """Mean multi-class focal loss and its gradient w.r.t. the logits.

    ``probs`` is ``(N, K)`` softmax output, ``labels`` integer class ids.
    Returns ``(loss, dlogits)`` with ``dlogits`` of shape ``(N, K)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.intp)
    N = probs.shape[0]
    pt = probs[np.arange(N), labels]
    ptc = np.maximum(pt, P_FLOOR)
    one_m = 1.0 - pt
    log_pt = np.log(ptc)
    mod = one_m**gamma
    loss = -alpha * mod * log_pt

    # dL/dpt, then chain through softmax: dpt/dz_j = pt (1[j=y] - p_j)
    if gamma == 0:
        dmod_term = np.zeros_like(pt)
    else:
        safe = one_m > 0
        dmod_term = np.where(safe, gamma * np.where(safe, one_m, 1.0) ** (gamma - 1), 0.0) * pt * log_pt
    # d(pt * (-log ptc)) / dpt vanishes below the floor
    ce_term = np.where(pt > P_FLOOR, mod, 0.0)
    coef = alpha * (dmod_term - ce_term)  # = dL/dpt * pt
    onehot = np.zeros_like(probs)
    onehot[np.arange(N), labels] = 1.0
    dlogits = coef[:, None] * (onehot - probs)
    return float(loss.mean()), dlogits / N


def forward_backward(params: dict, X, y, alpha: float, gamma: float, masks=None, keep_scale: float = 1.0):
    """Focal loss of the network on ``(X, y)`` and gradients of all parameters.

    ``masks`` is an optional pair of boolean keep-masks for the two hidden
    layers; kept activations are multiplied by ``keep_scale``.
    """
    X = np.asarray(X, dtype=params["W1"].dtype)
    a1 = X @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    if masks is not None:
        d1 = masks[0] * keep_scale
        h1 = h1 * d1
    a2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(a2, 0.0)
    if masks is not None:
        d2 = masks[1] * keep_scale
        h2 = h2 * d2
    z = h2 @ params["W3"] + params["b3"]
    p = softmax(z)
    loss, dz = focal_loss(p, y, alpha, gamma)

    g = {"W3": h2.T @ dz, "b3": dz.sum(axis=0)}
    dh2 = dz @ params["W3"].T
    if masks is not None:
        dh2 = dh2 * d2
    da2 = dh2 * (a2 > 0)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(axis=0)
    dh1 = da2 @ params["W2"].T
    if masks is not None:
        dh1 = dh1 * d1
    da1 = dh1 * (a1 > 0)
    g["W1"] = X.T @ da1
    g["b1"] = da1.sum(axis=0)
    return loss, g


# -- inference --------------------------------------------------------------


def _f32(model: Classifier):
    return {k: v.astype(np.float32) for k, v in model.params.items()}


def predict_deterministic(model: Classifier, features) -> np.ndarray:
    """Class probabilities with dropout disabled, shape ``(C + 1, N)``."""
    return _forward(model, features, rngs=None)[0]


def _softmax_cols(z: np.ndarray) -> np.ndarray:
    # z is (K, n), classes along rows
    z -= np.maximum.reduce(z, axis=0)
    np.exp(z, out=z)
    z /= np.add.reduce(z, axis=0)
    return z


def _forward(model: Classifier, features, rngs) -> np.ndarray:
    """Probabilities ``(P, C + 1, N)`` for ``P = len(rngs)`` dropout passes.

    With ``rngs=None`` a single deterministic pass is returned.  The first
    hidden layer is shared by all passes; masks are drawn chunk by chunk
    from each pass's own generator.
    """
    X = np.asarray(features, dtype=np.float32)
    F = model.params["W1"].shape[0]
    if X.ndim != 2 or X.shape[1] != F:
        raise ValueError(f"features must be (N, {F})")
    p = _f32(model)
    K = p["W3"].shape[1]
    stochastic = rngs is not None
    if stochastic:
        s = np.float32(model.keep_scale)
        W2, W3 = p["W2"] * s, p["W3"] * s
        thr = model.keep_threshold
    else:
        W2, W3 = p["W2"], p["W3"]
        rngs = [None]
    W3t = np.ascontiguousarray(W3.T)
    b3 = p["b3"][:, None]
    out = np.empty((len(rngs), K, X.shape[0]), dtype=np.float32)
    for lo in range(0, X.shape[0], _CHUNK):
        h1 = X[lo : lo + _CHUNK] @ p["W1"]
        h1 += p["b1"]
        np.maximum(h1, 0, out=h1)
        for t, rng in enumerate(rngs):
            h = h1 * dropout_masks(rng, h1.shape, thr) if stochastic else h1
            h = h @ W2
            h += p["b2"]
            np.maximum(h, 0, out=h)
            if stochastic:
                h *= dropout_masks(rng, h.shape, thr)
            z = W3t @ h.T
            z += b3
            out[t, :, lo : lo + _CHUNK] = _softmax_cols(z)
    return out


@dataclass
class PredictiveSamples:
    probs: np.ndarray  # (T, C + 1, N)

    @property
    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0, dtype=np.float64)

    @property
    def n_passes(self) -> int:
        return self.probs.shape[0]


def predict_mc(model: Classifier, features, T: int, seed) -> PredictiveSamples:
    """``T`` stochastic forward passes with dropout active.

    Pass ``t`` draws its masks from its own substream of ``seed`` so the
    passes are independent of evaluation order.  ``seed`` is an int or a
    :class:`numpy.random.SeedSequence`.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    rngs = [
        np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (t,)))
        for t in range(T)
    ]
    return PredictiveSamples(_forward(model, features, rngs))


def predict_labels(model: Classifier, features) -> np.ndarray:
    return np.argmax(predict_deterministic(model, features), axis=0).astype(np.uint8)


# -- training ---------------------------------------------------------------


def validation_dice(model: Classifier, val: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean foreground Dice averaged over ``(features, labels)`` volumes."""
    scores = []
    for feats, labels in val:
        pred = predict_labels(model, feats).reshape(labels.shape)
        scores.append(metrics.mean_dice(pred, labels, model.n_classes))
    return float(np.mean(scores))


def train(
    X,
    y,
    config: TrainConfig,
    n_classes: int,
    validation: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    seed=None,
) -> Classifier:
    """Train a fresh classifier on labeled pixels ``(X, y)``.

    AdamW with decoupled weight decay on mini-batches drawn uniformly over
    the pixels; dropout active.  Every ``eval_every`` steps the model is
    scored on ``validation`` and the best-scoring parameters are returned
    (earliest wins ties).  Without validation data the final parameters
    are returned.  ``seed`` (int or SeedSequence) overrides ``config.seed``.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise TrainingError("training pool is empty")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    if seed is None:
        seed = config.seed
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))

    def stream(name):
        return np.random.default_rng(
            np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (name,))
        )

    init_rng, batch_rng, drop_rng = stream(0), stream(1), stream(2)
    init = init_params(X.shape[1], config.hidden, n_classes, init_rng)
    # one flat float32 buffer; per-layer arrays are views into it
    flat = np.concatenate([init[k].ravel() for k in PARAM_NAMES]).astype(np.float32)
    params, grad_views, offset = {}, {}, 0
    grad_flat = np.empty_like(flat)
    for k in PARAM_NAMES:
        n = init[k].size
        params[k] = flat[offset : offset + n].reshape(init[k].shape)
        grad_views[k] = grad_flat[offset : offset + n].reshape(init[k].shape)
        offset += n
    model = Classifier(params, n_classes=n_classes, dropout=config.dropout)
    thr, scale = model.keep_threshold, np.float32(model.keep_scale)

    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    decay = np.float32(1 - config.lr * config.weight_decay)
    best_score, best_flat = -np.inf, None
    B, H = config.batch_size, config.hidden
    for step in range(1, config.steps + 1):
        idx = batch_rng.integers(0, X.shape[0], size=B)
        masks = (dropout_masks(drop_rng, (B, H), thr), dropout_masks(drop_rng, (B, H), thr))
        loss, grads = forward_backward(params, X[idx], y[idx], config.alpha, config.gamma, masks, scale)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        for k in PARAM_NAMES:
            grad_views[k][...] = grads[k]
        m *= b1
        m += (1 - b1) * grad_flat
        v *= b2
        v += (1 - b2) * grad_flat * grad_flat
        step_size = config.lr / (1 - b1**step)
        denom = np.sqrt(v / (1 - b2**step))
        denom += eps
        flat *= decay
        flat -= np.float32(step_size) * m / denom
        if validation and (step % config.eval_every == 0 or step == config.steps):
            score = validation_dice(model, validation)
            model.history.append((step, score))
            if score > best_score:
                best_score, best_flat = score, flat.copy()
    final = best_flat if best_flat is not None else flat
    out, offset = {}, 0
    for k in PARAM_NAMES:
        n = init[k].size
        out[k] = final[offset : offset + n].reshape(init[k].shape).astype(np.float64)
        offset += n
    model.params = out
    return model
