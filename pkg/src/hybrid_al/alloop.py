"""Active-learning experiment loop: train, score, select, acquire, evaluate.

Randomness comes from named substreams of one master seed (see
:mod:`hybrid_al.seeding`):

* ``("data",)``               pool split
* ``("model", i)``            init / batch order / training dropout of the
                              model trained after ``i`` acquisitions
* ``("dropout", i, vol_id)``  MC-dropout passes scoring ``vol_id`` with
                              model ``i``
* ``("rand-strategy", i)``    random selection at iteration ``i``

All strategies of one ``(config, seed)`` pair therefore share model
randomness, and a model depends only on the iteration index and the
*set* of training units.  :class:`RunCache` exploits this to reuse models
and uncertainty scores across strategies without changing any result.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import metrics
from .data import (
    VOLUME_WISE,
    SLICE_WISE,
    PhantomConfig,
    PoolState,
    SampleKey,
    Volume,
    generate_phantom,
    key_order,
    load_dataset,
    move_to_training,
    split_pools,
)
from .model import Classifier, TrainConfig, extract_features, predict_labels, predict_mc, train
from .represent import DENSITY, DIVERSITY, HYBRID, HybridConfig, descriptor, greedy_hybrid_select, pairwise_matrices
from .seeding import generator, substream
from .uncertainty import UncertaintyScore, scalar_score, select_candidates, slice_class_uncertainty

log = logging.getLogger(__name__)

STRATEGIES = ("rand", "unc", "unc+sim", "unc+mi", "unc+hres")
UPPER_BOUND = "upper_bound"
DEFAULT_LAMBDA = {VOLUME_WISE: 0.5, SLICE_WISE: 0.25}


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Strategy:
    name: str
    lam: float | None = None  # None: rule default
    candidate_factor: float = 2.0
    bins: int = 32

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if self.candidate_factor < 1:
            raise ValueError("candidate_factor must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")

    def lam_for(self, rule: str) -> float:
        return DEFAULT_LAMBDA[rule] if self.lam is None else self.lam


@dataclass(frozen=True)
class DataSpec:
    """Where the volumes come from: a manifest, or a phantom seed + config."""

    manifest: str | None = None
    seed: int = 7
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def key(self):
        return (self.manifest, self.seed, repr(self.phantom))


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    splits: tuple[int, int, int, int] = (1, 24, 1, 4)
    rule: str = VOLUME_WISE
    budget: int = 1
    iterations: int = 6
    strategy: Strategy = field(default_factory=lambda: Strategy("unc+hres"))
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.rule not in (VOLUME_WISE, SLICE_WISE):
            raise ValueError(f"unknown acquisition rule {self.rule!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    def group_key(self):
        """Everything except strategy and seed; runs sharing it share a dataset."""
        return (self.data.key(), self.splits, self.rule, self.budget, self.iterations, repr(self.train))


@dataclass
class IterationRecord:
    strategy: str
    seed: int
    rule: str
    iteration: int
    n_train_units: int
    selected: list[SampleKey]
    dsc_class: list[float]
    dsc_mean: float
    rac_mean: float
    wall_ms: float | None = None


@dataclass
class ExperimentRecord:
    run_id: str
    config: ExperimentConfig
    rows: list[IterationRecord] = field(default_factory=list)
    error: str | None = None
    stopped_early: bool = False


# -- dataset context ---------------------------------------------------------


class DatasetContext:
    """Volumes plus per-volume features and descriptors, computed lazily once."""

    def __init__(self, volumes: Sequence[Volume], n_classes: int | None = None):
        self.volumes = {v.id: v for v in volumes}
        self.order = [v.id for v in volumes]
        self.n_classes = n_classes or int(max(int(v.labels.max()) for v in volumes))
        self._features: dict[str, np.ndarray] = {}
        self._descriptors: dict[SampleKey, object] = {}

    @classmethod
    def from_spec(cls, spec: DataSpec) -> "DatasetContext":
        if spec.manifest:
            from .data import DatasetManifest

            vols = load_dataset(spec.manifest)
            return cls(vols, DatasetManifest.read(spec.manifest).n_classes)
        return cls(generate_phantom(spec.seed, spec.phantom), spec.phantom.n_classes)

    def features(self, vid: str) -> np.ndarray:
        if vid not in self._features:
            self._features[vid] = extract_features(self.volumes[vid].image)
        return self._features[vid]

    def unit_pixels(self, key: SampleKey):
        vol = self.volumes[key.volume_id]
        f = self.features(key.volume_id)
        if key.slice_index is None:
            return f, vol.labels.ravel()
        n = vol.height * vol.width
        z = key.slice_index
        return f[z * n : (z + 1) * n], vol.labels[z].ravel()

    def descriptor(self, key: SampleKey):
        if key not in self._descriptors:
            vol = self.volumes[key.volume_id]
            unit = vol.image if key.slice_index is None else vol.image[key.slice_index]
            self._descriptors[key] = descriptor(unit, key)
        return self._descriptors[key]


class RunCache:
    """Memo of models and uncertainty scores for one ``(config group, seed)``."""

    def __init__(self):
        self.models: dict = {}
        self.scores: dict = {}
        self.hits = 0


# -- core steps --------------------------------------------------------------


def _training_arrays(ctx: DatasetContext, keys: Iterable[SampleKey]):
    keys = sorted(keys, key=key_order)
    parts = [ctx.unit_pixels(k) for k in keys]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def fit_model(ctx, pools: PoolState, cfg: ExperimentConfig, tag, cache: RunCache | None = None) -> Classifier:
    train_keys = tuple(sorted(pools.training, key=key_order))
    memo_key = (tag, train_keys)
    if cache is not None and memo_key in cache.models:
        cache.hits += 1
        return cache.models[memo_key]
    X, y = _training_arrays(ctx, train_keys)
    validation = [(ctx.features(v), ctx.volumes[v].labels) for v in pools.validation]
    model = train(X, y, cfg.train, ctx.n_classes, validation, seed=substream(cfg.seed, "model", tag))
    if cache is not None:
        cache.models[memo_key] = model
    return model


def score_units(
    ctx, model: Classifier, pools: PoolState, cfg: ExperimentConfig, model_iter: int, cache: RunCache | None = None
) -> dict[SampleKey, UncertaintyScore]:
    """Uncertainty of every unlabeled unit; volumes score as the mean of their slices."""
    train_keys = tuple(sorted(pools.training, key=key_order))
    by_volume: dict[str, list[SampleKey]] = {}
    for key in pools.unlabeled:
        by_volume.setdefault(key.volume_id, []).append(key)
    out = {}
    for vid, keys in by_volume.items():
        memo_key = (model_iter, train_keys, vid)
        if cache is not None and memo_key in cache.scores:
            per_slice = cache.scores[memo_key]
        else:
            vol = ctx.volumes[vid]
            samples = predict_mc(
                model, ctx.features(vid), cfg.train.mc_passes, substream(cfg.seed, "dropout", model_iter, vid)
            )
            per_slice = slice_class_uncertainty(samples, vol.depth)
            if cache is not None:
                cache.scores[memo_key] = per_slice
        for key in keys:
            if key.slice_index is None:
                scalars = [scalar_score(pc) for pc in per_slice]
                out[key] = UncertaintyScore(key, per_slice.mean(axis=0), float(np.mean(scalars)))
            else:
                pc = per_slice[key.slice_index]
                out[key] = UncertaintyScore(key, pc, scalar_score(pc))
    return out


def select(
    ctx, pools: PoolState, strategy: Strategy, k: int, scores, seed: int, iteration: int, rule: str
) -> list[SampleKey]:
    if strategy.name == "rand":
        rng = generator(seed, "rand-strategy", iteration)
        idx = rng.choice(len(pools.unlabeled), size=k, replace=False)
        return [pools.unlabeled[i] for i in idx]
    unit_scores = {key: s.scalar for key, s in scores.items()}
    if strategy.name == "unc":
        return select_candidates(pools.unlabeled, unit_scores, 1.0, k)
    cands = select_candidates(pools.unlabeled, unit_scores, strategy.candidate_factor, k)
    if strategy.name == "unc+sim":
        mode, lam = DENSITY, 0.0
    elif strategy.name == "unc+mi":
        mode, lam = DIVERSITY, 0.0
    else:
        mode, lam = HYBRID, strategy.lam_for(rule)
    sim, mi = pairwise_matrices(
        [ctx.descriptor(c) for c in cands],
        [ctx.descriptor(u) for u in pools.unlabeled],
        [ctx.descriptor(t) for t in pools.training],
        strategy.bins,
    )
    picked = greedy_hybrid_select(sim, mi, HybridConfig(lam=lam, k=k, mode=mode))
    return [cands[i] for i in picked]


def evaluate(ctx, model: Classifier, volume_ids: Sequence[str]):
    """Test-set class Dice, mean Dice and RAC, each averaged over volumes."""
    class_d, rac = [], []
    for vid in volume_ids:
        vol = ctx.volumes[vid]
        pred = predict_labels(model, ctx.features(vid)).reshape(vol.labels.shape)
        class_d.append(metrics.class_dices(pred, vol.labels, ctx.n_classes))
        rac.append(metrics.rac(pred, vol.labels))
    class_d = np.mean(class_d, axis=0)
    return [float(x) for x in class_d], float(np.mean(class_d)), float(np.mean(rac))


def _assert_no_leakage(pools: PoolState, extra: Iterable[SampleKey] = ()):
    held = set(pools.validation) | set(pools.test)
    for key in list(pools.training) + list(extra):
        if key.volume_id in held:
            raise AssertionError(f"held-out volume {key.volume_id} leaked into the acquisition loop")


@dataclass
class RunState:
    pools: PoolState
    iteration: int  # acquisitions performed so far
    model: Classifier


def initial_state(ctx, cfg: ExperimentConfig, cache: RunCache | None = None) -> RunState:
    ordered = [ctx.volumes[v] for v in ctx.order]
    pools = split_pools(ordered, cfg.splits, substream(cfg.seed, "data"), cfg.rule)
    return RunState(pools, 0, fit_model(ctx, pools, cfg, 0, cache))


def run_iteration(ctx, state: RunState, cfg: ExperimentConfig, cache: RunCache | None = None):
    """One acquisition round; returns ``(new_state, IterationRecord)``."""
    t0 = time.perf_counter()
    k = cfg.budget
    pools = state.pools
    if k > len(pools.unlabeled):
        raise BudgetExhausted(f"budget {k} exceeds {len(pools.unlabeled)} unlabeled units")
    it = state.iteration + 1
    scores = {}
    if cfg.strategy.name != "rand":
        scores = score_units(ctx, state.model, pools, cfg, state.iteration, cache)
    chosen = select(ctx, pools, cfg.strategy, k, scores, cfg.seed, it, cfg.rule)
    _assert_no_leakage(pools, chosen)
    new_pools = move_to_training(pools, chosen)
    new_pools.check(ctx.volumes)
    model = fit_model(ctx, new_pools, cfg, it, cache)
    dsc_class, dsc_mean, rac_mean = evaluate(ctx, model, new_pools.test)
    wall = (time.perf_counter() - t0) * 1e3
    record = IterationRecord(
        strategy=cfg.strategy.name,
        seed=cfg.seed,
        rule=cfg.rule,
        iteration=it,
        n_train_units=len(new_pools.training),
        selected=list(chosen),
        dsc_class=dsc_class,
        dsc_mean=dsc_mean,
        rac_mean=rac_mean,
        wall_ms=wall if cfg.record_wall_time else None,
    )
    log.info("%s seed=%d it=%d dsc=%.4f rac=%.4f (%.0f ms)", cfg.strategy.name, cfg.seed, it, dsc_mean, rac_mean, wall)
    return RunState(new_pools, it, model), record


# -- results CSV -------------------------------------------------------------


def csv_header(n_classes: int) -> list[str]:
    return (
        ["run_id", "strategy", "seed", "rule", "iteration", "n_train_units", "dsc_mean"]
        + [f"dsc_class_{c}" for c in range(1, n_classes + 1)]
        + ["rac_mean", "selected_keys", "wall_ms"]
    )


def csv_row(run_id: str, r: IterationRecord) -> list[str]:
    return (
        [run_id, r.strategy, str(r.seed), r.rule, str(r.iteration), str(r.n_train_units), repr(r.dsc_mean)]
        + [repr(x) for x in r.dsc_class]
        + [repr(r.rac_mean), ";".join(map(str, r.selected)), "" if r.wall_ms is None else f"{r.wall_ms:.0f}"]
    )


class _CsvSink:
    def __init__(self, path: Path | None, n_classes: int):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(csv_header(n_classes))

    def write(self, run_id: str, r: IterationRecord):
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(csv_row(run_id, r))


def run_id_for(cfg: ExperimentConfig, strategy: str | None = None) -> str:
    return f"{strategy or cfg.strategy.name}_{cfg.rule}_seed{cfg.seed}"


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    ctx: DatasetContext | None = None,
    cache: RunCache | None = None,
) -> ExperimentRecord:
    """Run ``cfg.iterations`` acquisition rounds, appending CSV rows as they finish."""
    ctx = ctx or DatasetContext.from_spec(cfg.data)
    cache = cache if cache is not None else RunCache()
    rid = run_id_for(cfg)
    sink = _CsvSink(Path(out_dir) / f"{rid}.csv" if out_dir else None, ctx.n_classes)
    rec = ExperimentRecord(rid, cfg)
    state = initial_state(ctx, cfg, cache)
    for _ in range(cfg.iterations):
        try:
            state, row = run_iteration(ctx, state, cfg, cache)
        except BudgetExhausted as exc:
            log.warning("%s: stopping early: %s", rid, exc)
            rec.stopped_early = True
            break
        rec.rows.append(row)
        sink.write(rid, row)
    return rec


def run_upper_bound(cfg: ExperimentConfig, out_dir=None, ctx=None) -> ExperimentRecord:
    """Train once on every acquisition unit (initial training plus unlabeled)."""
    ctx = ctx or DatasetContext.from_spec(cfg.data)
    t0 = time.perf_counter()
    ordered = [ctx.volumes[v] for v in ctx.order]
    pools = split_pools(ordered, cfg.splits, substream(cfg.seed, "data"), cfg.rule)
    full = dataclasses.replace(pools, training=pools.training + pools.unlabeled, unlabeled=[])
    model = fit_model(ctx, full, cfg, "upper")
    dsc_class, dsc_mean, rac_mean = evaluate(ctx, model, full.test)
    rid = run_id_for(cfg, UPPER_BOUND)
    row = IterationRecord(
        UPPER_BOUND, cfg.seed, cfg.rule, 0, len(full.training), [], dsc_class, dsc_mean, rac_mean,
        (time.perf_counter() - t0) * 1e3 if cfg.record_wall_time else None,
    )
    rec = ExperimentRecord(rid, cfg, [row])
    sink = _CsvSink(Path(out_dir) / f"{rid}.csv" if out_dir else None, ctx.n_classes)
    sink.write(rid, row)
    return rec


def _run_group(cfgs: list[ExperimentConfig], out_dir, upper_bound: bool) -> list[ExperimentRecord]:
    """Runs sharing dataset, split and seed; executed in one process with one cache."""
    ctx = DatasetContext.from_spec(cfgs[0].data)
    cache = RunCache()
    records = []
    for cfg in cfgs:
        try:
            records.append(run_experiment(cfg, out_dir, ctx, cache))
        except Exception as exc:  # recorded, suite continues
            log.exception("run %s failed", run_id_for(cfg))
            records.append(ExperimentRecord(run_id_for(cfg), cfg, error=f"{type(exc).__name__}: {exc}"))
    if upper_bound:
        try:
            records.append(run_upper_bound(cfgs[0], out_dir, ctx))
        except Exception as exc:
            log.exception("upper bound failed")
            records.append(ExperimentRecord(run_id_for(cfgs[0], UPPER_BOUND), cfgs[0], error=str(exc)))
    return records


def run_suite(
    configs: Sequence[ExperimentConfig],
    seeds: Sequence[int],
    out_dir=None,
    jobs: int = 1,
    upper_bound: bool = False,
) -> list[ExperimentRecord]:
    """Every config under every seed; ``jobs > 1`` runs seed groups in parallel.

    ``seeds`` replace the configs' own seed.  Results do not depend on
    ``jobs``: each group derives all randomness from its own seed.
    """
    if not configs or not seeds:
        raise ValueError("run_suite needs at least one config and one seed")
    groups: dict = {}
    for seed in seeds:
        for cfg in configs:
            c = dataclasses.replace(cfg, seed=int(seed))
            groups.setdefault((c.group_key(), c.seed), []).append(c)
    work = list(groups.values())
    if jobs <= 1 or len(work) == 1:
        results = [_run_group(g, out_dir, upper_bound) for g in work]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_group, work, [out_dir] * len(work), [upper_bound] * len(work)))
    return [r for group in results for r in group]


def records_to_csv(records: Sequence[ExperimentRecord], n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(n_classes))
    for rec in records:
        for row in rec.rows:
            w.writerow(csv_row(rec.run_id, row))
    return buf.getvalue()
