"""Samples, pools and the synthetic phantom benchmark.

A :class:`Volume` is a stack of 2-D intensity slices with per-pixel class
labels (0 is background).  Acquisition units are addressed by
:class:`SampleKey`; a volume-wise key has ``slice_index=None``.

On-disk layout
--------------
Each volume is one ``.vol`` file made of two sections, intensities then
labels.  Every section starts with a 16-byte little-endian header
``(magic: 4 bytes, height: u32, width: u32, depth: u32)`` followed by the
row-major payload of shape ``(depth, height, width)``: ``<f4`` for
intensities (magic ``b"BALI"``) and ``u1`` for labels (magic ``b"BALL"``).

The manifest is a tab-separated text file with one record per volume::

    id  path  depth  cohort  sha256

preceded by a ``#classes<TAB>C`` line.  Paths are relative to the manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

IMG_MAGIC = b"BALI"
LBL_MAGIC = b"BALL"
HEADER = struct.Struct("<4sIII")

SLICE_WISE = "slice"
VOLUME_WISE = "volume"
RULES = (SLICE_WISE, VOLUME_WISE)


class DatasetError(ValueError):
    """Raised for malformed, inconsistent or corrupted dataset files."""


class PoolError(ValueError):
    """Raised when a pool operation would break the partition invariants."""


@dataclass(frozen=True, eq=False)
class Volume:
    id: str
    image: np.ndarray  # (depth, height, width) float32 in [0, 1]
    labels: np.ndarray  # (depth, height, width) uint8 in {0..C}
    cohort: str = ""

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DatasetError(f"{self.id}: image must be 3-D, got {self.image.shape}")
        if self.image.shape != self.labels.shape:
            raise DatasetError(
                f"{self.id}: image {self.image.shape} and labels {self.labels.shape} differ"
            )
        if self.image.size and not (self.image.min() >= 0 and self.image.max() <= 1):
            raise DatasetError(f"{self.id}: intensities outside [0, 1]")
        self.image.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def depth(self) -> int:
        return self.image.shape[0]

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def slices(self) -> list[np.ndarray]:
        return list(self.image)

    def same_as(self, other: "Volume") -> bool:
        return (
            self.id == other.id
            and self.cohort == other.cohort
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
        )


class SampleKey(NamedTuple):
    volume_id: str
    slice_index: int | None = None

    def __str__(self) -> str:
        if self.slice_index is None:
            return self.volume_id
        return f"{self.volume_id}:{self.slice_index}"

    @classmethod
    def parse(cls, text: str) -> "SampleKey":
        vid, sep, idx = text.partition(":")
        return cls(vid, int(idx) if sep else None)


def key_order(key: SampleKey) -> tuple[str, int]:
    """Total order on keys used for every tie-break."""
    return (key.volume_id, -1 if key.slice_index is None else key.slice_index)


def unit_keys(volume: Volume, rule: str) -> list[SampleKey]:
    if rule == VOLUME_WISE:
        return [SampleKey(volume.id)]
    if rule == SLICE_WISE:
        return [SampleKey(volume.id, z) for z in range(volume.depth)]
    raise ValueError(f"unknown acquisition rule {rule!r}")


@dataclass
class PoolState:
    """Partition of the dataset into training, unlabeled, validation and test.

    ``training`` and ``unlabeled`` hold acquisition units; ``validation``
    and ``test`` hold whole volume ids regardless of the rule.
    """

    training: list[SampleKey]
    unlabeled: list[SampleKey]
    validation: list[str]
    test: list[str]
    acquisition_rule: str

    def check(self, volumes: dict[str, Volume] | None = None) -> None:
        tr, un = set(self.training), set(self.unlabeled)
        if len(tr) != len(self.training) or len(un) != len(self.unlabeled):
            raise PoolError("duplicate keys in a pool")
        if tr & un:
            raise PoolError("training and unlabeled pools overlap")
        held_out = set(self.validation) | set(self.test)
        if set(self.validation) & set(self.test):
            raise PoolError("validation and test overlap")
        for key in tr | un:
            if key.volume_id in held_out:
                raise PoolError(f"{key} belongs to a held-out volume")
            if (key.slice_index is None) != (self.acquisition_rule == VOLUME_WISE):
                raise PoolError(f"{key} does not match rule {self.acquisition_rule}")
            if volumes is not None:
                vol = volumes.get(key.volume_id)
                if vol is None:
                    raise PoolError(f"{key} references an unknown volume")
                if key.slice_index is not None and not 0 <= key.slice_index < vol.depth:
                    raise PoolError(f"{key} is out of range")

    def training_volume_ids(self) -> list[str]:
        return list(dict.fromkeys(k.volume_id for k in self.training))


@dataclass
class PhantomConfig:
    n_volumes: int = 30
    height: int = 64
    width: int = 64
    depth: int = 16
    n_classes: int = 4
    noise: float = 0.06
    # fraction of volumes drawn from the minority cohort
    minority_fraction: float = 0.3
    # structure size multiplier per cohort (majority, minority)
    cohort_scale: tuple[float, float] = (1.0, 1.3)
    # intensity shift of every structure in the minority cohort
    minority_shift: float = -0.08
    # half-width of the per-volume multiplicative intensity gain
    gain_jitter: float = 0.04
    # amplitude, in units of ``noise``, of smooth texture inside minority structures
    minority_texture: float = 3.0
    cohort_names: tuple[str, str] = ("old", "young")


# nominal structure layout in relative coordinates: (row, col, radius_r, radius_c)
_LAYOUT = np.array(
    [
        [0.33, 0.33, 0.15, 0.11],
        [0.33, 0.67, 0.11, 0.15],
        [0.67, 0.33, 0.12, 0.12],
        [0.67, 0.67, 0.14, 0.10],
        [0.50, 0.50, 0.08, 0.08],
        [0.18, 0.50, 0.07, 0.12],
        [0.82, 0.50, 0.07, 0.12],
        [0.50, 0.18, 0.12, 0.07],
    ]
)


def _structure_params(c: int, rng: np.random.Generator) -> np.ndarray:
    base = _LAYOUT[c % len(_LAYOUT)]
    if c >= len(_LAYOUT):
        base = base + rng.uniform(-0.1, 0.1, size=4) * [1, 1, 0.2, 0.2]
    return base


def generate_phantom(seed: int, config: PhantomConfig | None = None) -> list[Volume]:
    """Generate a deterministic multi-structure segmentation dataset.

    Each volume holds ``n_classes`` elliptical structures whose centres,
    radii and orientation drift smoothly along depth.  Structure
    intensities are distinct per class.  The minority cohort has larger
    structures, intensities shifted by half a level, and a smooth interior
    texture whose amplitude scales with ``noise``, so models trained on one
    cohort transfer poorly to the other.  Gaussian noise with standard
    deviation ``noise`` is added and the result clipped to [0, 1].
    """
    cfg = config or PhantomConfig()
    if cfg.height < 16 or cfg.width < 16:
        raise ValueError("phantom grid must be at least 16x16")
    if cfg.n_classes < 1:
        raise ValueError("need at least one foreground class")
    if cfg.n_classes > 254:
        raise ValueError("labels are stored as uint8")
    if cfg.depth < 1 or cfg.n_volumes < 1:
        raise ValueError("depth and n_volumes must be positive")
    if cfg.noise < 0:
        raise ValueError("noise must be non-negative")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    C, D, H, W = cfg.n_classes, cfg.depth, cfg.height, cfg.width
    base_levels = np.linspace(0.42, 0.9, C) if C > 1 else np.array([0.7])
    rows = (np.arange(H) / (H - 1))[:, None]
    cols = (np.arange(W) / (W - 1))[None, :]
    zs = np.linspace(0.0, 1.0, D) if D > 1 else np.zeros(1)

    n_minor = int(round(cfg.minority_fraction * cfg.n_volumes))
    cohorts = np.array([1] * n_minor + [0] * (cfg.n_volumes - n_minor))
    rng.shuffle(cohorts)

    volumes = []
    for v in range(cfg.n_volumes):
        cohort = int(cohorts[v])
        scale = cfg.cohort_scale[cohort] * rng.uniform(0.88, 1.12)
        background = rng.uniform(0.08, 0.2)
        gain = rng.uniform(1 - cfg.gain_jitter, 1 + cfg.gain_jitter)
        shift = cfg.minority_shift if cohort == 1 else 0.0
        levels = np.clip(base_levels * gain + shift + rng.normal(0, 0.02, C), 0.0, 1.0)

        image = np.empty((D, H, W), dtype=np.float64)
        labels = np.zeros((D, H, W), dtype=np.uint8)
        params = []
        for c in range(C):
            r0, c0, ar, ac = _structure_params(c, rng)
            params.append(
                dict(
                    r0=r0 + rng.uniform(-0.04, 0.04),
                    c0=c0 + rng.uniform(-0.04, 0.04),
                    ar=ar * scale,
                    ac=ac * scale,
                    drift=rng.uniform(-0.06, 0.06, size=2),
                    theta=rng.uniform(-0.5, 0.5),
                    spin=rng.uniform(-0.4, 0.4),
                    phase=rng.uniform(0, np.pi),
                    freq=rng.uniform(0.5, 1.2),
                )
            )
        for z in range(D):
            sl = np.full((H, W), background)
            lab = np.zeros((H, W), dtype=np.uint8)
            for c, p in enumerate(params):
                t = zs[z]
                profile = 0.7 + 0.3 * np.sin(np.pi * p["freq"] * t + p["phase"])
                rc = p["r0"] + p["drift"][0] * (t - 0.5)
                cc = p["c0"] + p["drift"][1] * (t - 0.5)
                th = p["theta"] + p["spin"] * t
                dr, dc = rows - rc, cols - cc
                u = dr * np.cos(th) + dc * np.sin(th)
                w = -dr * np.sin(th) + dc * np.cos(th)
                inside = (u / (p["ar"] * profile)) ** 2 + (w / (p["ac"] * profile)) ** 2 <= 1.0
                lab[inside] = c + 1
            for c in range(C):
                sl[lab == c + 1] = levels[c]
            image[z] = sl
            labels[z] = lab
        if cfg.noise > 0:
            if cohort == 1 and cfg.minority_texture > 0:
                field_ = ndimage.gaussian_filter(rng.normal(size=image.shape), sigma=(0.5, 1.5, 1.5))
                field_ *= cfg.minority_texture * cfg.noise / field_.std()
                image = image + np.where(labels > 0, field_, 0.0)
            image = image + rng.normal(0.0, cfg.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        volumes.append(
            Volume(id=f"vol{v:03d}", image=image, labels=labels, cohort=cfg.cohort_names[cohort])
        )
    return volumes


def split_pools(
    volumes: Sequence[Volume],
    counts: tuple[int, int, int, int],
    seed: int | np.random.SeedSequence,
    rule: str = VOLUME_WISE,
) -> PoolState:
    """Randomly partition volumes into training/unlabeled/validation/test."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 4 or any(c < 0 for c in counts):
        raise ValueError("counts must be four non-negative integers")
    if sum(counts) != len(volumes):
        raise ValueError(f"split counts {counts} sum to {sum(counts)}, expected {len(volumes)}")
    if counts[0] < 1:
        raise ValueError("training pool needs at least one volume")
    if rule not in RULES:
        raise ValueError(f"unknown acquisition rule {rule!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(volumes))
    chunks, start = [], 0
    for c in counts:
        chunks.append(sorted((volumes[i] for i in order[start : start + c]), key=lambda v: v.id))
        start += c
    train, unl, val, test = chunks
    pools = PoolState(
        training=[k for v in train for k in unit_keys(v, rule)],
        unlabeled=[k for v in unl for k in unit_keys(v, rule)],
        validation=[v.id for v in val],
        test=[v.id for v in test],
        acquisition_rule=rule,
    )
    pools.check()
    return pools


def move_to_training(pools: PoolState, selected: Iterable[SampleKey]) -> PoolState:
    """Return new pools with ``selected`` moved from unlabeled to training."""
    selected = list(selected)
    unl = set(pools.unlabeled)
    if len(set(selected)) != len(selected):
        raise PoolError("selection contains duplicates")
    for key in selected:
        if key not in unl:
            raise PoolError(f"{key} is not in the unlabeled pool")
    chosen = set(selected)
    return dataclasses.replace(
        pools,
        training=pools.training + selected,
        unlabeled=[k for k in pools.unlabeled if k not in chosen],
    )


# -- serialization ----------------------------------------------------------


def _encode_volume(vol: Volume) -> bytes:
    D, H, W = vol.image.shape
    img = np.ascontiguousarray(vol.image, dtype="<f4").tobytes()
    lbl = np.ascontiguousarray(vol.labels, dtype="u1").tobytes()
    return HEADER.pack(IMG_MAGIC, H, W, D) + img + HEADER.pack(LBL_MAGIC, H, W, D) + lbl


def _decode_volume(raw: bytes, vid: str, cohort: str) -> Volume:
    def section(offset: int, magic: bytes, dtype: str, itemsize: int):
        if len(raw) < offset + HEADER.size:
            raise DatasetError(f"{vid}: truncated file")
        got, H, W, D = HEADER.unpack_from(raw, offset)
        if got != magic:
            raise DatasetError(f"{vid}: bad magic {got!r}")
        n = H * W * D * itemsize
        start = offset + HEADER.size
        if len(raw) < start + n:
            raise DatasetError(f"{vid}: truncated payload")
        arr = np.frombuffer(raw, dtype=dtype, count=H * W * D, offset=start).reshape(D, H, W)
        return arr, start + n

    img, off = section(0, IMG_MAGIC, "<f4", 4)
    lbl, off = section(off, LBL_MAGIC, "u1", 1)
    if off != len(raw):
        raise DatasetError(f"{vid}: trailing bytes")
    if img.shape != lbl.shape:
        raise DatasetError(f"{vid}: section dimensions differ")
    return Volume(vid, img.astype(np.float32), lbl.astype(np.uint8), cohort)


@dataclass
class DatasetManifest:
    n_classes: int
    records: list[tuple[str, str, int, str, str]] = field(default_factory=list)

    def write(self, path: Path) -> None:
        lines = [f"#classes\t{self.n_classes}"]
        lines += ["\t".join([vid, p, str(d), coh, cs]) for vid, p, d, coh, cs in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"manifest not found: {path}")
        n_classes = None
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if parts[0] == "#classes":
                n_classes = int(parts[1])
                continue
            if len(parts) != 5:
                raise DatasetError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            vid, p, d, coh, cs = parts
            records.append((vid, p, int(d), coh, cs))
        if n_classes is None:
            raise DatasetError(f"{path}: missing #classes header")
        ids = [r[0] for r in records]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"{path}: duplicate volume ids")
        return cls(n_classes, records)


def save_dataset(volumes: Sequence[Volume], directory, n_classes: int | None = None) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if n_classes is None:
        n_classes = int(max(int(v.labels.max()) for v in volumes))
    manifest = DatasetManifest(n_classes)
    for vol in volumes:
        raw = _encode_volume(vol)
        name = f"{vol.id}.vol"
        (directory / name).write_bytes(raw)
        manifest.records.append((vol.id, name, vol.depth, vol.cohort, hashlib.sha256(raw).hexdigest()))
    manifest.write(directory / "manifest.tsv")
    return manifest


def load_dataset(manifest_path) -> list[Volume]:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.read(manifest_path)
    volumes = []
    for vid, p, depth, cohort, checksum in manifest.records:
        fpath = manifest_path.parent / p
        if not fpath.is_file():
            raise DatasetError(f"missing volume file {fpath}")
        raw = fpath.read_bytes()
        if hashlib.sha256(raw).hexdigest() != checksum:
            raise DatasetError(f"checksum mismatch for {fpath}")
        vol = _decode_volume(raw, vid, cohort)
        if vol.depth != depth:
            raise DatasetError(f"{vid}: manifest depth {depth} != file depth {vol.depth}")
        if int(vol.labels.max(initial=0)) > manifest.n_classes:
            raise DatasetError(f"{vid}: label exceeds declared class count")
        volumes.append(vol)
    return volumes
