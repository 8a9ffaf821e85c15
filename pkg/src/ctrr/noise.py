"""Synthetic blobs, label-noise injection, feature augmentation and label correction."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .io import atomic_write_bytes, atomic_write_text, fmt_float

# CIFAR-10 class indices
AIRPLANE, AUTOMOBILE, BIRD, CAT, DEER, DOG, FROG, HORSE, SHIP, TRUCK = range(10)
CIFAR10_ASYM_MAP = {TRUCK: AUTOMOBILE, BIRD: AIRPLANE, DEER: HORSE, CAT: DOG, DOG: CAT}


@dataclass
class Dataset:
    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    flipped_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        mask = self.noisy_labels != self.true_labels
        if self.flipped_mask is None:
            self.flipped_mask = mask
        self.flipped_mask = np.asarray(self.flipped_mask, dtype=bool)
        n = len(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be N x d")
        if len(self.true_labels) != n or len(self.noisy_labels) != n:
            raise ValueError("label arrays must have one entry per row")
        for name, y in (("true", self.true_labels), ("noisy", self.noisy_labels)):
            if n and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        if not np.array_equal(self.flipped_mask, mask):
            raise ValueError("flipped_mask must mark exactly the rows whose labels changed")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_noisy(self, noisy: np.ndarray, **meta) -> Dataset:
        return replace(self, noisy_labels=noisy, flipped_mask=None, meta={**self.meta, **meta})


# ---------------------------------------------------------------- generation


def _class_means(rng: np.random.Generator, K: int, dim: int, separation: float) -> np.ndarray:
    if K <= dim:
        frame, _ = np.linalg.qr(rng.standard_normal((dim, K)))
        return separation * frame.T
    dirs = rng.standard_normal((K, dim))
    return separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _draw_blobs(K, counts, dim, spread, seed, separation):
    if K < 2 or dim < 2 or not spread >= 0:
        raise ValueError("need K >= 2, dim >= 2 and spread >= 0")
    rng = np.random.default_rng(seed)
    means = _class_means(rng, K, dim, separation)
    total = sum(counts)
    labels = np.repeat(np.arange(K), total)
    noise = rng.standard_normal((K * total, dim))
    X = means[labels] + spread * noise
    return X, labels, total


def gen_blobs(K: int, per_class: int, dim: int, spread: float, seed: int,
              separation: float = 3.0) -> Dataset:
    """Isotropic Gaussian clusters around orthogonal means at distance ``separation`` from 0."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    X, y, _ = _draw_blobs(K, [per_class], dim, spread, seed, separation)
    return Dataset(X, y, y.copy(), K, meta={"generator": "blobs", "seed": seed})


def gen_blobs_split(K: int, per_class: int, test_per_class: int, dim: int, spread: float,
                    seed: int, separation: float = 3.0) -> tuple[Dataset, Dataset]:
    """Train and clean test sets drawn around the same class means."""
    X, y, total = _draw_blobs(K, [per_class, test_per_class], dim, spread, seed, separation)
    in_class = np.tile(np.arange(total), K)
    tr, te = in_class < per_class, in_class >= per_class
    meta = {"generator": "blobs", "seed": seed}
    return (Dataset(X[tr], y[tr], y[tr].copy(), K, meta=dict(meta)),
            Dataset(X[te], y[te], y[te].copy(), K, meta=dict(meta)))


# ---------------------------------------------------------------- noise injection


def flip_count(rate: float, n: int) -> int:
    """``round(rate * n)`` with halves rounded up."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    return int(np.floor(rate * n + 0.5 + 1e-9))


def _select(ds: Dataset, rate: float, seed: int) -> tuple[np.random.Generator, np.ndarray]:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(ds), size=flip_count(rate, len(ds)), replace=False))
    return rng, idx


def inject_symmetric(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Relabel exactly ``round(rate * N)`` rows uniformly to one of the other classes."""
    rng, idx = _select(ds, rate, seed)
    noisy = ds.true_labels.copy()
    noisy[idx] = (noisy[idx] + rng.integers(1, ds.num_classes, size=idx.size)) % ds.num_classes
    return ds.with_noisy(noisy, noise="symmetric", rate=rate, noise_seed=seed,
                         selected=int(idx.size), changed=int(idx.size))


def validate_class_map(class_map: Mapping[int, int], K: int) -> dict[int, int]:
    out = {int(k): int(v) for k, v in class_map.items()}
    for k, v in out.items():
        if k == v:
            raise ValueError(f"class map sends {k} to itself")
        if not (0 <= k < K and 0 <= v < K):
            raise ValueError(f"class map entry {k}->{v} outside [0, {K})")
    return out


def inject_asymmetric_pairs(ds: Dataset, rate: float, class_map: Mapping[int, int],
                            seed: int) -> Dataset:
    """Select ``round(rate * N)`` rows over the whole set; map those whose class is a key.

    Selected rows outside the map keep their label. ``meta`` records both counts.
    """
    cmap = validate_class_map(class_map, ds.num_classes)
    _, idx = _select(ds, rate, seed)
    noisy = ds.true_labels.copy()
    lut = np.arange(ds.num_classes)
    for k, v in cmap.items():
        lut[k] = v
    noisy[idx] = lut[noisy[idx]]
    changed = int((noisy != ds.true_labels).sum())
    return ds.with_noisy(noisy, noise="asymmetric_pairs", rate=rate, noise_seed=seed,
                         selected=int(idx.size), changed=changed,
                         class_map={str(k): v for k, v in sorted(cmap.items())})


def inject_next_class(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Selected labels ``y`` become ``(y + 1) mod K``."""
    _, idx = _select(ds, rate, seed)
    noisy = ds.true_labels.copy()
    noisy[idx] = (noisy[idx] + 1) % ds.num_classes
    return ds.with_noisy(noisy, noise="next_class", rate=rate, noise_seed=seed,
                         selected=int(idx.size), changed=int(idx.size))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0
    seed: int = 0
    class_map: dict | None = None

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric_pairs", "next_class"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must lie in [0, 1], got {self.rate}")

    def apply(self, ds: Dataset) -> Dataset:
        if self.kind == "symmetric":
            return inject_symmetric(ds, self.rate, self.seed)
        if self.kind == "next_class":
            return inject_next_class(ds, self.rate, self.seed)
        cmap = self.class_map if self.class_map is not None else CIFAR10_ASYM_MAP
        return inject_asymmetric_pairs(ds, self.rate, cmap, self.seed)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "weak"
    jitter_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    mask_fraction: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if lo > hi or self.jitter_sigma < 0:
            raise ValueError("need scale lo <= hi and jitter_sigma >= 0")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in [0, 1)")
        if self.kind == "weak" and self.mask_fraction != 0:
            raise ValueError("weak augmentation does not mask coordinates")


WEAK = AugmentSpec("weak", 0.05, (0.9, 1.1), 0.0)
STRONG = AugmentSpec("strong", 0.3, (0.7, 1.3), 0.25)


def augment_batch(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random per-row scale, Gaussian jitter and (strong only) zeroed coordinates."""
    n, d = X.shape
    lo, hi = spec.scale_range
    out = X * rng.uniform(lo, hi, size=(n, 1))
    if spec.jitter_sigma > 0:
        out = out + spec.jitter_sigma * rng.standard_normal((n, d))
    n_mask = int(round(spec.mask_fraction * d))
    if n_mask:
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :n_mask]
        np.put_along_axis(out, cols, 0.0, axis=1)
    return out


def augment(x, spec: AugmentSpec, seed: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return augment_batch(x.reshape(1, -1), spec, np.random.default_rng(seed)).reshape(x.shape)


# ---------------------------------------------------------------- label correction


def correct_labels(noisy_onehot, preds, per_sample_loss) -> np.ndarray:
    """Blend labels toward predictions with weight ``loss_i / max(loss)``."""
    Y = np.asarray(noisy_onehot, dtype=np.float64)
    P = np.asarray(preds, dtype=np.float64)
    loss = np.asarray(per_sample_loss, dtype=np.float64)
    for name, M in (("labels", Y), ("preds", P)):
        if np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"correct_labels: {name} rows must sum to 1")
    top = loss.max(initial=0.0)
    w = loss / top if top > 0 else np.zeros_like(loss)
    w = np.clip(w, 0.0, 1.0)[:, None]
    return (1.0 - w) * Y + w * P


# ---------------------------------------------------------------- files
#
# b"CTRR" | version u32 | N u64 | d u64 | K u32 | features f64[N*d] | true u32[N]
# | noisy u32[N] | flipped u8[N], all little-endian


MAGIC = b"CTRR"
VERSION = 1
_HEADER = struct.Struct("<4sIQQI")


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, d = ds.features.shape
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, n, d, ds.num_classes),
        np.ascontiguousarray(ds.features, dtype="<f8").tobytes(),
        ds.true_labels.astype("<u4").tobytes(),
        ds.noisy_labels.astype("<u4").tobytes(),
        ds.flipped_mask.astype("u1").tobytes(),
    ])


def dataset_from_bytes(blob: bytes) -> Dataset:
    magic, version, n, d, K = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError("not a CTRR dataset file")
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = _HEADER.size
    X = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    y = np.frombuffer(blob, "<u4", n, off).astype(np.int64)
    off += 4 * n
    yn = np.frombuffer(blob, "<u4", n, off).astype(np.int64)
    off += 4 * n
    mask = np.frombuffer(blob, "u1", n, off).astype(bool)
    return Dataset(X, y, yn, int(K), mask)


def save_dataset(path, ds: Dataset) -> None:
    atomic_write_bytes(Path(path), dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(ds.dim)] + ["true_label", "noisy_label"])
    for x, y, yn in zip(ds.features, ds.true_labels, ds.noisy_labels):
        w.writerow([fmt_float(v) for v in x] + [int(y), int(yn)])
    return buf.getvalue()


def dataset_from_csv(text: str, num_classes: int | None = None) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["true_label", "noisy_label"]:
        raise ValueError("CSV header must end with true_label,noisy_label")
    arr = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    y = arr[:, -2].astype(np.int64)
    yn = arr[:, -1].astype(np.int64)
    K = num_classes if num_classes is not None else int(max(y.max(), yn.max())) + 1
    return Dataset(arr[:, :-2], y, yn, K)


def save_dataset_csv(path, ds: Dataset) -> None:
    atomic_write_text(Path(path), dataset_to_csv(ds))


def load_dataset_csv(path, num_classes: int | None = None) -> Dataset:
    return dataset_from_csv(Path(path).read_text(), num_classes)
