"""Training loop, SGD with momentum, evaluation metrics and the linear-probe experiment."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .model import (GROUPS, ArchSpec, ModelParams, TensorParams, backbone_t, classify,
                    classify_t, encode, init_params, predict_t, project_t,
                    update_center)
from .noise import STRONG, WEAK, AugmentSpec, Dataset, augment_batch, correct_labels

log = logging.getLogger(__name__)

REGULARIZERS = {
    # name: (batch form, how pair weights are built)
    "ctrr": ("log", "confidence"),
    "ctr_prime": ("linear", "confidence"),
    "ctr": ("linear", "labels"),
}

METRIC_COLUMNS = ("epoch", "train_loss", "ce_loss", "ctr_loss", "test_accuracy",
                  "memorization", "clean_train_accuracy")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 50.0
    tau: float = 0.4
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    epochs: int = 60
    seed: int = 0
    label_correction: bool = False
    correction_start_epoch: int = 10
    regularizer: str = "ctrr"
    clamp_margin: float = 1e-4
    grad_clip: float | None = 0.1
    weak_aug: AugmentSpec = WEAK
    strong_aug: AugmentSpec = STRONG

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs and weight_decay must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 or None")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {sorted(REGULARIZERS)}")
        losses.LossConfig(self.lam, self.tau, self.clamp_margin)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("weak_aug", "strong_aug"):
            d[k]["scale_range"] = list(d[k]["scale_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("weak_aug", "strong_aug"):
            if k in d and isinstance(d[k], dict):
                a = dict(d[k])
                if "scale_range" in a:
                    a["scale_range"] = tuple(a["scale_range"])
                d[k] = AugmentSpec(**a)
        return cls(**d)


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> SgdState:
        return cls([np.zeros_like(a) for a in params.arrays()])


def sgd_step(params: ModelParams, grads: list[np.ndarray | None], state: SgdState,
             cfg: TrainConfig) -> tuple[ModelParams, SgdState]:
    """``v <- momentum * v + (g + wd * theta)``; ``theta <- theta - lr * v``.

    A ``None`` gradient marks a frozen tensor, which is left untouched.
    """
    names = [n for n, _ in params.named_arrays()]
    new_params, new_vel = [], []
    for name, theta, g, v in zip(names, params.arrays(), grads, state.velocity):
        if g is None:
            new_params.append(theta)
            new_vel.append(v)
            continue
        if g.shape != theta.shape:
            raise ad.ShapeError(f"sgd_step({name})", theta.shape, g.shape)
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
        v = cfg.momentum * v + (g + cfg.weight_decay * theta)
        new_params.append(theta - cfg.learning_rate * v)
        new_vel.append(v)
    return params.replace_arrays(new_params), SgdState(new_vel)


# ---------------------------------------------------------------- metrics


@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append({k: rec[k] for k in METRIC_COLUMNS})

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}

    @property
    def best_test_accuracy(self) -> float:
        vals = [r["test_accuracy"] for r in self.records if np.isfinite(r["test_accuracy"])]
        return max(vals) if vals else float("nan")

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        from .io import fmt_float

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.records:
            w.writerow([r["epoch"]] + [fmt_float(r[c]) for c in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RunMetrics:
        rows = list(csv.DictReader(io.StringIO(text)))
        out = cls()
        for r in rows:
            out.records.append({c: (int(r[c]) if c == "epoch" else float(r[c]))
                                for c in METRIC_COLUMNS})
        return out


def accuracy(params: ModelParams, X, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(classify(params, X).argmax(axis=1) == np.asarray(labels)))


def memorization(params: ModelParams, dataset: Dataset) -> float:
    """Fraction of flipped examples whose prediction equals their (wrong) observed label."""
    mask = dataset.flipped_mask
    if not mask.any():
        raise ValueError("memorization is undefined without flipped examples")
    pred = classify(params, dataset.features[mask]).argmax(axis=1)
    return float(np.mean(pred == dataset.noisy_labels[mask]))


def cluster_cosines(params: ModelParams, dataset: Dataset, labels=None) -> tuple[float, float]:
    """Mean cosine of representations over same-class and different-class pairs (self pairs excluded)."""
    y = dataset.true_labels if labels is None else np.asarray(labels)
    Z = encode(params, dataset.features)
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    C = Zn @ Zn.T
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    diff = y[:, None] != y[None, :]
    return float(C[same].mean()), float(C[diff].mean())


def _evaluate(params, dataset, test) -> dict:
    return {
        "test_accuracy": accuracy(params, test.features, test.true_labels) if test is not None
        else float("nan"),
        "memorization": memorization(params, dataset) if dataset.flipped_mask.any()
        else float("nan"),
        "clean_train_accuracy": accuracy(params, dataset.features, dataset.true_labels),
    }


# ---------------------------------------------------------------- training


def _streams(seed: int):
    init, shuffle, aug = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1, np.uint64)[0]), np.random.default_rng(shuffle),
            np.random.default_rng(aug))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def batch_loss(tp: TensorParams, xs: tuple[np.ndarray, np.ndarray, np.ndarray], labels,
               cfg: TrainConfig, targets=None) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
    """Build the full objective for one batch; returns ``(total, ce, ctr, P)``."""
    x1, x2, x3 = (Tensor(x) for x in xs)
    form, weighting = REGULARIZERS[cfg.regularizer]
    P = classify_t(tp, x3, cfg.clamp_margin)
    ce = losses.cross_entropy(P, labels if targets is None else targets)
    if cfg.lam == 0:
        return ce, ce, None, P
    f1, f2 = project_t(tp, backbone_t(tp, x1)), project_t(tp, backbone_t(tp, x2))
    q1, q2 = predict_t(tp, f1), predict_t(tp, f2)
    z1, z2 = ad.stop_gradient(f1), ad.stop_gradient(f2)
    if weighting == "confidence":
        W = losses.confidence_weights(P.data, cfg.tau)
    else:
        W = losses.label_weights(labels)
    ctr = losses.batch_ctr_objective(q1, q2, z1, z2, W, form, cfg.clamp_margin)
    return losses.total_objective(ce, ctr, cfg.lam), ce, ctr, P


def clip_by_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


def objective_grads(tp: TensorParams, ce: Tensor, ctr: Tensor | None,
                    cfg: TrainConfig) -> list[np.ndarray]:
    """Gradients of ``ce + lam * ctr``.

    The regularizer gradient is norm-clipped at ``cfg.grad_clip`` before it is
    scaled by ``lam``, so ``lam`` still sets the strength of the regularizer
    relative to CE. The CE gradient is never clipped.
    """
    if ctr is None or cfg.grad_clip is None:
        ad.backward(losses.total_objective(ce, ctr, cfg.lam) if ctr is not None else ce)
        return tp.grads()
    tp.zero_grad()
    ad.backward(ce)
    g_ce = tp.grads()
    tp.zero_grad()
    ad.backward(ctr)
    g_ctr = clip_by_norm(tp.grads(), cfg.grad_clip)
    return [a + cfg.lam * b for a, b in zip(g_ce, g_ctr)]


def corrected_targets(params: ModelParams, x, labels, num_classes: int,
                      margin: float = losses.DEFAULT_MARGIN) -> np.ndarray:
    """Soft targets for one batch: observed labels pulled toward the model's predictions."""
    labels = np.asarray(labels)
    p = classify(params, x, margin)
    per_sample = -np.log(p[np.arange(len(labels)), labels])
    p = p / p.sum(axis=1, keepdims=True)
    return correct_labels(np.eye(num_classes)[labels], p, per_sample)


def train_run(cfg: TrainConfig, dataset: Dataset, arch: ArchSpec, test: Dataset | None = None,
              init: ModelParams | None = None) -> tuple[ModelParams, RunMetrics]:
    """Train on ``dataset.noisy_labels``; one metrics record per epoch (epoch 0 is the initial model)."""
    if arch.input_dim != dataset.dim or arch.num_classes != dataset.num_classes:
        raise ad.ShapeError("train_run(arch vs dataset)",
                            (arch.input_dim, arch.num_classes), (dataset.dim, dataset.num_classes))
    init_seed, shuffle_rng, aug_rng = _streams(cfg.seed)
    params = init.copy() if init is not None else init_params(arch, init_seed)
    state = SgdState.zeros_like(params)
    metrics = RunMetrics()
    X, y = dataset.features, dataset.noisy_labels
    K = dataset.num_classes
    metrics.append(epoch=0, train_loss=float("nan"), ce_loss=float("nan"),
                   ctr_loss=float("nan"), **_evaluate(params, dataset, test))

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        nb = 0
        correcting = cfg.label_correction and epoch >= cfg.correction_start_epoch
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, shuffle_rng)):
            xb = X[idx]
            xs = (augment_batch(xb, cfg.strong_aug, aug_rng),
                  augment_batch(xb, cfg.strong_aug, aug_rng),
                  augment_batch(xb, cfg.weak_aug, aug_rng))
            tp = TensorParams(params)
            targets = None
            if correcting:
                targets = corrected_targets(params, xs[2], y[idx], K, cfg.clamp_margin)
            total, ce, ctr, _ = batch_loss(tp, xs, y[idx], cfg, targets)
            values = (total.item(), ce.item(), ctr.item() if ctr is not None else 0.0)
            if not np.all(np.isfinite(values)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {values}")
            grads = objective_grads(tp, ce, ctr, cfg)
            params, state = sgd_step(params, grads, state, cfg)
            update_center(params, tp.batch_means)
            sums += values
            nb += 1
        means = sums / max(nb, 1)
        metrics.append(epoch=epoch, train_loss=means[0], ce_loss=means[1], ctr_loss=means[2],
                       **_evaluate(params, dataset, test))
        log.debug("epoch %d: %s", epoch, metrics.final)
    return params, metrics


def reset_classifier(params: ModelParams, seed: int) -> ModelParams:
    (w, _), = params.classifier
    fan_in, fan_out = w.shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    out = params.copy()
    out.classifier = [(rng.uniform(-limit, limit, size=w.shape), np.zeros(fan_out))]
    return out


def linear_probe(frozen_params: ModelParams, dataset: Dataset, probe_cfg: TrainConfig,
                 test: Dataset | None = None) -> tuple[ModelParams, RunMetrics]:
    """Re-initialise the classifier and fit only it, with CE on the noisy labels."""
    init_seed, shuffle_rng, aug_rng = _streams(probe_cfg.seed)
    params = reset_classifier(frozen_params, init_seed)
    state = SgdState.zeros_like(params)
    frozen = set(range(len(params.arrays()) - 2))
    metrics = RunMetrics()
    X, y = dataset.features, dataset.noisy_labels
    metrics.append(epoch=0, train_loss=float("nan"), ce_loss=float("nan"), ctr_loss=0.0,
                   **_evaluate(params, dataset, test))
    for epoch in range(1, probe_cfg.epochs + 1):
        total, nb = 0.0, 0
        for b, idx in enumerate(_batches(len(X), probe_cfg.batch_size, shuffle_rng)):
            xw = augment_batch(X[idx], probe_cfg.weak_aug, aug_rng)
            tp = TensorParams(params, trainable=("classifier",))
            ce = losses.cross_entropy(classify_t(tp, Tensor(xw), probe_cfg.clamp_margin), y[idx])
            if not np.isfinite(ce.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            ad.backward(ce)
            grads = [None if i in frozen else g for i, g in enumerate(tp.grads())]
            params, state = sgd_step(params, grads, state, probe_cfg)
            total += ce.item()
            nb += 1
        metrics.append(epoch=epoch, train_loss=total / max(nb, 1), ce_loss=total / max(nb, 1),
                       ctr_loss=0.0, **_evaluate(params, dataset, test))
    return params, metrics


def probe_parameter_ratio(params: ModelParams, n_samples: int) -> float:
    """Trainable probe parameters per training example."""
    return params.num_parameters(("classifier",)) / n_samples


__all__ = ["GROUPS", "METRIC_COLUMNS", "RunMetrics", "SgdState", "TrainConfig", "TrainingError",
           "accuracy", "batch_loss", "cluster_cosines", "linear_probe", "memorization",
           "probe_parameter_ratio", "reset_classifier", "sgd_step", "train_run"]
