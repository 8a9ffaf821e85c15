"""Encoder / predictor / classifier stack built from plain ReLU MLPs."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .io import atomic_write_bytes

PROB_CLAMP = 1e-4


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    num_classes: int
    backbone_widths: tuple[int, ...] = (64, 64)
    projection_widths: tuple[int, ...] = (64, 64, 32)
    prediction_widths: tuple[int, ...] = (16, 32)
    center_projection: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        object.__setattr__(self, "projection_widths", tuple(int(w) for w in self.projection_widths))
        object.__setattr__(self, "prediction_widths", tuple(int(w) for w in self.prediction_widths))
        self.validate()

    def validate(self) -> None:
        if len(self.projection_widths) != 3:
            raise ValueError("projection MLP must have exactly 3 layers")
        if len(self.prediction_widths) != 2:
            raise ValueError("prediction MLP must have exactly 2 layers")
        if not self.backbone_widths:
            raise ValueError("backbone needs at least one layer")
        widths = (self.input_dim, self.num_classes, *self.backbone_widths,
                  *self.projection_widths, *self.prediction_widths)
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.prediction_widths[-1] != self.projection_widths[-1]:
            raise ValueError("last prediction width must equal last projection width")

    @classmethod
    def full_scale_preset(cls, input_dim: int, num_classes: int) -> ArchSpec:
        """ResNet18-sized heads: 512-d backbone features, 2048-d projection, 512-d bottleneck."""
        return cls(input_dim, num_classes, (512,), (2048, 2048, 2048), (512, 2048))

    @property
    def representation_dim(self) -> int:
        return self.projection_widths[-1]

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        def chain(d_in, widths):
            dims = [d_in, *widths]
            return [(dims[i], dims[i + 1]) for i in range(len(widths))]

        feat = self.backbone_widths[-1]
        return {
            "backbone": chain(self.input_dim, self.backbone_widths),
            "projection": chain(feat, self.projection_widths),
            "predictor": chain(self.projection_widths[-1], self.prediction_widths),
            "classifier": [(feat, self.num_classes)],
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


GROUPS = ("backbone", "projection", "predictor", "classifier")
CENTER_MOMENTUM = 0.1


@dataclass
class ModelParams:
    """Weights ``W`` of shape (fan_in, fan_out) and biases ``b`` of shape (fan_out,) per layer.

    ``center`` is the running mean subtracted from projection outputs at
    inference; ``None`` when the architecture does not center. It is a buffer,
    not a trainable parameter, and is excluded from :meth:`arrays`.
    """

    backbone: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    projection: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    predictor: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    classifier: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    center: np.ndarray | None = None

    @property
    def encoder_params(self):
        return self.backbone + self.projection

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for g in GROUPS:
            for i, (w, b) in enumerate(getattr(self, g)):
                out.append((f"{g}.{i}.W", w))
                out.append((f"{g}.{i}.b", b))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def replace_arrays(self, arrays: list[np.ndarray]) -> ModelParams:
        it = iter(arrays)
        kw = {g: [(next(it), next(it)) for _ in getattr(self, g)] for g in GROUPS}
        return ModelParams(**kw, center=self.center)

    def copy(self) -> ModelParams:
        out = self.replace_arrays([a.copy() for a in self.arrays()])
        out.center = None if self.center is None else self.center.copy()
        return out

    def num_parameters(self, groups=GROUPS) -> int:
        return sum(w.size + b.size for g in groups for w, b in getattr(self, g))


def init_params(spec: ArchSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    kw = {}
    for group, shapes in spec.layer_shapes().items():
        layers = []
        for fan_in, fan_out in shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
        kw[group] = layers
    center = np.zeros(spec.representation_dim) if spec.center_projection else None
    return ModelParams(**kw, center=center)


# ---------------------------------------------------------------- forward passes on tensors


class TensorParams:
    """Autodiff leaves mirroring a :class:`ModelParams`."""

    def __init__(self, params: ModelParams, trainable=GROUPS):
        self.centering = params.center is not None
        self.batch_means: list[np.ndarray] = []
        self.layers = {}
        self.leaves: list[Tensor] = []
        for g in GROUPS:
            grad = g in trainable
            tl = []
            for w, b in getattr(params, g):
                wt, bt = Tensor(w, requires_grad=grad), Tensor(b, requires_grad=grad)
                tl.append((wt, bt))
                self.leaves += [wt, bt]
            self.layers[g] = tl

    def zero_grad(self) -> None:
        """Forget gradients from earlier passes, including leaves a later pass never reaches."""
        for t in self.leaves:
            t.grad = None

    def grads(self) -> list[np.ndarray]:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.leaves]


def _mlp(x: Tensor, layers, final_relu: bool) -> Tensor:
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError("linear", x.shape, w.shape)
        x = ad.add(ad.matmul(x, w), b)
        if final_relu or i < len(layers) - 1:
            x = ad.relu(x)
    return x


def backbone_t(tp: TensorParams, x: Tensor) -> Tensor:
    return _mlp(x, tp.layers["backbone"], final_relu=True)


def project_t(tp: TensorParams, feats: Tensor) -> Tensor:
    """Projection MLP; with centering, the batch mean is subtracted (and differentiated)."""
    z = _mlp(feats, tp.layers["projection"], final_relu=False)
    if tp.centering:
        mu = ad.mean(z, axis=0)
        tp.batch_means.append(mu.data)
        z = ad.add(z, ad.neg(mu))
    return z


def update_center(params: ModelParams, batch_means: list[np.ndarray]) -> None:
    """Fold the batch means seen in training into the running center, in place."""
    if params.center is None or not batch_means:
        return
    batch_mean = np.mean(batch_means, axis=0)
    params.center = (1.0 - CENTER_MOMENTUM) * params.center + CENTER_MOMENTUM * batch_mean


def predict_t(tp: TensorParams, z: Tensor) -> Tensor:
    return _mlp(z, tp.layers["predictor"], final_relu=False)


def classify_t(tp: TensorParams, x: Tensor, clamp_margin: float = PROB_CLAMP) -> Tensor:
    (w, b), = tp.layers["classifier"]
    logits = ad.add(ad.matmul(backbone_t(tp, x), w), b)
    return ad.clamp(ad.softmax(logits), clamp_margin, 1.0 - clamp_margin)


# ---------------------------------------------------------------- numpy conveniences


def _as_batch(X, width: int, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != width:
        raise ShapeError(what, X.shape, (None, width))
    return X


def _np_mlp(x: np.ndarray, layers, final_relu: bool) -> np.ndarray:
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if final_relu or i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def backbone_features(params: ModelParams, X) -> np.ndarray:
    X = _as_batch(X, params.backbone[0][0].shape[0], "backbone")
    return _np_mlp(X, params.backbone, final_relu=True)


def encode(params: ModelParams, X) -> np.ndarray:
    """Representations ``f(x)``: backbone, the 3-layer projection MLP, minus the running center."""
    z = _np_mlp(backbone_features(params, X), params.projection, final_relu=False)
    return z if params.center is None else z - params.center


def predict_head(params: ModelParams, Z) -> np.ndarray:
    Z = _as_batch(Z, params.predictor[0][0].shape[0], "predict_head")
    return _np_mlp(Z, params.predictor, final_relu=False)


def classify(params: ModelParams, X, clamp_margin: float = PROB_CLAMP) -> np.ndarray:
    """Clamped softmax probabilities. Rows are not renormalised after clamping."""
    (w, b), = params.classifier
    logits = backbone_features(params, X) @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return np.clip(e / e.sum(axis=1, keepdims=True), clamp_margin, 1.0 - clamp_margin)


# ---------------------------------------------------------------- checkpoint file
#
# layout: b"CTRRPARM" | u64 header length | JSON header | little-endian f64 payload


_CKPT_MAGIC = b"CTRRPARM"


def params_to_bytes(spec: ArchSpec, params: ModelParams) -> bytes:
    tensors, offset, payload = [], 0, []
    for name, arr in params.named_arrays():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    if params.center is not None:
        raw = np.ascontiguousarray(params.center, dtype="<f8").tobytes()
        tensors.append({"name": "center", "shape": list(params.center.shape), "offset": offset,
                        "nbytes": len(raw)})
        payload.append(raw)
    header = json.dumps({"arch": spec.to_dict(), "tensors": tensors}, sort_keys=True).encode()
    return _CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def params_from_bytes(blob: bytes) -> tuple[ArchSpec, ModelParams]:
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    spec = ArchSpec(**header["arch"])
    template = init_params(spec, 0)
    expected = template.named_arrays()
    if template.center is not None:
        expected.append(("center", template.center))
    if len(header["tensors"]) != len(expected):
        raise ValueError("checkpoint tensor count does not match architecture")
    arrays = []
    for entry, (name, ref) in zip(header["tensors"], expected):
        if entry["name"] != name or tuple(entry["shape"]) != ref.shape:
            raise ValueError(f"checkpoint tensor {entry['name']} does not match architecture")
        start = base + entry["offset"]
        arrays.append(np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f8")
                      .reshape(entry["shape"]).astype(np.float64))
    center = arrays.pop() if template.center is not None else None
    params = template.replace_arrays(arrays)
    params.center = center
    return spec, params


def save_params(path, spec: ArchSpec, params: ModelParams) -> None:
    atomic_write_bytes(Path(path), params_to_bytes(spec, params))


def load_params(path) -> tuple[ArchSpec, ModelParams]:
    return params_from_bytes(Path(path).read_bytes())
