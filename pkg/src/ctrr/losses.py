"""Contrastive regularizers, cross-entropy and closed-form gradient norms.

Representation arguments named ``z`` are always passed through
:func:`~ctrr.autodiff.stop_gradient`, so gradients reach the ``q`` arguments only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateRowError, ShapeError, Tensor

DEFAULT_MARGIN = 1e-4


@dataclass(frozen=True)
class LossConfig:
    lam: float = 50.0
    tau: float = 0.4
    clamp_margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 < self.clamp_margin < 0.5:
            raise ValueError(f"clamp margin must lie in (0, 0.5), got {self.clamp_margin}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cosine(q, z) -> Tensor:
    """Cosine similarity of two vectors; ``z`` is detached."""
    q, z = _t(q), ad.stop_gradient(_t(z))
    if q.data.ndim != 1 or q.shape != z.shape:
        raise ShapeError("cosine", q.shape, z.shape)
    return ad.dot(ad.normalize_rows(q), ad.normalize_rows(z))


def _agree(p_i, p_j, tau: float) -> bool:
    return float(np.dot(np.asarray(p_i, float), np.asarray(p_j, float))) >= tau


def ctr_pair_loss(q_i, z_j, q_j, z_i, same_label: bool) -> Tensor:
    """Label-indicator regularizer: ``-(cos(q_i, z_j) + cos(q_j, z_i))`` for same-label pairs."""
    s = ad.add(cosine(q_i, z_j), cosine(q_j, z_i))
    return ad.neg(s) if same_label else ad.mul(s, Tensor(0.0))


def ctr_prime_pair_loss(q_i, z_j, q_j, z_i, p_i, p_j, tau: float) -> Tensor:
    """As :func:`ctr_pair_loss` but gated on ``p_i . p_j >= tau`` instead of labels."""
    return ctr_pair_loss(q_i, z_j, q_j, z_i, _agree(p_i, p_j, tau))


def ctr_tilde_pair_loss(q_i, z_j, q_j, z_i, p_i, p_j, tau: float,
                        clamp_margin: float = DEFAULT_MARGIN) -> Tensor:
    """``log(1 - s1) + log(1 - s2)`` gated on ``p_i . p_j >= tau``; cosines clamped first."""
    lo, hi = -1.0 + clamp_margin, 1.0 - clamp_margin
    s1 = ad.clamp(cosine(q_i, z_j), lo, hi)
    s2 = ad.clamp(cosine(q_j, z_i), lo, hi)
    total = ad.add(ad.log(ad.add(Tensor(1.0), ad.neg(s1))),
                   ad.log(ad.add(Tensor(1.0), ad.neg(s2))))
    return total if _agree(p_i, p_j, tau) else ad.mul(total, Tensor(0.0))


# ---------------------------------------------------------------- batch form


def _row_normalise(S: np.ndarray) -> np.ndarray:
    return S / S.sum(axis=1, keepdims=True)


def confidence_weights(P, tau: float) -> np.ndarray:
    """Row-stochastic pair weights from prediction agreement ``P P^T``.

    The diagonal is set to 1 before thresholding, so every row keeps its
    same-image entry. The result is a plain array: nothing differentiates through it.
    """
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    S = P @ P.T
    np.fill_diagonal(S, 1.0)
    S = np.where(S >= tau, S, 0.0)
    return _row_normalise(S)


def label_weights(labels) -> np.ndarray:
    """Row-normalised same-label indicator; the batch analogue of the label-gated regularizer."""
    y = np.asarray(labels)
    return _row_normalise((y[:, None] == y[None, :]).astype(np.float64))


def cosine_matrix(Q: Tensor, Z) -> Tensor:
    """``normalize(Q) @ normalize(Z)^T`` with ``Z`` detached."""
    Z = ad.stop_gradient(_t(Z))
    return ad.matmul(ad.normalize_rows(Q), ad.transpose(ad.normalize_rows(Z)))


def batch_ctr_objective(Q1: Tensor, Q2: Tensor, Z1, Z2, W, form: str = "log",
                        clamp_margin: float = DEFAULT_MARGIN) -> Tensor:
    """Weighted mean of pairwise terms over both augmented views.

    ``C1 = cos(Q1, Z2)`` and ``C2 = cos(Q2, Z1)``. With ``form="log"`` diagonal
    entries (same image, two views) contribute ``-C`` and off-diagonal entries
    ``log(1 - C)``, cosines clamped to ``[-1 + margin, 1 - margin]``. With
    ``form="linear"`` every entry contributes ``-C`` (no clamp needed). Each of the
    ``2B`` rows is weighted by ``W``, summed, and the rows are averaged.
    """
    Q1, Q2 = _t(Q1), _t(Q2)
    B = Q1.shape[0]
    for name, M in (("Q2", Q2), ("Z1", _t(Z1)), ("Z2", _t(Z2))):
        if M.shape != Q1.shape:
            raise ShapeError(f"batch_ctr_objective({name})", Q1.shape, M.shape)
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (B, B):
        raise ShapeError("batch_ctr_objective(W)", W.shape, (B, B))
    if form not in ("log", "linear"):
        raise ValueError(f"unknown form {form!r}")

    eye = np.eye(B)
    rows = []
    for Q, Z in ((Q1, Z2), (Q2, Z1)):
        C = cosine_matrix(Q, Z)
        if form == "log":
            C = ad.clamp(C, -1.0 + clamp_margin, 1.0 - clamp_margin)
            off = ad.log(ad.add(Tensor(1.0), ad.neg(C)))
            terms = ad.add(ad.mul(C, Tensor(-eye)), ad.mul(off, Tensor(1.0 - eye)))
        else:
            terms = ad.neg(C)
        rows.append(ad.sum_(ad.mul(terms, Tensor(W)), axis=1))
    return ad.mul(ad.add(ad.sum_(rows[0]), ad.sum_(rows[1])), Tensor(1.0 / (2 * B)))


def cross_entropy(P: Tensor, targets) -> Tensor:
    """Mean of ``-sum_k y_k log p_k``. ``targets`` are integer labels or B x K soft labels."""
    P = _t(P)
    B, K = P.shape
    Y = np.asarray(targets)
    if Y.ndim == 1:
        Y = np.eye(K)[Y.astype(int)]
    Y = Y.astype(np.float64)
    if Y.shape != (B, K):
        raise ShapeError("cross_entropy", P.shape, Y.shape)
    if np.any(np.abs(Y.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("cross_entropy: label rows must sum to 1")
    return ad.neg(ad.mean(ad.sum_(ad.mul(ad.log(P), Tensor(Y)), axis=1)))


def total_objective(ce, ctr, lam: float) -> Tensor:
    if lam == 0:
        return _t(ce)
    return ad.add(_t(ce), ad.mul(_t(ctr), Tensor(lam)))


# ---------------------------------------------------------------- closed-form gradients
#
# Both use an identity predictor, so z_k = stopgrad(q_k) and t = cos(q_i, q_j).


def _unit(v: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(v))
    if n < ad.NORM_FLOOR:
        raise DegenerateRowError("zero-norm vector")
    return v / n, n


def analytic_grad_ctr_prime(q_i, q_j) -> tuple[np.ndarray, float]:
    """Gradient of the linear pair loss w.r.t. ``q_i`` and its squared norm ``(1 - t^2)/|q_i|^2``."""
    u_i, n_i = _unit(np.asarray(q_i, dtype=np.float64))
    u_j, _ = _unit(np.asarray(q_j, dtype=np.float64))
    t = float(u_i @ u_j)
    grad = -(u_j - t * u_i) / n_i
    return grad, (1.0 - t * t) / n_i ** 2


def analytic_grad_norm_tilde(q_i, q_j, clamp_margin: float = DEFAULT_MARGIN) -> tuple[float, float]:
    """Squared gradient norm of the log pair loss in two closed forms.

    Returns ``(c (1 + t), c (1 + t) / (1 - t))`` with ``c = 1/|q_i|^2``: the first
    divides the linear-loss norm by ``1 - t`` once, the second applies the chain
    rule factor ``1/(1 - t)`` to the gradient before squaring.
    """
    u_i, n_i = _unit(np.asarray(q_i, dtype=np.float64))
    u_j, _ = _unit(np.asarray(q_j, dtype=np.float64))
    t = float(u_i @ u_j)
    if t >= 1.0 - clamp_margin:
        raise ValueError(f"t={t} is at the clamp ceiling; gradient is cut off there")
    c = 1.0 / n_i ** 2
    return c * (1.0 + t), c * (1.0 + t) / (1.0 - t)


def autodiff_pair_grad(kind: str, q_i, q_j, clamp_margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Gradient w.r.t. ``q_i`` of a masked-in pair loss with identity predictor."""
    qi = Tensor(q_i, requires_grad=True)
    qj = Tensor(q_j, requires_grad=True)
    zi, zj = ad.stop_gradient(qi), ad.stop_gradient(qj)
    one = np.ones(1)
    if kind == "linear":
        loss = ctr_prime_pair_loss(qi, zj, qj, zi, one, one, 0.0)
    elif kind == "log":
        loss = ctr_tilde_pair_loss(qi, zj, qj, zi, one, one, 0.0, clamp_margin)
    else:
        raise ValueError(f"unknown pair loss {kind!r}")
    ad.backward(loss)
    return qi.grad.copy()
