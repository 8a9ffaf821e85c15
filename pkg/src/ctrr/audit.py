"""Gradient audits: autodiff against finite differences, and against the closed-form norms."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor

MATCH_RTOL = 1e-8


def _random_pair_vectors(rng: np.random.Generator, dim: int, margin: float = 1e-3):
    """Four vectors whose cross cosines stay clear of +-1 (away from the clamp kinks)."""
    while True:
        q_i, q_j, z_i, z_j = rng.normal(size=(4, dim))
        c1 = q_i @ z_j / np.linalg.norm(q_i) / np.linalg.norm(z_j)
        c2 = q_j @ z_i / np.linalg.norm(q_j) / np.linalg.norm(z_i)
        if max(abs(c1), abs(c2)) < 1.0 - margin:
            return q_i, q_j, z_i, z_j


def _pair_builders(tau: float, margin: float):
    same = np.ones(1)
    return {
        "ctr": lambda a, zi, zj: losses.ctr_pair_loss(a[0], zj, a[1], zi, True),
        "ctr_prime": lambda a, zi, zj: losses.ctr_prime_pair_loss(a[0], zj, a[1], zi, same, same, tau),
        "ctr_tilde": lambda a, zi, zj: losses.ctr_tilde_pair_loss(a[0], zj, a[1], zi, same, same,
                                                                  tau, margin),
    }


def _objective_instance(rng: np.random.Generator, B: int, K: int, dim: int, lam: float,
                        tau: float, margin: float):
    """``CE + lam * batch regularizer`` as a function of logits and both prediction batches."""
    L = rng.normal(size=(B, K))
    Q1, Q2, Z1, Z2 = rng.normal(size=(4, B, dim))
    e = np.exp(L - L.max(axis=1, keepdims=True))
    W = losses.confidence_weights(e / e.sum(axis=1, keepdims=True), tau)
    labels = rng.integers(0, K, size=B)

    def build(args):
        logits, q1, q2 = args
        P = ad.clamp(ad.softmax(logits), margin, 1.0 - margin)
        ce = losses.cross_entropy(P, labels)
        ctr = losses.batch_ctr_objective(q1, q2, Z1, Z2, W, "log", margin)
        return losses.total_objective(ce, ctr, lam)

    return build, [L, Q1, Q2]


def finite_difference_audit(samples: int = 100, seed: int = 0, dim: int = 8,
                            step: float = 1e-5, lam: float = 50.0, tau: float = 0.4,
                            margin: float = losses.DEFAULT_MARGIN) -> dict:
    """Max relative error of autodiff vs central differences, per loss, over ``samples`` draws."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn in _pair_builders(tau, margin).items():
        worst = 0.0
        for _ in range(samples):
            q_i, q_j, z_i, z_j = _random_pair_vectors(rng, dim)
            rep = ad.grad_check_many(lambda a: fn(a, z_i, z_j), [q_i, q_j], step)
            worst = max(worst, rep.max_relative_error)
        out[name] = {"max_relative_error": worst, "samples": samples}
    worst = 0.0
    for _ in range(samples):
        build, points = _objective_instance(rng, 4, 3, dim, lam, tau, margin)
        worst = max(worst, ad.grad_check_many(build, points, step).max_relative_error)
    out["objective"] = {"max_relative_error": worst, "samples": samples}
    return out


def pair_at_cosine(t: float, norm_i: float = 1.0, norm_j: float = 1.0, dim: int = 4):
    """Two vectors with cosine exactly ``t`` (up to rounding) and the given norms."""
    q_i = np.zeros(dim)
    q_j = np.zeros(dim)
    q_i[0] = norm_i
    q_j[0], q_j[1] = norm_j * t, norm_j * np.sqrt(max(1.0 - t * t, 0.0))
    return q_i, q_j


def closed_form_audit(n_grid: int = 100, norm_i: float = 1.7,
                      margin: float = losses.DEFAULT_MARGIN) -> dict:
    """Compare closed-form squared gradient norms with autodiff on a grid of ``t`` in ``[0, 1)``.

    The grid stops one margin short of the clamp ceiling ``1 - margin``, where the
    log loss's gradient is cut off.
    """
    grid = np.linspace(0.0, 1.0 - 2.0 * margin, n_grid)
    rows = []
    for t in grid:
        q_i, q_j = pair_at_cosine(float(t), norm_i)
        g_lin = losses.autodiff_pair_grad("linear", q_i, q_j, margin)
        g_log = losses.autodiff_pair_grad("log", q_i, q_j, margin)
        lin_grad, lin_norm_sq = losses.analytic_grad_ctr_prime(q_i, q_j)
        first, chain = losses.analytic_grad_norm_tilde(q_i, q_j, margin)
        ad_lin, ad_log = float(g_lin @ g_lin), float(g_log @ g_log)
        rows.append({
            "t": float(t),
            "linear_autodiff": ad_lin,
            "linear_closed_form": lin_norm_sq,
            "linear_vector_error": float(np.abs(g_lin - lin_grad).max()),
            "log_autodiff": ad_log,
            "log_form_c_1_plus_t": first,
            "log_form_chain_rule": chain,
            "matches_c_1_plus_t": abs(ad_log - first) <= MATCH_RTOL * max(abs(first), 1e-300),
            "matches_chain_rule": abs(ad_log - chain) <= MATCH_RTOL * max(abs(chain), 1e-300),
        })
    lin_ok = all(abs(r["linear_autodiff"] - r["linear_closed_form"])
                 <= MATCH_RTOL * max(r["linear_closed_form"], 1e-300) for r in rows)
    log_vals = [r["log_autodiff"] for r in rows]
    lin_vals = [r["linear_autodiff"] for r in rows]
    if all(r["matches_chain_rule"] for r in rows):
        matching = "chain_rule"
    elif all(r["matches_c_1_plus_t"] for r in rows):
        matching = "c_1_plus_t"
    else:
        matching = "neither"
    return {
        "grid_size": n_grid,
        "norm_q_i": norm_i,
        "linear_matches_closed_form": lin_ok,
        "log_matching_form": matching,
        # small slack: the two norms are equal at t = 0 and float noise must not flip the order
        "log_non_decreasing": all(b >= a * (1 - 1e-12) for a, b in zip(log_vals, log_vals[1:])),
        "linear_non_increasing": all(b <= a * (1 + 1e-12) for a, b in zip(lin_vals, lin_vals[1:])),
        "log_dominates_linear": all(lg >= ln * (1 - 1e-12) for lg, ln in zip(log_vals, lin_vals)),
        "points": rows,
    }


def grad_check_report(samples: int = 100, seed: int = 0) -> dict:
    fd = finite_difference_audit(samples, seed)
    return {
        "samples": samples,
        "seed": seed,
        "step": 1e-5,
        "finite_differences": fd,
        "max_relative_error": max(v["max_relative_error"] for v in fd.values()),
        "closed_forms": closed_form_audit(),
    }
