"""End-to-end acceptance checks. Each test prints one ``CRITERION n: PASS|FAIL`` line."""

import functools
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ctrr import audit, info_theory
from ctrr.cli import main
from ctrr.model import ArchSpec
from ctrr.noise import correct_labels, flip_count, gen_blobs, gen_blobs_split, inject_symmetric
from ctrr.training import TrainConfig, cluster_cosines, corrected_targets, train_run


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def report(n: int, limit_s: float | None = None):
        start = time.perf_counter()
        ok, detail = False, ""
        try:
            yield
            elapsed = time.perf_counter() - start
            detail = f"{elapsed:.1f}s"
            if limit_s is not None:
                assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"
            ok = True
        except AssertionError as exc:
            detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
            raise
        finally:
            with capsys.disabled():
                print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return report


# blobs with K=4, d=20, N=2000 and a clean held-out test set
def noisy_blobs(seed: int, rate: float):
    train, test = gen_blobs_split(4, 500, 250, 20, 1.0, seed)
    return inject_symmetric(train, rate, seed + 100), test


@functools.lru_cache(maxsize=None)
def final(seed: int, rate: float, **kw) -> tuple[float, float]:
    train, test = noisy_blobs(seed, rate)
    _, m = train_run(TrainConfig(seed=seed, **kw), train, ArchSpec(20, 4), test)
    return m.final["test_accuracy"], m.final["memorization"]


def median_final(seeds, rate, **kw):
    runs = np.array([final(s, rate, **kw) for s in seeds])
    return np.median(runs, axis=0)


def test_criterion_1_finite_difference_audit(criterion):
    with criterion(1, limit_s=10.0):
        rep = audit.finite_difference_audit(samples=100, seed=0)
        for name in ("ctr", "ctr_prime", "ctr_tilde", "objective"):
            assert rep[name]["samples"] >= 100
            assert rep[name]["max_relative_error"] <= 1e-4, (name, rep[name])


def test_criterion_2_closed_forms(criterion):
    with criterion(2):
        rep = audit.closed_form_audit(n_grid=100)
        assert len(rep["points"]) == 100
        assert rep["linear_matches_closed_form"]
        assert max(p["linear_vector_error"] for p in rep["points"]) <= 1e-8
        assert rep["log_matching_form"] == "chain_rule"
        assert rep["log_non_decreasing"] and rep["linear_non_increasing"]


def test_criterion_3_clean_clusters(criterion):
    with criterion(3, limit_s=120.0):
        within, between = [], []
        for s in range(3):
            ds = gen_blobs(4, 500, 20, 0.5, s)
            params, _ = train_run(TrainConfig(lam=50.0, regularizer="ctr", seed=s), ds, ArchSpec(20, 4))
            w, b = cluster_cosines(params, ds)
            within.append(w)
            between.append(b)
        assert np.median(within) >= 0.99, within
        assert np.median(between) <= 0.5, between


def test_criterion_4_noise_robustness(criterion):
    with criterion(4, limit_s=600.0):
        seeds = range(5)
        ctrr_acc, ctrr_mem = median_final(seeds, 0.4, lam=50.0, tau=0.4)
        ce_acc, ce_mem = median_final(seeds, 0.4, lam=0.0)
        assert ctrr_acc >= ce_acc + 0.05, (ctrr_acc, ce_acc)
        assert ctrr_mem < ce_mem, (ctrr_mem, ce_mem)


def test_criterion_5_log_form_vs_linear_form(criterion):
    with criterion(5):
        seeds = range(5)
        log_acc, _ = median_final(seeds, 0.6, lam=50.0, tau=0.4, regularizer="ctrr")
        lin_acc, _ = median_final(seeds, 0.6, lam=50.0, tau=0.4, regularizer="ctr_prime")
        assert log_acc >= lin_acc, (log_acc, lin_acc)


def test_criterion_6_ablation_shapes(criterion):
    with criterion(6):
        seeds = range(3)
        base, _ = median_final(seeds, 0.6, lam=50.0, tau=0.4)
        no_reg, _ = median_final(seeds, 0.6, lam=0.0)
        no_gate, _ = median_final(seeds, 0.6, lam=50.0, tau=0.0)
        assert no_reg < base, (no_reg, base)
        assert no_gate < base, (no_gate, base)


def test_criterion_7_theory(criterion):
    with criterion(7, limit_s=60.0):
        rows = info_theory.verify_family(info_theory.eg_family())
        assert len(rows) >= 50
        inside = [r for r in rows if r["theorem2"]["precondition"]]
        assert len(inside) >= 50
        for r in inside:
            t2 = r["theorem2"]
            assert t2["eq2_lower"] and t2["eq2_upper"] and t2["eq3"], r
            assert r["R_Z"] <= r["R_X"] + t2["epsilon"] + 1e-9, r
        assert all(r["lemma1_all_hold"] for r in rows)
        tight = info_theory.lemma1_bound(np.full((1, 4), 0.25), [0])
        assert abs(tight.error - 0.75) <= 1e-9 and abs(tight.bound - 0.75) <= 1e-9


def test_criterion_8_noise_exactness(criterion):
    with criterion(8):
        ds = gen_blobs(4, 250, 20, 1.0, 0)
        for rate in (0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0):
            noisy = inject_symmetric(ds, rate, 7)
            assert int(noisy.flipped_mask.sum()) == round(rate * len(ds.true_labels)) == flip_count(rate, 1000)
            assert np.all(noisy.noisy_labels[noisy.flipped_mask] != noisy.true_labels[noisy.flipped_mask])
            assert np.all(noisy.noisy_labels[~noisy.flipped_mask] == noisy.true_labels[~noisy.flipped_mask])
        noisy = inject_symmetric(ds, 0.4, 7)
        params, _ = train_run(TrainConfig(epochs=5, label_correction=True, correction_start_epoch=2),
                              noisy, ArchSpec(20, 4))
        targets = corrected_targets(params, noisy.features, noisy.noisy_labels, 4)
        assert np.max(np.abs(targets.sum(axis=1) - 1.0)) <= 1e-12
        r = np.random.default_rng(0)
        p = r.dirichlet(np.ones(4), size=500)
        mixed = correct_labels(np.eye(4)[r.integers(0, 4, 500)], p, r.exponential(size=500))
        assert np.max(np.abs(mixed.sum(axis=1) - 1.0)) <= 1e-12


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9):
        assert main(["gen-data", "--classes", "4", "--dim", "20", "--per-class", "100", "--seed", "3",
                     "--test-per-class", "50", "--test-out", str(tmp_path / "t.ctrr"),
                     "--out", str(tmp_path / "d.ctrr")]) == 0
        assert main(["inject-noise", "--data", str(tmp_path / "d.ctrr"), "--rate", "0.4",
                     "--seed", "1", "--out", str(tmp_path / "n.ctrr")]) == 0
        (tmp_path / "run.json").write_text(json.dumps({
            "dataset": "n.ctrr", "test_dataset": "t.ctrr", "train": {"epochs": 8, "seed": 11}}))
        for out in ("a", "b"):
            assert main(["train", "--config", str(tmp_path / "run.json"),
                         "--out", str(tmp_path / out)]) == 0
        for name in ("metrics.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
