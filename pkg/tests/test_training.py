import numpy as np
import pytest

from ctrr.model import ArchSpec, ModelParams, init_params
from ctrr.noise import Dataset, gen_blobs, gen_blobs_split, inject_symmetric
from ctrr.training import (RunMetrics, SgdState, TrainConfig, TrainingError, linear_probe,
                           memorization, probe_parameter_ratio, sgd_step, train_run)

TINY = ArchSpec(6, 3, backbone_widths=(16,), projection_widths=(16, 16, 8), prediction_widths=(8, 8))


def one_param(value: float) -> ModelParams:
    return ModelParams(backbone=[(np.array([[value]]), np.zeros(1))])


def cfg(**kw):
    return TrainConfig(**{"weight_decay": 0.0, "momentum": 0.0, "learning_rate": 0.1, **kw})


def test_plain_sgd_step():
    p = one_param(1.0)
    p2, _ = sgd_step(p, [np.array([[2.0]]), np.zeros(1)], SgdState.zeros_like(p), cfg())
    assert p2.backbone[0][0][0, 0] == pytest.approx(0.8)


def test_weight_decay_alone_shrinks():
    p = one_param(3.0)
    p2, _ = sgd_step(p, [np.zeros((1, 1)), np.zeros(1)], SgdState.zeros_like(p),
                     cfg(weight_decay=0.5, learning_rate=0.1))
    assert p2.backbone[0][0][0, 0] == pytest.approx(3.0 - 0.1 * 0.5 * 3.0)


def test_momentum_two_steps():
    p, state = one_param(0.0), SgdState.zeros_like(one_param(0.0))
    c = cfg(momentum=0.9, learning_rate=1.0)
    for _ in range(2):
        p, state = sgd_step(p, [np.ones((1, 1)), np.zeros(1)], state, c)
    assert p.backbone[0][0][0, 0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_rejects_non_finite_gradient():
    p = one_param(0.0)
    with pytest.raises(TrainingError, match="backbone.0.W"):
        sgd_step(p, [np.array([[np.nan]]), np.zeros(1)], SgdState.zeros_like(p), cfg())


def test_none_gradient_freezes_tensor():
    p = one_param(1.0)
    p2, _ = sgd_step(p, [None, np.ones(1)], SgdState.zeros_like(p), cfg(weight_decay=0.1))
    assert p2.backbone[0][0] is p.backbone[0][0]


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(momentum=1.0), dict(batch_size=1),
                                dict(regularizer="nope"), dict(tau=2.0), dict(grad_clip=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_roundtrip():
    c = TrainConfig(lam=3.0, epochs=2, label_correction=True)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 0.1})


def _small_run(**kw):
    tr, te = gen_blobs_split(3, 40, 20, 6, 1.0, 0)
    tr = inject_symmetric(tr, 0.3, 1)
    return train_run(TrainConfig(epochs=3, batch_size=32, **kw), tr, TINY, te)


def test_training_is_deterministic():
    _, a = _small_run(seed=4)
    _, b = _small_run(seed=4)
    assert a.to_csv() == b.to_csv()
    _, c = _small_run(seed=5)
    assert a.to_csv() != c.to_csv()


def test_zero_lambda_ignores_regularizer_settings():
    _, a = _small_run(lam=0.0)
    _, b = _small_run(lam=0.0, tau=0.9, regularizer="ctr_prime")
    assert a.to_csv() == b.to_csv()


@pytest.mark.parametrize("reg", ["ctrr", "ctr_prime", "ctr"])
def test_losses_stay_finite(reg):
    _, m = _small_run(regularizer=reg, label_correction=True, correction_start_epoch=2)
    assert len(m.records) == 4
    for col in ("train_loss", "ce_loss", "ctr_loss"):
        assert np.all(np.isfinite(m.column(col)[1:]))


def test_metrics_csv_roundtrip():
    _, m = _small_run()
    back = RunMetrics.from_csv(m.to_csv())
    assert back.to_csv() == m.to_csv()
    assert np.isnan(back.records[0]["train_loss"])


def _onehot_model(K: int, scale: float = 10.0) -> ModelParams:
    spec = ArchSpec(K, K, backbone_widths=(K,), projection_widths=(2, 2, 2), prediction_widths=(2, 2))
    p = init_params(spec, 0)
    p.backbone = [(np.eye(K), np.zeros(K))]
    p.classifier = [(scale * np.eye(K), np.zeros(K))]
    return p


def test_memorization_extremes():
    K = 4
    y = np.arange(40) % K
    noisy = (y + 1) % K
    p = _onehot_model(K)
    truthful = Dataset(np.eye(K)[y], y, noisy, K)
    assert memorization(p, truthful) == 0.0
    parrot = Dataset(np.eye(K)[noisy], y, noisy, K)
    assert memorization(p, parrot) == 1.0


def test_memorization_of_a_random_predictor():
    K, n = 10, 10_000
    r = np.random.default_rng(0)
    y = r.integers(0, K, size=n)
    noisy = (y + r.integers(1, K, size=n)) % K
    p = _onehot_model(K)
    ds = Dataset(r.random((n, K)), y, noisy, K)
    assert abs(memorization(p, ds) - 0.1) <= 0.02


def test_memorization_needs_flips():
    y = np.arange(8) % 4
    with pytest.raises(ValueError):
        memorization(_onehot_model(4), Dataset(np.eye(4)[y], y, y, 4))


def test_probe_leaves_encoder_untouched():
    tr, te = gen_blobs_split(3, 40, 20, 6, 1.0, 0)
    tr = inject_symmetric(tr, 0.4, 2)
    base = init_params(TINY, 3)
    snapshot = [a.tobytes() for a in base.arrays()[:-2]]
    probed, m = linear_probe(base, tr, TrainConfig(lam=0.0, epochs=3, batch_size=32), te)
    assert [a.tobytes() for a in probed.arrays()[:-2]] == snapshot
    assert [a.tobytes() for a in base.arrays()[:-2]] == snapshot
    assert probed.classifier[0][0].tobytes() != base.classifier[0][0].tobytes()
    assert len(m.records) == 4


def test_probe_is_under_parameterized():
    p = init_params(ArchSpec(20, 4), 0)
    assert probe_parameter_ratio(p, 2000) < 1.0
    assert probe_parameter_ratio(init_params(ArchSpec.full_scale_preset(512, 10), 0), 50_000) < 1.0


def test_architecture_must_match_data():
    ds = gen_blobs(3, 5, 7, 1.0, 0)
    with pytest.raises(ValueError):
        train_run(TrainConfig(epochs=1), ds, TINY)


def _blobs(seed, rate):
    tr, te = gen_blobs_split(4, 500, 250, 20, 1.0, seed)
    return inject_symmetric(tr, rate, seed + 100), te


def test_lambda_ablation_shape():
    """Under 60% noise, lam=0 and lam=5000 both do worse than lam=50 (median of 3 seeds)."""
    acc = {0.0: [], 50.0: [], 5000.0: []}
    for s in range(3):
        tr, te = _blobs(s, 0.6)
        for lam in acc:
            _, m = train_run(TrainConfig(lam=lam, seed=s), tr, ArchSpec(20, 4), te)
            acc[lam].append(m.final["test_accuracy"])
    med = {k: float(np.median(v)) for k, v in acc.items()}
    assert med[0.0] < med[50.0]
    assert med[5000.0] < med[50.0]


def test_clean_contrastive_representation_resists_noisy_probe():
    """Encoder trained with the label-gated regularizer on clean labels vs CE only,
    then a fresh classifier fit on 40%-noise labels (median of 5 seeds)."""
    results = []
    for s in range(5):
        tr, te = gen_blobs_split(4, 500, 250, 20, 1.0, s)
        noisy = inject_symmetric(tr, 0.4, s + 100)
        row = []
        for lam, reg in ((50.0, "ctr"), (0.0, "ctrr")):
            enc, _ = train_run(TrainConfig(lam=lam, regularizer=reg, seed=s), tr, ArchSpec(20, 4))
            _, m = linear_probe(enc, noisy, TrainConfig(lam=0.0, seed=s), te)
            row.append((m.final["test_accuracy"], m.final["memorization"]))
        results.append(row)
    med = np.median(np.array(results), axis=0)
    (ctr_acc, ctr_mem), (ce_acc, ce_mem) = med
    assert ctr_mem < ce_mem, f"memorization {ctr_mem:.4f} vs CE {ce_mem:.4f}"
    assert ctr_acc > ce_acc, f"accuracy {ctr_acc:.4f} vs CE {ce_acc:.4f}"
