import numpy as np
import pytest

from ctrr import autodiff as ad
from ctrr import losses
from ctrr.autodiff import ShapeError, Tensor
from ctrr.model import (ArchSpec, ModelParams, TensorParams, backbone_t, classify, classify_t,
                        encode, init_params, load_params, params_from_bytes, params_to_bytes,
                        predict_head, predict_t, project_t, save_params, update_center)

SMALL = ArchSpec(5, 3, backbone_widths=(6,), projection_widths=(6, 6, 4), prediction_widths=(3, 4))


def _bytes(p: ModelParams) -> bytes:
    return b"".join(a.tobytes() for a in p.arrays())


def test_default_widths():
    spec = ArchSpec(20, 4)
    shapes = spec.layer_shapes()
    assert shapes["backbone"] == [(20, 64), (64, 64)]
    assert shapes["projection"] == [(64, 64), (64, 64), (64, 32)]
    assert shapes["predictor"] == [(32, 16), (16, 32)]
    assert shapes["classifier"] == [(64, 4)]


def test_full_scale_preset_widths():
    spec = ArchSpec.full_scale_preset(512, 10)
    assert spec.representation_dim == 2048
    assert spec.prediction_widths == (512, 2048)


@pytest.mark.parametrize("kw", [
    dict(backbone_widths=(0,)),
    dict(projection_widths=(64, 32)),
    dict(prediction_widths=(16,)),
    dict(prediction_widths=(16, 31)),
])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        ArchSpec(20, 4, **kw)


def test_init_is_deterministic_and_seed_sensitive():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert _bytes(a) == _bytes(b)
    assert _bytes(a) != _bytes(c)


def test_init_ranges():
    p = init_params(ArchSpec(20, 4), 0)
    for w, b in p.backbone + p.projection + p.predictor + p.classifier:
        limit = np.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= limit)
        assert not np.any(b)


def _zeroed(spec):
    p = init_params(spec, 0)
    return p.replace_arrays([np.zeros_like(a) for a in p.arrays()])


def test_zero_weights_encode_to_zero():
    Z = encode(_zeroed(SMALL), np.random.default_rng(0).normal(size=(3, 5)))
    assert not np.any(Z)


def test_rows_are_independent():
    p = init_params(SMALL, 3)
    X = np.random.default_rng(1).normal(size=(2, 5))
    np.testing.assert_array_equal(encode(p, X[:1])[0], encode(p, X)[0])
    np.testing.assert_array_equal(classify(p, X[:1])[0], classify(p, X)[0])


def test_zero_logits_give_uniform_probabilities():
    spec = ArchSpec(5, 4, backbone_widths=(6,), projection_widths=(6, 6, 4), prediction_widths=(3, 4))
    P = classify(_zeroed(spec), np.ones((2, 5)))
    np.testing.assert_allclose(P, 0.25)


def test_identity_predictor_passes_representations_through():
    spec = ArchSpec(5, 3, backbone_widths=(6,), projection_widths=(6, 6, 4), prediction_widths=(4, 4))
    p = init_params(spec, 0)
    # ReLU between the two layers: shift into the positive orthant and back
    p.predictor = [(np.eye(4), np.full(4, 100.0)), (np.eye(4), np.full(4, -100.0))]
    Z = np.random.default_rng(2).normal(size=(3, 4))
    np.testing.assert_allclose(predict_head(p, Z), Z, atol=1e-12)


def test_classify_clamp_bounds_and_row_sums():
    p = init_params(SMALL, 0)
    p.classifier = [(p.classifier[0][0] * 200.0, p.classifier[0][1])]
    P = classify(p, np.random.default_rng(0).normal(size=(50, 5)) * 10)
    assert P.min() >= 1e-4 and P.max() <= 1 - 1e-4
    assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 2 * 3 * 1e-4 + 1e-15)


def test_wrong_input_width():
    with pytest.raises(ShapeError):
        encode(init_params(SMALL, 0), np.ones((2, 4)))


def test_numpy_and_tensor_paths_agree():
    p = init_params(SMALL, 4)
    p.center = None
    X = np.random.default_rng(3).normal(size=(4, 5))
    tp = TensorParams(p)
    tp.centering = False
    z = project_t(tp, backbone_t(tp, Tensor(X)))
    np.testing.assert_allclose(z.data, encode(p, X), atol=1e-12)
    np.testing.assert_allclose(predict_t(tp, z).data, predict_head(p, z.data), atol=1e-12)
    np.testing.assert_allclose(classify_t(tp, Tensor(X)).data, classify(p, X), atol=1e-12)


def test_running_center_update():
    p = init_params(SMALL, 0)
    update_center(p, [np.ones(4), 3 * np.ones(4)])
    np.testing.assert_allclose(p.center, 0.2)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SMALL, 5)
    p.center = np.arange(4.0)
    save_params(tmp_path / "m.ckpt", SMALL, p)
    spec, q = load_params(tmp_path / "m.ckpt")
    assert spec == SMALL
    assert _bytes(p) == _bytes(q)
    np.testing.assert_array_equal(q.center, p.center)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        params_from_bytes(b"NOTAPARM" + bytes(16))
    blob = params_to_bytes(SMALL, init_params(SMALL, 0))
    assert blob[:8] == b"CTRRPARM"


def test_full_objective_gradient_wrt_every_parameter():
    """CE + lam * regularizer on a 4-sample batch, all parameters, against central differences."""
    r = np.random.default_rng(9)
    p0 = init_params(SMALL, 9)
    # zero biases put dead-unit pre-activations exactly on the ReLU kink, where central
    # differences return half the slope; random biases keep every unit off it
    p0 = p0.replace_arrays([a if a.ndim == 2 else r.normal(scale=0.3, size=a.shape)
                            for a in p0.arrays()])
    x1, x2, x3 = r.normal(size=(3, 4, 5))
    labels = np.array([0, 1, 2, 1])
    W = losses.confidence_weights(classify(p0, x3), 0.3)
    # the detached targets are constants for the derivative, so hold them at the base point
    tp0 = TensorParams(p0)
    Z1 = project_t(tp0, backbone_t(tp0, Tensor(x1))).data
    Z2 = project_t(tp0, backbone_t(tp0, Tensor(x2))).data

    def objective(arrays, track):
        p = p0.replace_arrays(arrays)
        tp = TensorParams(p)
        if not track:
            for t in tp.leaves:
                t.requires_grad = False
        f1, f2 = project_t(tp, backbone_t(tp, Tensor(x1))), project_t(tp, backbone_t(tp, Tensor(x2)))
        q1, q2 = predict_t(tp, f1), predict_t(tp, f2)
        ctr = losses.batch_ctr_objective(q1, q2, Z1, Z2, W)
        ce = losses.cross_entropy(classify_t(tp, Tensor(x3)), labels)
        return tp, losses.total_objective(ce, ctr, 50.0)

    base = p0.arrays()
    tp, out = objective(base, True)
    ad.backward(out)
    analytic, numeric = [], []
    for k, leaf in enumerate(tp.leaves):
        def f(v, k=k):
            arrs = list(base)
            arrs[k] = v
            return objective(arrs, False)[1].item()

        analytic.append(leaf.grad.reshape(-1))
        numeric.append(ad.finite_diff_gradient(f, base[k]).reshape(-1))
    # one scale for the whole parameter vector: centering makes the last projection bias
    # gradient exactly zero, and a per-tensor scale would divide round-off by itself
    errs = ad.relative_errors(np.concatenate(analytic), np.concatenate(numeric))
    assert errs.max() <= 1e-4
