import numpy as np
import pytest
import torch

from fedward.data import LabeledImageSet
from fedward.errors import ArchitectureError, TrainingDivergenceError
from fedward.models import (
    BnLayerStats,
    TrainConfig,
    build_model,
    delta,
    finite_difference_grad,
    sgd_train,
    state_from_bytes,
    state_to_bytes,
)

from conftest import rand_images


def _batch(n=8, shape=(3, 4, 4), n_classes=10, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, *shape)).astype(np.float64)
    y = rng.integers(0, n_classes, size=n)
    return x, y


def test_ref_mlp_gradient_matches_finite_differences():
    model = build_model("ref_mlp", (3, 4, 4), 10, seed=1, dtype="float64", hidden=16)
    x, y = _batch(seed=2)
    analytic = model.grad(x, y)
    numeric, coords = finite_difference_grad(model, x, y)
    denom = np.maximum(np.abs(numeric), 1e-8)
    rel = np.abs(analytic[coords] - numeric) / denom
    assert np.mean(rel <= 1e-4) >= 0.99


def test_convnet_gradient_spot_check():
    model = build_model("small_convnet", (3, 8, 8), 10, seed=3, dtype="float64", width=4, hidden=8)
    x, y = _batch(n=6, shape=(3, 8, 8), seed=4)
    analytic = model.grad(x, y)
    coords = np.random.default_rng(5).choice(model.n_params, size=200, replace=False)
    numeric, _ = finite_difference_grad(model, x, y, coords=coords)
    denom = np.maximum(np.abs(numeric), 1e-8)
    rel = np.abs(analytic[coords] - numeric) / denom
    assert np.mean(rel <= 1e-4) >= 0.99


def test_zero_learning_rate_updates_bn_only():
    model = build_model("small_convnet", (3, 16, 16), 10, seed=1)
    data = LabeledImageSet(rand_images(40, seed=1), np.arange(40) % 10, 10)
    before = model.get_state()
    after = sgd_train(model, data, TrainConfig(learning_rate=0.0, epochs=1), seed=0)
    assert np.array_equal(before.params, after.params)
    changed = any(
        not np.array_equal(a.mean, b.mean) or not np.array_equal(a.var, b.var)
        for a, b in zip(before.bn_stats, after.bn_stats)
    )
    assert changed


def test_linear_model_single_step_matches_closed_form():
    # oracle: softmax cross-entropy gradient of a linear classifier
    model = build_model("linear", (1, 2, 2), 3, seed=7, dtype="float64")
    x = np.array([[[[0.2, 0.8], [0.5, 0.1]]]], dtype=np.float64)
    y = np.array([2])
    data = LabeledImageSet(x.astype(np.float32), y, 3)

    w0 = model.get_params().copy()
    W = w0[:12].reshape(3, 4)
    b = w0[12:]
    feats = x.reshape(4)
    logits = W @ feats + b
    p = np.exp(logits - logits.max())
    p /= p.sum()
    onehot = np.eye(3)[y[0]]
    grad_W = np.outer(p - onehot, feats)
    grad_b = p - onehot
    grad = np.concatenate([grad_W.ravel(), grad_b])

    lr = 0.1
    sgd_train(model, data, TrainConfig(learning_rate=lr, epochs=1, batch_size=1, momentum=0.0), seed=0)
    expected = w0 - lr * grad
    assert np.allclose(model.get_params(), expected, atol=1e-10)


def test_loss_monotone_on_separable_set():
    # oracle: linearly separable blobs, full-batch descent with a small step
    rng = np.random.default_rng(3)
    n = 60
    side = rng.integers(0, 2, size=n)
    x = rng.normal(0, 0.3, size=(n, 1, 2, 2)) + side[:, None, None, None] * 3.0
    x = np.clip((x + 1) / 5.0, 0, 1).astype(np.float32)
    data = LabeledImageSet(x, side, 2)
    model = build_model("linear", (1, 2, 2), 2, seed=9)
    cfg = TrainConfig(learning_rate=0.2, epochs=1, batch_size=n, momentum=0.0)
    losses = [model.loss(data.images, data.labels)]
    for it in range(50):
        sgd_train(model, data, cfg, seed=0)
        losses.append(model.loss(data.images, data.labels))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_bn_export_import_roundtrip(fresh_pretrained):
    model = fresh_pretrained
    probe = rand_images(16, seed=5)
    logits = model.forward(probe)
    stats = model.export_bn()
    model.import_bn(stats)
    assert np.array_equal(model.forward(probe), logits)
    again = model.export_bn()
    for a, b in zip(stats, again):
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)
        assert a.count == b.count


def test_import_identity_stats_makes_bn_affine():
    model = build_model("small_convnet", (3, 16, 16), 10, seed=2)
    stats = model.export_bn()
    neutral = tuple(
        BnLayerStats(mean=np.zeros_like(s.mean), var=np.ones_like(s.var), count=1) for s in stats
    )
    model.import_bn(neutral)
    bn = model._bn_modules()[0]
    bn.eval()
    x = torch.randn(4, bn.num_features, 5, 5)
    out = bn(x)
    expected = bn.weight[None, :, None, None] * x / np.sqrt(1 + bn.eps) + bn.bias[None, :, None, None]
    assert torch.allclose(out, expected, atol=1e-6)


def test_bn_mismatch_raises(fresh_pretrained):
    with pytest.raises(ArchitectureError):
        fresh_pretrained.import_bn(fresh_pretrained.export_bn()[:1])


def test_bn_stats_differ_after_training_on_different_data(shapes_train, digits):
    from fedward.data import build_planting_set

    ps = build_planting_set(digits, 100, (3, 16, 16), seed=0)
    cfg = TrainConfig(learning_rate=0.01, epochs=1)
    a = build_model("small_convnet", (3, 16, 16), 10, seed=5)
    b = a.clone()
    sgd_train(a, shapes_train.subset(range(100)), cfg, seed=1)
    sgd_train(b, ps.samples, cfg, seed=1)
    diffs = [np.max(np.abs(sa.mean - sb.mean)) for sa, sb in zip(a.export_bn(), b.export_bn())]
    assert max(diffs) > 0


def test_delta_identity_symmetry_and_mismatch():
    model = build_model("linear", (1, 2, 2), 3, seed=0)
    s1 = model.get_state()
    model.set_params(s1.params + 0.5)
    s2 = model.get_state()
    assert np.all(delta(s1, s1) == 0)
    assert np.linalg.norm(delta(s1, s2)) == pytest.approx(np.linalg.norm(delta(s2, s1)))
    other = build_model("ref_mlp", (1, 2, 2), 3, seed=0)
    with pytest.raises(ArchitectureError):
        delta(s1, other.get_state())


def test_state_serialization_roundtrip(fresh_pretrained):
    state = fresh_pretrained.get_state()
    blob = state_to_bytes(state)
    back = state_from_bytes(blob)
    assert np.array_equal(back.params, state.params.astype(np.float32))
    assert len(back.bn_stats) == len(state.bn_stats)
    for a, b in zip(state.bn_stats, back.bn_stats):
        assert np.array_equal(a.mean.astype(np.float32), b.mean)
        assert np.array_equal(a.var.astype(np.float32), b.var)
        assert a.count == b.count


def test_eval_forward_is_pure_function(fresh_pretrained):
    probe = rand_images(8, seed=6)
    a = fresh_pretrained.forward(probe)
    b = fresh_pretrained.forward(probe)
    assert np.array_equal(a, b)


def test_divergence_raises_with_provenance():
    model = build_model("linear", (1, 2, 2), 2, seed=0)
    data = LabeledImageSet(rand_images(8, shape=(1, 2, 2)), np.zeros(8, dtype=np.int64), 2)

    def bad_objective(module, x, y):
        return module(x).sum() * float("nan")

    with pytest.raises(TrainingDivergenceError) as exc:
        sgd_train(model, data, TrainConfig(epochs=1), seed=0, objective=bad_objective, round_index=4)
    assert exc.value.round_index == 4
    assert exc.value.batch_index == 0
