import numpy as np
import pytest

from fedward.attacks import (
    AttackSpec,
    adaptive_guess_label,
    build_coordination,
    malicious_train,
    neurotoxin_mask,
    pgd_project,
)
from fedward.data import LabeledImageSet, make_shapes_dataset
from fedward.errors import ConfigurationError
from fedward.metrics import compute_asr, evaluate_accuracy
from fedward.models import TrainConfig, sgd_train
from fedward.triggers import TriggerSpec, apply_trigger

from conftest import rand_images


def test_pgd_projection_formula():
    v = np.zeros(100)
    v[0] = 10.0
    out = pgd_project(v, 1.0)
    assert np.linalg.norm(out) == pytest.approx(1.0)
    assert np.allclose(out, v * 0.1)


def test_pgd_inside_ball_unchanged_and_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=50)
        eps = rng.uniform(0.1, 5.0)
        out = pgd_project(v, eps)
        assert np.linalg.norm(out) <= eps + 1e-9
        if np.linalg.norm(v) <= eps:
            assert np.array_equal(out, v)
        assert np.allclose(pgd_project(out, eps), out)


def test_neurotoxin_mask_selects_smallest_magnitudes():
    mask = neurotoxin_mask(np.array([5.0, 0.1, 3.0, 0.2]), topk=0.5)
    assert mask.tolist() == [False, True, False, True]


def test_neurotoxin_mask_size_and_boundary():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = int(rng.integers(5, 200))
        topk = float(rng.uniform(0.05, 0.95))
        g = rng.normal(size=d)
        mask = neurotoxin_mask(g, topk)
        assert mask.sum() == int(np.floor(topk * d))
    near_one = neurotoxin_mask(np.arange(1, 5, dtype=float), topk=0.9999)
    assert near_one.sum() == 3  # capped at d - 1


def test_neurotoxin_masked_delta_orthogonal_to_complement():
    g = np.array([4.0, 0.5, 2.0, 0.1, 3.0])
    mask = neurotoxin_mask(g, 0.4)
    d = np.random.default_rng(2).normal(size=5)
    masked = d * mask
    assert np.dot(masked, ~mask) == 0.0


def test_adaptive_guess_periodicity_and_exclusion():
    seed = 99
    for t in range(25):
        g = adaptive_guess_label(t, period=5, n_classes=10, excluded=0, seed=seed)
        g0 = adaptive_guess_label((t // 5) * 5, period=5, n_classes=10, excluded=0, seed=seed)
        assert g == g0
        assert g != 0
    labels = {adaptive_guess_label(t, 1, 10, excluded=3, seed=seed) for t in range(60)}
    assert 3 not in labels
    assert len(labels) > 3  # actually redraws


def test_build_coordination_uniform_and_nba():
    spec = AttackSpec(strategy="vanilla", coordination="uniform",
                      trigger=TriggerSpec(kind="pixel"), target_label=0)
    specs = build_coordination(spec, 3)
    assert len(specs) == 3
    assert all(s == specs[0] for s in specs)

    nba = AttackSpec(strategy="vanilla", coordination="nba",
                     trigger=TriggerSpec(kind="pixel"), target_label=0)
    out = build_coordination(nba, 3, n_classes=10)
    targets = [s.target_label for s in out]
    assert len(set(targets)) == 3
    with pytest.raises(ConfigurationError):
        build_coordination(nba, 10, n_classes=10)


def test_build_coordination_dba_strips():
    spec = AttackSpec(
        strategy="vanilla", coordination="dba",
        trigger=TriggerSpec(kind="pixel", row=0, col=0, height=4, width=4), target_label=2,
    )
    out = build_coordination(spec, 2)
    img = rand_images(1, seed=0)
    seq = apply_trigger(apply_trigger(img, out[0].trigger), out[1].trigger)
    assert np.array_equal(seq, apply_trigger(img, spec.trigger))
    assert all(s.target_label == 2 for s in out)


def test_zero_poison_fraction_equals_benign_training(pretrained):
    cfg = TrainConfig(learning_rate=0.03, epochs=1, batch_size=32)
    data = make_shapes_dataset(120, seed=33)
    a = pretrained.clone()
    b = pretrained.clone()
    spec = AttackSpec(strategy="vanilla", trigger=TriggerSpec(kind="pixel"),
                      target_label=0, poison_fraction=0.0)
    s_mal = malicious_train(a, data, spec, cfg, seed=5)
    s_ben = sgd_train(b, data, cfg, seed=5)
    assert np.array_equal(s_mal.params, s_ben.params)


def test_malicious_local_asr_and_ba(pretrained, shapes_test):
    # paired benign run oracle: attacker BA within 5 points of a benign
    # client's, averaged over seeds to damp small-run training noise
    cfg = TrainConfig(learning_rate=0.03, epochs=3, batch_size=32)
    data = make_shapes_dataset(400, seed=44)
    spec = AttackSpec(strategy="vanilla",
                      trigger=TriggerSpec(kind="pixel", row=1, col=1, height=3, width=3),
                      target_label=0, poison_fraction=0.25)
    ba_mal, ba_ben, asrs = [], [], []
    for seed in (6, 7, 8):
        attacker = pretrained.clone()
        malicious_train(attacker, data, spec, cfg, seed=seed)
        asrs.append(compute_asr(attacker, shapes_test, spec.trigger, 0))
        benign = pretrained.clone()
        sgd_train(benign, data, cfg, seed=seed)
        ba_mal.append(evaluate_accuracy(attacker, shapes_test.images, shapes_test.labels))
        ba_ben.append(evaluate_accuracy(benign, shapes_test.images, shapes_test.labels))
    assert np.mean(asrs) >= 0.9
    assert abs(np.mean(ba_mal) - np.mean(ba_ben)) <= 0.05


def test_pgd_strategy_bounds_delta(pretrained):
    cfg = TrainConfig(learning_rate=0.05, epochs=2, batch_size=32)
    data = make_shapes_dataset(200, seed=55)
    spec = AttackSpec(strategy="pgd", trigger=TriggerSpec(kind="pixel"),
                      target_label=0, poison_fraction=0.25, pgd_epsilon=0.5)
    start = pretrained.get_params().astype(np.float64)
    model = pretrained.clone()
    state = malicious_train(model, data, spec, cfg, seed=7)
    norm = np.linalg.norm(state.params.astype(np.float64) - start)
    assert norm <= 0.5 + 1e-5


def test_neurotoxin_strategy_zeroes_complement(pretrained):
    cfg = TrainConfig(learning_rate=0.03, epochs=1, batch_size=32)
    data = make_shapes_dataset(150, seed=66)
    spec = AttackSpec(strategy="neurotoxin", trigger=TriggerSpec(kind="pixel"),
                      target_label=0, poison_fraction=0.25, neurotoxin_topk=0.3)
    start = pretrained.get_params().astype(np.float64)
    model = pretrained.clone()
    state = malicious_train(model, data, spec, cfg, seed=8)
    d = state.params.astype(np.float64) - start
    n_nonzero = np.sum(np.abs(d) > 0)
    assert n_nonzero <= int(0.3 * d.size)


def test_uniform_attackers_same_data_same_delta(pretrained):
    cfg = TrainConfig(learning_rate=0.03, epochs=1, batch_size=32)
    data = make_shapes_dataset(100, seed=77)
    spec = AttackSpec(strategy="vanilla", coordination="uniform",
                      trigger=TriggerSpec(kind="pixel"), target_label=0)
    specs = build_coordination(spec, 2)
    states = []
    for s in specs:
        m = pretrained.clone()
        states.append(malicious_train(m, data, s, cfg, seed=9))
    assert np.array_equal(states[0].params, states[1].params)
