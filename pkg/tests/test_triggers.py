import numpy as np
import pytest

from fedward.data import LabeledImageSet
from fedward.errors import ParameterError, UnsupportedTriggerError
from fedward.triggers import (
    PATCH_KINDS,
    TriggerSpec,
    apply_trigger,
    decompose_dba,
    poison_batch,
    trigger_pattern,
)

from conftest import rand_images


def test_wanet_identity_warp_is_identity():
    spec = TriggerSpec(kind="wanet", warp_strength=0.0)
    img = rand_images(4, seed=1)
    out = apply_trigger(img, spec)
    # exact up to float32 grid-coordinate rounding in the resampler
    assert np.allclose(out, img, atol=1e-5)


def test_blend_on_zero_image_is_scaled_pattern():
    spec = TriggerSpec(kind="blend", kappa=0.2, pattern_seed=5)
    img = np.zeros((3, 16, 16), dtype=np.float32)
    out = apply_trigger(img, spec)
    pattern = trigger_pattern(spec, (3, 16, 16))
    assert np.allclose(out, 0.2 * pattern, atol=1e-6)


def test_pixel_patch_footprint_exact():
    spec = TriggerSpec(kind="pixel", row=0, col=0, height=3, width=3, value=1.0)
    img = np.full((3, 16, 16), 0.5, dtype=np.float32)
    out = apply_trigger(img, spec)
    assert np.all(out[:, :3, :3] == 1.0)
    changed = np.sum(np.any(out != img, axis=0))
    assert changed == 9
    mask = np.zeros((16, 16), dtype=bool)
    mask[:3, :3] = True
    assert np.array_equal(out[:, ~mask], img[:, ~mask])


def test_input_not_modified():
    img = rand_images(2, seed=3)
    before = img.copy()
    apply_trigger(img, TriggerSpec(kind="pixel"))
    apply_trigger(img, TriggerSpec(kind="wanet"))
    assert np.array_equal(img, before)


def test_patch_out_of_bounds_raises():
    spec = TriggerSpec(kind="pixel", row=14, col=14, height=4, width=4)
    with pytest.raises(ParameterError):
        apply_trigger(rand_images(1)[0], spec)


def test_patch_kinds_idempotent():
    img = rand_images(3, seed=9)
    for i, kind in enumerate(PATCH_KINDS):
        spec = TriggerSpec(kind=kind, row=2, col=2, height=4, width=4, pattern_seed=i)
        once = apply_trigger(img, spec)
        twice = apply_trigger(once, spec)
        assert np.array_equal(once, twice), kind


def test_all_kinds_stay_in_range_and_shape():
    rng = np.random.default_rng(0)
    specs = [
        TriggerSpec(kind="pixel", row=1, col=1, height=3, width=3),
        TriggerSpec(kind="blend", kappa=0.7, pattern_seed=2),
        TriggerSpec(kind="diagonal", width=3),
        TriggerSpec(kind="square", row=5, col=5, height=6, width=6),
        TriggerSpec(kind="triangle", row=0, col=0, height=5, width=5),
        TriggerSpec(kind="noise_patch", row=8, col=8, height=4, width=4),
        TriggerSpec(kind="mosaic", kappa=0.4, cells=3),
        TriggerSpec(kind="wanet", warp_strength=3.0),
        TriggerSpec(kind="semantic"),
    ]
    for trial in range(3):
        img = rng.uniform(0, 1, size=(2, 3, 16, 16)).astype(np.float32)
        for spec in specs:
            out = apply_trigger(img, spec)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0


def test_poison_full_fraction():
    batch = LabeledImageSet(rand_images(16), np.arange(16) % 10, 10)
    out = poison_batch(batch, TriggerSpec(kind="pixel"), target=3, fraction=1.0)
    assert np.all(out.labels == 3)


def test_poison_rounding_rule():
    batch = LabeledImageSet(rand_images(32), np.arange(32) % 10, 10)
    out = poison_batch(batch, TriggerSpec(kind="pixel"), target=0, fraction=0.25, seed=4)
    poisoned = np.any(out.images != batch.images, axis=(1, 2, 3))
    assert poisoned.sum() == 8
    assert np.all(out.labels[poisoned] == 0)
    assert np.array_equal(out.labels[~poisoned], batch.labels[~poisoned])


def test_semantic_empty_intersection_is_noop():
    batch = LabeledImageSet(rand_images(8), np.arange(8) % 10, 10, ids=np.arange(100, 108))
    spec = TriggerSpec(kind="semantic", semantic_ids=(1, 2, 3))
    out = poison_batch(batch, spec, target=0, fraction=0.5)
    assert np.array_equal(out.labels, batch.labels)
    assert np.array_equal(out.images, batch.images)


def test_semantic_membership_flips_labels_only():
    batch = LabeledImageSet(rand_images(8), np.ones(8, dtype=np.int64), 10, ids=np.arange(8))
    spec = TriggerSpec(kind="semantic", semantic_ids=(0, 5))
    out = poison_batch(batch, spec, target=7, fraction=0.5)
    assert np.array_equal(out.images, batch.images)
    assert out.labels[0] == 7 and out.labels[5] == 7
    assert np.all(out.labels[[1, 2, 3, 4, 6, 7]] == 1)


def test_dba_two_strips():
    patch = TriggerSpec(kind="pixel", row=2, col=2, height=4, width=4)
    dec = decompose_dba(patch, 2)
    assert len(dec.local_parts) == 2
    assert [(p.row, p.height, p.width) for p in dec.local_parts] == [(2, 2, 4), (4, 2, 4)]


def test_dba_four_single_rows():
    patch = TriggerSpec(kind="pixel", row=0, col=0, height=4, width=4)
    dec = decompose_dba(patch, 4)
    assert [(p.row, p.height) for p in dec.local_parts] == [(0, 1), (1, 1), (2, 1), (3, 1)]


def test_dba_recomposition_matches_global():
    # oracle: pixel-wise comparison of sequential strip application vs global
    patch = TriggerSpec(kind="pixel", row=3, col=5, height=5, width=4, value=1.0)
    dec = decompose_dba(patch, 3)
    img = rand_images(2, seed=12)
    via_parts = img
    for part in dec.local_parts:
        via_parts = apply_trigger(via_parts, part)
    via_global = apply_trigger(img, patch)
    assert np.array_equal(via_parts, via_global)


def test_dba_unsupported_kind():
    with pytest.raises(UnsupportedTriggerError):
        decompose_dba(TriggerSpec(kind="blend"), 2)


def test_trigger_spec_json_roundtrip():
    spec = TriggerSpec(kind="wanet", target_label=8, warp_strength=2.0, pattern_seed=3)
    clone = TriggerSpec.from_dict(spec.to_dict())
    assert clone == spec
    img = rand_images(1, seed=5)
    assert np.array_equal(apply_trigger(img, spec), apply_trigger(img, clone))
