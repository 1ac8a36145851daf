import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dosediff.patching import blend_weights, extract, merge, plan_patches


def test_default_geometry_plan():
    plan = plan_patches((96, 128, 144), (32, 32, 24), (8, 8, 8))
    assert len(plan) == 180
    assert plan.starts[0] == (0, 24, 48, 64)
    assert plan.starts[1] == (0, 24, 48, 72, 96)
    assert plan.starts[2] == (0, 16, 32, 48, 64, 80, 96, 112, 120)
    patches = extract(np.zeros((96, 128, 144), np.float32), plan)
    assert len(patches) == 180 and all(p.shape == (32, 32, 24) for p in patches)


def test_patch_sized_volume_and_errors():
    plan = plan_patches((32, 32, 24), (32, 32, 24), (8, 8, 8))
    assert plan.origins == [(0, 0, 0)]
    v = np.random.default_rng(0).random((32, 32, 24))
    assert np.array_equal(extract(v, plan)[0], v)
    with pytest.raises(ValueError):
        plan_patches((32, 32, 32), (33, 32, 32), (8, 8, 8))
    with pytest.raises(ValueError):
        plan_patches((32, 32, 32), (16, 16, 16), (16, 8, 8))
    with pytest.raises(ValueError):
        extract(np.zeros((31, 32, 24)), plan)


def test_blend_weight_examples():
    assert np.all(blend_weights((5, 6, 7), (0, 0, 0)) == 1.0)
    w = blend_weights((32, 32, 24), (8, 8, 8))
    assert w[16, 16, 0] == pytest.approx(1 / 9)
    assert w[16, 16, 7] == pytest.approx(8 / 9)
    assert w[16, 16, 8] == 1.0
    assert w.min() > 0
    for axis in range(3):
        assert np.array_equal(w, np.flip(w, axis))


@pytest.mark.parametrize("shape", [(96, 128, 144), (64, 64, 48), (32, 32, 24)])
def test_merge_extract_identity(shape):
    v = np.random.default_rng(1).random(shape).astype(np.float32)
    plan = plan_patches(shape, (32, 32, 24), (8, 8, 8))
    out = merge(extract(v, plan), plan)
    assert np.abs(out - v).max() <= 1e-6


def test_extract_keeps_leading_axes_and_torch():
    v = torch.randn(2, 1, 40, 40, 40)
    plan = plan_patches((40, 40, 40), (32, 32, 32), (8, 8, 8))
    patches = extract(v, plan)
    assert len(patches) == 8 and patches[0].shape == (2, 1, 32, 32, 32)
    patches[0].zero_()
    assert v.abs().sum() > 0  # copies, not views
    out = merge([p.numpy() for p in extract(v, plan)], plan)
    assert np.allclose(out, v.numpy(), atol=1e-6)


def test_overlap_blend_is_strict_convex_combination():
    plan = plan_patches((1, 1, 40), (1, 1, 24), (0, 0, 8))
    assert plan.starts[2] == (0, 16)
    a, b = 2.0, 5.0
    out = merge([np.full((1, 1, 24), a), np.full((1, 1, 24), b)], plan)[0, 0]
    assert np.all(out[8:16] == a) and np.all(out[24:32] == b)  # weight-1 interiors
    assert np.allclose(out[:8], a) and np.allclose(out[32:], b)  # single-patch ramps
    assert np.all((out[16:24] > a) & (out[16:24] < b))


def test_missing_patch_is_an_error():
    plan = plan_patches((40, 40, 40), (32, 32, 32), (8, 8, 8))
    with pytest.raises(ValueError):
        merge(extract(np.zeros((40, 40, 40)), plan)[:-1], plan)


def test_value_appears_in_every_covering_patch():
    v = np.arange(40 * 40 * 40, dtype=np.float64).reshape(40, 40, 40)
    plan = plan_patches((40, 40, 40), (32, 32, 32), (8, 8, 8))
    voxel = (20, 5, 30)
    seen = 0
    for origin, p in zip(plan.origins, extract(v, plan)):
        local = tuple(x - o for x, o in zip(voxel, origin))
        if all(0 <= l < s for l, s in zip(local, plan.patch)):
            assert p[local] == v[voxel]
            seen += 1
    assert seen == 4


_axis = st.integers(4, 40).flatmap(
    lambda n: st.integers(1, n).flatmap(lambda p: st.tuples(st.just(n), st.just(p), st.integers(0, p - 1)))
)


@settings(max_examples=60, deadline=None)
@given(st.tuples(_axis, _axis, _axis))
def test_random_plans_cover_and_reconstruct(axes):
    shape, patch, overlap = (tuple(a[i] for a in axes) for i in range(3))
    plan = plan_patches(shape, patch, overlap)
    cover = np.zeros(shape, int)
    for origin in plan.origins:
        cover[plan.window(origin)] += 1
    assert cover.min() >= 1
    for s in plan.starts:
        assert all(b > a for a, b in zip(s, s[1:]))
    v = np.random.default_rng(0).random(shape)
    assert np.abs(merge(extract(v, plan), plan) - v).max() <= 1e-6


def test_linear_ramp_has_no_seams():
    shape = (8, 8, 40)
    x = np.arange(40, dtype=float)
    field = np.broadcast_to(0.5 * x, shape)
    plan = plan_patches(shape, (8, 8, 16), (0, 0, 6))
    # each patch carries the ramp plus a patch-specific offset of at most 0.1
    patches = [field[plan.window(o)] + 0.1 * (i % 2) for i, o in enumerate(plan.origins)]
    out = merge(patches, plan)
    assert np.abs(np.diff(out, axis=2)).max() <= 0.5 + 0.1 + 1e-9
