import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grn.blocks import AttentionModule, ResidualUnit, SoftMask, attention_module, mask_depth, residual_unit, soft_mask
from grn.errors import ShapeError
from grn.suites import run_suite
from grn.tensor import Tensor, no_grad


def test_zero_residual_path_gives_relu(rng):
    unit = ResidualUnit(4, 4, rng)
    unit.conv2.weight.data[...] = 0
    x = rng.standard_normal((2, 4, 5, 5))
    with no_grad():
        out = residual_unit(Tensor(x), unit, "eval")
    np.testing.assert_allclose(out.data, np.maximum(x, 0), atol=1e-15)


def test_stage2_entry_unit_shape(rng):
    unit = ResidualUnit(64, 128, rng, stride=2)
    with no_grad():
        assert unit(Tensor(rng.standard_normal((1, 64, 64, 64))), "eval").shape == (1, 128, 32, 32)


@pytest.mark.parametrize("c_in,c_out,stride,has_proj", [(4, 4, 1, False), (4, 8, 1, True), (4, 4, 2, True), (4, 8, 2, True)])
def test_projection_iff_shape_changes(rng, c_in, c_out, stride, has_proj):
    unit = ResidualUnit(c_in, c_out, rng, stride=stride)
    assert (unit.proj is not None) == has_proj
    names = {n for n, _ in unit.named_parameters()}
    assert any(n.startswith("proj") for n in names) == has_proj


def test_residual_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ResidualUnit(4, 4, rng)(Tensor(np.zeros((1, 3, 4, 4))), "eval")


@pytest.mark.parametrize("spatial,depth", [(64, 3), (32, 3), (16, 3), (8, 2), (4, 1), (2, 0), (1, 0)])
def test_mask_depth_clamping(spatial, depth):
    assert mask_depth(spatial) == depth


@pytest.mark.parametrize("spatial", [16, 8, 4, 2])
def test_soft_mask_shape_and_range(rng, spatial):
    mask = SoftMask(3, spatial, rng)
    x = Tensor(rng.standard_normal((2, 3, spatial, spatial)))
    with no_grad():
        out = soft_mask(x, mask, "train").data
    assert out.shape == x.shape
    assert np.all((out > 0) & (out < 1))


def test_soft_mask_stage1_shape(rng):
    mask = SoftMask(64, 64, rng)
    assert len(mask.down) == 3 and len(mask.skips) == 2
    with no_grad():
        assert mask(Tensor(rng.standard_normal((1, 64, 64, 64))), "train").shape == (1, 64, 64, 64)


def test_soft_mask_too_deep_raises(rng):
    with pytest.raises(ShapeError):
        SoftMask(2, 4, rng, depth=3)


def test_soft_mask_saturates(rng):
    mask = SoftMask(3, 8, rng)
    mask.out_conv2.bias.data[...] = 100.0
    with no_grad():
        out = mask(Tensor(rng.standard_normal((2, 3, 8, 8))), "train").data
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def _module(rng, spatial=8):
    module = AttentionModule(3, spatial, rng)
    x = Tensor(rng.standard_normal((2, 3, spatial, spatial)))
    return module, x


def test_attention_with_dead_mask_is_trunk(rng):
    module, x = _module(rng)
    module.mask.out_conv2.bias.data[...] = -100.0
    with no_grad():
        full = attention_module(x, module, "eval").data
        plain = attention_module(x, module, "eval", use_mask=False).data
    np.testing.assert_allclose(full, plain, atol=1e-8)


def test_zero_mask_hook_equals_trunk_composition(rng):
    module, x = _module(rng)
    with no_grad():
        trunk = module.trunk_output(module.pre(x, "eval"), "eval")
        expected = module.post(trunk, "eval").data
        got = module(x, "eval", use_mask=False).data
    np.testing.assert_array_equal(got, expected)


def test_mask_bounds_trunk(rng):
    module, x = _module(rng)
    with no_grad():
        t = module.trunk_output(module.pre(x, "eval"), "eval").data
        m = module.mask(module.pre(x, "eval"), "eval").data
    h = (1 + m) * t
    assert np.all(t >= 0)
    assert np.all(h >= t) and np.all(h <= 2 * t)


@settings(max_examples=6, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 1000))
def test_attention_preserves_shape(spatial, seed):
    r = np.random.default_rng(seed)
    module = AttentionModule(2, spatial, r)
    with no_grad():
        assert module(Tensor(r.standard_normal((2, 2, spatial, spatial))), "train").shape == (2, 2, spatial, spatial)


@pytest.mark.parametrize("name", ["residual_unit", "soft_mask", "attention_module", "fuse"])
def test_block_gradcheck(name):
    assert run_suite(0, only={name})[name] < 1e-4
