import numpy as np
import numpy.testing as npt
import pytest

from gradcheck import check_gradient
from sagrid.attention import AttentionGrid, SagModule, apply_grid, compute_grid, downsample_high, sag_forward
from sagrid.layers import maxpool2d
from sagrid.tensor import Parameter, ShapeMismatchError, Tensor, tsum, use_dtype


def make_module(channels, apply_l2=False, seed=0, zero=False):
    m = SagModule(channels, apply_l2=apply_l2, seed=seed)
    if zero:
        m.conv1x1.weight.data[...] = 0.0
        m.conv1x1.bias.data[...] = 0.0
    return m


def grid_oracle(m: SagModule, f2: np.ndarray) -> np.ndarray:
    """Independent eval-mode composition: 1x1 conv, batch norm, relu, softmax."""
    heat = np.einsum("oc,nchw->nohw", m.conv1x1.weight.data.reshape(1, -1), f2)
    heat = heat + m.conv1x1.bias.data.reshape(1, 1, 1, 1)
    heat = ((heat - m.bn.running_mean.reshape(1, 1, 1, 1))
            / np.sqrt(m.bn.running_var + m.bn.eps).reshape(1, 1, 1, 1)
            * m.bn.gamma.data.reshape(1, 1, 1, 1) + m.bn.beta.data.reshape(1, 1, 1, 1))
    heat = np.maximum(heat, 0.0)
    flat = heat.reshape(heat.shape[0], -1).astype(np.float64)
    soft = np.exp(flat - flat.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    return soft.reshape(heat.shape)


class TestComputeGrid:
    def test_zero_weights_give_uniform_grid(self):
        m = make_module(4, zero=True)
        grid = compute_grid(m, Tensor(np.random.default_rng(0).normal(size=(2, 4, 5, 2))))
        npt.assert_allclose(grid.values.data, np.full((2, 1, 5, 2), 0.1), rtol=1e-6)

    def test_final_stage_grid_shape(self):
        m = make_module(8)
        grid = compute_grid(m, Tensor(np.zeros((3, 8, 5, 2), dtype=np.float32)))
        assert grid.values.shape == (3, 1, 5, 2)

    def test_matches_layer_oracle_composition(self):
        rng = np.random.default_rng(1)
        m = make_module(6, seed=3)
        m.bn.running_mean = rng.normal(size=1)
        m.bn.running_var = rng.uniform(0.5, 2.0, size=1)
        f2 = rng.normal(size=(2, 6, 4, 3)).astype(np.float32)
        grid = compute_grid(m, Tensor(f2), train=False)
        npt.assert_allclose(grid.values.data, grid_oracle(m, f2), atol=1e-5)

    def test_channel_mismatch(self):
        m = make_module(4)
        with pytest.raises(ShapeMismatchError):
            compute_grid(m, Tensor(np.zeros((1, 5, 4, 4))))

    def test_invariants_on_random_inputs(self):
        rng = np.random.default_rng(2)
        m = make_module(3, seed=9)
        for _ in range(20):
            g = compute_grid(m, Tensor(rng.normal(size=(4, 3, 6, 4)).astype(np.float32)), train=True)
            v = g.values.data
            npt.assert_allclose(v.reshape(4, -1).sum(axis=1), 1.0, atol=1e-5)
            assert (v >= 0).all() and (v <= 1).all()

    def test_argmax_preserved_from_heatmap(self):
        rng = np.random.default_rng(3)
        m = make_module(5, seed=4)
        f2 = rng.normal(size=(3, 5, 4, 4)).astype(np.float32)
        from sagrid.tensor import relu

        heat = relu(m.bn(m.conv1x1(Tensor(f2)), False))
        grid = compute_grid(m, Tensor(f2), train=False)
        for n in range(3):
            assert (heat.data[n].argmax() == grid.values.data[n].argmax())


class TestDownsampleHigh:
    def test_single_window(self):
        out = downsample_high(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        npt.assert_array_equal(out.data, [[[[4.0]]]])

    def test_stage_one_geometry(self):
        out = downsample_high(Tensor(np.zeros((2, 8, 80, 32), dtype=np.float32)))
        assert out.shape == (2, 8, 40, 16)

    def test_equals_maxpool_exactly(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 6, 4)).astype(np.float32)
        npt.assert_array_equal(downsample_high(Tensor(x)).data, maxpool2d(Tensor(x), 2).data)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeMismatchError):
            downsample_high(Tensor(np.zeros((1, 1, 5, 4))))


class TestApplyGrid:
    def test_uniform_grid_scales(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(2, 3, 5, 2)).astype(np.float32)
        grid = AttentionGrid(Tensor(np.full((2, 1, 5, 2), 0.1, dtype=np.float32)))
        npt.assert_allclose(apply_grid(Tensor(f), grid).data, f / 10.0, rtol=1e-6)

    def test_one_hot_grid_selects_column(self):
        f = np.arange(24.0).reshape(1, 2, 3, 4)
        g = np.zeros((1, 1, 3, 4))
        g[0, 0, 1, 2] = 1.0
        out = apply_grid(Tensor(f), AttentionGrid(Tensor(g))).data
        assert out[0, :, 1, 2] == pytest.approx(f[0, :, 1, 2])
        out[0, :, 1, 2] = 0.0
        npt.assert_array_equal(out, np.zeros_like(out))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(2, 3, 4, 3))
        g = rng.uniform(size=(2, 1, 4, 3))
        out = apply_grid(Tensor(f), AttentionGrid(Tensor(g))).data
        for n in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(3):
                        assert out[n, c, i, j] == pytest.approx(f[n, c, i, j] * g[n, 0, i, j], rel=1e-5)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_grid(Tensor(np.zeros((1, 2, 4, 4))),
                       AttentionGrid(Tensor(np.zeros((1, 1, 2, 2)))))


class TestSagForward:
    def test_zero_conv_gives_uniform_attention(self):
        rng = np.random.default_rng(7)
        m = make_module(3, zero=True)
        f1 = rng.normal(size=(2, 3, 8, 4)).astype(np.float32)
        f2 = rng.normal(size=(2, 3, 4, 2)).astype(np.float32)
        out = sag_forward(m, Tensor(f1), Tensor(f2))
        expected = maxpool2d(Tensor(f1), 2).data / 8.0
        npt.assert_allclose(out.data, expected, rtol=1e-6)

    def test_apply_l2_gives_unit_norm(self):
        rng = np.random.default_rng(8)
        m = make_module(3, apply_l2=True, seed=2)
        out = sag_forward(m, Tensor(rng.normal(size=(3, 3, 8, 4)).astype(np.float32)),
                          Tensor(rng.normal(size=(3, 3, 4, 2)).astype(np.float32)))
        norms = np.sqrt((out.data.reshape(3, -1) ** 2).sum(axis=1))
        npt.assert_allclose(norms, 1.0, atol=1e-5)

    def test_branch_shape_validation(self):
        m = make_module(3)
        with pytest.raises(ShapeMismatchError):
            sag_forward(m, Tensor(np.zeros((1, 3, 8, 4))), Tensor(np.zeros((1, 3, 3, 2))))

    def test_scale_property(self):
        rng = np.random.default_rng(9)
        m = make_module(2, seed=5)
        f1 = rng.normal(size=(2, 2, 8, 4)).astype(np.float32)
        f2 = rng.normal(size=(2, 2, 4, 2)).astype(np.float32)
        base = sag_forward(m, Tensor(f1), Tensor(f2)).data
        # grid depends only on f2, so the output is linear in f1 (alpha > 0
        # keeps the max-filter selections unchanged)
        scaled = sag_forward(m, Tensor(3.0 * f1), Tensor(f2)).data
        npt.assert_allclose(scaled, 3.0 * base, rtol=1e-5)

        m.apply_l2 = True
        a = sag_forward(m, Tensor(f1), Tensor(f2)).data
        b = sag_forward(m, Tensor(5.0 * f1), Tensor(f2)).data
        npt.assert_allclose(a, b, atol=1e-5)

    def test_gradient_through_full_module(self):
        rng = np.random.default_rng(10)
        with use_dtype(np.float64):
            for apply_l2 in (False, True):
                m = make_module(2, apply_l2=apply_l2, seed=6)
                f1 = Parameter(rng.permutation(64).astype(np.float64).reshape(1, 2, 8, 4))
                f2 = Parameter(rng.normal(size=(1, 2, 4, 2)))

                def f(_t):
                    out = sag_forward(m, f1, f2, train=False)
                    return tsum(out * out)

                for target in (f1, f2, m.conv1x1.weight, m.conv1x1.bias, m.bn.gamma, m.bn.beta):
                    err = check_gradient(f, target)
                    assert err < 1e-3, f"l2={apply_l2}, err={err}"


def test_shape_contract_all_stage_geometries():
    rng = np.random.default_rng(11)
    for h, w in ((40, 16), (20, 8), (10, 4), (5, 2)):
        m = make_module(4, seed=1)
        f2 = Tensor(rng.normal(size=(2, 4, h, w)).astype(np.float32))
        assert compute_grid(m, f2).values.shape == (2, 1, h, w)
        f1 = Tensor(rng.normal(size=(2, 4, 2 * h, 2 * w)).astype(np.float32))
        assert sag_forward(m, f1, f2).shape == (2, 4, h, w)
