import numpy as np
import pytest

from eqmanip import diffcore as dc
from eqmanip import eqlayers as el
from eqmanip import symgroup as sg
from eqmanip.eqlayers import GeometricTensor
from eqmanip.symgroup import DihedralElement, RepKind

from oracles import finite_diff_grad, max_rel_error

D4 = sg.elements(4)


def geo(data, ft, spatial=False):
    return GeometricTensor(dc.Tensor(data), ft, spatial=spatial)


class TestTransform:
    def test_identity_bit_exact(self):
        rng = np.random.default_rng(0)
        x = geo(rng.random((2, 3, 6, 6)), sg.trivial_type(4, 3), spatial=True)
        out = el.transform_geotensor(sg.identity(4), x)
        assert np.array_equal(out.data, x.data)

    def test_quarter_turn_2x2(self):
        x = geo(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), sg.trivial_type(4, 1), spatial=True)
        out = el.transform_geotensor(DihedralElement(4, 1), x)
        assert np.array_equal(out.data[0, 0], [[2.0, 4.0], [1.0, 3.0]])

    def test_action_axiom_exact_subgroup(self):
        rng = np.random.default_rng(1)
        x = geo(rng.standard_normal((1, 2, 8, 8)), sg.trivial_type(4, 2), spatial=True)
        for g in D4:
            for h in D4:
                lhs = el.transform_geotensor(g, el.transform_geotensor(h, x))
                rhs = el.transform_geotensor(sg.compose(g, h), x)
                assert np.abs(lhs.data - rhs.data).max() <= 1e-14

    def test_non_square_rejected(self):
        x = geo(np.zeros((1, 1, 4, 6)), sg.trivial_type(4, 1), spatial=True)
        with pytest.raises(ValueError):
            el.transform_geotensor(DihedralElement(4, 1), x)


class TestEqLinear:
    def test_standard_to_standard_effective_weight(self):
        # projection collapses the standard-standard block to tr(W)/2 * I
        rng = np.random.default_rng(0)
        st = sg.ftype(4, (RepKind.STANDARD, 1))
        lin = el.EqLinear(st, st, rng, bias=False)
        lin.weight.data[...] = [[1.0, 2.0], [3.0, 4.0]]
        lin._project_own()
        assert np.allclose(lin.weight.data, [[2.5, 0.0], [0.0, 2.5]], atol=1e-12)
        out = lin(geo(np.array([[1.0, 0.0]]), st))
        assert np.allclose(out.data, [[2.5, 0.0]], atol=1e-12)

    def test_zero_input_gives_invariant_bias(self):
        rng = np.random.default_rng(2)
        out_t = sg.ftype(4, (RepKind.TRIVIAL, 2), (RepKind.STANDARD, 1), (RepKind.REGULAR, 1))
        lin = el.EqLinear(sg.trivial_type(4, 3), out_t, rng)
        lin.bias.data[...] = rng.standard_normal(out_t.dim)
        lin._project_own()
        out = lin(geo(np.zeros((1, 3)), sg.trivial_type(4, 3)))
        assert np.abs(out.data[0, 2:4]).max() <= 1e-12  # standard block zeroed
        for g in D4:
            assert np.abs(sg.apply_channel_action(out_t, g, out.data) - out.data).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_equivariance_random(self, seed):
        rng = np.random.default_rng(seed)
        in_t = sg.ftype(4, (RepKind.STANDARD, 1), (RepKind.TRIVIAL, 1), (RepKind.SIGN, 1))
        out_t = sg.regular_type(4, 3)
        lin = el.EqLinear(in_t, out_t, rng)
        x = geo(rng.standard_normal((4, in_t.dim)), in_t)
        for g in D4:
            assert el.equivariance_residual(lin, g, x) <= 1e-10

    def test_type_mismatch(self):
        rng = np.random.default_rng(0)
        lin = el.EqLinear(sg.regular_type(4, 2), sg.regular_type(4, 2), rng)
        with pytest.raises(el.FeatureTypeError):
            lin(geo(np.zeros((1, 8)), sg.regular_type(4, 1)))

    def test_reprojection_is_noop(self):
        rng = np.random.default_rng(5)
        lin = el.EqLinear(sg.regular_type(4, 2), sg.regular_type(4, 3), rng)
        before = lin.weight.data.copy()
        lin._project_own()
        assert np.abs(lin.weight.data - before).max() <= 1e-12


class TestLiftConv:
    def test_1x1_kernel_blocks_identical(self):
        rng = np.random.default_rng(0)
        lift = el.LiftConv(1, 1, 4, kernel=1, rng=rng)
        w = lift.effective_weight().data  # (8, 1, 1, 1)
        assert np.allclose(w, w[0], atol=1e-14)
        img = geo(rng.random((1, 1, 5, 5)), sg.trivial_type(4, 1), spatial=True)
        out = lift(img)
        base = lift.base.data[0, 0, 0]
        bias = lift.field_bias.data[0]
        for gi in range(8):
            assert np.allclose(out.data[0, gi], base * img.data[0, 0] + bias, atol=1e-13)

    def test_3x3_delta_kernel_rotates(self):
        rng = np.random.default_rng(0)
        lift = el.LiftConv(1, 1, 4, kernel=3, rng=rng)
        lift.base.data[...] = 0.0
        lift.base.data[0, 0, 0] = 1.0  # single 1 at top-left (grid-flat layout)
        w = lift.effective_weight().data
        gi = DihedralElement(4, 1).index()
        expect = np.zeros((3, 3))
        expect[2, 0] = 1.0  # rotated to bottom-left
        assert np.array_equal(w[gi, 0], expect)

    @pytest.mark.parametrize("seed", range(3))
    def test_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        lift = el.LiftConv(4, 2, 4, kernel=2, rng=rng)
        x = geo(rng.standard_normal((2, 4, 8, 8)), sg.trivial_type(4, 4), spatial=True)
        for g in D4:
            assert el.equivariance_residual(lift, g, x) <= 1e-10

    def test_kernel_too_large(self):
        rng = np.random.default_rng(0)
        lift = el.LiftConv(1, 1, 4, kernel=5, rng=rng)
        with pytest.raises(ValueError):
            lift(geo(np.zeros((1, 1, 3, 3)), sg.trivial_type(4, 1), spatial=True))

    def test_requires_trivial_channels(self):
        rng = np.random.default_rng(0)
        lift = el.LiftConv(8, 1, 4, kernel=1, rng=rng)
        bad = geo(np.zeros((1, 8, 4, 4)), sg.regular_type(4, 1), spatial=True)
        with pytest.raises(el.FeatureTypeError):
            lift(bad)


class TestGroupConv:
    def test_identity_slice_delta_is_identity(self):
        rng = np.random.default_rng(0)
        gc = el.GroupConv(2, 2, 4, kernel=1, rng=rng)
        gc.base.data[...] = 0.0
        gc.field_bias.data[...] = 0.0
        e_idx = sg.identity(4).index()
        for f in range(2):
            gc.base.data[f, f, e_idx, 0] = 1.0
        x = geo(rng.standard_normal((2, 16, 5, 5)), sg.regular_type(4, 2), spatial=True)
        out = gc(x)
        assert np.abs(out.data - x.data).max() <= 1e-13

    def test_constant_field_stays_constant(self):
        rng = np.random.default_rng(1)
        gc = el.GroupConv(1, 1, 4, kernel=1, rng=rng)
        x = geo(np.ones((1, 8, 3, 3)), sg.regular_type(4, 1), spatial=True)
        out = gc(x).data.reshape(8, 9)
        assert np.abs(out - out[0]).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        gc = el.GroupConv(2, 3, 4, kernel=3, stride=2, rng=rng)
        x = geo(rng.standard_normal((2, 16, 7, 7)), sg.regular_type(4, 2), spatial=True)
        for g in D4:
            assert el.equivariance_residual(gc, g, x) <= 1e-10


class TestNonlinearityAndPool:
    def test_relu_commutes_with_action(self):
        rng = np.random.default_rng(0)
        ft = sg.ftype(8, (RepKind.TRIVIAL, 2), (RepKind.REGULAR, 2))
        x = geo(rng.standard_normal((3, ft.dim)), ft)
        for g in sg.elements(8):
            lhs = el.pointwise_relu(el.transform_geotensor(g, x))
            rhs = el.transform_geotensor(g, el.pointwise_relu(x))
            assert np.abs(lhs.data - rhs.data).max() <= 1e-12

    def test_negative_trivial_zeroed(self):
        x = geo(np.array([[-1.0, 2.0]]), sg.trivial_type(4, 2))
        assert np.array_equal(el.pointwise_relu(x).data, [[0.0, 2.0]])

    def test_rejects_standard_channels(self):
        x = geo(np.zeros((1, 2)), sg.ftype(4, (RepKind.STANDARD, 1)))
        with pytest.raises(el.FeatureTypeError):
            el.pointwise_relu(x)

    def test_pool_constant_field(self):
        x = geo(np.full((1, 8), 3.5), sg.regular_type(4, 1))
        assert np.allclose(el.group_pool(x).data, 3.5)

    def test_pool_one_hot_position_independent(self):
        for pos in range(8):
            v = np.zeros((1, 8))
            v[0, pos] = 1.0
            out = el.group_pool(geo(v, sg.regular_type(4, 1)))
            assert out.data[0, 0] == 1.0

    def test_pool_invariance_random(self):
        rng = np.random.default_rng(3)
        x = geo(rng.standard_normal((4, 24)), sg.regular_type(4, 3))
        ref = el.group_pool(x).data
        for g in D4:
            got = el.group_pool(el.transform_geotensor(g, x)).data
            assert np.abs(got - ref).max() <= 1e-12

    def test_pool_rejects_trivial(self):
        with pytest.raises(el.FeatureTypeError):
            el.group_pool(geo(np.zeros((1, 2)), sg.trivial_type(4, 2)))


class TestAttention:
    def make(self, rng, tokens=6, positional=True):
        return el.EqSelfAttention(2, 2, 2, 4, tokens=tokens, rng=rng, positional=positional)

    def test_single_token_is_value_map(self):
        rng = np.random.default_rng(0)
        att = self.make(rng, tokens=1, positional=False)
        x = geo(rng.standard_normal((2, 1, 16)), sg.regular_type(4, 2))
        out = att(x)
        expect = att.wv(geo(x.data.reshape(2, 16), sg.regular_type(4, 2))).data
        assert np.abs(out.data.reshape(2, 16) - expect).max() <= 1e-12

    def test_identical_tokens_uniform_weights(self):
        rng = np.random.default_rng(1)
        att = self.make(rng, positional=False)
        row = rng.standard_normal(16)
        x = geo(np.tile(row, (2, 6, 1)), sg.regular_type(4, 2))
        att(x)
        assert np.abs(att.last_weights - 1.0 / 6).max() <= 1e-12

    @pytest.mark.parametrize("n", [4, 8])
    def test_weights_invariant_outputs_equivariant(self, n):
        rng = np.random.default_rng(2)
        att = el.EqSelfAttention(2, 2, 3, n, tokens=5, rng=rng)
        x = geo(rng.standard_normal((2, 5, 4 * n)), sg.regular_type(n, 2))
        att(x)
        ref_w = att.last_weights.copy()
        for g in sg.elements(n):
            res = el.equivariance_residual(att, g, x)
            assert res <= 1e-10
            assert np.abs(att.last_weights - ref_w).max() <= 1e-10

    def test_heterogeneous_tokens_rejected(self):
        rng = np.random.default_rng(0)
        att = self.make(rng)
        with pytest.raises(el.FeatureTypeError):
            att(geo(np.zeros((1, 6, 8)), sg.regular_type(4, 1)))


class TestGradients:
    @pytest.mark.parametrize("seed", range(2))
    def test_layer_gradients(self, seed):
        rng = np.random.default_rng(seed)
        reg2 = sg.regular_type(4, 2)
        layers = {
            "linear": (el.EqLinear(reg2, sg.regular_type(4, 3), rng),
                       lambda: geo(rng.standard_normal((3, 16)), reg2)),
            "lift": (el.LiftConv(2, 2, 4, 2, rng=rng),
                     lambda: geo(rng.standard_normal((2, 2, 6, 6)), sg.trivial_type(4, 2), spatial=True)),
            "gconv": (el.GroupConv(2, 2, 4, 3, rng=rng),
                      lambda: geo(rng.standard_normal((2, 16, 5, 5)), reg2, spatial=True)),
            "attention": (el.EqSelfAttention(2, 2, 2, 4, tokens=4, rng=rng),
                          lambda: geo(rng.standard_normal((2, 4, 16)), reg2)),
        }
        for name, (layer, make_x) in layers.items():
            x = make_x()

            def loss_value():
                out = layer(x)
                return float((out.data ** 2).sum())

            dc.zero_grads(layer.parameters())
            out = layer(x)
            dc.sum_(out.tensor * out.tensor).backward()
            arrays = [p.data for _, p in layer.named_parameters()]
            numeric, masks = finite_diff_grad(loss_value, arrays, sample=30, rng=rng)
            for (pname, p), num, m in zip(layer.named_parameters(), numeric, masks):
                err = max_rel_error(p.grad, num, mask=m)
                assert err <= 1e-4, f"{name}.{pname}: {err}"


class TestD8Paths:
    def test_vector_layers_exact_for_d8(self):
        rng = np.random.default_rng(0)
        lin = el.EqLinear(sg.regular_type(8, 2), sg.regular_type(8, 2), rng)
        x = geo(rng.standard_normal((2, 32)), sg.regular_type(8, 2))
        for g in sg.elements(8):
            assert el.equivariance_residual(lin, g, x) <= 1e-10

    def test_conv_exact_on_pixel_subgroup(self):
        rng = np.random.default_rng(1)
        lift = el.LiftConv(1, 1, 8, kernel=2, rng=rng)
        x = geo(rng.standard_normal((1, 1, 8, 8)), sg.trivial_type(8, 1), spatial=True)
        for g in sg.elements(8):
            if g.is_exact_pixel():
                assert el.equivariance_residual(lift, g, x) <= 1e-10

    def test_interpolated_path_reported(self):
        # smooth input: interpolated 45-degree path stays within a loose bound
        rng = np.random.default_rng(2)
        lift = el.LiftConv(1, 2, 8, kernel=2, rng=rng)
        ii, jj = np.meshgrid(np.linspace(-1, 1, 16), np.linspace(-1, 1, 16), indexing="ij")
        img = np.exp(-4 * (ii**2 + jj**2)).reshape(1, 1, 16, 16)
        x = geo(img, sg.trivial_type(8, 1), spatial=True)
        g = sg.DihedralElement(8, 1)
        rel = el.equivariance_residual(lift, g, x) / np.abs(lift(x).data).max()
        assert rel < 0.05
