import numpy as np
import pytest

from eqmanip import diffcore as dc
from eqmanip.diffcore import Tensor, Parameter

from oracles import finite_diff_grad, max_rel_error, conv2d_reference


class TestForward:
    def test_relu(self):
        out = dc.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        out = dc.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_softmax_shift_invariance(self):
        x = np.array([1.0, -2.0, 0.5])
        a = dc.softmax(Tensor(x)).data
        b = dc.softmax(Tensor(x + 100.0)).data
        assert np.allclose(a, b, atol=1e-12)

    def test_conv_ones(self):
        # hand-summed sliding window: 2x2 window of ones over ones = 4
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = dc.conv2d(x, w)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data, 4.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1), (2, 0)])
    def test_conv_matches_reference(self, stride, pad):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        got = dc.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
        assert np.allclose(got, conv2d_reference(x, w, stride, pad), atol=1e-12)

    def test_conv_kernel_too_large(self):
        with pytest.raises(ValueError):
            dc.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))

    def test_log_domain_error(self):
        with pytest.raises(FloatingPointError):
            dc.log(Tensor([1.0, -1.0]))

    def test_add_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_maxpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = dc.maxpool2d(Tensor(x), 2)
        assert np.array_equal(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_validity_check(self):
        with pytest.raises(FloatingPointError):
            Tensor([1.0, np.inf]).assert_finite()


class TestBackward:
    def test_square(self):
        x = Parameter(3.0)
        (x * x).backward()
        assert np.allclose(x.grad, 6.0)

    def test_sum_softmax_is_constant(self):
        x = Parameter(np.array([0.3, -1.2, 2.0]))
        dc.sum_(dc.softmax(x)).backward()
        assert np.abs(x.grad).max() <= 1e-12

    def test_unknown_node(self):
        x = Tensor([1.0])
        with pytest.raises(dc.UnknownNodeError):
            x.backward()

    def test_repeat_after_zero_is_deterministic(self):
        x = Parameter(np.array([1.0, 2.0]))

        def run():
            x.zero_grad()
            dc.sum_(dc.tanh(x * x)).backward()
            return x.grad.copy()

        assert np.array_equal(run(), run())

    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        w1 = Parameter(rng.standard_normal((4, 3)) * 0.5)
        b1 = Parameter(rng.standard_normal(4) * 0.1)
        w2 = Parameter(rng.standard_normal((2, 4)) * 0.5)
        x = rng.standard_normal((5, 3))

        def loss_value():
            h = np.tanh(x @ w1.data.T + b1.data)
            y = h @ w2.data.T
            return float((y * y).sum())

        def forward():
            h = dc.tanh(dc.add(dc.matmul(Tensor(x), dc.transpose(w1, (1, 0))), b1))
            y = dc.matmul(h, dc.transpose(w2, (1, 0)))
            return dc.sum_(y * y)

        dc.zero_grads([w1, b1, w2])
        forward().backward()
        numeric, _ = finite_diff_grad(loss_value, [w1.data, b1.data, w2.data])
        for p, num in zip([w1, b1, w2], numeric):
            assert max_rel_error(p.grad, num) <= 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_primitive_grads(self, seed):
        rng = np.random.default_rng(100 + seed)
        conv_w = rng.standard_normal((2, 3, 3, 3))
        cases = {
            "conv": lambda t: dc.conv2d(t, Tensor(conv_w), stride=2, pad=1),
            "softmax": lambda t: dc.softmax(t, axis=-1),
            "maxsum": lambda t: dc.max_(t, axis=1, keepdims=True),
            "softplus": dc.softplus,
            "sqrt": lambda t: dc.sqrt(t * t + 1.0),
            "clip": lambda t: dc.clip(t, -0.5, 0.5),
            "take": lambda t: dc.take(t, np.array([0, 2, 2, 1]), axis=1),
            "narrow": lambda t: dc.narrow(t, 1, 1, 2),
            "mean": lambda t: dc.mean(t, axis=0),
            "maxpool": lambda t: dc.maxpool2d(dc.reshape(t, (1, 3, 4, 4)), 2) if t.data.size == 48 else None,
        }
        for name, fn in cases.items():
            shape = (3, 4, 4) if name in ("conv", "maxpool") else (3, 4)
            if name == "conv":
                shape = (2, 3, 5, 5)
            if name == "maxpool":
                shape = (3, 16)
            x = Parameter(rng.standard_normal(shape))

            def scalar():
                return float(np.sum(np.asarray(fn(Tensor(x.data)).data) ** 2))

            x.zero_grad()
            out = fn(x)
            dc.sum_(out * out).backward()
            numeric, masks = finite_diff_grad(scalar, [x.data], sample=40, rng=rng)
            err = max_rel_error(x.grad, numeric[0], mask=masks[0])
            assert err <= 1e-4, f"{name}: rel err {err}"

    def test_sparse_apply_grad(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(2)
        mat = sp.random(6, 4, density=0.5, random_state=1, format="csr")
        x = Parameter(rng.standard_normal(4))
        y = dc.sparse_apply(mat, x)
        dc.sum_(y * y).backward()
        dense = mat.toarray()
        expect = 2 * dense.T @ (dense @ x.data)
        assert np.allclose(x.grad, expect, atol=1e-10)


class TestAdam:
    def test_first_step_magnitude(self):
        p = Parameter(0.0)
        p.grad = np.asarray(1.0)
        dc.adam_step([p], lr=1e-3)
        assert abs(p.data + 1e-3) < 1e-8

    def test_zero_grad_no_move(self):
        p = Parameter(np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        dc.adam_step([p], lr=1e-3)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_quadratic_descent(self):
        # two identical-gradient steps decrease 0.5*(w-3)^2
        p = Parameter(0.0)

        def loss():
            return 0.5 * (p.data - 3.0) ** 2

        before = loss()
        for _ in range(2):
            p.grad = np.asarray(p.data - 3.0)
            dc.adam_step([p], lr=1e-2)
        assert loss() < before


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        named = [("a.w", rng.standard_normal((3, 2))), ("b.b", rng.standard_normal(5))]
        path = tmp_path / "ck.bin"
        dc.save_checkpoint(path, named)
        loaded = dc.load_checkpoint(path)
        assert list(loaded) == ["a.w", "b.b"]
        for name, arr in named:
            assert np.array_equal(loaded[name], arr)

    def test_restore_verifies_shape(self, tmp_path):
        path = tmp_path / "ck.bin"
        dc.save_checkpoint(path, [("w", np.zeros((2, 2)))])
        p = Parameter(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            dc.restore_into([("w", p)], dc.load_checkpoint(path))

    def test_restore_verifies_names(self, tmp_path):
        path = tmp_path / "ck.bin"
        dc.save_checkpoint(path, [("w", np.zeros(2))])
        with pytest.raises(KeyError):
            dc.restore_into([("missing", Parameter(np.zeros(2)))], dc.load_checkpoint(path))
