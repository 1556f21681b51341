"""Autodiff engine: forward values against hand/loop oracles, gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxsampler import tensor as T
from voxsampler.errors import ContractError, DimensionError, NumericError
from voxsampler.tensor import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def conv3d_loops(x, w, stride, padding):
    """Direct nested-loop cross-correlation (independent of the im2col path)."""
    b, cin, n = x.shape[:3]
    cout, _, k = w.shape[:3]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    o = (n + 2 * padding - k) // stride + 1
    out = np.zeros((b, cout, o, o, o))
    for bi in range(b):
        for co in range(cout):
            for i in range(o):
                for j in range(o):
                    for l in range(o):
                        patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k,
                                   l * stride:l * stride + k]
                        out[bi, co, i, j, l] = np.sum(patch * w[co])
    return out


def conv3d_transposed_loops(y, w, stride, padding):
    """Scatter form of the transposed convolution, kernel (C_in, C_out, k, k, k)."""
    b, cin, m = y.shape[:3]
    cout, k = w.shape[1], w.shape[2]
    full = (m - 1) * stride + k
    vol = np.zeros((b, cout, full, full, full))
    for bi in range(b):
        for ci in range(cin):
            for i in range(m):
                for j in range(m):
                    for l in range(m):
                        vol[bi, :, i * stride:i * stride + k, j * stride:j * stride + k,
                            l * stride:l * stride + k] += y[bi, ci, i, j, l] * w[ci]
    n = full - 2 * padding
    return vol[:, :, padding:padding + n, padding:padding + n, padding:padding + n]


class TestLinear:
    def test_identity_weight(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_dot_product(self):
        out = T.linear(Tensor([[[1.0, 2.0]]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, [[[3.0]]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        x, w, b = leaf(rng, 2, 4, 3), leaf(rng, 3, 5), leaf(rng, 5)
        assert T.gradcheck(lambda: T.tsum(T.square(T.linear(x, w, b))), [x, w, b]) < 1e-6


class TestConv3d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 4, 4, 4))
        out = T.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_sum(self):
        out = T.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.item() == 27.0

    @pytest.mark.parametrize("n,k,stride,padding", [(5, 3, 1, 1), (5, 3, 2, 0), (4, 2, 2, 0), (3, 1, 1, 0)])
    def test_matches_loop_oracle(self, n, k, stride, padding):
        rng = np.random.default_rng(n + k + stride)
        x, w = rng.normal(size=(2, 3, n, n, n)), rng.normal(size=(4, 3, k, k, k))
        np.testing.assert_allclose(T.conv3d(Tensor(x), Tensor(w), stride, padding).data,
                                   conv3d_loops(x, w, stride, padding), rtol=0, atol=1e-12)

    def test_non_integral_extent(self):
        with pytest.raises(DimensionError):
            T.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))

    @pytest.mark.parametrize("stride,padding,k,n", [(1, 1, 3, 3), (2, 0, 2, 4)])
    def test_gradients(self, stride, padding, k, n):
        rng = np.random.default_rng(3)
        x, w = leaf(rng, 1, 2, n, n, n), leaf(rng, 2, 2, k, k, k)
        assert T.gradcheck(lambda: T.tsum(T.square(T.conv3d(x, w, stride, padding))), [x, w]) < 1e-6


class TestConv3dTransposed:
    def test_unit_kernel_identity(self):
        y = np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3))
        out = T.conv3d_transposed(Tensor(y), Tensor(np.ones((1, 1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, y)

    @pytest.mark.parametrize("m,k,stride,padding", [(2, 2, 2, 0), (3, 3, 1, 1), (3, 3, 2, 1)])
    def test_matches_scatter_oracle_and_extent(self, m, k, stride, padding):
        rng = np.random.default_rng(m * k)
        y, w = rng.normal(size=(2, 3, m, m, m)), rng.normal(size=(3, 2, k, k, k))
        out = T.conv3d_transposed(Tensor(y), Tensor(w), stride, padding)
        assert out.shape[2] == (m - 1) * stride - 2 * padding + k
        np.testing.assert_allclose(out.data, conv3d_transposed_loops(y, w, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("n,k,stride,padding", [(4, 2, 2, 0), (5, 3, 1, 1), (5, 3, 2, 1), (6, 2, 2, 0)])
    def test_adjoint_identity(self, n, k, stride, padding):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, n, n, n))
        w = rng.normal(size=(4, 3, k, k, k))          # conv3d: (C_out, C_in, ...)
        cx = T.conv3d(Tensor(x), Tensor(w), stride, padding).data
        y = rng.normal(size=cx.shape)
        # same kernel array, read as (C_in=4, C_out=3) by the transposed op
        ty = T.conv3d_transposed(Tensor(y), Tensor(w), stride, padding).data
        assert ty.shape == x.shape
        assert abs(np.vdot(cx, y) - np.vdot(x, ty)) <= 1e-10 * max(1.0, abs(np.vdot(cx, y)))

    def test_linear_adjoint(self):
        rng = np.random.default_rng(8)
        x, w = rng.normal(size=(1, 4, 3)), rng.normal(size=(3, 5))
        y = rng.normal(size=(1, 4, 5))
        lhs = np.vdot(T.linear(Tensor(x), Tensor(w)).data, y)
        assert abs(lhs - np.vdot(x, y @ w.T)) < 1e-10

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x, w = leaf(rng, 1, 2, 2, 2, 2), leaf(rng, 2, 3, 2, 2, 2)
        assert T.gradcheck(lambda: T.tsum(T.square(T.conv3d_transposed(x, w, 2, 0))), [x, w]) < 1e-6
        x, w = leaf(rng, 1, 2, 3, 3, 3), leaf(rng, 2, 1, 3, 3, 3)
        assert T.gradcheck(lambda: T.tsum(T.square(T.conv3d_transposed(x, w, 1, 1))), [x, w]) < 1e-6


class TestActivations:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_open_ranges(self):
        x = Tensor([-1000.0, -40.0, 0.0, 40.0, 1000.0])
        s, t = T.sigmoid(x).data, T.tanh(x).data
        assert np.all((s > 0) & (s < 1))
        assert np.all((t > -1) & (t < 1))

    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.exp, T.square])
    def test_gradients_smooth(self, op):
        x = leaf(np.random.default_rng(5), 3, 4)
        assert T.gradcheck(lambda: T.tsum(op(x) * op(x)), [x]) < 1e-6

    def test_relu_gradient_away_from_kink(self):
        x = Tensor(np.array([-1.5, -0.2, 0.3, 2.0]), requires_grad=True)
        assert T.gradcheck(lambda: T.tsum(T.square(T.relu(x))), [x]) < 1e-6

    def test_log_sqrt_div_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        assert T.gradcheck(lambda: T.tsum(T.log(x) * T.sqrt(y) / (x + y)), [x, y]) < 1e-6


class TestStructuralOps:
    def test_broadcast_gradients(self):
        rng = np.random.default_rng(9)
        a, b = leaf(rng, 3, 1, 4), leaf(rng, 5, 1)
        assert T.gradcheck(lambda: T.tsum(T.square(a * b - b + a)), [a, b]) < 1e-6

    def test_indexing_and_reshape(self):
        rng = np.random.default_rng(10)
        a = leaf(rng, 4, 6)
        idx = np.array([0, 2, 2, 3])
        assert T.gradcheck(lambda: T.tsum(T.square(T.take_rows(a, idx))), [a]) < 1e-6
        assert T.gradcheck(lambda: T.tsum(T.square(a[1:3, ::2].reshape(-1))), [a]) < 1e-6
        assert T.gradcheck(lambda: T.tsum(T.square(T.transpose(a) @ a)), [a]) < 1e-6

    def test_concat_stack_mean(self):
        rng = np.random.default_rng(11)
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        assert T.gradcheck(lambda: T.tsum(T.square(T.concat([a, b], axis=1))), [a, b]) < 1e-6
        assert T.gradcheck(lambda: T.tsum(T.square(T.tmean(T.stack([a, b]), axis=0))), [a, b]) < 1e-6

    def test_row_norm(self):
        a = leaf(np.random.default_rng(12), 5, 3)
        np.testing.assert_allclose(T.row_norm(a).data, np.linalg.norm(a.data, axis=1), rtol=1e-15)
        assert T.gradcheck(lambda: T.tsum(T.row_norm(a)), [a]) < 1e-6

    def test_row_norm_zero_row_subgradient(self):
        a = Tensor(np.zeros((1, 3)), requires_grad=True)
        T.tsum(T.row_norm(a)).backward()
        np.testing.assert_array_equal(a.grad, np.zeros((1, 3)))


class TestGridMaxPool:
    def test_matches_loop_oracle_with_empty_cells(self):
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(2, 20, 3))
        cells = rng.integers(0, 6, size=(2, 20))
        out = T.grid_max_pool(Tensor(feats), cells, 8).data
        for b in range(2):
            for c in range(8):
                sel = feats[b][cells[b] == c]
                expect = sel.max(axis=0) if len(sel) else np.zeros(3)
                np.testing.assert_array_equal(out[b, :, c], expect)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        f = leaf(rng, 1, 12, 2)
        cells = rng.integers(0, 4, size=(1, 12))
        assert T.gradcheck(lambda: T.tsum(T.square(T.grid_max_pool(f, cells, 4))), [f]) < 1e-6

    def test_tied_maxima_split_gradient(self):
        f = Tensor(np.array([[[1.0], [1.0], [0.0]]]), requires_grad=True)
        T.tsum(T.grid_max_pool(f, np.array([[0, 0, 0]]), 1)).backward()
        np.testing.assert_array_equal(f.grad.reshape(-1), [0.5, 0.5, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_permutation_and_duplication_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, 30))
        feats = rng.normal(size=(1, p, 4))
        cells = rng.integers(0, 5, size=(1, p))
        base = T.grid_max_pool(Tensor(feats), cells, 5).data
        perm = rng.permutation(p)
        np.testing.assert_array_equal(T.grid_max_pool(Tensor(feats[:, perm]), cells[:, perm], 5).data, base)
        dup = np.concatenate([np.arange(p), rng.integers(0, p, size=p)])
        np.testing.assert_array_equal(T.grid_max_pool(Tensor(feats[:, dup]), cells[:, dup], 5).data, base)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.tsum(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(w * w).backward()
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_second_backward_is_error(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(w * w)
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_nan_detection(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])
        with pytest.raises(NumericError):
            T.log(Tensor([0.0]))

    def test_accumulation_and_zero_grad(self):
        w = Tensor([3.0], requires_grad=True)
        T.tsum(w * 2.0).backward()
        T.tsum(w * 2.0).backward()
        np.testing.assert_array_equal(w.grad, [4.0])
        w.zero_grad()
        assert w.grad is None or not np.any(w.grad)

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = w * 3.0
        assert not y.requires_grad and y._parents == ()

    def test_ndarray_left_operand(self):
        w = Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(np.array([1.0, 2.0, 3.0]) * w)
        assert isinstance(loss, Tensor)
        loss.backward()
        np.testing.assert_array_equal(w.grad, [1.0, 2.0, 3.0])

    def test_deterministic(self):
        rng = np.random.default_rng(15)
        x, w = rng.normal(size=(1, 2, 4, 4, 4)), rng.normal(size=(3, 2, 3, 3, 3))
        a = T.conv3d(Tensor(x), Tensor(w), 1, 1).data
        b = T.conv3d(Tensor(x), Tensor(w), 1, 1).data
        assert a.tobytes() == b.tobytes()
