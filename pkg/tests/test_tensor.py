"""Autodiff core: forward oracles and gradient checks.

Matmul is checked against a plain triple loop, gradients against central
finite differences in float64. Op-specific edge rules (tie-breaking,
broadcasting, error taxonomy) get their own cases.
"""

import numpy as np
import pytest

from clipcontext import tensor as T
from clipcontext.errors import (
    DegenerateInputError,
    GraphConsumedError,
    NumericError,
    ShapeError,
)


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference matmul: explicit triple loop, no BLAS."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def _safe_normal(rng, shape, margin=0.05, push=0.25):
    """Normal draws nudged away from zero so relu/max kinks stay clear."""
    x = rng.normal(size=shape)
    small = np.abs(x) < margin
    x = x + push * np.sign(x) * small
    x[x == 0] = push
    return x


class TestMatmul:
    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n, k, m = rng.integers(1, 7, size=3)
            a = rng.normal(size=(n, k))
            b = rng.normal(size=(k, m))
            got = T.matmul(T.tensor(a, np.float64), T.tensor(b, np.float64)).data
            np.testing.assert_allclose(got, matmul_loops(a, b), rtol=1e-12)

    def test_batched_matches_per_item_loop(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        got = T.matmul(T.tensor(a, np.float64), T.tensor(b, np.float64)).data
        for i in range(4):
            np.testing.assert_allclose(got[i], matmul_loops(a[i], b[i]), rtol=1e-12)

    def test_batched_times_shared_weight(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(3, 2, 4))
        w = rng.normal(size=(4, 6))
        got = T.matmul(T.tensor(a, np.float64), T.tensor(w, np.float64)).data
        for i in range(3):
            np.testing.assert_allclose(got[i], matmul_loops(a[i], w), rtol=1e-12)

    def test_inner_dim_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 2))))

    def test_dtype_mismatch_raises(self):
        a = T.tensor(np.zeros((2, 2)), np.float32)
        b = T.tensor(np.zeros((2, 2)), np.float64)
        with pytest.raises(ShapeError):
            T.matmul(a, b)


class TestGradientsAgainstFiniteDifferences:
    """Every differentiable op, f64, eps 1e-5, rel err < 1e-4, many seeds."""

    N_SEEDS = 100

    def _check(self, build, params, tol=1e-4):
        err = T.finite_diff_check(build, params, eps=1e-5)
        assert err < tol, f"max rel err {err:.3e}"

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_op_suite(self, seed):
        rng = np.random.default_rng(seed)
        x = T.tensor(_safe_normal(rng, (3, 4)), np.float64, requires_grad=True)
        y = T.tensor(_safe_normal(rng, (3, 4)), np.float64, requires_grad=True)
        w = T.tensor(rng.normal(size=(4, 3)), np.float64, requires_grad=True)
        bias = T.tensor(rng.normal(size=(4,)), np.float64, requires_grad=True)
        probe = T.tensor(rng.normal(size=(3, 4)), np.float64)
        probe2 = T.tensor(rng.normal(size=(3, 3)), np.float64)

        cases = {
            "add": lambda: T.sum_all(T.mul(T.add(x, y), probe)),
            "sub": lambda: T.sum_all(T.mul(T.sub(x, y), probe)),
            "mul": lambda: T.sum_all(T.mul(T.mul(x, y), probe)),
            "bias": lambda: T.sum_all(T.mul(T.add(x, bias), probe)),
            "scale": lambda: T.sum_all(T.mul(T.scale(x, -1.7), probe)),
            "relu": lambda: T.sum_all(T.mul(T.relu(x), probe)),
            "exp": lambda: T.sum_all(T.mul(T.exp(x), probe)),
            "matmul": lambda: T.sum_all(T.mul(T.matmul(x, w), probe2)),
            "softmax": lambda: T.sum_all(T.mul(T.softmax_rows(x), probe)),
            "l2norm": lambda: T.sum_all(T.mul(T.l2_normalize(x), probe)),
            "layernorm": lambda: T.sum_all(T.mul(T.layer_norm_rows(x), probe)),
            "sum_axis": lambda: T.sum_all(T.exp(T.sum_axis(x, 0))),
            "max_axis": lambda: T.sum_all(T.exp(T.max_axis(x, 1))),
            "slice": lambda: T.sum_all(T.exp(T.slice_axis(x, 1, 1, 3))),
            "transpose": lambda: T.sum_all(T.mul(T.transpose(x), T.transpose(probe))),
            "reshape": lambda: T.sum_all(T.exp(T.reshape(x, (4, 3)))),
            "diag": lambda: T.sum_all(T.exp(T.diag_part(T.matmul(x, w)))),
            "gather": lambda: T.sum_all(T.exp(T.gather_rows(x, [0, 2, 2]))),
            "log": lambda: T.sum_all(T.log(T.add_scalar(T.mul(x, x), 0.5))),
        }
        for name, build in cases.items():
            params = [("x", x)] + ([("y", y)] if name in ("add", "sub", "mul") else [])
            if name == "matmul":
                params.append(("w", w))
            if name == "bias":
                params.append(("b", bias))
            self._check(build, params)

    def test_batched_matmul_grads(self):
        rng = np.random.default_rng(11)
        a = T.tensor(rng.normal(size=(2, 3, 4)), np.float64, requires_grad=True)
        b = T.tensor(rng.normal(size=(2, 4, 2)), np.float64, requires_grad=True)
        w = T.tensor(rng.normal(size=(4, 5)), np.float64, requires_grad=True)
        self._check(lambda: T.sum_all(T.exp(T.scale(T.matmul(a, b), 0.1))), [("a", a), ("b", b)])
        self._check(lambda: T.sum_all(T.exp(T.scale(T.matmul(a, w), 0.1))), [("a", a), ("w", w)])

    def test_scatter_and_concat_grads(self):
        rng = np.random.default_rng(12)
        v = T.tensor(rng.normal(size=(3,)), np.float64, requires_grad=True)
        x = T.tensor(rng.normal(size=(2, 3)), np.float64, requires_grad=True)
        y = T.tensor(rng.normal(size=(1, 3)), np.float64, requires_grad=True)
        z = T.tensor(rng.normal(size=(2, 2)), np.float64, requires_grad=True)
        self._check(lambda: T.sum_all(T.exp(T.scatter_rows(v, [4, 0, 2], 6, fill=-1.0))), [("v", v)])
        self._check(lambda: T.sum_all(T.exp(T.concat_rows([x, y]))), [("x", x), ("y", y)])
        self._check(lambda: T.sum_all(T.exp(T.concat_last([x, z]))), [("x", x), ("z", z)])

    def test_dropout_grad_with_replayed_mask(self):
        # Rebuilding the rng inside f replays the same mask, so central
        # differences see a fixed linear map.
        x = T.tensor(np.linspace(0.5, 2.0, 12).reshape(3, 4), np.float64, requires_grad=True)

        def build():
            rng = np.random.default_rng(123)
            return T.sum_all(T.exp(T.dropout(x, 0.4, rng, train=True)))

        self._check(build, [("x", x)])


class TestBackwardSemantics:
    def test_fanout_accumulates(self):
        x = T.tensor([1.0, -2.0, 3.0], np.float64, requires_grad=True)
        loss = T.sum_all(T.add(T.relu(x), T.scale(x, 2.0)))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [3.0, 2.0, 3.0])

    def test_second_backward_raises(self):
        x = T.tensor([1.0], requires_grad=True)
        loss = T.sum_all(x)
        T.backward(loss)
        with pytest.raises(GraphConsumedError):
            T.backward(loss)

    def test_non_scalar_root_raises(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.scale(x, 2.0))

    def test_intermediate_grads_are_freed(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        mid = T.scale(x, 3.0)
        loss = T.sum_all(mid)
        T.backward(loss)
        assert mid.grad is None
        assert x.grad is not None

    def test_constant_branches_get_no_grad(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        c = T.tensor([5.0, 5.0])
        loss = T.sum_all(T.mul(x, c))
        T.backward(loss)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 5.0])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.uniform(-50, 50, size=(4, 6))
            y = T.softmax_rows(T.tensor(x, np.float64)).data
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
            assert (y >= 0).all()

    def test_large_gap_is_stable(self):
        y = T.softmax_rows(T.tensor([[1000.0, 0.0]], np.float64)).data
        np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-12)

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            T.softmax_rows(T.tensor([[np.nan, 0.0]]))


class TestNormalise:
    def test_unit_norm_rows(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 7))
        y = T.l2_normalize(T.tensor(x, np.float64)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_zero_vector_raises(self):
        with pytest.raises(DegenerateInputError):
            T.l2_normalize(T.tensor([[0.0, 0.0]]))

    def test_layer_norm_stats(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 9))
        y = T.layer_norm_rows(T.tensor(x, np.float64)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


class TestStructuralOps:
    def test_bias_add_gradient_is_column_sum(self):
        rng = np.random.default_rng(3)
        x = T.tensor(rng.normal(size=(3, 4)), np.float64, requires_grad=True)
        b = T.tensor(rng.normal(size=(4,)), np.float64, requires_grad=True)
        T.backward(T.sum_all(T.add(x, b)))
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 2))))

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        cat = T.concat_rows([T.tensor(a, np.float64), T.tensor(b, np.float64)])
        np.testing.assert_array_equal(T.slice_axis(cat, 0, 2, 6).data, b)
        np.testing.assert_array_equal(T.slice_row(cat, 0).data, a[0])

    def test_max_axis_ties_route_to_first(self):
        x = T.tensor([[2.0, 5.0, 5.0]], np.float64, requires_grad=True)
        T.backward(T.sum_all(T.max_axis(x, 1)))
        np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])

    def test_gather_repeats_accumulate(self):
        x = T.tensor(np.eye(3), np.float64, requires_grad=True)
        T.backward(T.sum_all(T.gather_rows(x, [1, 1, 0])))
        np.testing.assert_allclose(x.grad.sum(axis=1), [3.0, 6.0, 0.0])

    def test_scatter_fill_positions_carry_no_gradient(self):
        v = T.tensor([1.0, 2.0], np.float64, requires_grad=True)
        out = T.scatter_rows(v, [3, 1], 5, fill=-9.0)
        np.testing.assert_allclose(out.data, [-9.0, 2.0, -9.0, 1.0, -9.0])
        T.backward(T.sum_all(T.mul(out, out)))
        np.testing.assert_allclose(v.grad, [2.0, 4.0])

    def test_scatter_duplicate_positions_raise(self):
        with pytest.raises(ShapeError):
            T.scatter_rows(T.tensor([1.0, 2.0]), [1, 1], 4)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = T.tensor(np.ones((4, 4)))
        assert T.dropout(x, 0.5, np.random.default_rng(0), train=False) is x
        assert T.dropout(x, 0.0, np.random.default_rng(0), train=True) is x

    def test_train_mode_masks_and_rescales(self):
        rng = np.random.default_rng(5)
        x = T.tensor(np.ones((200, 50)), np.float64, requires_grad=True)
        out = T.dropout(x, 0.3, rng, train=True)
        vals = np.unique(out.data)
        np.testing.assert_allclose(vals, [0.0, 1.0 / 0.7], atol=1e-12)
        keep_frac = (out.data != 0).mean()
        assert abs(keep_frac - 0.7) < 0.02
        T.backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad != 0, out.data != 0)

    def test_invalid_rate_raises(self):
        from clipcontext.errors import ContractError

        with pytest.raises(ContractError):
            T.dropout(T.tensor([1.0]), 1.0, np.random.default_rng(0), train=True)

    def test_same_seed_same_mask(self):
        x = T.tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.5, np.random.default_rng(9), train=True).data
        b = T.dropout(x, 0.5, np.random.default_rng(9), train=True).data
        np.testing.assert_array_equal(a, b)
