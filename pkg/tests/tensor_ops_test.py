import unittest

import numpy as np

from vitkd.module.tensor.tensor import (Tape, Tensor, backward, constant, conv3x3, layer_norm,
                                        matmul, no_grad, precision, set_debug, softmax_rows)
from vitkd.util.errors import ContractError, NumericError, ShapeError


def _leaf(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class MatmulTest(unittest.TestCase):
    def test_identity(self):
        out = matmul(constant(np.eye(2)), constant([[1, 2], [3, 4]]))
        np.testing.assert_array_equal([[1, 2], [3, 4]], out.data)

    def test_column(self):
        out = matmul(constant([[1, 2], [3, 4]]), constant([[5], [6]]))
        np.testing.assert_array_equal([[17], [39]], out.data)

    def test_zero(self):
        out = matmul(constant(np.zeros((3, 2))), constant(np.ones((2, 4))))
        np.testing.assert_array_equal(np.zeros((3, 4)), out.data)

    def test_mismatch(self):
        with self.assertRaises(ShapeError) as context:
            matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))
        self.assertIn("(2, 3) @ (2, 3)", str(context.exception))

    def test_backward_rules(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4, 2)))
            weights = rng.standard_normal((3, 2))
            with Tape() as tape:
                tape.backward((matmul(a, b) * constant(weights)).sum())
        np.testing.assert_allclose(weights @ b.data.T, a.grad, atol=1e-12)
        np.testing.assert_allclose(a.data.T @ weights, b.grad, atol=1e-12)

    def test_shared_weight_over_batch(self):
        rng = np.random.default_rng(1)
        with precision(np.float64):
            x, w = _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.standard_normal((4, 5)))
            with Tape() as tape:
                tape.backward(matmul(x, w).sum())
        expected = x.data.reshape(-1, 4).T @ np.ones((6, 5))
        np.testing.assert_allclose(expected, w.grad, atol=1e-12)


class SoftmaxTest(unittest.TestCase):
    def test_symmetric(self):
        np.testing.assert_allclose([0.5, 0.5], softmax_rows(constant([0.0, 0.0])).data)

    def test_log_three(self):
        out = softmax_rows(constant([np.log(3.0), 0.0])).data
        np.testing.assert_allclose([0.75, 0.25], out, atol=1e-6)

    def test_shift_invariant(self):
        x = np.random.default_rng(2).standard_normal((5, 7))
        np.testing.assert_allclose(softmax_rows(constant(x)).data,
                                   softmax_rows(constant(x + 123.0)).data, atol=1e-6)

    def test_rows_are_distributions(self):
        out = softmax_rows(constant(np.random.default_rng(3).standard_normal((4, 6, 9)) * 50))
        self.assertTrue(np.all(out.data >= 0) and np.all(out.data <= 1))
        np.testing.assert_allclose(np.ones((4, 6)), out.data.sum(axis=-1), atol=1e-5)

    def test_large_logits_stay_finite(self):
        out = softmax_rows(constant([1000.0, 0.0, -1000.0]))
        self.assertTrue(np.all(np.isfinite(out.data)))
        self.assertAlmostEqual(1.0, float(out.data[0]), places=6)


class LayerNormTest(unittest.TestCase):
    def test_constant_slice(self):
        out = layer_norm(constant([5.0, 5.0, 5.0]), constant(np.ones(3)), constant(np.zeros(3)))
        np.testing.assert_allclose(np.zeros(3), out.data, atol=1e-6)

    def test_plus_minus_one(self):
        out = layer_norm(constant([1.0, -1.0]), constant(np.ones(2)), constant(np.zeros(2)),
                         eps=1e-12)
        np.testing.assert_allclose([1.0, -1.0], out.data, atol=1e-5)

    def test_zero_gain(self):
        beta = np.array([0.5, -2.0, 3.0])
        out = layer_norm(constant(np.random.default_rng(4).standard_normal((4, 3))),
                         constant(np.zeros(3)), constant(beta))
        np.testing.assert_allclose(np.tile(beta, (4, 1)), out.data)

    def test_normalized(self):
        out = layer_norm(constant(np.random.default_rng(5).standard_normal((6, 16)) * 4 + 2),
                         constant(np.ones(16)), constant(np.zeros(16))).data
        np.testing.assert_allclose(np.zeros(6), out.mean(axis=-1), atol=1e-5)
        np.testing.assert_allclose(np.ones(6), out.var(axis=-1), atol=1e-4)


class Conv3x3Test(unittest.TestCase):
    def test_center_identity(self):
        x = np.random.default_rng(6).standard_normal((1, 5, 4))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = conv3x3(constant(x), constant(kernel), constant(np.zeros(1)))
        np.testing.assert_allclose(x, out.data, atol=1e-6)

    def test_window_sum(self):
        out = conv3x3(constant(np.ones((1, 5, 5))), constant(np.ones((1, 1, 3, 3))),
                      constant(np.zeros(1))).data
        self.assertAlmostEqual(9.0, float(out[0, 2, 2]))
        self.assertAlmostEqual(4.0, float(out[0, 0, 0]))

    def test_zero_kernel(self):
        out = conv3x3(constant(np.ones((2, 3, 3))), constant(np.zeros((3, 2, 3, 3))),
                      constant([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(np.broadcast_to([[[1.0]], [[2.0]], [[3.0]]], (3, 3, 3)), out)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        x, kernel, bias = rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 2, 3, 3)), \
            rng.standard_normal(3)
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 4, 3))
        for out_channel in range(3):
            for row in range(4):
                for col in range(3):
                    window = padded[:, row:row + 3, col:col + 3]
                    expected[out_channel, row, col] = \
                        (window * kernel[out_channel]).sum() + bias[out_channel]
        with precision(np.float64):
            out = conv3x3(constant(x), constant(kernel), constant(bias)).data
        np.testing.assert_allclose(expected, out, atol=1e-10)

    def test_batched_equals_unbatched(self):
        rng = np.random.default_rng(8)
        x, kernel, bias = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3)), \
            np.zeros(2)
        batched = conv3x3(constant(x), constant(kernel), constant(bias)).data
        for index in range(3):
            single = conv3x3(constant(x[index]), constant(kernel), constant(bias)).data
            np.testing.assert_allclose(single, batched[index], atol=1e-6)


class BackwardTest(unittest.TestCase):
    def test_sum_of_squares(self):
        with precision(np.float64):
            x = _leaf([1.0, -2.0, 3.0])
            backward(x.square().sum())
        np.testing.assert_allclose([2.0, -4.0, 6.0], x.grad)

    def test_independent_input_gets_zero(self):
        x, y = _leaf([1.0, 2.0]), _leaf([3.0, 4.0])
        backward(y.square().sum())
        np.testing.assert_array_equal(np.zeros(2), x.grad)

    def test_shared_input_accumulates(self):
        with precision(np.float64):
            x = _leaf([0.5, -1.5])
            backward((x * x + x * 3.0).sum())
        np.testing.assert_allclose(2.0 * x.data + 3.0, x.grad)

    def test_sum_of_losses_equals_sum_of_gradients(self):
        rng = np.random.default_rng(9)
        with precision(np.float64):
            x = _leaf(rng.standard_normal((3, 4)))
            w = constant(rng.standard_normal((4, 4)))
            backward(softmax_rows(matmul(x, w)).square().sum() + x.sum() * 2.0)
            joint = x.grad.copy()
            x.zero_grad()
            backward(softmax_rows(matmul(x, w)).square().sum())
            backward(x.sum() * 2.0)
        np.testing.assert_allclose(joint, x.grad, atol=1e-6)

    def test_non_scalar_loss(self):
        x = _leaf([1.0, 2.0])
        with self.assertRaises(ContractError):
            backward(x * 2.0)

    def test_tape_cleared_after_backward(self):
        x = _leaf([1.0, 2.0])
        loss = x.square().sum()
        backward(loss)
        with self.assertRaises(ContractError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        x = _leaf([1.0, 2.0])
        with no_grad():
            out = (x * 2.0).sum()
        self.assertFalse(out.requires_grad)
        with self.assertRaises(ContractError):
            backward(out)

    def test_deterministic(self):
        x = np.random.default_rng(10).standard_normal((4, 8))
        first = softmax_rows(matmul(constant(x), constant(x.T))).data
        second = softmax_rows(matmul(constant(x), constant(x.T))).data
        self.assertTrue(np.array_equal(first, second))


class EngineStateTest(unittest.TestCase):
    def tearDown(self):
        set_debug(None)

    def test_default_precision(self):
        self.assertEqual(np.float32, constant([1.0]).data.dtype)

    def test_precision_scope(self):
        with precision(np.float64):
            inside = constant([1.0])
        self.assertEqual(np.float64, inside.data.dtype)
        self.assertEqual(np.float32, constant([1.0]).data.dtype)

    def test_scalar_stays_scalar(self):
        self.assertEqual((), constant(3.0).shape)

    def test_debug_flags_non_finite(self):
        set_debug(True)
        with self.assertRaises(NumericError):
            _ = constant([0.0, 1.0]) * float("inf")

    def test_debug_off(self):
        set_debug(False)
        with np.errstate(invalid="ignore"):
            out = constant([0.0]) * float("inf")
        self.assertTrue(np.isnan(out.data[0]))


if __name__ == '__main__':
    unittest.main()
