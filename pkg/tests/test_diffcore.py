"""Tests for the reverse-mode compute layer."""

import numpy as np
import pytest

from nbmlss.diffcore import (Adam, DropoutMask, Parameter, Tensor, as_tensor, concat,
                             dense_forward, dropout_apply, finite_difference_gradient,
                             load_params, max_relative_error, save_params,
                             softplus_inverse)
from nbmlss.dists import NormalParams, make_head
from nbmlss.errors import ConfigurationError, NumericError, StateError


class TestDenseForward:
    def test_hand_sum(self):
        out = dense_forward(np.array([[1.0, 2.0]]), Parameter(np.array([[1.0], [1.0]]), "w"),
                            Parameter(np.array([0.0]), "b"))
        np.testing.assert_allclose(out.values, [[3.0]])

    def test_zero_input_returns_bias(self):
        w = Parameter(np.random.default_rng(0).normal(size=(2, 3)), "w")
        b = Parameter(np.array([5.0, 5.0, 5.0]), "b")
        out = dense_forward(np.zeros((1, 2)), w, b)
        np.testing.assert_allclose(out.values, [[5.0, 5.0, 5.0]])

    def test_matches_triple_loop_matmul(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(3, 4))
        w = Parameter(rng.normal(size=(4, 5)), "w")
        b = Parameter(rng.normal(size=5), "b")
        out = dense_forward(x, w, b).values
        # independent brute-force oracle
        expected = np.zeros((3, 5))
        for r in range(3):
            for c in range(5):
                acc = 0.0
                for i in range(4):
                    acc += x[r, i] * w.values[i, c]
                expected[r, c] = acc + b.values[c]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatch_is_config_error(self):
        with pytest.raises(ConfigurationError):
            dense_forward(np.zeros((2, 3)), Parameter(np.zeros((4, 2)), "w"))

    def test_non_finite_input_is_numeric_error(self):
        with pytest.raises(NumericError):
            dense_forward(np.array([[np.nan, 1.0]]), Parameter(np.zeros((2, 2)), "w"))


class TestRelu:
    def test_elementwise(self):
        t = as_tensor(np.array([-1.0, 0.0, 2.0])).relu()
        np.testing.assert_allclose(t.values, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        t = as_tensor(-np.ones(5)).relu()
        assert (t.values == 0).all()

    def test_subgradient_zero_at_kink(self):
        p = Parameter(np.array([-1.0, 2.0]), "p")
        p.relu().sum().backward()
        np.testing.assert_allclose(p.grad, [0.0, 1.0])
        p2 = Parameter(np.array([0.0]), "p2")
        p2.relu().sum().backward()
        assert p2.grad == pytest.approx([0.0])


class TestDropout:
    def test_eval_mode_is_identity(self):
        rng = np.random.default_rng(0)
        x = as_tensor(rng.normal(size=(4, 4)))
        m = DropoutMask.draw((4, 4), 0.5, rng, mode="eval")
        assert dropout_apply(x, m) is x

    def test_keep_prob_one_is_identity(self):
        rng = np.random.default_rng(0)
        x = as_tensor(np.full((2, 2), 3.0))
        m = DropoutMask.draw((2, 2), 1.0, rng, mode="train")
        np.testing.assert_allclose(dropout_apply(x, m).values, 3.0)

    def test_inverted_scaling(self):
        m = DropoutMask(keep_prob=0.5, mask=np.array([1.0, 0.0]), mode="train")
        out = dropout_apply(as_tensor(np.array([2.0, 2.0])), m)
        np.testing.assert_allclose(out.values, [4.0, 0.0])

    def test_bad_keep_prob_rejected(self):
        with pytest.raises(ConfigurationError):
            DropoutMask.draw((2,), 0.0, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            DropoutMask.draw((2,), 1.5, np.random.default_rng(0))

    def test_expectation_recovers_input(self):
        # over many resampled masks the train-mode mean converges to x
        rng = np.random.default_rng(123)
        x = np.array([1.0, -2.0, 3.0, 0.5])
        n = 10_000
        draws = np.empty((n, 4))
        for i in range(n):
            m = DropoutMask.draw((4,), 0.7, rng, mode="train")
            draws[i] = dropout_apply(as_tensor(x), m).values
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert (np.abs(mean - x) <= 3.0 * se + 1e-12).all()


class TestBackward:
    def test_linear_case_matches_hand_derivative(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        w = Parameter(np.zeros((2, 1)), "w")
        (as_tensor(x) @ w).sum().backward()
        np.testing.assert_allclose(w.grad[:, 0], x.sum(axis=0))

    def test_grad_accumulates_across_calls(self):
        w = Parameter(np.array([1.0]), "w")
        (w * 3.0).sum().backward()
        (w * 3.0).sum().backward()
        assert w.grad == pytest.approx([6.0])

    def test_backward_without_trainable_inputs_is_state_error(self):
        with pytest.raises(StateError):
            as_tensor(np.ones(3)).sum().backward()

    def test_backward_on_non_scalar_is_state_error(self):
        p = Parameter(np.ones(3), "p")
        with pytest.raises(StateError):
            (p * 2.0).backward()

    def test_zero_weight_normal_head_location_gradient(self):
        # with all projections at zero, d NLL / d location-bias has the
        # closed-form Normal derivative (mu - y) / sigma^2 averaged over rows
        head = make_head("normal")
        y = np.array([[1.0], [-2.0], [0.5]])
        bias = Parameter(np.zeros(2), "bias")  # [loc_raw, scale_raw] for H=1
        raw = bias + np.zeros((3, 1))
        params = head.transform(raw, 1)
        head.nll(y, params).mean().backward()
        sigma0 = 1e-3 + 3.0 * np.log(2.0)
        expected = np.mean((0.0 - y) / sigma0 ** 2)
        assert bias.grad[0] == pytest.approx(expected, rel=1e-12)

    def test_fulljoint_gradient_matches_finite_differences(self):
        # composite graph touching every op the heads and models use
        rng = np.random.default_rng(5)
        a = Parameter(rng.normal(size=(3, 4)), "a")
        b = Parameter(rng.normal(size=(4, 2)), "b")
        c = Parameter(rng.uniform(1.5, 3.0, size=(3, 2)), "c")

        def compute():
            h = (as_tensor(rng_x) @ a) @ b
            t = h.softplus() + c.log() - (h * 0.3).exp() / c
            t = t.asinh() + (c.gammaln() + (1.0 + h * h).sqrt()).log1p()
            block = concat([t[:, 0:1], t[:, 1:2] * 2.0], axis=1)
            return (block.reshape(6) ** 2).mean() + t.sum(axis=1).mean()

        rng_x = rng.normal(size=(3, 3))
        loss = compute()
        loss.backward()
        analytic = [p.grad.copy() for p in (a, b, c)]
        fd = finite_difference_gradient(lambda: compute().item(), [a, b, c])
        assert max_relative_error(analytic, fd) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.values, [1.0, 2.0])

    def test_first_step_is_bias_corrected_unit_move(self):
        p = Parameter(np.array([0.0]), "p")
        opt = Adam([p], lr=0.1)
        p.grad[...] = 1.0
        opt.step()
        assert p.values[0] == pytest.approx(-0.1, abs=1e-8)

    def test_identical_seeds_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(9)
            p = Parameter(np.array([0.5, -0.5]), "p")
            opt = Adam([p], lr=0.05)
            for _ in range(20):
                g = rng.normal(size=2)
                p.grad[...] = g
                opt.step()
            return p.values.copy()

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter(np.array([1.0]), "layer3_bias")
        opt = Adam([p])
        p.grad[...] = np.nan
        with pytest.raises(NumericError, match="layer3_bias"):
            opt.step()

    def test_duplicate_registration_rejected(self):
        p = Parameter(np.array([1.0]), "p")
        with pytest.raises(ConfigurationError):
            Adam([p, p])

    def test_loss_scaling_keeps_first_update_direction(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=6)
        moves = []
        for scale in (1.0, 37.5):
            p = Parameter(np.zeros(6), "p")
            opt = Adam([p], lr=0.01)
            p.grad[...] = scale * g
            opt.step()
            moves.append(np.sign(p.values))
        np.testing.assert_array_equal(moves[0], moves[1])

    def test_grads_zeroed_after_step(self):
        p = Parameter(np.array([1.0]), "p")
        opt = Adam([p], lr=0.1)
        p.grad[...] = 1.0
        opt.step()
        assert (p.grad == 0).all()


class TestOpGradients:
    """Finite-difference checks on randomized small shapes, per op."""

    @pytest.mark.parametrize("name,fn,positive", [
        ("relu", lambda t: t.relu(), False),
        ("softplus", lambda t: t.softplus(), False),
        ("exp", lambda t: t.exp(), False),
        ("log", lambda t: t.log(), True),
        ("log1p", lambda t: t.log1p(), True),
        ("sqrt", lambda t: t.sqrt(), True),
        ("asinh", lambda t: t.asinh(), False),
        ("gammaln", lambda t: t.gammaln(), True),
        ("square", lambda t: t * t, False),
        ("recip", lambda t: 1.0 / t, True),
        ("pow3", lambda t: t ** 3, False),
        ("slice", lambda t: t[1:, :2] * 2.0, False),
        ("mean_axis", lambda t: t.mean(axis=0).sum() + t.sum(axis=1).mean(), False),
    ])
    def test_op(self, name, fn, positive):
        rng = np.random.default_rng(hash(name) % 2**32)
        vals = rng.uniform(0.5, 2.5, size=(3, 3)) if positive \
            else rng.normal(0.3, 1.0, size=(3, 3))
        p = Parameter(vals, name)
        out = fn(p)
        loss = out.sum() if isinstance(out, Tensor) and out.size > 1 else out
        loss.backward()
        fd = finite_difference_gradient(
            lambda: (fn(p).sum() if out.size > 1 else fn(p)).item(), [p])
        assert max_relative_error([p.grad], fd) < 1e-4, name

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(11)
        a = Parameter(rng.normal(size=(4, 3)), "a")
        b = Parameter(rng.normal(size=3), "b")

        def compute():
            return ((a + b) * b - a / (2.0 + b.softplus())).sum()

        compute().backward()
        fd = finite_difference_gradient(lambda: compute().item(), [a, b])
        assert max_relative_error([a.grad, b.grad], fd) < 1e-4

    def test_frozen_dropout_mask_gradient(self):
        rng = np.random.default_rng(3)
        p = Parameter(rng.normal(size=(4, 4)), "p")
        mask = DropoutMask.draw((4, 4), 0.5, rng, mode="train")

        def compute():
            return (dropout_apply(p, mask) ** 2).sum()

        compute().backward()
        fd = finite_difference_gradient(lambda: compute().item(), [p])
        assert max_relative_error([p.grad], fd) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = [Parameter(rng.normal(size=(3, 2)) * 1e-7, "w"),
                  Parameter(rng.normal(size=4) * 1e8, "b")]
        originals = [p.values.copy() for p in params]
        path = tmp_path / "ckpt.json"
        save_params(params, path)
        for p in params:
            p.values[...] = 0.0
        load_params(path, params)
        for p, orig in zip(params, originals):
            assert (p.values == orig).all()  # bit-exact, not approx

    def test_mismatch_is_config_error(self, tmp_path):
        p = Parameter(np.zeros(3), "w")
        path = tmp_path / "ckpt.json"
        save_params([p], path)
        with pytest.raises(ConfigurationError):
            load_params(path, [Parameter(np.zeros(4), "w")])
        with pytest.raises(ConfigurationError):
            load_params(path, [Parameter(np.zeros(3), "other")])


def test_softplus_inverse_round_trip():
    y = np.array([0.1, 1.0, 5.0, 30.0])
    x = softplus_inverse(y)
    np.testing.assert_allclose(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))), y,
                               rtol=1e-12)
