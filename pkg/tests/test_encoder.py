"""Tests for encoder.py"""

import numpy as np
import pytest

from ucr.core import Rng
from ucr.encoder import (
    EncoderParams,
    EncoderSet,
    Gradients,
    adam_step,
    backward,
    ema_update,
    embed,
    encoder_dims,
    forward,
    init_params,
    snapshot_frozen,
)
from ucr.errors import DataError


def _reference_forward(params, x):
    """Straightforward re-evaluation of the network, one row at a time."""
    out = []
    for row in x:
        h = row
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w + b
            if i < len(params.weights) - 1:
                h = np.tanh(h)
        out.append(h / np.linalg.norm(h))
    return np.array(out)


def _scalar_params(value):
    return EncoderParams(weights=[np.array([[value]])], biases=[np.array([0.0])])


class TestForward:
    """Tests for forward and embed."""

    @pytest.fixture
    def params(self):
        return init_params([5, 7, 4], Rng(0))

    @pytest.fixture
    def batch(self):
        return Rng(1).normal(size=(6, 5))

    def test_output_is_unit_norm(self, params, batch):
        """Test output is unit norm."""
        emb, _ = forward(params, batch)
        assert emb.shape == (6, 4)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)

    def test_matches_reference(self, params, batch):
        """Test matches reference."""
        emb, _ = forward(params, batch)
        np.testing.assert_allclose(emb, _reference_forward(params, batch), atol=1e-12)

    def test_single_vector_input(self, params, batch):
        """Test single vector input."""
        emb, _ = forward(params, batch[0])
        assert emb.shape == (1, 4)

    def test_dimension_mismatch(self, params):
        """Test dimension mismatch."""
        with pytest.raises(DataError, match="dimension mismatch"):
            forward(params, np.zeros((2, 3)))

    def test_embed_is_independent_of_workers(self, params):
        """Test embed is independent of workers."""
        features = Rng(2).normal(size=(40, 5))
        np.testing.assert_allclose(
            embed(params, features, workers=4), embed(params, features, workers=1), atol=1e-12
        )

    def test_embed_empty(self, params):
        """Test embed empty."""
        assert embed(params, np.zeros((0, 5))).shape == (0, 4)


class TestInitParams:
    """Tests for parameter initialization."""

    def test_shapes_and_zero_biases(self):
        """Test shapes and zero biases."""
        params = init_params(encoder_dims(8, (16, 12), 4), Rng(0))
        assert params.dims == [8, 16, 12, 4]
        assert all(np.all(b == 0) for b in params.biases)

    def test_glorot_limits(self):
        """Test glorot limits."""
        params = init_params([10, 30], Rng(0))
        assert np.abs(params.weights[0]).max() <= np.sqrt(6.0 / 40)

    def test_deterministic(self):
        """Test same seed gives the same parameters."""
        a = init_params([4, 3], Rng(5))
        b = init_params([4, 3], Rng(5))
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_num_params(self):
        """Test num params."""
        assert init_params([4, 3, 2], Rng(0)).num_params == 4 * 3 + 3 + 3 * 2 + 2

    def test_with_flat_round_trip(self):
        """Test with flat round trip."""
        params = init_params([4, 3, 2], Rng(0))
        rebuilt = params.with_flat(params.flat())
        np.testing.assert_array_equal(rebuilt.flat(), params.flat())
        rebuilt.weights[0][0, 0] += 1.0
        assert params.weights[0][0, 0] != rebuilt.weights[0][0, 0]


class TestBackward:
    """Finite-difference checks of the hand-written gradients."""

    def test_gradient_matches_finite_differences(self):
        """Test gradient matches finite differences."""
        params = init_params([4, 5, 3], Rng(3))
        x = Rng(4).normal(size=(3, 4))
        coeff = Rng(6).normal(size=(3, 3))

        def loss(p):
            return float(np.sum(coeff * forward(p, x)[0]))

        _, cache = forward(params, x)
        analytic = backward(cache, coeff).flat()

        flat = params.flat()
        numeric = np.zeros_like(flat)
        step = 1e-6
        for i in range(len(flat)):
            up, down = flat.copy(), flat.copy()
            up[i] += step
            down[i] -= step
            numeric[i] = (loss(params.with_flat(up)) - loss(params.with_flat(down))) / (2 * step)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_zero_upstream_gives_zero_gradients(self):
        """Test a zero upstream gradient produces zero parameter gradients."""
        params = init_params([4, 5, 3], Rng(3))
        _, cache = forward(params, Rng(4).normal(size=(3, 4)))
        grads = backward(cache, np.zeros((3, 3)))
        np.testing.assert_array_equal(grads.flat(), 0.0)

    @pytest.mark.parametrize("weight,x", [(2.0, 1.5), (-0.7, 3.0), (0.4, -2.0)])
    def test_scalar_network_has_no_gradient(self, weight, x):
        """Test a 1-d output normalizes to +-1, so nothing flows back."""
        _, cache = forward(_scalar_params(weight), np.array([[x]]))
        grads = backward(cache, np.array([[1.0]]))
        np.testing.assert_allclose(grads.flat(), 0.0, atol=1e-15)

    def test_upstream_shape_mismatch(self):
        """Test upstream shape mismatch."""
        params = init_params([4, 3], Rng(0))
        _, cache = forward(params, np.ones((2, 4)))
        with pytest.raises(ValueError):
            backward(cache, np.ones((3, 3)))


class TestEma:
    """Tests for the momentum update."""

    def test_scalar_update(self):
        """Test scalar update."""
        encoders = EncoderSet(online=_scalar_params(0.0), momentum=_scalar_params(1.0))
        ema_update(encoders, 0.999)
        assert encoders.momentum.weights[0][0, 0] == pytest.approx(0.999)

    def test_alpha_one_keeps_momentum(self):
        """Test alpha one keeps momentum."""
        encoders = EncoderSet(online=_scalar_params(0.3), momentum=_scalar_params(1.0))
        ema_update(encoders, 1.0)
        assert encoders.momentum.weights[0][0, 0] == 1.0

    def test_alpha_zero_copies_online(self):
        """Test alpha zero copies online."""
        encoders = EncoderSet(online=_scalar_params(0.3), momentum=_scalar_params(1.0))
        ema_update(encoders, 0.0)
        assert encoders.momentum.weights[0][0, 0] == 0.3

    def test_invalid_alpha(self):
        """Test invalid alpha."""
        encoders = EncoderSet(online=_scalar_params(0.3), momentum=_scalar_params(1.0))
        with pytest.raises(ValueError):
            ema_update(encoders, 1.5)

    def test_iterated_update_matches_closed_form(self):
        """Test t updates against alpha^t * momentum + (1 - alpha^t) * online."""
        online = init_params([4, 5, 3], Rng(0))
        start = init_params([4, 5, 3], Rng(1))
        encoders = EncoderSet(online=online, momentum=start.copy())
        alpha = 0.999
        for t in range(1, 1001):
            ema_update(encoders, alpha)
            if t in (1, 10, 100, 500, 1000):
                expected = alpha**t * start.flat() + (1.0 - alpha**t) * online.flat()
                np.testing.assert_allclose(
                    encoders.momentum.flat(), expected, rtol=1e-6, atol=1e-12
                )

    def test_incongruent_encoders_rejected(self):
        """Test incongruent encoders rejected."""
        with pytest.raises(ValueError):
            EncoderSet(online=init_params([3, 2], Rng(0)), momentum=init_params([3, 4], Rng(0)))


class TestAdamAndSnapshot:
    """Tests for the optimizer step and the frozen snapshot."""

    @pytest.fixture
    def encoders(self):
        return EncoderSet.create([4, 3], Rng(0))

    def test_first_step_moves_by_lr_times_sign(self, encoders):
        """Test first step moves by lr times sign."""
        before = encoders.online.flat()
        _, cache = forward(encoders.online, Rng(1).normal(size=(5, 4)))
        grads = backward(cache, Rng(2).normal(size=(5, 3)))
        adam_step(encoders, grads, lr_now=0.01, weight_decay=0.0)
        delta = encoders.online.flat() - before
        g = grads.flat()
        moved = np.abs(g) > 1e-6
        np.testing.assert_allclose(delta[moved], -0.01 * np.sign(g[moved]), atol=1e-5)
        assert encoders.optimizer.step == 1

    def test_weight_decay_is_added_to_the_gradient(self):
        """Test zero gradient with decay wd steps like gradient wd * param without decay."""
        wd = 0.05
        decayed = EncoderSet.create([4, 3], Rng(0))
        explicit = EncoderSet.create([4, 3], Rng(0))
        zero = Gradients.zeros_like(decayed.online)
        as_gradient = Gradients(
            weights=[wd * w for w in explicit.online.weights],
            biases=[wd * b for b in explicit.online.biases],
        )
        adam_step(decayed, zero, lr_now=0.01, weight_decay=wd)
        adam_step(explicit, as_gradient, lr_now=0.01, weight_decay=0.0)
        np.testing.assert_allclose(decayed.online.flat(), explicit.online.flat(), atol=1e-15)

    def test_adam_leaves_momentum_alone(self, encoders):
        """Test adam leaves momentum alone."""
        momentum = encoders.momentum.flat()
        _, cache = forward(encoders.online, np.ones((2, 4)))
        adam_step(encoders, backward(cache, np.ones((2, 3))), lr_now=0.1, weight_decay=5e-4)
        np.testing.assert_array_equal(encoders.momentum.flat(), momentum)

    def test_snapshot_freezes_momentum(self, encoders):
        """Test snapshot freezes momentum."""
        encoders.momentum.weights[0] += 0.5
        snapshot_frozen(encoders)
        np.testing.assert_array_equal(encoders.frozen.flat(), encoders.momentum.flat())
        np.testing.assert_array_equal(encoders.online.flat(), encoders.momentum.flat())
        assert encoders.optimizer.step == 0

    def test_frozen_is_a_copy(self, encoders):
        """Test frozen is a copy."""
        snapshot_frozen(encoders)
        frozen = encoders.frozen.flat()
        encoders.momentum.weights[0] += 1.0
        np.testing.assert_array_equal(encoders.frozen.flat(), frozen)
