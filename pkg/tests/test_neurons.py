"""LIF dynamics, surrogate gradient, spike-step unrolling."""

import numpy as np
import pytest

from spikegraph.neurons import (LifConfig, SpikeTensor, firing_rate, lif_step,
                                sn_layer, spike)
from spikegraph.tensor import (InvalidInputError, NumericalError, Tape, Tensor,
                               backward, grad_check, mean, mul, sum_)


CFG = LifConfig()


class TestLifConfig:
    def test_defaults_match_model_card(self):
        assert CFG.v_threshold == 1.0
        assert CFG.v_reset == 0.0
        assert CFG.decay_tau == 0.25
        assert CFG.surrogate_window_a == 1.0

    @pytest.mark.parametrize("kwargs", [
        dict(v_threshold=0.0, v_reset=0.0),
        dict(decay_tau=0.0),
        dict(decay_tau=1.5),
        dict(surrogate_window_a=0.0),
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(InvalidInputError):
            LifConfig(**kwargs)


class TestLifStep:
    def test_resting_neuron(self):
        s, v = lif_step(Tensor([0.0]), Tensor([0.0]), CFG)
        assert s.data[0] == 0.0
        assert v.data[0] == 0.0

    def test_suprathreshold_reset(self):
        s, v = lif_step(Tensor([1.5]), Tensor([0.0]), CFG)
        assert s.data[0] == 1.0
        assert v.data[0] == 0.0

    def test_subthreshold_geometric_accumulation(self):
        v = Tensor([0.0])
        seen = []
        for _ in range(30):
            s, v = lif_step(Tensor([0.5]), v, CFG)
            seen.append((s.data[0], v.data[0]))
        assert all(s == 0.0 for s, _ in seen)
        np.testing.assert_allclose(seen[0][1], 0.5)
        np.testing.assert_allclose(seen[1][1], 0.625)
        np.testing.assert_allclose(seen[-1][1], 0.5 / (1 - 0.25), rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            lif_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), CFG)

    def test_nonfinite_membrane_raises(self):
        with pytest.raises(NumericalError):
            lif_step(Tensor([np.inf]), Tensor([0.0]), CFG)


class TestSpikeNonlinearity:
    def test_boundary_inclusive(self):
        out = spike(Tensor([CFG.v_threshold]), CFG)
        assert out.data[0] == 1.0

    def test_window_arithmetic(self):
        # |0.4 - 1.0| = 0.6 > 0.5: forward 0, surrogate grad 0
        # |0.8 - 1.0| = 0.2 <= 0.5: forward 0, surrogate grad 1/a = 1.0
        x = Tensor(np.array([0.4, 0.8], dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = spike(x, CFG)
            assert out.data.tolist() == [0.0, 0.0]
            backward(sum_(out), tape)
        np.testing.assert_allclose(x.grad, [0.0, 1.0])

    def test_relaxed_forward_is_clipped_linear(self):
        x = Tensor(np.array([-1.0, 0.5, 1.0, 1.5, 3.0], dtype=np.float32))
        out = spike(x, CFG, relaxed=True)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.5, 1.0, 1.0])


class TestSnLayer:
    def test_all_zero_input(self):
        x = Tensor(np.zeros((4, 2, 3), dtype=np.float32))
        out = sn_layer(x, CFG)
        assert isinstance(out, SpikeTensor)
        assert out.firing_rate == 0.0
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_two_fires_every_step(self):
        x = Tensor(np.full((4, 2, 3), 2.0, dtype=np.float32))
        out = sn_layer(x, CFG)
        np.testing.assert_array_equal(out.data, 1.0)
        assert out.firing_rate == 1.0

    def test_binarity_for_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Tensor(rng.normal(0, 2, size=(3, 4, 5)).astype(np.float32))
            out = sn_layer(x, CFG)
            assert np.isin(out.data, (0.0, 1.0)).all()

    def test_empty_step_axis_rejected(self):
        with pytest.raises(InvalidInputError):
            sn_layer(Tensor(np.zeros((0, 3))), CFG)

    def test_reset_is_exact(self):
        # after any spike the carried potential is exactly v_reset
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(0.8, 0.8, size=(6, 32)).astype(np.float32))
        v = Tensor(np.zeros(32, dtype=np.float32))
        for s_idx in range(6):
            spk, v = lif_step(Tensor(x.data[s_idx]), v, CFG)
            fired = spk.data == 1.0
            assert np.all(v.data[fired] == CFG.v_reset)

    def test_monotone_in_input_per_step(self):
        rng = np.random.default_rng(2)
        v_prev = Tensor(rng.normal(size=40).astype(np.float32))
        lo = rng.normal(size=40).astype(np.float32)
        hi = lo + np.abs(rng.normal(size=40)).astype(np.float32)
        s_lo, _ = lif_step(Tensor(lo), v_prev, CFG)
        s_hi, _ = lif_step(Tensor(hi), v_prev, CFG)
        assert np.all(s_lo.data <= s_hi.data)


class TestSurrogateConsistency:
    def test_relaxed_network_gradcheck(self):
        # the relaxed forward is continuous, so its analytic gradient must
        # match finite differences (away from the window kinks)
        rng = np.random.default_rng(3)
        x0 = rng.normal(0.7, 0.6, size=(2, 3, 4)).astype(np.float32)
        w0 = rng.normal(0, 0.5, size=(4, 4)).astype(np.float32)

        def f(x, w):
            from spikegraph.tensor import matmul
            h = matmul(x, w)
            s = sn_layer(h, CFG, relaxed=True)
            return mean(mul(s, s))

        report = grad_check(f, [Tensor(x0), Tensor(w0)], h=1e-4, tol=1e-3,
                            min_pass_fraction=0.99)
        assert report.passed, report

    def test_surrogate_equals_relaxed_derivative_in_window(self):
        xs = np.array([0.6, 0.9, 1.0, 1.1, 1.4], dtype=np.float32)
        for relaxed in (False, True):
            x = Tensor(xs, requires_grad=True)
            with Tape() as tape:
                out = spike(x, CFG, relaxed=relaxed)
                backward(sum_(out), tape)
            np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0, 1.0, 1.0])


class TestSpikeTensor:
    def test_rejects_non_binary(self):
        with pytest.raises(InvalidInputError):
            SpikeTensor.from_tensor(Tensor([0.0, 0.5, 1.0]))

    def test_firing_rate_definition(self):
        st = SpikeTensor.from_tensor(Tensor([1.0, 0.0, 1.0, 0.0]))
        assert st.firing_rate == 0.5

    def test_gradients_flow_through_wrapper(self):
        x = Tensor(np.array([2.0, 0.0], dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            s = spike(x, CFG)
            st = SpikeTensor.from_tensor(s)
            backward(sum_(st), tape)
        assert x.grad is not None


class TestFiringRateHelper:
    def test_values(self):
        assert firing_rate(np.zeros(4)) == 0.0
        assert firing_rate(np.ones(4)) == 1.0
        assert firing_rate(np.array([1.0, 0.0])) == 0.5

    def test_rejects_non_binary(self):
        with pytest.raises(InvalidInputError):
            firing_rate(np.array([0.3]))
