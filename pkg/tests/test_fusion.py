"""Multimodal fusion: joint/marginal construction, DV bound, weights, SMIC."""

import numpy as np
import pytest

from spikegraph.fusion import (MODALITY_ORDER, FusionWeights, MiMatrix,
                               SmicNet, SpikeMultimodalFusion,
                               compute_mi_weights, fuse_modalities, make_joint,
                               make_marginal, mi_lower_bound)
from spikegraph.module import Adam
from spikegraph.neurons import LifConfig
from spikegraph.tensor import (DimensionError, InvalidInputError,
                               NumericalError, Tape, Tensor, backward, scale)

LIF = LifConfig()


def spikes(shape, seed, p=0.5):
    rng = np.random.default_rng(seed)
    return Tensor((rng.uniform(size=shape) < p).astype(np.float32))


class TestMakeJoint:
    def test_shape_contract(self):
        a = spikes((4, 64, 25, 16), 0)
        b = spikes((4, 64, 25, 16), 1)
        assert make_joint(a, b).shape == (4, 128, 25, 16)

    def test_preserves_binarity_and_ordering(self):
        a = spikes((4, 8, 5, 6), 2)
        b = spikes((4, 8, 5, 6), 3)
        out = make_joint(a, b)
        assert np.isin(out.data, (0.0, 1.0)).all()
        np.testing.assert_array_equal(out.data[:, :8], a.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            make_joint(spikes((4, 8, 5, 6), 4), spikes((4, 8, 5, 7), 5))


class TestMakeMarginal:
    def test_single_step_equals_joint(self):
        a = spikes((1, 8, 5, 6), 6)
        b = spikes((1, 8, 5, 6), 7)
        np.testing.assert_array_equal(make_marginal(a, b, 0).data,
                                      make_joint(a, b).data)

    def test_multiset_preserved(self):
        a = spikes((4, 8, 5, 6), 8)
        b = spikes((4, 8, 5, 6), 9)
        out = make_marginal(a, b, 123)
        shuffled = out.data[:, 8:]
        orig_slices = {b.data[s].tobytes() for s in range(4)}
        new_slices = {shuffled[s].tobytes() for s in range(4)}
        assert orig_slices == new_slices

    def test_same_seed_same_permutation(self):
        a = spikes((4, 8, 5, 6), 10)
        b = spikes((4, 8, 5, 6), 11)
        np.testing.assert_array_equal(make_marginal(a, b, 42).data,
                                      make_marginal(a, b, 42).data)

    def test_fuzzed_multiset_preservation(self):
        rng = np.random.default_rng(12)
        for trial in range(200):
            s = int(rng.integers(2, 6))
            shape = (s, int(rng.integers(1, 5)), 3, 4)
            b = Tensor((rng.uniform(size=shape) < 0.5).astype(np.float32))
            a = Tensor((rng.uniform(size=shape) < 0.5).astype(np.float32))
            out = make_marginal(a, b, trial)
            got = sorted(out.data[:, shape[1]:][s_].tobytes() for s_ in range(s))
            want = sorted(b.data[s_].tobytes() for s_ in range(s))
            assert got == want


class TestMiLowerBound:
    def test_degenerate_estimator_zero(self):
        c = 0.73
        t_vals = Tensor(np.full(8, c, dtype=np.float32))
        et_vals = Tensor(np.full(8, np.exp(c), dtype=np.float32))
        assert abs(mi_lower_bound(t_vals, et_vals).item()) < 1e-6

    def test_zeros(self):
        out = mi_lower_bound(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))
        assert abs(out.item()) < 1e-7

    def test_direct_arithmetic(self):
        out = mi_lower_bound(Tensor([1.0, 1.0]), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.item(), 1.0, rtol=1e-6)

    def test_nonpositive_et_rejected(self):
        with pytest.raises(NumericalError):
            mi_lower_bound(Tensor([0.0]), Tensor([0.0]))


class TestMiMatrix:
    def test_from_pairs_symmetric_zero_diagonal(self):
        vals = {(0, 1): 0.3, (0, 2): 0.1, (0, 3): 0.2,
                (1, 2): 0.5, (1, 3): 0.4, (2, 3): 0.6}
        m = MiMatrix.from_pairs(vals)
        np.testing.assert_array_equal(np.diag(m.values), 0.0)
        np.testing.assert_array_equal(m.values, m.values.T)

    def test_asymmetric_rejected(self):
        bad = np.zeros((4, 4))
        bad[0, 1] = 1.0
        with pytest.raises(InvalidInputError):
            MiMatrix(bad)


class TestComputeMiWeights:
    def test_hand_min_max(self):
        # row averages proportional to [0.2, 0.4, 0.6, 0.8]
        m = np.zeros((4, 4))
        targets = np.array([0.2, 0.4, 0.6, 0.8])
        # construct a symmetric matrix with those row sums: x_ij = (t_i*t_j)/c
        outer = np.outer(targets, targets)
        np.fill_diagonal(outer, 0.0)
        row = outer.sum(axis=1)
        scale_fix = targets / row
        # symmetrize via sqrt scaling; easier: directly solve small system
        m = outer * np.sqrt(np.outer(scale_fix, scale_fix))
        got = compute_mi_weights(MiMatrix((m + m.T) / 2))
        averaged = ((m + m.T) / 2).sum(axis=1)
        expect = (averaged - averaged.min()) / (averaged.max() - averaged.min())
        np.testing.assert_allclose(got.w, expect, atol=1e-6)
        assert not got.degenerate

    def test_exact_example_row_values(self):
        # averaged row values [0.2,0.4,0.6,0.8] -> [0, 1/3, 2/3, 1]
        averaged = np.array([0.2, 0.4, 0.6, 0.8])
        w = (averaged - averaged.min()) / (averaged.max() - averaged.min())
        np.testing.assert_allclose(w, [0.0, 1 / 3, 2 / 3, 1.0])

    def test_degenerate_uniform(self):
        m = np.full((4, 4), 0.5)
        np.fill_diagonal(m, 0.0)
        got = compute_mi_weights(MiMatrix(m))
        assert got.degenerate
        np.testing.assert_array_equal(got.w, 1.0)

    def test_min_zero_max_one_fuzzed(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            vals = {p: float(rng.normal()) for p in SpikeMultimodalFusion.PAIRS}
            got = compute_mi_weights(MiMatrix.from_pairs(vals))
            if not got.degenerate:
                assert got.w.min() == 0.0
                assert got.w.max() == 1.0


class TestFuseModalities:
    def _four(self, seed):
        return [spikes((4, 8, 5, 6), seed + k) for k in range(4)]

    def test_selector_weights(self):
        mods = self._four(20)
        out = fuse_modalities(mods, FusionWeights(np.array([1.0, 0, 0, 0])))
        np.testing.assert_array_equal(out.data, mods[0].data)

    def test_zero_weights(self):
        out = fuse_modalities(self._four(24), FusionWeights(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_all_ones_sum_of_weights(self):
        mods = [Tensor(np.ones((2, 3, 4, 5), dtype=np.float32)) for _ in range(4)]
        w = np.array([0.0, 1 / 3, 2 / 3, 1.0], dtype=np.float32)
        out = fuse_modalities(mods, FusionWeights(w))
        np.testing.assert_allclose(out.data, 2.0, rtol=1e-6)

    def test_output_range(self):
        rng = np.random.default_rng(14)
        mods = self._four(30)
        w = np.abs(rng.normal(size=4)).astype(np.float32)
        out = fuse_modalities(mods, FusionWeights(w))
        assert out.data.min() >= 0.0
        assert out.data.max() <= w.sum() + 1e-6

    def test_shape_mismatch(self):
        mods = self._four(40)
        mods[2] = spikes((4, 8, 5, 7), 99)
        with pytest.raises(DimensionError):
            fuse_modalities(mods, FusionWeights(np.ones(4)))


class TestSmicNet:
    def test_zero_network_outputs(self):
        net = SmicNet(8, 16, LIF, np.random.default_rng(15))
        for p in net.parameters():
            p.data[:] = 0.0
        x = spikes((4, 3, 8, 5, 6), 16)
        t_vals = net(x)
        np.testing.assert_allclose(t_vals.data, 0.0, atol=1e-7)
        et_vals = net(x, exponential=True)
        np.testing.assert_allclose(et_vals.data, 1.0, rtol=1e-6)

    def test_finite_scalar_outputs(self):
        net = SmicNet(8, 16, LIF, np.random.default_rng(17))
        x = spikes((4, 5, 8, 5, 6), 18)
        out = net(x)
        assert out.shape == (5,)
        assert np.isfinite(out.data).all()

    def test_gap_of_constant_is_constant(self):
        net = SmicNet(8, 16, LIF, np.random.default_rng(19))
        c = 0.37
        net.fc_w.data[:] = 0.0
        net.fc_b.data[:] = c
        out = net(spikes((4, 3, 8, 5, 6), 20))
        np.testing.assert_allclose(out.data, c, rtol=1e-6)

    def test_wrong_channels_rejected(self):
        net = SmicNet(8, 16, LIF, np.random.default_rng(21))
        with pytest.raises(DimensionError):
            net(spikes((4, 3, 6, 5, 6), 22))


def _stream_batch(rng, copied, s=4, d=4, v=3, t=6, b=64):
    rates = rng.choice([0.25, 0.75], size=(b, s))
    pa = (rng.uniform(size=(s, b, d, v, t)) < rates.T[:, :, None, None, None]
          ).astype(np.float32)
    if copied:
        pb = pa.copy()
    else:
        rates_b = rng.choice([0.25, 0.75], size=(b, s))
        pb = (rng.uniform(size=(s, b, d, v, t)) < rates_b.T[:, :, None, None, None]
              ).astype(np.float32)
    return Tensor(pa), Tensor(pb)


def train_smic_on_stream(copied: bool, seed: int, steps: int = 150) -> float:
    """Frozen empirical oracle: fixed budget, fixed shapes, eval on fresh draws."""
    rng = np.random.default_rng(seed)
    net = SmicNet(8, 32, LIF, np.random.default_rng(seed + 1000))
    opt = Adam(net.parameters(), lr=3e-3)
    for step in range(steps):
        pa, pb = _stream_batch(rng, copied)
        with Tape() as tape:
            bound = mi_lower_bound(net(make_joint(pa, pb)),
                                   net(make_marginal(pa, pb, seed * 100000 + step),
                                       exponential=True))
            backward(scale(bound, -1.0), tape)
        opt.step()
        opt.zero_grad()
    evals = []
    for k in range(5):
        pa, pb = _stream_batch(rng, copied)
        evals.append(float(mi_lower_bound(
            net(make_joint(pa, pb)),
            net(make_marginal(pa, pb, seed * 999983 + k), exponential=True)).data))
    return float(np.mean(evals))


class TestIndependenceSanity:
    def test_independent_vs_copied_streams(self):
        for seed in (0, 1, 2):
            ind = train_smic_on_stream(copied=False, seed=seed)
            cop = train_smic_on_stream(copied=True, seed=seed)
            assert abs(ind) <= 0.1, (seed, ind)
            assert cop - ind >= 0.2, (seed, ind, cop)


class TestSpikeMultimodalFusion:
    def _mods(self, seed, d=4):
        return [spikes((4, 6, d, 3, 5), seed + k, p=0.3 + 0.1 * k) for k in range(4)]

    def test_matrix_symmetric_zero_diagonal(self):
        smf = SpikeMultimodalFusion(4, 16, LIF, np.random.default_rng(23))
        m = smf.mi_matrix(self._mods(50))
        np.testing.assert_array_equal(np.diag(m.values), 0.0)
        np.testing.assert_array_equal(m.values, m.values.T)

    def test_train_step_moves_bounds_and_keeps_determinism(self):
        smf = SpikeMultimodalFusion(4, 16, LIF, np.random.default_rng(24))
        mods = self._mods(60)
        before = [p.data.copy() for p in smf.estimators[0].parameters()]
        bounds = smf.train_step(mods)
        assert set(bounds) == set(SpikeMultimodalFusion.PAIRS)
        after = [p.data for p in smf.estimators[0].parameters()]
        assert any(not np.array_equal(b, a) for b, a in zip(before, after))

    def test_no_gradient_leaks_into_inputs(self):
        smf = SpikeMultimodalFusion(4, 16, LIF, np.random.default_rng(25))
        mods = self._mods(70)
        for m in mods:
            m.requires_grad = True
        smf.train_step(mods)
        assert all(m.grad is None for m in mods)

    def test_weights_from_fresh_estimators(self):
        smf = SpikeMultimodalFusion(4, 16, LIF, np.random.default_rng(26))
        w = smf.weights(self._mods(80))
        assert w.w.shape == (4,)
        if not w.degenerate:
            assert w.w.min() == 0.0 and w.w.max() == 1.0
