"""Loss terms against hand evaluations, exhaustive topology enumeration, and finite differences."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxsampler import losses as L
from voxsampler import tensor as T
from voxsampler.errors import ContractError
from voxsampler.grid import GridSpec, topology_probability
from voxsampler.tensor import Tensor

N2 = GridSpec(2)
TOPOLOGIES = [np.array(t, dtype=bool) for t in itertools.product((0, 1), repeat=8)]


def directed(x, y):
    """Exhaustive d(X|Y) = sum_x min_y |x - y|."""
    return sum(min(math.dist(p, q) for q in y) for p in x)


def realized(offsets, topo, spec=N2):
    return spec.centers()[topo] + offsets.reshape(3, -1).T[topo] * spec.cell_edge


def random_instance(rng, n_target=5):
    occ = rng.uniform(0.05, 0.95, size=(2, 2, 2))
    off = rng.uniform(-0.5, 0.5, size=(3, 2, 2, 2))
    y = rng.uniform(-1, 1, size=(n_target, 3))
    return occ, off, y


class TestChamfer:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(30, 3))
        assert L.chamfer(x, x) == 0.0

    def test_hand_case(self):
        assert L.chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0], [0, 1.0, 0]])) == 3.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_symmetric_and_matches_pairwise(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(int(rng.integers(1, 20)), 3)), rng.normal(size=(int(rng.integers(1, 20)), 3))
        assert L.chamfer(x, y) == pytest.approx(L.chamfer(y, x), rel=1e-14)
        assert L.chamfer(x, y) == pytest.approx(directed(x, y) + directed(y, x), rel=1e-12)
        assert L.chamfer(x, y) >= 0.0

    def test_empty(self):
        with pytest.raises(ContractError):
            L.chamfer(np.zeros((0, 3)), np.zeros((1, 3)))

    def test_kdtree_matches_exhaustive(self):
        rng = np.random.default_rng(1)
        q, t = rng.uniform(-1, 1, size=(2000, 3)), rng.uniform(-1, 1, size=(700, 3))
        d_brute, _ = L.nearest_brute(q, t)
        idx = L.nearest(q, t)
        np.testing.assert_array_equal(np.linalg.norm(q - t[idx], axis=1), d_brute)


class TestTerm1:
    def test_zero_occupancy(self):
        _, off, y = random_instance(np.random.default_rng(2))
        assert L.expected_chamfer_term1(Tensor(np.zeros((2, 2, 2))), Tensor(off), y, N2).item() == 0.0

    def test_hand_case(self):
        spec = GridSpec(2)
        occ = np.zeros((2, 2, 2))
        occ[0, 0, 0], occ[1, 0, 0] = 0.3, 0.6
        c = spec.centers()
        val = L.expected_chamfer_term1(Tensor(occ), Tensor(np.zeros((3, 2, 2, 2))), c[:1], spec).item()
        assert val == pytest.approx(0.6 * np.linalg.norm(c[4] - c[0]), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_expectation(self, seed):
        occ, off, y = random_instance(np.random.default_rng(seed))
        expect = 0.0
        for t in TOPOLOGIES:
            p, _ = topology_probability(occ, t)
            if t.any():
                expect += p * directed(realized(off, t), y)
        got = L.expected_chamfer_term1(Tensor(occ), Tensor(off), y, N2).item()
        assert abs(got - expect) <= 1e-10

    def test_monotone_in_occupancy(self):
        occ, off, y = random_instance(np.random.default_rng(7))
        base = L.expected_chamfer_term1(Tensor(occ), Tensor(off), y, N2).item()
        for n in range(8):
            bumped = occ.copy()
            bumped.flat[n] = min(1.0, bumped.flat[n] + 0.05)
            assert L.expected_chamfer_term1(Tensor(bumped), Tensor(off), y, N2).item() >= base

    def test_gradient(self):
        occ, off, y = random_instance(np.random.default_rng(8))
        o, d = Tensor(occ, requires_grad=True), Tensor(off * 0.9, requires_grad=True)
        assert T.gradcheck(lambda: L.expected_chamfer_term1(o, d, y, N2), [o, d]) < 1e-4


class TestTerm2:
    def test_exact_realization_is_zero(self):
        off = np.random.default_rng(3).uniform(-0.5, 0.5, size=(3, 2, 2, 2))
        y = realized(off, np.ones(8, dtype=bool))
        assert L.sampled_chamfer_term2(Tensor(np.ones((2, 2, 2))), Tensor(off), y, N2, 0).item() == 0.0

    def test_single_voxel_hand_case(self):
        occ = np.zeros((2, 2, 2))
        occ[1, 0, 1] = 1.0
        c = N2.centers()[5]
        y = np.array([[0.3, 0.1, -0.2], [-0.7, 0.4, 0.9]])
        got = L.sampled_chamfer_term2(Tensor(occ), Tensor(np.zeros((3, 2, 2, 2))), y, N2, 0).item()
        assert got == pytest.approx(np.linalg.norm(y[0] - c) + np.linalg.norm(y[1] - c), abs=1e-15)

    def test_empty_fallback_forces_argmax_voxel(self):
        occ = np.zeros((2, 2, 2))
        occ[0, 1, 1] = 1e-300
        topo = L.draw_nonempty_topology(occ, np.random.default_rng(0))
        assert topo.sum() == 1 and topo[3]

    def test_monte_carlo_small(self):
        occ, off, y = random_instance(np.random.default_rng(4))
        p_empty = float(np.prod(1 - occ))
        expect = sum(topology_probability(occ, t)[0] * directed(y, realized(off, t))
                     for t in TOPOLOGIES if t.any()) / (1 - p_empty)
        rng = np.random.default_rng(5)
        vals = np.array([L.sampled_chamfer_term2(Tensor(occ), Tensor(off), y, N2, rng).item()
                         for _ in range(2000)])
        assert abs(vals.mean() - expect) < 3 * vals.std(ddof=1) / math.sqrt(len(vals))

    def test_gradient_reaches_offsets_only(self):
        occ, off, y = random_instance(np.random.default_rng(9))
        o, d = Tensor(occ, requires_grad=True), Tensor(off * 0.9, requires_grad=True)
        err = T.gradcheck(lambda: L.sampled_chamfer_term2(o, d, y, N2, 123), [d])
        assert err < 1e-4
        o.zero_grad()
        L.sampled_chamfer_term2(o, d, y, N2, 123).backward()
        assert o.grad is None or not np.any(o.grad)


class TestBCE:
    def test_values(self):
        assert L.bce_occupancy(Tensor([0.5]), np.array([1])).item() == pytest.approx(math.log(2), abs=1e-15)
        assert L.bce_occupancy(Tensor([0.9]), np.array([0])).item() == pytest.approx(-math.log(0.1), abs=1e-12)

    def test_perfect_prediction(self):
        t = (np.random.default_rng(0).random(512) < 0.3).astype(float)
        val = L.bce_occupancy(Tensor(t), t).item()
        assert 0.0 <= val <= 512 * -math.log(1 - L.BCE_EPS) * (1 + 1e-6) + 1e-12

    def test_logit_gradient_identity(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=50), requires_grad=True)
        t = (rng.random(50) < 0.5).astype(float)
        L.bce_occupancy(T.sigmoid(logits), t).backward()
        o = 1.0 / (1.0 + np.exp(-logits.data))
        np.testing.assert_allclose(logits.grad, o - t, atol=1e-10)


class TestConsistency:
    def test_values(self):
        assert L.consistency_loss([Tensor([0.0]), Tensor([2.0])]).item() == 2.0
        z = Tensor(np.tile([1.0, 2.0, 3.0], (4, 1)))
        assert L.consistency_loss(z).item() == 0.0

    def test_too_few(self):
        with pytest.raises(ContractError):
            L.consistency_loss([Tensor([1.0])])

    def test_translation_and_variance_identity(self):
        z = np.random.default_rng(2).normal(size=(6, 5))
        base = L.consistency_loss(Tensor(z)).item()
        assert abs(L.consistency_loss(Tensor(z + 3.7)).item() - base) < 1e-12
        assert base == pytest.approx(6 * z.var(axis=0).sum(), rel=1e-12)

    def test_gradient(self):
        z = Tensor(np.random.default_rng(3).normal(size=(4, 3)), requires_grad=True)
        assert T.gradcheck(lambda: L.consistency_loss(z), [z]) < 1e-6


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.occ = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 2, 2, 2)), requires_grad=True)
        self.off = Tensor(rng.uniform(-0.45, 0.45, size=(2, 3, 2, 2, 2)), requires_grad=True)
        self.z = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        self.targets = [rng.uniform(-1, 1, size=(6, 3)) for _ in range(2)]
        self.groups = np.array([0, 0])

    def total(self, weights, seed=0):
        return L.total_loss(self.occ, self.off, self.z, self.targets, self.groups, N2, weights, seed)

    def test_zero_weights(self):
        assert self.total(L.LossWeights(0, 0, 0)).total.item() == 0.0

    def test_linearity(self):
        terms = self.total(L.LossWeights(1, 0, 0), seed=4)
        rng = np.random.default_rng(4)
        expect = 0.0
        for i in range(2):
            expect += L.expected_chamfer_term1(self.occ[i], self.off[i], self.targets[i], N2).item()
            expect += L.sampled_chamfer_term2(self.occ[i], self.off[i], self.targets[i], N2, rng).item()
        assert terms.total.item() == expect

    def test_gradient_frozen_draw(self):
        inputs = [self.occ, self.off, self.z]
        assert T.gradcheck(lambda: self.total(L.LossWeights(1.0, 1.0, 0.1), seed=7).total, inputs) < 1e-4

    def test_negative_weight(self):
        with pytest.raises(ContractError):
            L.LossWeights(-1.0, 1.0, 1.0)
