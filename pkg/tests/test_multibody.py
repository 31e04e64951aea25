import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirkwood.errors import HypothesisFailed, NormAssumptionViolated, OutsideDisk, SubsetCapExceeded
from kirkwood.grand_canonical import BoxRegion
from kirkwood.hamiltonian import MultiBodyHamiltonian
from kirkwood.ks_core import Grid, apply_ks, neumann_solve, unit_family
from kirkwood.multibody import (
    FiniteRangeTriplet,
    RadialProfile,
    SeparableTriplet,
    hamiltonian_from_dict,
    kernel_kH,
    multibody_apply_ks,
    multibody_neumann_solve,
    norm_bound_example,
    pair_kernel,
    triplet_hamiltonian,
)
from kirkwood.potentials import HardCore, LennardJonesType, ModelParams, SquareWell
from oracles import discrete_theta_energy

BOX = BoxRegion([0.0], [1.0])
SW = SquareWell(0.3, 0.5, 0.8, B=1.0)
TRI = SeparableTriplet((RadialProfile("gaussian", 0.7, 0.8),), symmetric=True)


def brute_kernel(delta, beta, x, x_n, y):
    """sum over S of (-1)^(k-|S|) exp(-beta delta(x | x_n, S)), straight from the definition."""
    k = len(y)
    tot = 0.0
    for r in range(k + 1):
        for S in itertools.combinations(range(k), r):
            d = delta(x, list(x_n) + [y[i] for i in S])
            tot += (-1) ** (k - r) * (math.exp(-beta * d) if math.isfinite(d) else 0.0)
    return tot


def tri_delta(x, A):
    """Sum of the pair and triplet terms that contain x, with x first in each tuple."""
    e = sum(float(SW.radial(abs(x - a))) for a in A)
    for b, c in itertools.combinations(A, 2):
        e += float(TRI(np.array([x, b, c]).reshape(3, 1)))
    return e


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.lists(st.floats(-2, 2), max_size=3), st.lists(st.floats(-2, 2), max_size=5))
def test_pair_reduction_property(x, xn, y):
    H = MultiBodyHamiltonian.from_pair(SW)
    a = kernel_kH(H, x, xn, y, 1.0)
    b = pair_kernel(SW, x, xn, y, 1.0)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-12)


def test_pair_reduction_lennard_jones():
    lj = LennardJonesType(1.0, 0.5, B=1.0)
    H = MultiBodyHamiltonian.from_pair(lj)
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(0, 9))
        x, xn, y = rng.uniform(-1, 1), rng.uniform(-1, 1, 2), rng.uniform(-1, 1, k)
        b = pair_kernel(lj, x, xn, y, 1.0)
        assert kernel_kH(H, x, xn, y, 1.0) == pytest.approx(b, rel=1e-9, abs=1e-300)


def test_zero_hamiltonian():
    H = MultiBodyHamiltonian()
    assert kernel_kH(H, 0.0, [0.3], [], 1.0) == 1.0
    for k in range(1, 6):
        assert kernel_kH(H, 0.0, [0.3], list(np.linspace(0, 1, k)), 1.0) == 0.0
        assert kernel_kH(H, 0.0, [], list(np.linspace(0, 1, k)), 1.0, method="subsets") == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0, 1), max_size=2), st.lists(st.floats(0, 1), max_size=4))
def test_triplet_kernel_routes_agree_with_definition(x, xn, y):
    H = triplet_hamiltonian(SW, TRI)
    ref = brute_kernel(tri_delta, 1.0, x, xn, y)
    assert kernel_kH(H, x, xn, y, 1.0) == pytest.approx(ref, rel=1e-9, abs=1e-12)
    assert kernel_kH(H, x, xn, y, 1.0, method="subsets") == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_asymmetric_triplet_depends_on_order():
    tri = SeparableTriplet((RadialProfile("gaussian", 1.0, 1.0), RadialProfile("exponential", 0.5, 0.3)))
    pts = np.array([[0.0], [0.4], [1.1]])
    assert float(tri(pts)) != pytest.approx(float(tri(pts[[1, 0, 2]])))
    sym = SeparableTriplet(tri.phis, symmetric=True)
    assert float(sym(pts)) == pytest.approx(float(sym(pts[[1, 0, 2]])))


def test_subset_cap():
    H = MultiBodyHamiltonian.from_pair(SW)
    with pytest.raises(SubsetCapExceeded):
        kernel_kH(H, 0.0, [], list(np.linspace(0, 1, 13)), 1.0)
    with pytest.raises(ValueError):
        kernel_kH(H, 0.0, [], [], 1.0, method="gray")


def test_apply_ks_matches_pair_operator():
    p = ModelParams(1.0, 0.02, SW)
    g = Grid.over(BOX, 8)
    rng = np.random.default_rng(1)
    fam = unit_family(g, 3, 1.0)
    fam = fam.with_levels([rng.normal(size=a.shape) for a in fam.levels])
    a = multibody_apply_ks(fam, MultiBodyHamiltonian.from_pair(SW), p, 3)
    b = apply_ks(fam, p, 3)
    for u, v in zip(a.levels, b.levels):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-14)


def test_neumann_matches_pair_solver():
    p = ModelParams(1.0, 0.02, SW)
    a, ra = multibody_neumann_solve(MultiBodyHamiltonian.from_pair(SW), p, BOX, 3, assumed_norm=10.0, nodes=10)
    b, rb = neumann_solve(p, BOX, 3, nodes=10, switched=False)
    for u, v in zip(a.levels, b.levels):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-13)


@pytest.mark.parametrize("z", [0.15, -0.15])
@pytest.mark.parametrize("tri", [TRI, FiniteRangeTriplet(2.0, 1.2)])
def test_triplet_solve_matches_explicit_formula(z, tri):
    hc = HardCore(0.5)
    H = triplet_hamiltonian(hc, tri)

    def E(pts):
        for a, b in itertools.combinations(pts, 2):
            if abs(a - b) < 0.5:
                return math.inf
        return sum(float(tri(np.array(c).reshape(3, 1))) for c in itertools.combinations(pts, 3))

    th, rep = multibody_neumann_solve(H, ModelParams(1.0, z, hc), BOX, 3, assumed_norm=2.0, nodes=7, tol=1e-14)
    assert rep.residual < 1e-10
    g = Grid.over(BOX, 7)
    for idx in [(0,), (3,), (0, 6), (1, 5), (0, 3, 6)]:
        ref = discrete_theta_energy(z, 1.0, E, g.x, g.weights, 3, idx)
        assert th.level(len(idx))[idx] == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_false_norm_assumption_detected():
    sw = SquareWell(0.05, 1.5, 4.0, B=6.0)
    H = MultiBodyHamiltonian.from_pair(sw)
    with pytest.raises(NormAssumptionViolated):
        multibody_neumann_solve(H, ModelParams(1.0, 0.5, sw), BoxRegion([0.0], [2.0]), 3, assumed_norm=1.0,
                                nodes=12)


def test_solver_arguments():
    H = MultiBodyHamiltonian.from_pair(SW)
    p = ModelParams(1.0, 0.5, SW)
    with pytest.raises(ValueError):
        multibody_neumann_solve(H, p, BOX, 3)
    with pytest.raises(OutsideDisk):
        multibody_neumann_solve(H, p, BOX, 3, assumed_norm=2.0)


def test_norm_bound_examples():
    cert = norm_bound_example("separable_triplet", {"phis": [{"kind": "gaussian"}], "pair": {"kind": "hard_core",
                                                                                              "r": 0.5}})
    assert cert["checks"]["phi_integral"]["value"] == pytest.approx(math.sqrt(math.pi), rel=1e-8)
    assert cert["checks"]["pair_regular"]["passed"]
    with pytest.raises(HypothesisFailed):
        norm_bound_example("separable_triplet", {"phis": [{"kind": "inverse"}]})
    assert norm_bound_example("finite_range_nonnegative", {"R": 1.0, "triplet": {"amplitude": 1.0}})["passed"]
    with pytest.raises(HypothesisFailed):
        norm_bound_example("finite_range_nonnegative", {"R": 1.0, "triplet": lambda p: -np.ones(p.shape[0])})
    with pytest.raises(HypothesisFailed):
        norm_bound_example("finite_range_nonnegative", {"R": 0.5, "triplet": {"amplitude": 1.0, "R": 1.0}})
    with pytest.raises(ValueError):
        norm_bound_example("other", {})


def test_hamiltonian_from_dict():
    H = hamiltonian_from_dict({"pair": {"kind": "hard_core", "r": 0.5},
                               "triplet": {"type": "finite_range", "amplitude": 1.0, "R": 1.0}})
    assert H.nonnegative and 3 in H.bodies
    H2 = hamiltonian_from_dict({"kind": "hard_core", "r": 0.5})
    assert H2.is_pair_only
    with pytest.raises(ValueError):
        hamiltonian_from_dict({"triplet": {"type": "x"}})
    with pytest.raises(ValueError):
        RadialProfile("nope")
