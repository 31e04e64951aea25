import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirkwood.errors import OutsideDisk
from kirkwood.grand_canonical import (
    BoxRegion,
    PoissonCorrelations,
    PoissonJanossy,
    boltzmann_integrals,
    choose_k_max,
    correlations_from_janossy,
    exp_tail,
    janossy_from_correlations,
    partition_function,
    set_threads,
    solution_bound,
    theta_explicit,
)
from kirkwood.potentials import HardCore, IdealGas, ModelParams, SquareWell
from oracles import tonks_I, tonks_theta, tonks_xi


def test_box_region_basics():
    b = BoxRegion([0.0, 0.0], [1.0, 2.0])
    assert b.volume == 2.0 and b.dim == 2
    assert b.contains(np.array([[0.5, 1.5]]))
    assert not b.contains(np.array([[1.5, 0.5]]))
    with pytest.raises(ValueError):
        BoxRegion([1.0], [0.0])


@pytest.mark.parametrize("z", [0.2, -0.2])
def test_tonks_partition_function(tonks_params, unit_box, z):
    est = partition_function(tonks_params.with_activity(z), unit_box, mc_per_term=20000, rng=0)
    target = {0.2: 1.205, -0.2: 0.805}[z]
    assert est.std_error < 1e-3
    assert est.within(target, 3)


def test_ideal_gas_partition_function_exact(unit_box):
    p = ModelParams(1.0, 0.3, IdealGas())
    loose = partition_function(p, unit_box)
    assert abs(loose.value - math.exp(0.3)) <= loose.tail_bound
    est = partition_function(p, unit_box, tail_tol=1e-13)
    assert est.std_error == 0.0
    assert est.value == pytest.approx(math.exp(0.3), rel=1e-10)


def test_ideal_gas_theta_is_z_power(unit_box):
    p = ModelParams(1.0, 0.3, IdealGas())
    est = theta_explicit(p, unit_box, 2, [0.1, 0.7])
    assert est.value == pytest.approx(0.09, rel=1e-10)


def test_integrals_exact_zero_beyond_packing(unit_box):
    tab = boltzmann_integrals(HardCore(0.5), 1.0, unit_box, [()], 5, 2000, 0)
    assert tab.means[0][4] == 0.0 and tab.means[0][5] == 0.0
    assert np.all(tab.cov[4:] == 0.0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_integrals_match_tonks_oracle(unit_box, k):
    tab = boltzmann_integrals(HardCore(0.5), 1.0, unit_box, [(), [0.3]], 3, 40000, 5)
    for f, x in enumerate([(), (0.3,)]):
        m, s = tab.means[f][k], math.sqrt(tab.cov[k, f, f])
        assert abs(m - tonks_I(k, x)) <= 4 * s + 1e-12


def test_theta_matches_oracle_both_signs(tonks_params, unit_box):
    for z in (0.2, -0.2):
        for x in ([0.0], [0.3], [0.0, 0.7]):
            est = theta_explicit(tonks_params.with_activity(z), unit_box, len(x), x, mc_per_term=20000, rng=2)
            assert abs(est.value - tonks_theta(z, x)) <= 4 * est.std_error + 1e-12


def test_forbidden_points_give_exact_zero(tonks_params, unit_box):
    est = theta_explicit(tonks_params, unit_box, 2, [0.1, 0.2])
    assert est.value == 0.0 and est.std_error == 0.0


def test_theta_outside_disk(tonks_params, unit_box):
    with pytest.raises(OutsideDisk):
        theta_explicit(tonks_params.with_activity(0.5), unit_box, 1, [0.1])


def test_determinism_and_thread_independence(tonks_params, unit_box):
    a = partition_function(tonks_params, unit_box, mc_per_term=70000, rng=11)
    set_threads(4)
    try:
        b = partition_function(tonks_params, unit_box, mc_per_term=70000, rng=(11,))
    finally:
        set_threads(1)
    assert a.value == b.value and a.std_error == b.std_error


def test_exp_tail_values():
    assert exp_tail(1.0, 0) == pytest.approx(math.e - 1, rel=1e-12)
    assert exp_tail(2.0, 3) == pytest.approx(math.exp(2) - (1 + 2 + 2 + 8 / 6), rel=1e-10)


def test_choose_k_max_packing_is_exact(unit_box):
    K, tail = choose_k_max(0.2, 0, HardCore(0.5), 1.0, unit_box, None, 1e-8, 1.0)
    assert K == 3 and tail == 0.0


def test_choose_k_max_meets_tolerance():
    box = BoxRegion([0.0], [1.0])
    pot = SquareWell(0.3, 0.5, 0.8, B=0.5)
    K, tail = choose_k_max(0.1, 1, pot, 1.0, box, None, 1e-8, 0.1)
    assert tail <= 1e-8 * 0.1 * 1.0001


def test_solution_bound_dominates(tonks_params, unit_box):
    est = theta_explicit(tonks_params, unit_box, 1, [0.3])
    assert abs(est.value) <= solution_bound(tonks_params, 1)


def test_poisson_transforms(unit_box):
    corr = PoissonCorrelations(0.3)
    est = janossy_from_correlations(corr, unit_box, 1, [0.5], mc_per_term=2000, rng=0)
    assert abs(est.value - 0.3 * math.exp(-0.3)) <= est.tail_bound + 1e-15
    jan = PoissonJanossy(0.3, unit_box)
    back = correlations_from_janossy(jan, unit_box, 1, [0.5], mc_per_term=2000, rng=0)
    assert abs(back.value - 0.3) <= back.tail_bound + 1e-15


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_theta_symmetric_in_arguments(a, b):
    p = ModelParams(1.0, 0.15, HardCore(0.5))
    box = BoxRegion([0.0], [1.0])
    e1 = theta_explicit(p, box, 2, [a, b], mc_per_term=3000, rng=4)
    e2 = theta_explicit(p, box, 2, [b, a], mc_per_term=3000, rng=4)
    assert e1.value == pytest.approx(e2.value, abs=1e-14)


def test_tonks_oracle_sanity():
    assert tonks_xi(0.2) == pytest.approx(1.205)
    assert tonks_xi(-0.2) == pytest.approx(0.805)
