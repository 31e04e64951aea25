import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kirkwood import gnz
from kirkwood.closure import ClosureModel
from kirkwood.errors import DegenerateEnvironment, KernelBoundViolated
from kirkwood.grand_canonical import BoxRegion, Configuration
from kirkwood.potentials import HardCore, IdealGas, ModelParams, SquareWell
from kirkwood.sampler import sample_batch
from oracles import tonks_kernel


def Q(x, eta, box):
    return gnz.KernelQuery(Configuration(x, dim=1), Configuration(eta, dim=1), box)


@pytest.mark.parametrize("x,eta,target", [
    ([0.0], [0.9], 0.04 / 0.184),
    ([0.0], [], 0.18 / 0.805),
    ([0.0, 0.6], [], 0.04 / 0.805),
    ([0.5], [0.9], 0.0),
])
def test_kernel_oracle_values(tonks, unit_box, x, eta, target):
    est = gnz.papangelou_kernel(tonks, Q(x, eta, unit_box), mc_per_term=20000, rng=0)
    assert abs(est.value - target) <= 4 * est.std_error + est.tail_bound + 1e-12
    assert tonks_kernel(0.2, x, eta) == pytest.approx(target)


def test_ideal_gas_kernel_is_activity_power(unit_box):
    m = ClosureModel(ModelParams(1.0, 0.3, IdealGas()))
    est = gnz.papangelou_kernel(m, Q([0.2, 0.4], [0.7], unit_box), tail_tol=1e-13)
    assert est.value == pytest.approx(0.09, rel=1e-9)


def test_degenerate_environment(tonks, unit_box):
    with pytest.raises(DegenerateEnvironment):
        gnz.papangelou_kernel(tonks, Q([0.0], [0.5, 0.7], unit_box))


def test_query_validation(unit_box):
    with pytest.raises(ValueError):
        Q([], [0.2], unit_box)
    with pytest.raises(ValueError):
        Q([1.5], [], unit_box)


def test_square_well_rejected(unit_box):
    m = ClosureModel(ModelParams(1.0, 0.02, SquareWell(0.3, 0.5, 0.8, B=1.0)))
    with pytest.raises(ValueError):
        gnz.papangelou_kernel(m, Q([0.1], [], unit_box))


def test_kernel_bound_counterexample(tonks, unit_box):
    # the activity bound fails at negative activity; it is reported, not enforced
    est = gnz.papangelou_kernel(tonks, Q([0.0], [], unit_box), mc_per_term=50000, rng=1)
    assert est.value - 5 * est.std_error > gnz.kernel_bound(tonks, 1)
    with pytest.raises(KernelBoundViolated):
        gnz.papangelou_kernel(tonks, Q([0.0], [], unit_box), mc_per_term=50000, rng=1, enforce_bound=True)
    rep = gnz.kernel_bound_check(tonks, gnz.random_queries(tonks, unit_box, 20, rng=3), mc_per_term=5000)
    assert rep["nonnegative"] and rep["queries"] == 20


def test_kernel_batch_matches_oracle(tonks, unit_box):
    x = np.array([[[0.0]], [[0.1]], [[0.0]]])
    etas = [np.zeros((0, 1)), np.array([[0.9]]), np.array([[0.7]])]
    vals, errs = gnz.kernel_batch(tonks, unit_box, x, etas, inner=20000, rng=2)
    for v, e, xi, eta in zip(vals, errs, x, etas):
        assert abs(v - tonks_kernel(0.2, xi[:, 0], eta[:, 0])) <= 4 * e + 1e-12


@pytest.mark.parametrize("x,eta", [([0.0], [0.9]), ([0.0, 0.6], []), ([0.2], [0.8])])
def test_kernel_recursion(tonks, unit_box, x, eta):
    rep = gnz.kernel_recursion_check(tonks, Q(x, eta, unit_box), mc_per_term=20000, rng=4)
    assert rep["passed"], rep
    # lhs_std omits the shared denominator's noise, so compare loosely
    assert rep["lhs"] == pytest.approx(tonks_kernel(0.2, x, eta), rel=5e-3)


def test_test_function_battery():
    c = gnz.test_function("const")
    h = gnz.test_function("hardcore_indicator", radius=0.7)
    p = gnz.test_function("product_window", lo=0.0, hi=0.75)
    x, rest = np.array([[0.1]]), np.array([[0.9], [0.5]])
    assert c(x, rest) == 1.0
    assert h(x, rest) == 0.0 and h(x, np.array([[0.9]])) == 1.0
    assert p(x, rest) == 0.5
    with pytest.raises(ValueError):
        gnz.test_function("nope")


def test_gnz_residual_small(tonks, unit_box):
    b = sample_batch(tonks, unit_box, 20000, rng=7, inner=300, mc_per_term=50000)
    rep = gnz.gnz_residual(tonks, unit_box, gnz.BATTERY, b, n=1, kernel_pairs=20000, inner=300, rng=8)
    assert rep["passed"], rep["results"]
    assert len(rep["results"]) == 3
    single = gnz.gnz_residual(tonks, unit_box, "const", b, n=1, kernel_pairs=2000, inner=200, rng=8)
    assert len(single["results"]) == 1


def test_window_convergence_reports(tonks):
    boxes = [BoxRegion([0.0], [1.0]), BoxRegion([0.0], [1.5])]
    rep = gnz.window_convergence(tonks, boxes, [0.0], mc_per_term=20000, rng=5)
    assert len(rep["differences"]) == 1
    with pytest.raises(ValueError):
        gnz.window_convergence(tonks, boxes[::-1], [0.0])


@settings(max_examples=12, deadline=None)
@given(st.floats(0.0, 1.0), st.lists(st.floats(0.0, 1.0), max_size=1))
def test_kernel_vs_oracle_property(x, eta):
    m = ClosureModel(ModelParams(1.0, 0.2, HardCore(0.5)))
    box = BoxRegion([0.0], [1.0])
    target = tonks_kernel(0.2, [x], eta)
    est = gnz.papangelou_kernel(m, Q([x], eta, box), mc_per_term=5000, rng=9)
    assert est.value >= -3 * est.std_error
    assert abs(est.value - target) <= 5 * est.std_error + 1e-12


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_cocycle_property(x1, x2):
    # kappa(x1, x2; eta) = kappa(x1; eta) kappa(x2; eta + x1)
    assume(abs(x1 - x2) > 0.55)
    m = ClosureModel(ModelParams(1.0, 0.2, HardCore(0.5)))
    box = BoxRegion([0.0], [1.0])
    two = gnz.papangelou_kernel(m, Q([x1, x2], [], box), mc_per_term=20000, rng=10)
    a = gnz.papangelou_kernel(m, Q([x1], [], box), mc_per_term=20000, rng=11)
    b = gnz.papangelou_kernel(m, Q([x2], [x1], box), mc_per_term=20000, rng=12)
    sd = math.sqrt(two.std_error**2 + (a.std_error * b.value) ** 2 + (b.std_error * a.value) ** 2)
    assert abs(two.value - a.value * b.value) <= 5 * sd + 1e-12
