import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirkwood.closure import (
    ClosureCorrelations,
    ClosureJanossyEvaluator,
    ClosureModel,
    closure_correlation,
    closure_janossy,
    lenard_check,
    ruelle_check,
    sign_alternation,
    superposition_product,
    void_probability,
)
from kirkwood.errors import OutsideDisk
from kirkwood.grand_canonical import BoxRegion
from kirkwood.potentials import HardCore, IdealGas, ModelParams, SquareWell
from oracles import tonks_janossy

SW = SquareWell(0.3, 0.5, 0.8, B=1.0)


def test_model_validation():
    with pytest.raises(ValueError):
        ClosureModel(ModelParams(1.0, -0.1, HardCore(0.5)))
    with pytest.raises(OutsideDisk):
        ClosureModel(ModelParams(1.0, 0.4, HardCore(0.5)))
    m = ClosureModel(ModelParams(1.0, 0.4, HardCore(0.5)), override_disk_check=True)
    assert m.z == 0.4


def test_closure_correlation_is_superposition(tonks):
    assert closure_correlation(tonks, [0.0, 0.6]) == pytest.approx(0.04)
    assert closure_correlation(tonks, [0.0, 0.3]) == 0.0
    m = ClosureModel(ModelParams(1.0, 0.02, SW))
    x = [0.0, 0.5, 1.2]
    assert closure_correlation(m, x) == pytest.approx(superposition_product(m, x), rel=1e-14)


@pytest.mark.parametrize("x,target", [([], 0.805), ([0.0], 0.18), ([0.5], 0.2), ([0.0, 0.6], 0.04)])
def test_tonks_janossy_values(tonks, unit_box, x, target):
    est = closure_janossy(tonks, unit_box, x, mc_per_term=20000, rng=0)
    assert est.within(target, 3)
    assert tonks_janossy(0.2, x) == pytest.approx(target)


def test_void_probability(tonks, unit_box):
    assert void_probability(tonks, unit_box).within(0.805, 3)


def test_evaluator_rows_are_unbiased(tonks, unit_box):
    ev = ClosureJanossyEvaluator(tonks, unit_box, inner=2000)
    pts = np.array([[[0.0]], [[0.3]], [[0.5]]])
    vals, errs = ev.evaluate_with_error(pts, (1,))
    for v, e, x in zip(vals, errs, (0.0, 0.3, 0.5)):
        assert abs(v - tonks_janossy(0.2, [x])) <= 4 * e + 1e-12
    assert ev.sup(2) == pytest.approx(0.04)


def test_lenard_and_sign_alternation(tonks, unit_box):
    probes = [[0.1], [0.0, 0.7], [0.4, 0.9]]
    rep = lenard_check(tonks, unit_box, probes, mc_per_term=5000, rng=2)
    assert rep["passed"]
    assert rep["scalar"]["value"] == pytest.approx(0.805, abs=5e-3)
    sa = sign_alternation(tonks, unit_box, probes, mc_per_term=5000, rng=2)
    assert sa["passed"]


def test_ruelle_exact_on_random_probes():
    m = ClosureModel(ModelParams(1.0, 0.02, SW))
    rng = np.random.default_rng(0)
    probes = [rng.uniform(0, 2, size=rng.integers(1, 6)) for _ in range(300)]
    rep = ruelle_check(m, probes)
    assert rep["passed"] and rep["violations"] == []


def test_ruelle_detects_understated_B():
    bad = SquareWell(0.3, 1.0, 0.8, B=0.1)
    m = ClosureModel(ModelParams(1.0, 0.01, bad))
    rep = ruelle_check(m, [[0.0, 0.35, 0.7]])
    assert not rep["passed"]


def test_ideal_gas_closure_is_poisson(unit_box):
    m = ClosureModel(ModelParams(1.0, 0.3, IdealGas()))
    est = closure_janossy(m, unit_box, [0.2, 0.8])
    assert est.value == pytest.approx(0.09 * math.exp(-0.3), rel=1e-7)


def test_correlations_evaluator(tonks):
    c = ClosureCorrelations(tonks)
    vals = c.evaluate(np.array([[[0.0], [0.6]], [[0.0], [0.2]]]))
    np.testing.assert_allclose(vals, [0.04, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=5))
def test_ruelle_bound_property(xs):
    m = ClosureModel(ModelParams(1.0, 0.02, SW))
    assert closure_correlation(m, xs) <= m.xi ** len(xs) * (1 + 1e-12)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0))
def test_janossy_nonnegative_property(x):
    m = ClosureModel(ModelParams(1.0, 0.2, HardCore(0.5)))
    est = closure_janossy(m, BoxRegion([0.0], [1.0]), [x], mc_per_term=3000, rng=3)
    assert est.value >= -3 * est.std_error
