import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirkwood.errors import ModeUnsupported, OutsideDisk
from kirkwood.grand_canonical import BoxRegion, theta_explicit
from kirkwood.ks_core import (
    Grid,
    ThetaFamily,
    analyticity_diagnostic,
    apply_ks,
    apply_pi,
    grid_error_estimate,
    ks_residual,
    neumann_solve,
    operator_norm_certificate,
    project,
    unit_family,
    zeta_norm,
)
from kirkwood.potentials import HardCore, IdealGas, ModelParams, SquareWell
from oracles import discrete_theta

BOX = BoxRegion([0.0], [1.0])


def test_grid_nodes_and_weights():
    g = Grid(0.0, 1.0, 5)
    np.testing.assert_allclose(g.x, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.weights.sum() == pytest.approx(1.0)
    assert g.index_of(0.5) == 2


@pytest.mark.parametrize("z", [0.15, -0.15])
def test_grid_solution_equals_discrete_explicit_formula(z):
    p = ModelParams(1.0, z, HardCore(0.5))
    th, rep = neumann_solve(p, BOX, 3, nodes=7, tol=1e-14)
    g = Grid.over(BOX, 7)
    for idx in [(0,), (3,), (1, 5), (0, 6), (0, 3, 6)]:
        ref = discrete_theta(z, 1.0, p.potential, g.x, g.weights, 3, len(idx), idx)
        assert th.level(len(idx))[idx] == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_ideal_gas_grid_is_exact_power():
    p = ModelParams(1.0, 0.4, IdealGas())
    th, rep = neumann_solve(p, BOX, 3, nodes=9)
    for n in range(1, 4):
        np.testing.assert_array_equal(th.level(n), np.full((9,) * n, 0.4**n))


def test_residual_small_and_reported(tonks_params):
    th, rep = neumann_solve(tonks_params, BOX, 3, nodes=32)
    assert rep.residual < 1e-10
    assert ks_residual(th, tonks_params, BOX, 3) == pytest.approx(rep.residual)
    assert rep.term_norms[-1] < rep.term_norms[0]


def test_outside_disk_refused():
    p = ModelParams(1.0, 0.99 * math.exp(-1) * 1.001, HardCore(0.5))
    with pytest.raises(OutsideDisk):
        neumann_solve(p, BOX, 3, nodes=8)


def test_grid_mode_is_one_dimensional():
    with pytest.raises(ModeUnsupported):
        neumann_solve(ModelParams(1.0, 0.1, HardCore(0.5), 2), BoxRegion([0, 0], [1, 1]), 2)


def test_estimator_family_rejected_by_grid_operators(tonks_params):
    fam = ThetaFamily(1.0, 2, None, None, evaluator=lambda n, x: 0.0)
    with pytest.raises(ModeUnsupported):
        apply_ks(fam, tonks_params, 2)


def test_grid_agrees_with_monte_carlo_at_half_radius():
    z = 0.5 / math.e
    for sign in (1, -1):
        p = ModelParams(1.0, sign * z, HardCore(0.5))
        th, rep = neumann_solve(p, BOX, 3, nodes=64)
        g = th.grid
        for i in (0, 21, 42):
            est = theta_explicit(p, BOX, 1, [g.x[i]], mc_per_term=20000, rng=1)
            # first-order grid error is of order h
            assert abs(th.level(1)[i] - est.value) < 4 * est.std_error + 3 * g.h


def test_apply_pi_identity_for_nonnegative():
    g = Grid(0.0, 1.0, 6)
    fam = ThetaFamily(1.0, 2, (np.arange(6.0), np.arange(36.0).reshape(6, 6)), g)
    out = apply_pi(fam, HardCore(0.5), 0.0)
    np.testing.assert_array_equal(out.level(2), fam.level(2))


def test_apply_pi_moves_anchor_first():
    # well [0.3, 0.5): three points cannot all be pairwise in the well, so an anchor always exists
    sw = SquareWell(0.3, 1.0, 0.5, B=0.75)
    g = Grid(0.0, 1.0, 8)
    rng = np.random.default_rng(0)
    fam = ThetaFamily(1.0, 3, tuple(rng.uniform(size=(8,) * n) for n in (1, 2, 3)), g)
    out = apply_pi(fam, sw, 0.75).level(3)
    arr = fam.level(3)
    u = sw.radial(np.abs(g.x[:, None] - g.x[None, :]))
    moved = 0
    for idx in np.ndindex(arr.shape):
        w = [sum(u[idx[i], idx[j]] for j in range(3) if j != i) for i in range(3)]
        a = next(i for i in range(3) if w[i] >= -1.5)
        rest = [idx[j] for j in range(3) if j != a]
        assert out[idx] == arr[(idx[a], *rest)]
        moved += a > 0
    assert moved > 0


def test_projection_and_norm():
    g = Grid(0.0, 2.0, 5)
    e = unit_family(g, 2, 2.0)
    pr = project(e, BoxRegion([0.0], [1.0]))
    np.testing.assert_array_equal(pr.level(1), [1, 1, 1, 0, 0])
    assert zeta_norm(e) == 2.0


def test_operator_norm_certificate(tonks_params):
    cert = operator_norm_certificate(tonks_params, Grid(0.0, 1.0, 16))
    assert cert["analytic"] == pytest.approx(math.e)
    assert cert["empirical"] <= cert["analytic"]


def test_grid_error_estimate_small(tonks_params):
    th, rep, thc, errs = grid_error_estimate(tonks_params, BOX, 2)
    assert max(float(e.max()) for e in errs) < 0.02


def test_save_load_roundtrip(tmp_path, tonks_params):
    th, _ = neumann_solve(tonks_params, BOX, 2, nodes=6)
    th.save(tmp_path / "b")
    back = ThetaFamily.load(tmp_path / "b")
    for a, b in zip(th.levels, back.levels):
        np.testing.assert_array_equal(a, b)


def test_analyticity_diagnostic_runs(tonks_params):
    out = analyticity_diagnostic(tonks_params, BOX, 1, (3,), degree=8)
    assert out is not None


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 0.3))
def test_operator_is_linear(c):
    p = ModelParams(1.0, 0.2, HardCore(0.5))
    g = Grid(0.0, 1.0, 6)
    rng = np.random.default_rng(1)
    a = ThetaFamily(1.0, 3, tuple(rng.uniform(size=(6,) * n) for n in (1, 2, 3)), g)
    b = ThetaFamily(1.0, 3, tuple(rng.uniform(size=(6,) * n) for n in (1, 2, 3)), g)
    lhs = apply_ks(a + b.scale(c), p, 3)
    rhs = apply_ks(a, p, 3) + apply_ks(b, p, 3).scale(c)
    for x, y in zip(lhs.levels, rhs.levels):
        np.testing.assert_allclose(x, y, atol=1e-12)
