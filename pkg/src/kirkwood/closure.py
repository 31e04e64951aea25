"""The Kirkwood closure process with phi = exp(-beta u) and intensity z.

Its correlation functions are z^n exp(-beta H(x_n)) in closed form.  Its
Janossy densities on a box are the finite-volume solution at activity -z up
to sign and normalization:

    j^(n)(x_n) = (-1)^n Xi(-z) theta^(n)(-z; x_n) = z^n sum_k (-z)^k/k! I_k(x_n),

so the Xi factor cancels and no ratio has to be estimated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _rng
from .errors import NegativityViolated, OutsideDisk
from .grand_canonical import (
    DEFAULT_TAIL_TOL,
    BoxRegion,
    McEstimate,
    _coeffs,
    boltzmann_integrals,
    choose_k_max,
    janossy_from_correlations,
    partition_function,
    theta_explicit,
)
from .hamiltonian import Configuration, energy, pair_energy_batch
from .potentials import ModelParams, z0

__all__ = [
    "ClosureModel",
    "ClosureCorrelations",
    "ClosureJanossyEvaluator",
    "closure_correlation",
    "superposition_product",
    "closure_janossy",
    "janossy_table",
    "lenard_check",
    "ruelle_check",
    "void_probability",
    "sign_alternation",
]


@dataclass(frozen=True)
class ClosureModel:
    """Closure process for (beta, z, u) with 0 < z < z0.

    z0 is a sufficient radius for existence only; ``override_disk_check``
    allows exploration beyond it without any correctness claim.
    """

    params: ModelParams
    override_disk_check: bool = False

    def __post_init__(self):
        z = self.params.activity
        if isinstance(z, complex) or not z > 0:
            raise ValueError("closure intensity must be a positive real")
        if not self.override_disk_check:
            radius = z0(self.params.potential, self.params.beta, self.params.dim)
            if z >= radius:
                raise OutsideDisk(f"z={z:.6g} >= z0={radius:.6g}; existence is only proved below z0 "
                                  "(a sufficient condition, not a necessary one)")

    @property
    def z(self) -> float:
        return float(self.params.activity)

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def potential(self):
        return self.params.potential

    @property
    def B(self) -> float:
        return self.params.potential.stability_B

    @property
    def xi(self) -> float:
        """Ruelle constant z e^{beta B}."""
        return self.z * math.exp(self.beta * self.B)

    @property
    def negative(self) -> ModelParams:
        return self.params.with_activity(-self.z)

    def key(self) -> str:
        import json

        return json.dumps({"beta": self.beta, "z": self.z, "dim": self.params.dim,
                           "potential": self.potential.to_dict()}, sort_keys=True)


def _cfg(x_n, dim) -> Configuration:
    return x_n if isinstance(x_n, Configuration) else Configuration(x_n, dim=dim)


def closure_correlation(model: ClosureModel, x_n) -> float:
    """rho^(n)(x_n) = z^n prod_{i<j} exp(-beta u(x_i - x_j))."""
    x = _cfg(x_n, model.params.dim)
    n = len(x)
    if n < 1:
        raise ValueError("correlation functions start at n = 1")
    h = energy(model.potential, x)
    if not math.isfinite(h):
        return 0.0
    return model.z**n * math.exp(-model.beta * h)


def superposition_product(model: ClosureModel, x_n) -> float:
    """rho^n prod g(x_i - x_j) built from the closure's own rho^(1) and rho^(2)."""
    x = _cfg(x_n, model.params.dim)
    n = len(x)
    rho = closure_correlation(model, x.subset([0]))
    out = rho**n
    for i in range(n):
        for j in range(i + 1, n):
            g = closure_correlation(model, x.subset([i, j])) / rho**2
            out *= g
    return out


def janossy_table(model: ClosureModel, box: BoxRegion, fixed: Sequence, k_max: Optional[int], mc_per_term: int,
                  rng, tail_tol: float = DEFAULT_TAIL_TOL):
    """Shared integral table and truncation for Janossy values of several configurations."""
    pot, beta, z = model.potential, model.beta, model.z
    K, tail = 0, 0.0
    for f in fixed:
        n = len(f)
        Kf, tf = choose_k_max(z, n, pot, beta, box, k_max, tail_tol, z**n if n else 1.0)
        K, tail = max(K, Kf), max(tail, tf)
    return boltzmann_integrals(pot, beta, box, fixed, K, mc_per_term, rng), K, tail


def _check_sign(est: McEstimate, what: str) -> None:
    if est.value < -5 * est.std_error - est.tail_bound - 1e-15:
        raise NegativityViolated(f"{what} = {est.value:.3g} below -5 sigma ({est.std_error:.3g})")
    if est.value < -3 * est.std_error - est.tail_bound - 1e-15:
        warnings.warn(f"{what} = {est.value:.3g} below -3 sigma", RuntimeWarning, stacklevel=3)


def closure_janossy(model: ClosureModel, box: BoxRegion, x_n, k_max: Optional[int] = None,
                    mc_per_term: int = 20000, rng: _rng.SeedLike = 0,
                    tail_tol: float = DEFAULT_TAIL_TOL) -> McEstimate:
    """j^(n)_Lambda(x_n) = z^n sum_k (-z)^k/k! I_k(x_n); n = 0 gives Xi(-z)."""
    x = _cfg(x_n, box.dim)
    if len(x) and not box.contains(x.points):
        raise ValueError("x_n must lie in the box")
    n = len(x)
    seed = _rng.as_seed_tuple(rng)
    if n == 0:
        est = partition_function(model.negative, box, k_max, mc_per_term, rng, tail_tol)
    else:
        tab, K, tail = janossy_table(model, box, [x], k_max, mc_per_term, rng, tail_tol)
        coeffs = model.z**n * _coeffs(-model.z, 0, K)
        val, sd = tab.series(coeffs, 0)
        est = McEstimate(float(np.real(val)), sd, mc_per_term, seed, K, float(tail))
    _check_sign(est, f"j^({n})")
    return est


@dataclass(frozen=True)
class ClosureCorrelations:
    """Correlation evaluator z^m exp(-beta H) for the transform routines."""

    model: ClosureModel

    def evaluate(self, pts, seed=()):
        pts = np.asarray(pts, dtype=float)
        m = pts.shape[1]
        with np.errstate(over="ignore"):
            return self.model.z**m * np.exp(-self.model.beta * pair_energy_batch(self.model.potential, pts))

    def sup(self, m):
        return self.model.xi**m


@dataclass(frozen=True)
class ClosureJanossyEvaluator:
    """Row-wise independent unbiased Janossy estimates with ``inner`` samples per row.

    Each row gets its own proposal points, so estimates for different rows
    are independent; this makes outer Monte Carlo averages and rejection
    sampling unbiased and their sample std honest.
    """

    model: ClosureModel
    box: BoxRegion
    inner: int = 1000
    tail_tol: float = DEFAULT_TAIL_TOL
    block: int = 1 << 20

    def k_max(self, m: int) -> tuple[int, float]:
        model = self.model
        return choose_k_max(model.z, m, model.potential, model.beta, self.box, None, self.tail_tol,
                            model.z**m if m else 1.0)

    def sup(self, m: int) -> float:
        return self.model.xi**m

    def evaluate(self, pts, seed=()):
        return self.evaluate_with_error(pts, seed)[0]

    def evaluate_with_error(self, pts, seed=()):
        """Estimates and their inner std errors for rows of ``pts`` (M, m, d)."""
        pts = np.asarray(pts, dtype=float)
        M, m = pts.shape[0], pts.shape[1]
        model, box = self.model, self.box
        pot, beta, z = model.potential, model.beta, model.z
        K, _ = self.k_max(m)
        with np.errstate(over="ignore"):
            base = np.exp(-beta * pair_energy_batch(pot, pts)) if m > 1 else np.ones(M)
        value = base.copy()
        var = np.zeros(M)
        alive = base > 0
        limit = pot.max_points(box.lengths)
        vol = box.volume
        for k in range(1, K + 1):
            if limit is not None and m + k > limit:
                break
            coef = (-z) ** k / math.factorial(k) * vol**k
            rows = np.flatnonzero(alive)
            if rows.size == 0:
                break
            if pot.kind == "ideal_gas":
                # every Boltzmann weight is 1: exact, no draws needed
                value[rows] += coef
                continue
            acc = np.zeros(rows.size)
            acc2 = np.zeros(rows.size)
            # chunk rows so that (rows, inner, m + k, d) stays bounded in memory
            per = max(1, self.block // max(1, self.inner * (m + k) ** 2))
            for c0 in range(0, rows.size, per):
                sel = rows[c0:c0 + per]
                gen = _rng.stream(seed, _rng.TAG_JOINT, m, k, c0)
                y = box.uniform(gen, (sel.size, self.inner, k))
                x = np.broadcast_to(pts[sel][:, None], (sel.size, self.inner, m, box.dim))
                allp = np.concatenate([x, y], axis=2).reshape(sel.size * self.inner, m + k, box.dim)
                with np.errstate(over="ignore"):
                    w = np.exp(-beta * pair_energy_batch(pot, allp)).reshape(sel.size, self.inner)
                acc[c0:c0 + sel.size] = w.mean(axis=1)
                acc2[c0:c0 + sel.size] = w.var(axis=1, ddof=1) / self.inner if self.inner > 1 else 0.0
            value[rows] += coef * acc
            var[rows] += coef**2 * acc2
        return z**m * value, z**m * np.sqrt(var)


def lenard_check(model: ClosureModel, box: BoxRegion, sample_points: Sequence, k_max: Optional[int] = None,
                 mc_per_term: int = 20000, rng: _rng.SeedLike = 0, tail_tol: float = 1e-8) -> dict:
    """Evaluate both Lenard positivity expressions from the closure correlations.

    The pointwise expression sum_k (-1)^k/k! int rho^(n+k)(x_n, y_k) dy_k is
    computed by the correlation-to-Janossy transform on its own streams; the
    scalar expression 1 + sum_k (-1)^k/k! int rho^(k) equals Xi(-z).
    Every value must be >= -5 std errors.
    """
    corr = ClosureCorrelations(model)
    seed = _rng.as_seed_tuple(rng)
    points = []
    ok = True
    for i, x_n in enumerate(sample_points):
        x = _cfg(x_n, box.dim)
        if not box.contains(x.points):
            raise ValueError("sample points must lie in the box")
        est = janossy_from_correlations(corr, box, len(x), x, k_max, mc_per_term,
                                        _rng.child_seed(seed, i), tail_tol)
        margin = est.value + 5 * est.std_error + est.tail_bound
        ok &= margin >= 0
        points.append({"n": len(x), "value": est.value, "std_error": est.std_error,
                       "tail_bound": est.tail_bound, "margin": margin})
    scalar = partition_function(model.negative, box, k_max=None, mc_per_term=mc_per_term, rng=rng)
    s_margin = scalar.value + 5 * scalar.std_error + scalar.tail_bound
    ok &= s_margin >= 0
    return {"passed": bool(ok), "points": points,
            "scalar": {**scalar.to_dict(), "margin": s_margin}, "seed": list(seed)}


def ruelle_check(model: ClosureModel, probes: Sequence) -> dict:
    """rho^(n)(x_n) <= (z e^{beta B})^n, decided exactly on the energies.

    The inequality is equivalent to H(x_n) + B n >= 0; both sides are
    compared with an exactly rounded sum, no Monte Carlo.
    """
    pot, B = model.potential, model.B
    violations = []
    for i, x_n in enumerate(probes):
        x = _cfg(x_n, model.params.dim)
        n = len(x)
        if n < 2:
            continue  # rho^(1) = z <= z e^{beta B}
        iu, ju = np.triu_indices(n, 1)
        u = pot(x.points[iu] - x.points[ju])
        if np.any(np.isinf(u)):
            continue
        if math.fsum(list(u) + [B] * n) < 0:
            violations.append(i)
    return {"passed": not violations, "violations": violations, "probes": len(probes), "xi": model.xi}


def void_probability(model: ClosureModel, box: BoxRegion, k_max: Optional[int] = None, mc_per_term: int = 20000,
                     rng: _rng.SeedLike = 0) -> McEstimate:
    """P(N_Lambda = 0) = Xi_Lambda(-z)."""
    return partition_function(model.negative, box, k_max, mc_per_term, rng)


def sign_alternation(model: ClosureModel, box: BoxRegion, probes: Sequence, k_max: Optional[int] = None,
                     mc_per_term: int = 20000, rng: _rng.SeedLike = 0) -> dict:
    """(-1)^n theta^(n)(-z; x_n) >= -5 sigma at every probe."""
    out, ok = [], True
    for x_n in probes:
        x = _cfg(x_n, box.dim)
        est = theta_explicit(model.negative, box, len(x), x, k_max, mc_per_term, rng)
        v = (-1) ** len(x) * est.value
        margin = v + 5 * est.std_error + est.tail_bound
        ok &= margin >= 0
        out.append({"n": len(x), "value": v, "std_error": est.std_error, "margin": margin})
    return {"passed": bool(ok), "points": out}
