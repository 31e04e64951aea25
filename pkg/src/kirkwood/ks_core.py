"""Kirkwood-Salsburg operator on truncated sequence spaces and its Neumann solver.

Grid mode works in one dimension: level n of a family is an array of shape
(G,)*n holding theta^(n) at the tensor nodes of a uniform trapezoid grid.
Integrals against products of Mayer factors become contractions with

    F[x, y] = f_beta(x - y) w_y,

and the prefactor exp(-beta W(x | x_n)) is the product of the matrix
Phi[x, y] = exp(-beta u(x - y)) over the points of x_n.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ModeUnsupported, OutsideDisk
from .grand_canonical import BoxRegion
from .potentials import ModelParams, PairPotential, c_beta, z0

__all__ = [
    "Grid",
    "ThetaFamily",
    "SolverReport",
    "apply_ks",
    "apply_pi",
    "project",
    "unit_family",
    "zeta_norm",
    "neumann_solve",
    "ks_residual",
    "operator_norm_certificate",
    "grid_error_estimate",
    "analyticity_diagnostic",
    "DEFAULT_NODES",
]

DEFAULT_NODES = 64


@dataclass(frozen=True)
class Grid:
    """Uniform grid with trapezoid weights on [a, b]."""

    a: float
    b: float
    nodes: int = DEFAULT_NODES

    def __post_init__(self):
        if not self.b > self.a or self.nodes < 2:
            raise ValueError("grid needs b > a and at least two nodes")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.nodes)

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.nodes - 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.nodes, self.h)
        w[0] = w[-1] = self.h / 2
        return w

    @classmethod
    def over(cls, box: BoxRegion, nodes: int = DEFAULT_NODES) -> "Grid":
        if box.dim != 1:
            raise ModeUnsupported("grid mode is one-dimensional")
        return cls(box.lo[0], box.hi[0], nodes)

    def index_of(self, x: float, tol: float = 1e-9) -> int:
        i = int(round((x - self.a) / self.h))
        if not 0 <= i < self.nodes or abs(self.x[i] - x) > tol * max(1.0, abs(x)):
            raise ValueError(f"{x} is not a grid node")
        return i

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "nodes": self.nodes}


@dataclass(frozen=True)
class ThetaFamily:
    """Truncated sequence (theta^(n))_{n <= n_max} with norm weight zeta.

    Grid mode stores ``levels``; estimator mode stores an ``evaluator``
    ``(n, x_n) -> McEstimate`` and cannot be fed to the grid operators.
    ``tail`` records the certified bound on what truncation left out.
    """

    zeta: float
    n_max: int
    levels: Optional[tuple] = None
    grid: Optional[Grid] = None
    evaluator: Optional[Callable] = None
    tail: float = 0.0

    @property
    def mode(self) -> str:
        return "grid" if self.levels is not None else "estimator"

    def level(self, n: int) -> np.ndarray:
        self._need_grid()
        return self.levels[n - 1]

    def _need_grid(self):
        if self.levels is None:
            raise ModeUnsupported("operation needs a grid-mode family")

    def at(self, n: int, x_n) -> complex:
        """Value of theta^(n) at a tuple of grid nodes (or via the evaluator)."""
        if self.levels is None:
            return self.evaluator(n, x_n)
        idx = tuple(self.grid.index_of(float(v)) for v in np.ravel(x_n))
        return self.levels[n - 1][idx]

    def with_levels(self, levels) -> "ThetaFamily":
        return replace(self, levels=tuple(levels))

    def __add__(self, other: "ThetaFamily") -> "ThetaFamily":
        return self.with_levels(a + b for a, b in zip(self.levels, other.levels))

    def __sub__(self, other: "ThetaFamily") -> "ThetaFamily":
        return self.with_levels(a - b for a, b in zip(self.levels, other.levels))

    def scale(self, c) -> "ThetaFamily":
        return self.with_levels(c * a for a in self.levels)

    # --- JSON + CSV bundle -------------------------------------------------
    def save(self, directory) -> Path:
        self._need_grid()
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"zeta": self.zeta, "n_max": self.n_max, "grid": self.grid.to_dict(), "tail": self.tail,
                "complex": bool(any(np.iscomplexobj(a) for a in self.levels))}
        (out / "theta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        x = self.grid.x
        for n, arr in enumerate(self.levels, start=1):
            idx = np.indices(arr.shape).reshape(n, -1).T
            cols = [x[idx[:, i]] for i in range(n)]
            vals = arr.reshape(-1)
            if meta["complex"]:
                cols += [vals.real, vals.imag]
                header = ",".join([f"x{i + 1}" for i in range(n)] + ["re", "im"])
            else:
                cols.append(vals.real)
                header = ",".join([f"x{i + 1}" for i in range(n)] + ["value"])
            np.savetxt(out / f"level_{n}.csv", np.column_stack(cols), delimiter=",", header=header,
                       comments="", fmt="%.17g")
        return out

    @classmethod
    def load(cls, directory) -> "ThetaFamily":
        d = Path(directory)
        meta = json.loads((d / "theta.json").read_text())
        grid = Grid(**meta["grid"])
        levels = []
        for n in range(1, meta["n_max"] + 1):
            data = np.loadtxt(d / f"level_{n}.csv", delimiter=",", skiprows=1, ndmin=2)
            vals = data[:, n] + 1j * data[:, n + 1] if meta["complex"] else data[:, n]
            levels.append(vals.reshape((grid.nodes,) * n))
        return cls(meta["zeta"], meta["n_max"], tuple(levels), grid, None, meta["tail"])


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    residual: float
    tail_bound: float
    z_ratio: float
    mode: str = "grid"
    truncation_tail: float = 0.0
    term_norms: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.residual < 0 or self.tail_bound < 0:
            raise ValueError("residual and tail bound are nonnegative")

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual, "tail_bound": self.tail_bound,
                "z_ratio": self.z_ratio, "mode": self.mode, "truncation_tail": self.truncation_tail}


# --- grid kernels -----------------------------------------------------------------


def _pair_matrices(pot: PairPotential, beta: float, grid: Grid):
    x = grid.x
    d = x[:, None] - x[None, :]
    u = pot.radial(np.abs(d))
    with np.errstate(over="ignore"):
        phi = np.exp(-beta * u)
    f = np.expm1(-beta * u)
    return f * grid.weights[None, :], phi, u


def _contract_tail(arr: np.ndarray, k: int, F: np.ndarray) -> np.ndarray:
    """sum over the last k axes y_1..y_k of arr * prod_i F[x, y_i], x placed first."""
    t = np.tensordot(arr, F, axes=([arr.ndim - 1], [1]))  # (..., y_1..y_{k-1}, x)
    for _ in range(k - 1):
        # contract the axis just before x, keeping x shared
        t = np.einsum("...yx,xy->...x", t, F, optimize=True)
    return np.moveaxis(t, -1, 0)


def _boltzmann_prefactor(phi: np.ndarray, n: int) -> np.ndarray:
    """E[x, x_1..x_n] = prod_i Phi[x, x_i]."""
    out = np.ones((phi.shape[0],) * (n + 1))
    for i in range(n):
        shape = [phi.shape[0]] + [1] * n
        shape[i + 1] = phi.shape[0]
        out = out * phi.reshape(shape)
    return out


class _Operator:
    """Cached grid data for K, Pi and P at fixed (potential, beta, grid)."""

    def __init__(self, pot: PairPotential, beta: float, grid: Grid, n_max: int):
        self.F, self.phi, self.u = _pair_matrices(pot, beta, grid)
        self.n_max = n_max
        self.pre = [None] + [_boltzmann_prefactor(self.phi, n) for n in range(1, n_max)]
        self.pot = pot
        self._anchor = {}

    def apply_k(self, levels, K_max):
        N = self.n_max
        out = []
        lvl1 = 0.0
        for k in range(1, min(K_max, N) + 1):
            lvl1 = lvl1 + _contract_tail(levels[k - 1], k, self.F) / math.factorial(k)
        out.append(np.zeros(levels[0].shape, dtype=levels[0].dtype) + lvl1)
        for n in range(1, N):
            acc = np.broadcast_to(levels[n - 1], (self.F.shape[0],) + levels[n - 1].shape)
            acc = acc.astype(np.result_type(levels[n - 1], float), copy=True)
            for k in range(1, min(K_max, N - n) + 1):
                acc += _contract_tail(levels[n + k - 1], k, self.F) / math.factorial(k)
            out.append(self.pre[n] * acc)
        return out

    def anchors(self, n: int, B: float) -> Optional[np.ndarray]:
        if n == 1 or self.pot.nonnegative:
            return None
        if n not in self._anchor:
            G = self.u.shape[0]
            idx = np.indices((G,) * n, sparse=True)
            anchor = np.full((G,) * n, -1, dtype=np.int64)
            for i in range(n):
                w = 0.0
                for j in range(n):
                    if j != i:
                        w = w + self.u[idx[i], idx[j]]
                ok = (w >= -2 * B) & (anchor < 0)
                anchor = np.where(ok, i, anchor)
            if np.any(anchor < 0):
                from .errors import NoAnchor

                raise NoAnchor("a grid configuration has no anchor; the declared B is inconsistent")
            self._anchor[n] = anchor if np.any(anchor > 0) else None
        return self._anchor[n]

    def apply_pi(self, levels, B):
        out = []
        for n, arr in enumerate(levels, start=1):
            anchor = self.anchors(n, B)
            if anchor is None:
                out.append(arr)
                continue
            res = arr.copy()
            for a in range(1, n):
                res = np.where(anchor == a, np.moveaxis(arr, 0, a), res)
            out.append(res)
        return out


def _operator(theta: ThetaFamily, params: ModelParams) -> _Operator:
    theta._need_grid()
    return _Operator(params.potential, params.beta, theta.grid, theta.n_max)


def apply_ks(theta: ThetaFamily, params: ModelParams, K_max: int) -> ThetaFamily:
    """K theta on the grid, inner k-series cut at min(K_max, N_max - n)."""
    theta._need_grid()
    if theta.n_max < 2:
        raise ValueError("apply_ks needs N_max >= 2")
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    return theta.with_levels(_operator(theta, params).apply_k(theta.levels, K_max))


def apply_pi(theta: ThetaFamily, pot: PairPotential, B: float, beta: float = 1.0) -> ThetaFamily:
    """(Pi theta)^(n)(x_n) = theta^(n)(x_{i*}, x'_{n-1}) with i* the anchor index."""
    theta._need_grid()
    op = _Operator(pot, beta, theta.grid, theta.n_max)
    return theta.with_levels(op.apply_pi(theta.levels, B))


def _indicator(grid: Grid, box: BoxRegion) -> np.ndarray:
    x = grid.x
    return ((x >= box.lo[0]) & (x <= box.hi[0])).astype(float)


def _project_levels(levels, ind):
    out = []
    for n, arr in enumerate(levels, start=1):
        m = np.ones((1,) * n)
        for i in range(n):
            shape = [1] * n
            shape[i] = ind.size
            m = m * ind.reshape(shape)
        out.append(arr * m)
    return out


def project(theta: ThetaFamily, box: BoxRegion) -> ThetaFamily:
    """Multiply theta^(n) by the indicator of box^n (at the grid nodes)."""
    theta._need_grid()
    return theta.with_levels(_project_levels(theta.levels, _indicator(theta.grid, box)))


def unit_family(grid: Grid, n_max: int, zeta: float, dtype=float) -> ThetaFamily:
    """e_1: theta^(1) = 1 and all higher levels 0."""
    levels = [np.ones(grid.nodes, dtype=dtype)] + [np.zeros((grid.nodes,) * n, dtype=dtype)
                                                   for n in range(2, n_max + 1)]
    return ThetaFamily(zeta, n_max, tuple(levels), grid)


def zeta_norm(theta: ThetaFamily, zeta: Optional[float] = None) -> float:
    theta._need_grid()
    zeta = theta.zeta if zeta is None else zeta
    return max(zeta**n * float(np.max(np.abs(a))) if a.size else 0.0 for n, a in enumerate(theta.levels, 1))


def _zeta_for(params: ModelParams) -> float:
    C = c_beta(params.potential, params.beta, params.dim)
    return C if C > 0 else 1.0


def _truncation_tail(params: ModelParams, box: BoxRegion, n_max: int) -> float:
    """Certified size of the inner-series terms with n + k > N_max that the grid drops."""
    pot = params.potential
    limit = pot.max_points(box.lengths)
    if limit is not None and n_max >= limit:
        return 0.0
    C = c_beta(pot, params.beta, params.dim)
    if C == 0:
        return 0.0
    radius = z0(pot, params.beta, params.dim)
    a = abs(params.activity)
    rho = C * max(C * a / (1 - a / radius), 1.0)
    pre = math.exp(2 * params.beta * pot.stability_B)
    worst = 0.0
    for n in range(0, n_max):
        s = 0.0
        for k in range(n_max - n + 1, n_max - n + 60):
            s += C**k / math.factorial(k) * rho ** (n + k)
        worst = max(worst, pre * s)
    return worst


def ks_residual(theta: ThetaFamily, params: ModelParams, box: BoxRegion, K_max: int,
                switched: bool = True) -> float:
    """zeta-norm of theta - z P (Pi) K theta - z P e_1."""
    op = _operator(theta, params)
    k = op.apply_k(theta.levels, K_max)
    if switched:
        k = op.apply_pi(k, params.potential.stability_B)
    ind = _indicator(theta.grid, box)
    k = _project_levels(k, ind)
    z = params.activity
    e = unit_family(theta.grid, theta.n_max, theta.zeta)
    e_levels = _project_levels(e.levels, ind)
    res = [t - z * a - z * b for t, a, b in zip(theta.levels, k, e_levels)]
    return zeta_norm(theta.with_levels(res))


def neumann_solve(params: ModelParams, box: BoxRegion, N_max: int, K_max: Optional[int] = None,
                  tol: float = 1e-10, grid: Optional[Grid] = None, nodes: int = DEFAULT_NODES,
                  margin: float = 0.99, switched: bool = True, max_iter: int = 10000):
    """theta_Lambda(z) = sum_m (z P Pi K)^m z P e_1 on a one-dimensional grid.

    Refuses |z| > margin * z0; z0 is only a sufficient radius.  Iteration
    stops once the zeta-norm of a term drops below tol (1 - |z|/z0).
    """
    if box.dim != 1 or params.dim != 1:
        raise ModeUnsupported("grid mode is one-dimensional")
    if not 1 <= N_max <= 4:
        raise ValueError("grid mode supports 1 <= N_max <= 4")
    grid = grid or Grid.over(box, nodes)
    pot, z = params.potential, params.activity
    radius = z0(pot, params.beta, params.dim)
    ratio = abs(z) / radius if math.isfinite(radius) else 0.0
    if ratio >= 1.0 or (ratio > margin):
        raise OutsideDisk(f"|z|/z0 = {ratio:.4g} exceeds the allowed margin {margin}; "
                          "z0 is a sufficient radius only")
    K_max = N_max if K_max is None else K_max
    zeta = _zeta_for(params)
    dtype = complex if isinstance(z, complex) else float
    e = unit_family(grid, N_max, zeta, dtype)
    ind = _indicator(grid, box)
    term = _project_levels([z * a for a in e.levels], ind)
    total = [a.copy() for a in term]
    first = zeta_norm(e.with_levels(term))
    if N_max < 2:
        op = None
    else:
        op = _Operator(pot, params.beta, grid, N_max)
    norms = [first]
    m = 0
    threshold = tol * (1 - ratio)
    while op is not None and norms[-1] >= threshold and norms[-1] > 0 and m < max_iter:
        k = op.apply_k(term, K_max)
        if switched:
            k = op.apply_pi(k, pot.stability_B)
        term = _project_levels([z * a for a in k], ind)
        m += 1
        norms.append(zeta_norm(e.with_levels(term)))
        total = [a + b for a, b in zip(total, term)]
    tail = ratio ** (m + 1) / (1 - ratio) * first if ratio > 0 else 0.0
    trunc = _truncation_tail(params, box, N_max)
    theta = ThetaFamily(zeta, N_max, tuple(total), grid, None, tail + trunc)
    residual = ks_residual(theta, params, box, K_max, switched) if N_max >= 2 else 0.0
    report = SolverReport(m + 1, residual, tail, ratio, "grid", trunc, tuple(norms))
    return theta, report


def operator_norm_certificate(params: ModelParams, grid: Optional[Grid] = None, n_max: int = 3,
                              tol: float = 1e-12) -> dict:
    """Analytic bound e^{2 beta B + 1} C_beta on ||Pi K|| and, on a grid, an empirical ratio.

    The empirical value applies Pi K to the constant family zeta^{-n}
    (zeta-norm 1) and must not exceed the analytic bound.
    """
    pot = params.potential
    C = c_beta(pot, params.beta, params.dim)
    analytic = math.exp(2 * params.beta * pot.stability_B + 1) * C
    out = {"analytic": analytic, "empirical": None}
    if grid is not None:
        zeta = C if C > 0 else 1.0
        fam = ThetaFamily(zeta, n_max, tuple(np.full((grid.nodes,) * n, zeta ** (-n)) for n in range(1, n_max + 1)),
                          grid)
        op = _Operator(pot, params.beta, grid, n_max)
        k = op.apply_pi(op.apply_k(fam.levels, n_max), pot.stability_B)
        emp = zeta_norm(fam.with_levels(k))
        if C == 0:
            emp = max(zeta**n * float(np.max(np.abs(a))) for n, a in enumerate(k[:1], 1))
        out["empirical"] = emp
        if C > 0:
            assert emp <= analytic + tol, (emp, analytic)
    return out


def grid_error_estimate(params: ModelParams, box: BoxRegion, N_max: int, K_max: Optional[int] = None,
                        fine: int = DEFAULT_NODES, coarse: int = 22, tol: float = 1e-12):
    """Solve on two nested grids and return (fine solution, per-level error arrays).

    ``coarse - 1`` must divide ``fine - 1`` so every coarse node is a fine
    node.  The error estimate at a common node is the absolute difference
    of the two solutions; with first-order convergence this overstates the
    fine-grid error by about (h_c - h_f)/h_f.
    """
    if (fine - 1) % (coarse - 1):
        raise ValueError("coarse grid must be nested in the fine grid")
    step = (fine - 1) // (coarse - 1)
    th_f, rep_f = neumann_solve(params, box, N_max, K_max, tol, nodes=fine)
    th_c, _ = neumann_solve(params, box, N_max, K_max, tol, nodes=coarse)
    errs = []
    for n in range(1, N_max + 1):
        sub = th_f.level(n)[(slice(None, None, step),) * n]
        errs.append(np.abs(sub - th_c.level(n)))
    return th_f, rep_f, th_c, errs


def analyticity_diagnostic(params: ModelParams, box: BoxRegion, n: int, node_index: tuple, degree: int = 16,
                           fraction: float = 0.9, nodes: int = 32, N_max: int = 3, tol: float = 1e-12) -> dict:
    """Chebyshev fit of z -> theta^(n)(z; x_n) on (-fraction z0, fraction z0).

    Returns the fit coefficients, the max deviation at interleaved check
    points, and whether the coefficient magnitudes decay.
    """
    pot = params.potential
    radius = z0(pot, params.beta, params.dim)
    zmax = fraction * radius
    grid = Grid.over(box, nodes)

    def value(z):
        th, _ = neumann_solve(params.with_activity(float(z)), box, N_max, tol=tol, grid=grid,
                              margin=max(fraction, 0.99))
        return float(np.real(th.level(n)[tuple(node_index)]))

    m = degree + 1
    cheb = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    vals = np.array([value(zmax * t) for t in cheb])
    coef = np.polynomial.chebyshev.chebfit(cheb, vals, degree)
    check = np.cos(np.pi * np.arange(1, m) / m)
    dev = max(abs(np.polynomial.chebyshev.chebval(c, coef) - value(zmax * c)) for c in check)
    mags = np.abs(coef)
    head = mags[: max(2, m // 2)].max()
    tail = mags[-3:].max()
    return {"coefficients": coef.tolist(), "max_deviation": float(dev), "decays": bool(tail <= 1e-3 * head + 1e-14)}
