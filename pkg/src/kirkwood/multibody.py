"""Multi-body Kirkwood-Salsburg kernel, its grid operator and the example families.

The kernel is

    k^(H)(x; x_n, y_k) = sum_{S subset of y_k} (-1)^(k - |S|) exp(-beta delta(x | x_n ∪ S)),

where delta(x | A) = H(x ∪ A) - H(A) is the sum over the l-body terms
that contain x.  Tuples are ordered (x, x_n, y_k), which matters for
Hamiltonians whose l-body terms are not symmetric.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from . import _rng
from .errors import HypothesisFailed, ModeUnsupported, NormAssumptionViolated, OutsideDisk, SubsetCapExceeded
from .grand_canonical import BoxRegion
from .hamiltonian import SUBSET_CAP, MultiBodyHamiltonian
from .ks_core import DEFAULT_NODES, Grid, SolverReport, ThetaFamily, _indicator, _project_levels, unit_family, zeta_norm
from .potentials import IdealGas, ModelParams, PairPotential, c_beta, potential_from_dict

__all__ = [
    "RadialProfile",
    "SeparableTriplet",
    "FiniteRangeTriplet",
    "triplet_hamiltonian",
    "hamiltonian_from_dict",
    "kernel_kH",
    "pair_kernel",
    "multibody_apply_ks",
    "multibody_ks_residual",
    "multibody_neumann_solve",
    "norm_bound_example",
]


# --- families -----------------------------------------------------------------------


@dataclass(frozen=True)
class RadialProfile:
    """phi(x) = amplitude * g(|x| / scale) for g in {gaussian, exponential, inverse, box}."""

    kind: str = "gaussian"
    amplitude: float = 1.0
    scale: float = 1.0

    _SHAPES = {
        "gaussian": lambda s: np.exp(-s * s),
        "exponential": lambda s: np.exp(-s),
        "inverse": lambda s: 1.0 / (1.0 + s),
        "box": lambda s: (s < 1.0).astype(float),
    }

    def __post_init__(self):
        if self.kind not in self._SHAPES:
            raise ValueError(f"unknown profile {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def radial(self, s):
        s = np.asarray(s, dtype=float)
        return self.amplitude * self._SHAPES[self.kind](s / self.scale)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.radial(np.sqrt(np.sum(x * x, axis=-1)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "scale": self.scale}


@dataclass(frozen=True)
class SeparableTriplet:
    """u3(x1, x2, x3) = 2 sum_l phi_l(x2 - x1) phi_l(x3 - x1).

    The literal form singles out the first point.  With ``symmetric`` the
    apex is averaged over the three positions.
    """

    phis: tuple
    symmetric: bool = False

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if not self.symmetric:
            return self._apex(pts[..., 0, :], pts[..., 1, :], pts[..., 2, :])
        a, b, c = pts[..., 0, :], pts[..., 1, :], pts[..., 2, :]
        return (self._apex(a, b, c) + self._apex(b, a, c) + self._apex(c, a, b)) / 3.0

    def _apex(self, p, q, r):
        return 2.0 * sum(phi(q - p) * phi(r - p) for phi in self.phis)

    @property
    def nonnegative(self) -> bool:
        return all(phi.amplitude >= 0 for phi in self.phis)

    def to_dict(self) -> dict:
        return {"type": "separable", "symmetric": self.symmetric, "phis": [p.to_dict() for p in self.phis]}


@dataclass(frozen=True)
class FiniteRangeTriplet:
    """u3 = amplitude * prod over the three pairs of (1 - |x_i - x_j| / R)_+ (nonnegative, range R)."""

    amplitude: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0 or not self.R > 0:
            raise ValueError("need amplitude >= 0 and R > 0")

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = self.amplitude
        for i, j in ((0, 1), (0, 2), (1, 2)):
            s = np.sqrt(np.sum((pts[..., i, :] - pts[..., j, :]) ** 2, axis=-1))
            out = out * np.clip(1.0 - s / self.R, 0.0, None)
        return np.asarray(out)

    nonnegative = True

    def to_dict(self) -> dict:
        return {"type": "finite_range", "amplitude": self.amplitude, "R": self.R}


def triplet_hamiltonian(pair: Optional[PairPotential], triplet, stability_B: Optional[float] = None
                        ) -> MultiBodyHamiltonian:
    nonneg = (pair is None or pair.nonnegative) and bool(getattr(triplet, "nonnegative", False))
    if stability_B is None:
        stability_B = 0.0 if nonneg else (pair.stability_B if pair is not None else 0.0)
    return MultiBodyHamiltonian(pair=pair, bodies={3: triplet}, stability_B=stability_B, nonnegative=nonneg)


def hamiltonian_from_dict(spec: dict, base_dir=None) -> MultiBodyHamiltonian:
    """{"pair": {...}, "triplet": {"type": "separable", "phis": [...]}} or a plain pair spec."""
    if "kind" in spec:
        return MultiBodyHamiltonian.from_pair(potential_from_dict(spec, base_dir))
    pair = potential_from_dict(spec["pair"], base_dir) if spec.get("pair") else None
    tri = spec.get("triplet")
    if tri is None:
        return MultiBodyHamiltonian(pair=pair, stability_B=pair.stability_B if pair else 0.0,
                                    nonnegative=pair.nonnegative if pair else True)
    kind = tri.get("type", "separable")
    if kind == "separable":
        phis = tuple(RadialProfile(**p) for p in tri["phis"])
        triplet = SeparableTriplet(phis, bool(tri.get("symmetric", False)))
    elif kind == "finite_range":
        triplet = FiniteRangeTriplet(float(tri.get("amplitude", 1.0)), float(tri["R"]))
    else:
        raise ValueError(f"unknown triplet type {kind!r}")
    return triplet_hamiltonian(pair, triplet, spec.get("B"))


# --- kernel ------------------------------------------------------------------------


class _KernelEval:
    """Conditional energies of x against subsets of ``others`` (indices in tuple order).

    ``x`` and every entry of ``others`` carry a trailing coordinate axis and
    broadcast against each other, so the same code serves single points and
    grids of node tuples.
    """

    def __init__(self, H: MultiBodyHamiltonian, beta: float, x, others):
        self.H, self.beta, self.x, self.others = H, beta, x, others
        self._body = {}
        self._delta = {}
        self.orders = sorted(set(([2] if H.pair is not None else []) + list(H.bodies)))

    def body(self, T: tuple):
        if T not in self._body:
            pts = np.broadcast_arrays(self.x, *(self.others[i] for i in T))
            self._body[T] = self.H.body(len(T) + 1, np.stack(pts, axis=-2))
        return self._body[T]

    def delta(self, A: tuple):
        if A not in self._delta:
            tot = 0.0
            for l in self.orders:
                for T in itertools.combinations(A, l - 1):
                    tot = tot + self.body(T)
            self._delta[A] = tot
        return self._delta[A]

    def d_j(self, A: tuple, j: int):
        """delta(x | A ∪ {j}) - delta(x | A), summed directly over the terms containing j."""
        tot = 0.0
        for l in self.orders:
            for T in itertools.combinations(A, l - 2):
                tot = tot + self.body(tuple(sorted(T + (j,))))
        return tot

    def coupled(self, A: tuple, j: int, rest: tuple):
        """Where some term holds x, j and at least one point of ``rest``."""
        mask = False
        pool = tuple(sorted(A + rest))
        for l in self.orders:
            if l < 3:
                continue
            for T in itertools.combinations(pool, l - 2):
                if not set(T) & set(rest):
                    continue
                mask = mask | (self.body(tuple(sorted(T + (j,)))) != 0)
        return mask

    def boltz(self, A: tuple):
        with np.errstate(over="ignore"):
            return np.exp(-self.beta * np.asarray(self.delta(A), dtype=float))

    def recursion(self, A: tuple, J: tuple):
        if not J:
            return self.boltz(A)
        j, rest = J[0], J[1:]
        base = self.recursion(A, rest)
        with np.errstate(over="ignore", invalid="ignore"):
            split = np.expm1(-self.beta * np.asarray(self.d_j(A, j), dtype=float)) * base
        mask = self.coupled(A, j, rest)
        if not np.any(mask):
            return split
        full = self.recursion(tuple(sorted(A + (j,))), rest) - base
        return np.where(mask, full, split)

    def subsets(self, A: tuple, J: tuple):
        k = len(J)
        tot = 0.0
        for l in range(k + 1):
            for S in itertools.combinations(J, l):
                term = self.boltz(tuple(sorted(A + S)))
                if self.H.nonnegative:
                    assert np.all(term <= 1.0 + 1e-15), "nonnegative Hamiltonian produced exp(-beta delta) > 1"
                tot = tot + (-1) ** (k - l) * term
        return tot


def _as_points(pts, d: Optional[int] = None) -> np.ndarray:
    a = np.asarray(pts, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1) if d in (None, 1) else a.reshape(-1, d)
    return a


def kernel_kH(H: MultiBodyHamiltonian, x, x_n, y_k, beta: float, method: str = "recursion") -> float:
    """k^(H)(x; x_n, y_k).

    ``recursion`` splits off y_j as the factor expm1(-beta (delta(x|A ∪ j) - delta(x|A)))
    whenever no body of order three or more links x, y_j and the points
    still to be summed; otherwise it falls back to the plain difference.
    ``subsets`` adds up all 2^k signed terms.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    xv = np.asarray(x, dtype=float).reshape(-1)
    d = xv.size
    xn = _as_points(x_n, d) if np.size(x_n) else np.zeros((0, d))
    yk = _as_points(y_k, d) if np.size(y_k) else np.zeros((0, d))
    k = yk.shape[0]
    if k > SUBSET_CAP:
        raise SubsetCapExceeded(f"k = {k} exceeds the subset cap {SUBSET_CAP}")
    others = list(xn) + list(yk)
    ev = _KernelEval(H, beta, xv, others)
    A = tuple(range(xn.shape[0]))
    J = tuple(range(xn.shape[0], xn.shape[0] + k))
    if method == "recursion":
        out = ev.recursion(A, J)
    elif method == "subsets":
        out = ev.subsets(A, J)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(out)


def pair_kernel(pot: PairPotential, x, x_n, y_k, beta: float) -> float:
    """e^{-beta W(x | x_n)} prod_j f_beta(x - y_j)."""
    xv = np.asarray(x, dtype=float).reshape(-1)
    d = xv.size
    xn = _as_points(x_n, d) if np.size(x_n) else np.zeros((0, d))
    yk = _as_points(y_k, d) if np.size(y_k) else np.zeros((0, d))
    W = math.fsum(np.atleast_1d(pot(xv - xn))) if xn.shape[0] else 0.0
    out = math.exp(-beta * W) if math.isfinite(W) else 0.0
    if yk.shape[0]:
        out *= float(np.prod(np.expm1(-beta * np.atleast_1d(pot(xv - yk)))))
    return out


# --- grid operator -----------------------------------------------------------------


class _MultiOperator:
    """Kernel arrays k^(H)(x; x_n, y_k) at the grid node tuples, cached per (n, k)."""

    def __init__(self, H: MultiBodyHamiltonian, beta: float, grid: Grid, n_max: int):
        self.H, self.beta, self.grid, self.n_max = H, beta, grid, n_max
        self._cache = {}

    def kernel(self, n: int, k: int) -> np.ndarray:
        if (n, k) not in self._cache:
            m = 1 + n + k
            G = self.grid.nodes

            def axis_point(i):
                shape = [1] * m + [1]
                shape[i] = G
                return self.grid.x.reshape(shape)

            ev = _KernelEval(self.H, self.beta, axis_point(0), [axis_point(i) for i in range(1, m)])
            out = ev.recursion(tuple(range(n)), tuple(range(n, n + k)))
            self._cache[(n, k)] = np.broadcast_to(out, (G,) * m)
        return self._cache[(n, k)]

    def apply_k(self, levels, K_max: int):
        N = self.n_max
        w = self.grid.weights
        out = []
        for n in range(0, N):
            acc = 0.0
            if n:
                acc = self.kernel(n, 0) * levels[n - 1][None]
            for k in range(1, min(K_max, N - n) + 1):
                kern = self.kernel(n, k)
                prod = kern * levels[n + k - 1][None]
                for _ in range(k):
                    prod = np.tensordot(prod, w, axes=([prod.ndim - 1], [0]))
                acc = acc + prod / math.factorial(k)
            shape = (self.grid.nodes,) * (n + 1)
            out.append(np.zeros(shape, dtype=levels[0].dtype) + acc)
        return out


def _check_grid(theta: ThetaFamily):
    theta._need_grid()
    if theta.n_max < 2:
        raise ValueError("the multi-body operator needs N_max >= 2")


def multibody_apply_ks(theta: ThetaFamily, H: MultiBodyHamiltonian, params: ModelParams, K_max: int) -> ThetaFamily:
    """K theta with the k^(H) kernel on a one-dimensional grid (no anchor switch)."""
    _check_grid(theta)
    if params.dim != 1:
        raise ModeUnsupported("grid mode is one-dimensional")
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    op = _MultiOperator(H, params.beta, theta.grid, theta.n_max)
    return theta.with_levels(op.apply_k(theta.levels, K_max))


def multibody_ks_residual(theta: ThetaFamily, H: MultiBodyHamiltonian, params: ModelParams, box: BoxRegion,
                          K_max: int, op: Optional[_MultiOperator] = None) -> float:
    _check_grid(theta)
    op = op or _MultiOperator(H, params.beta, theta.grid, theta.n_max)
    ind = _indicator(theta.grid, box)
    k = _project_levels(op.apply_k(theta.levels, K_max), ind)
    e = _project_levels(unit_family(theta.grid, theta.n_max, theta.zeta).levels, ind)
    z = params.activity
    return zeta_norm(theta.with_levels([t - z * a - z * b for t, a, b in zip(theta.levels, k, e)]))


def multibody_neumann_solve(H: MultiBodyHamiltonian, params: ModelParams, box: BoxRegion, N_max: int,
                            K_max: Optional[int] = None, tol: float = 1e-10, assumed_norm: float = None,
                            grid: Optional[Grid] = None, nodes: int = 32, zeta: Optional[float] = None,
                            max_iter: int = 10000, growth_limit: int = 3):
    """Neumann series for theta = z P K_H theta + z P e_1 under a user-supplied bound ||K_H|| <= assumed_norm.

    Only beta and the activity are taken from ``params``; the interaction
    comes from ``H``.  If the term norms grow on ``growth_limit``
    consecutive iterations the assumed bound is taken to be wrong.
    """
    if assumed_norm is None or not assumed_norm > 0:
        raise ValueError("assumed_norm must be given explicitly and be positive")
    if box.dim != 1 or params.dim != 1:
        raise ModeUnsupported("grid mode is one-dimensional")
    if not 2 <= N_max <= 4:
        raise ValueError("multi-body grid mode supports 2 <= N_max <= 4")
    z = params.activity
    ratio = abs(z) * assumed_norm
    if ratio >= 1:
        raise OutsideDisk(f"|z| * assumed_norm = {ratio:.4g} >= 1")
    grid = grid or Grid.over(box, nodes)
    K_max = N_max if K_max is None else K_max
    if zeta is None:
        C = c_beta(H.pair, params.beta, 1) if H.pair is not None else 0.0
        zeta = C if C > 0 else 1.0
    dtype = complex if isinstance(z, complex) else float
    e = unit_family(grid, N_max, zeta, dtype)
    ind = _indicator(grid, box)
    term = _project_levels([z * a for a in e.levels], ind)
    total = [a.copy() for a in term]
    first = zeta_norm(e.with_levels(term))
    norms = [first]
    op = _MultiOperator(H, params.beta, grid, N_max)
    threshold = tol * (1 - ratio)
    growth = 0
    m = 0
    while norms[-1] >= threshold and norms[-1] > 0 and m < max_iter:
        term = _project_levels([z * a for a in op.apply_k(term, K_max)], ind)
        m += 1
        norms.append(zeta_norm(e.with_levels(term)))
        growth = growth + 1 if norms[-1] > norms[-2] else 0
        if growth >= growth_limit:
            raise NormAssumptionViolated(f"term norms grew {growth} times in a row (last {norms[-1]:.3g}); "
                                         f"||K_H|| <= {assumed_norm} does not hold here")
        total = [a + b for a, b in zip(total, term)]
    tail = ratio ** (m + 1) / (1 - ratio) * first if ratio > 0 else 0.0
    theta = ThetaFamily(zeta, N_max, tuple(total), grid, None, tail)
    residual = multibody_ks_residual(theta, H, params, box, K_max, op)
    return theta, SolverReport(m + 1, residual, tail, ratio, "grid", 0.0, tuple(norms))


# --- example families ---------------------------------------------------------------


def _profile_integral(profiles: Sequence[RadialProfile], dim: int, shells: int = 60, tol: float = 1e-6) -> dict:
    """int_{R^d} (sum_l l^2 phi_l^2)^{1/2} over dyadic shells; finite if the last shell is negligible."""
    from .potentials import sphere_surface

    def g(s):
        return math.sqrt(sum((l + 1) ** 2 * float(p.radial(s)) ** 2 for l, p in enumerate(profiles))) * s ** (dim - 1)

    breaks = sorted({p.scale for p in profiles if p.kind == "box"})
    edges = [0.0, 1.0] + [2.0**m for m in range(1, shells + 1)]
    parts = []
    for a, b in zip(edges[:-1], edges[1:]):
        pts = [t for t in breaks if a < t < b]
        val, _ = integrate.quad(g, a, b, points=pts or None, limit=200)
        parts.append(val)
    total = sphere_surface(dim) * sum(parts)
    last = sphere_surface(dim) * parts[-1]
    finite = last <= tol * max(total, 1e-300)
    return {"value": total if finite else math.inf, "last_shell": last, "passed": bool(finite)}


def norm_bound_example(family: str, spec: dict) -> dict:
    """Check the stated hypotheses of a bounded-operator example family.

    ``separable_triplet``: spec has ``phis`` (RadialProfile dicts), optional
    ``pair`` and ``dim``.  ``finite_range_nonnegative``: spec has ``R``,
    ``triplet`` (a callable u3 or a FiniteRangeTriplet dict) and optional
    ``pair``, ``dim``, ``probes``, ``seed``.  Returns a certificate; raises
    HypothesisFailed naming the violated check.  The norm constant itself
    is not computed.
    """
    dim = int(spec.get("dim", 1))
    checks = {}
    pair = spec.get("pair")
    if isinstance(pair, dict):
        pair = potential_from_dict(pair)
    if pair is not None:
        try:
            C = c_beta(pair, float(spec.get("beta", 1.0)), dim)
            checks["pair_regular"] = {"passed": math.isfinite(C), "value": C}
        except Exception as exc:  # non-integrable tails and the like
            checks["pair_regular"] = {"passed": False, "value": str(exc)}
    if family in ("separable_triplet", "SeparableTriplet"):
        phis = [p if isinstance(p, RadialProfile) else RadialProfile(**p) for p in spec["phis"]]
        checks["phi_integral"] = _profile_integral(phis, dim)
    elif family in ("finite_range_nonnegative", "FiniteRangeNonnegative"):
        R = float(spec["R"])
        tri = spec["triplet"]
        if isinstance(tri, dict):
            tri = FiniteRangeTriplet(float(tri.get("amplitude", 1.0)), float(tri.get("R", R)))
        probes = int(spec.get("probes", 20000))
        gen = _rng.stream(_rng.as_seed_tuple(spec.get("seed", 0)), _rng.TAG_PROBES, 1)
        scale = 3.0 * R
        pts = gen.uniform(-scale, scale, size=(probes, 3, dim))
        vals = np.asarray(tri(pts), dtype=float)
        dist = np.stack([np.linalg.norm(pts[:, i] - pts[:, j], axis=-1) for i, j in ((0, 1), (0, 2), (1, 2))], 1)
        far = np.any(dist >= R, axis=1)
        checks["support"] = {"passed": bool(np.all(vals[far] == 0)), "probes": int(far.sum()),
                             "max_outside": float(np.max(np.abs(vals[far]), initial=0.0))}
        checks["nonnegative"] = {"passed": bool(np.all(vals >= 0)), "min": float(np.min(vals))}
    else:
        raise ValueError(f"unknown family {family!r}")
    cert = {"family": family, "checks": checks, "passed": all(c["passed"] for c in checks.values())}
    if not cert["passed"]:
        bad = [k for k, c in checks.items() if not c["passed"]]
        raise HypothesisFailed(f"{family}: failed {', '.join(bad)}")
    return cert
