"""Pair potentials, Mayer functions, the regularity integral and the radius z0.

All potentials here are radial, so evenness u(x) = u(-x) holds exactly.
Values are extended reals: ``math.inf`` marks a hard core and
``exp(-beta * inf)`` is taken to be exactly zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from . import _rng
from .errors import NonIntegrableTail, StabilityViolated, ZeroRegularity

__all__ = [
    "PairPotential",
    "HardCore",
    "SquareWell",
    "LennardJonesType",
    "IdealGas",
    "Tabulated",
    "ModelParams",
    "evaluate_u",
    "mayer",
    "c_beta",
    "z0",
    "falsify_stability",
    "potential_from_dict",
    "load_tabulated_csv",
    "sphere_surface",
    "ball_volume",
]


def sphere_surface(dim: int) -> float:
    """Surface area of the unit sphere in R^dim (2 for dim = 1)."""
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


def ball_volume(dim: int, radius: float = 1.0) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0) * radius**dim


def _norm(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return np.abs(x)
    return np.sqrt(np.sum(x * x, axis=-1))


class PairPotential:
    """Radial pair potential u(|x|) with stability metadata.

    Subclasses implement :meth:`radial`; everything else is derived.
    ``stability_B`` is the declared constant B in H(gamma) >= -B #gamma.
    """

    kind = "abstract"

    def radial(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        """Evaluate u at displacement vectors ``x`` of shape (..., d)."""
        return self.radial(_norm(x))

    # --- metadata, overridden where the family knows better -------------
    @property
    def stability_B(self) -> float:
        return 0.0

    @property
    def locally_stable(self) -> bool:
        return False

    @property
    def lower_bound(self) -> float:
        """Declared infimum of u (never +inf)."""
        return 0.0

    @property
    def support(self) -> float:
        """Radius beyond which u vanishes identically (inf if none)."""
        return math.inf

    @property
    def core_radius(self) -> float:
        """Radius below which u = +inf (0 if there is no hard core)."""
        return 0.0

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    @property
    def nonnegative(self) -> bool:
        return self.lower_bound >= 0.0

    def lower_envelope(self) -> Callable[[np.ndarray], np.ndarray]:
        """Decreasing psi with u >= -psi(|x|); metadata for window truncation."""
        depth = max(-self.lower_bound, 0.0)
        reach = self.support

        def psi(s):
            s = np.asarray(s, dtype=float)
            return np.where(s < reach, depth, 0.0)

        return psi

    def max_points(self, lengths) -> Optional[int]:
        """Upper bound on the number of hard-core points fitting in a box.

        Boxes of side lengths ``lengths`` are cut into cells of side
        core/sqrt(d); two points in the same cell would be closer than the
        core radius.  In one dimension this gives the exact floor(L/r) + 1.
        """
        r = self.core_radius
        if r <= 0.0:
            return None
        lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
        d = lengths.size
        if d == 1:
            return int(math.floor(lengths[0] / r)) + 1
        side = r / math.sqrt(d)
        return int(np.prod(np.floor(lengths / side) + 1))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class HardCore(PairPotential):
    r: float
    kind = "hard_core"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("hard-core radius must be positive")

    def radial(self, s):
        s = np.asarray(s, dtype=float)
        # |x| = r belongs to the outside branch
        return np.where(s < self.r, np.inf, 0.0)

    @property
    def locally_stable(self):
        return True

    @property
    def support(self):
        return self.r

    @property
    def core_radius(self):
        return self.r

    @property
    def breakpoints(self):
        return (self.r,)

    def to_dict(self):
        return {"kind": self.kind, "r": self.r}


@dataclass(frozen=True)
class SquareWell(PairPotential):
    """Hard core of radius r followed by a well of depth epsilon up to R."""

    r: float
    epsilon: float
    R: float
    B: Optional[float] = None
    kind = "square_well"

    def __post_init__(self):
        if not (self.r > 0 and self.R > self.r and self.epsilon >= 0):
            raise ValueError("square well needs r > 0, R > r and epsilon >= 0")
        if self.B is not None and self.B < 0:
            raise ValueError("stability constant must be nonnegative")

    def radial(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s < self.r, np.inf, np.where(s < self.R, -self.epsilon, 0.0))

    @property
    def stability_B(self):
        if self.epsilon == 0:
            return 0.0 if self.B is None else self.B
        if self.B is None:
            raise ValueError("square well with epsilon > 0 needs a declared stability constant B")
        return self.B

    @property
    def locally_stable(self):
        # points of x_n may crowd inside the well of x, so W(x | x_n) is unbounded below
        return self.epsilon == 0

    @property
    def lower_bound(self):
        return -self.epsilon

    @property
    def support(self):
        return self.R

    @property
    def core_radius(self):
        return self.r

    @property
    def breakpoints(self):
        return (self.r, self.R)

    def to_dict(self):
        d = {"kind": self.kind, "r": self.r, "epsilon": self.epsilon, "R": self.R}
        if self.B is not None:
            d["B"] = self.B
        return d


@dataclass(frozen=True)
class LennardJonesType(PairPotential):
    """12-6 Lennard-Jones potential with its power-law certificate.

    With alpha = 6 and r0 < sigma the bounds u >= c |x|^-6 (|x| < r0) and
    |u| <= C |x|^-6 (|x| >= r0) hold for the constants returned by
    :attr:`c` and :attr:`C`; they require dim < 6 for regularity.
    """

    epsilon: float
    sigma: float
    r0: Optional[float] = None
    B: Optional[float] = None
    kind = "lennard_jones"
    alpha = 6.0

    def __post_init__(self):
        if not (self.epsilon > 0 and self.sigma > 0):
            raise ValueError("epsilon and sigma must be positive")
        if not 0 < self.cutoff_r0 < self.sigma:
            raise ValueError("need 0 < r0 < sigma")

    @property
    def cutoff_r0(self) -> float:
        return 0.9 * self.sigma if self.r0 is None else self.r0

    @property
    def c(self) -> float:
        return 4 * self.epsilon * self.sigma**6 * ((self.sigma / self.cutoff_r0) ** 6 - 1)

    @property
    def C(self) -> float:
        return 4 * self.epsilon * self.sigma**6 * ((self.sigma / self.cutoff_r0) ** 6 + 1)

    def radial(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            q = (self.sigma / s) ** 6
            u = 4 * self.epsilon * (q * q - q)
        return np.where(s > 0, u, np.inf)

    @property
    def stability_B(self):
        if self.B is None:
            raise ValueError("Lennard-Jones potential needs a declared stability constant B")
        return self.B

    @property
    def lower_bound(self):
        return -self.epsilon

    @property
    def breakpoints(self):
        return (self.cutoff_r0, self.sigma, 2 ** (1 / 6) * self.sigma)

    def lower_envelope(self):
        C, eps = self.C, self.epsilon

        def psi(s):
            s = np.asarray(s, dtype=float)
            with np.errstate(divide="ignore"):
                return np.minimum(eps, C * s ** (-6.0))

        return psi

    def envelope_holds(self, s) -> np.ndarray:
        """Pointwise spot check of both power-law bounds at radii ``s``."""
        s = np.asarray(s, dtype=float)
        u = self.radial(s)
        inner = u >= self.c * s ** (-self.alpha)
        outer = np.abs(u) <= self.C * s ** (-self.alpha) * (1 + 1e-12)
        return np.where(s < self.cutoff_r0, inner, outer)

    def to_dict(self):
        d = {"kind": self.kind, "epsilon": self.epsilon, "sigma": self.sigma}
        if self.r0 is not None:
            d["r0"] = self.r0
        if self.B is not None:
            d["B"] = self.B
        return d


@dataclass(frozen=True)
class IdealGas(PairPotential):
    kind = "ideal_gas"

    def radial(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    @property
    def locally_stable(self):
        return True

    @property
    def support(self):
        return 0.0

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class Tabulated(PairPotential):
    """Piecewise-linear potential on a radial grid; zero beyond the last knot.

    Knot values may be ``inf``; an interval touching an infinite knot is
    infinite in its interior.  With ``hard_core`` set, u = inf below the
    first knot, otherwise the first value is extended to the origin.
    """

    radii: tuple
    values: tuple
    hard_core: bool = False
    B: Optional[float] = None
    declared_locally_stable: bool = False
    kind = "tabulated"
    _r: np.ndarray = field(init=False, repr=False, compare=False, hash=False)
    _u: np.ndarray = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        u = np.asarray(self.values, dtype=float)
        if r.ndim != 1 or r.shape != u.shape or r.size < 2:
            raise ValueError("tabulated potential needs matching 1-D radius/value arrays of length >= 2")
        if np.any(np.diff(r) <= 0) or r[0] < 0:
            raise ValueError("radii must be nonnegative and strictly increasing")
        if np.any(np.isnan(u)) or np.any(u == -np.inf):
            raise ValueError("values must be finite or +inf")
        object.__setattr__(self, "radii", tuple(float(v) for v in r))
        object.__setattr__(self, "values", tuple(float(v) for v in u))
        object.__setattr__(self, "_r", r)
        object.__setattr__(self, "_u", u)

    def radial(self, s):
        s = np.asarray(s, dtype=float)
        r, u = self._r, self._u
        fin = np.where(np.isfinite(u), u, 0.0)
        out = np.interp(s, r, fin)
        idx = np.clip(np.searchsorted(r, s, side="right") - 1, 0, r.size - 2)
        left_inf = ~np.isfinite(u[idx])
        right_inf = ~np.isfinite(u[idx + 1])
        at_left = s == r[idx]
        at_right = s == r[idx + 1]
        inside = (s > r[0]) & (s < r[-1])
        is_inf = inside & ((left_inf & ~at_right) | (right_inf & ~at_left))
        is_inf |= (s == r[idx]) & left_inf & (s <= r[-1])
        below = s < r[0]
        first = u[0] if np.isfinite(u[0]) else np.inf
        out = np.where(is_inf, np.inf, out)
        out = np.where(below, np.inf if self.hard_core else first, out)
        out = np.where(s >= r[-1], np.where(np.isfinite(u[-1]) & (s == r[-1]), u[-1], 0.0), out)
        return out

    @property
    def stability_B(self):
        if self.B is None:
            if self.lower_bound >= 0:
                return 0.0
            raise ValueError("tabulated potential with negative values needs a declared B")
        return self.B

    @property
    def locally_stable(self):
        return self.declared_locally_stable or self.lower_bound >= 0

    @property
    def lower_bound(self):
        fin = self._u[np.isfinite(self._u)]
        return min(float(fin.min()) if fin.size else 0.0, 0.0)

    @property
    def support(self):
        return float(self._r[-1])

    @property
    def core_radius(self):
        r, u = self._r, self._u
        if not (self.hard_core or math.isinf(u[0])):
            return 0.0
        core = r[0]
        for i in range(r.size - 1):
            if np.isfinite(u[i]) and np.isfinite(u[i + 1]):
                break
            core = r[i + 1]
        return float(core)

    @property
    def breakpoints(self):
        return tuple(self.radii)

    def to_dict(self):
        d = {
            "kind": self.kind,
            "radii": list(self.radii),
            "values": ["inf" if math.isinf(v) else v for v in self.values],
            "hard_core": self.hard_core,
        }
        if self.B is not None:
            d["B"] = self.B
        return d


@dataclass(frozen=True)
class ModelParams:
    """The triple (beta, z, u) together with the spatial dimension."""

    beta: float
    activity: complex
    potential: PairPotential
    dim: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.dim < 1:
            raise ValueError("dimension must be at least 1")

    @property
    def z(self):
        return self.activity

    def with_activity(self, z) -> "ModelParams":
        return ModelParams(self.beta, z, self.potential, self.dim)


def evaluate_u(pot: PairPotential, x) -> np.ndarray | float:
    out = pot(x)
    return float(out) if np.ndim(out) == 0 else out


def mayer(pot: PairPotential, beta: float, x):
    """f_beta(x) = exp(-beta u(x)) - 1, exactly -1 on a hard core."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    u = np.asarray(pot(x), dtype=float)
    out = np.expm1(-beta * u)
    return float(out) if out.ndim == 0 else out


def _abs_mayer_radial(pot, beta):
    def g(s):
        return abs(math.expm1(-beta * float(pot.radial(np.array(s)))))

    return g


def c_beta(pot: PairPotential, beta: float, dim: int = 1, tol: float = 1e-10) -> float:
    """Regularity integral C_beta(u) = int |f_beta(x)| dx over R^dim.

    Adaptive Gauss-Kronrod quadrature (QUADPACK) of the radial profile
    |f(s)| S_d s^(d-1) between the potential's breakpoints; for the
    Lennard-Jones family the tail beyond a cutoff R is bounded analytically
    using |e^t - 1| <= |t| e^|t| and |u| <= C s^-alpha.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if isinstance(pot, IdealGas):
        return 0.0
    surf = sphere_surface(dim)
    g = _abs_mayer_radial(pot, beta)

    def integrand(s):
        return g(s) * surf * s ** (dim - 1)

    if math.isinf(pot.support):
        if not isinstance(pot, LennardJonesType):
            raise NonIntegrableTail(f"no tail certificate for potential kind {pot.kind!r}")
        alpha, C = pot.alpha, pot.C
        if alpha <= dim:
            raise NonIntegrableTail(f"power-law envelope alpha={alpha} does not beat dimension {dim}")

        def tail(R):
            return surf * beta * C * math.exp(beta * C * R ** (-alpha)) * R ** (dim - alpha) / (alpha - dim)

        R = max(pot.breakpoints) * 2
        while tail(R) > tol / 2:
            R *= 1.5
        knots = [0.0] + sorted(b for b in pot.breakpoints if b < R) + [R]
        tail_bound = tail(R)
    else:
        R = pot.support
        knots = [0.0] + sorted(b for b in pot.breakpoints if 0 < b < R) + [R]
        tail_bound = 0.0

    pieces = []
    per_piece = tol / (2 * max(len(knots) - 1, 1))
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        val, _ = integrate.quad(integrand, a, b, epsabs=per_piece, epsrel=1e-12, limit=500)
        pieces.append(val)
    total = math.fsum(pieces)
    # the tail is bounded, not computed; add nothing but keep it below tol
    assert tail_bound <= tol
    return total


def z0(pot: PairPotential, beta: float, dim: int = 1, strict: bool = False, tol: float = 1e-12) -> float:
    """Radius (e^{2 beta B + 1} C_beta(u))^-1 of certified Neumann convergence.

    Returns ``math.inf`` when C_beta = 0 (ideal gas), or raises
    :class:`ZeroRegularity` instead if ``strict``.
    """
    C = c_beta(pot, beta, dim, tol)
    if C == 0.0:
        if strict:
            raise ZeroRegularity("C_beta(u) = 0: the convergence radius is unbounded")
        return math.inf
    return 1.0 / (math.exp(2 * beta * pot.stability_B + 1) * C)


def falsify_stability(pot: PairPotential, B: float, n_max: int, trials: int, rng: _rng.SeedLike = 0,
                      dim: int = 1, tol: float = 1e-9):
    """Random search for a configuration with H(gamma) < -B #gamma - tol.

    Returns the first counterexample found, or ``None``.  Finding none is
    not a proof of stability.  Two proposal families are mixed: uniform
    points in a cube scaled to the interaction range, and jittered chains
    with spacings drawn inside the range, which are the usual minimizers
    of short-range attractive potentials.
    """
    from .hamiltonian import Configuration, energy

    if trials <= 0:
        raise ValueError("trials must be positive")
    if n_max < 2:
        return None
    reach = pot.support if math.isfinite(pot.support) else 3.0 * max(pot.breakpoints or (1.0,))
    if reach <= 0:
        return None
    core = pot.core_radius
    gen = _rng.stream(rng, _rng.TAG_FALSIFIER)
    for t in range(trials):
        n = int(gen.integers(2, n_max + 1))
        if t % 2 == 0:
            side = reach * n ** (1.0 / dim)
            pts = gen.random((n, dim)) * side
        else:
            gap = gen.uniform(core, reach)
            direction = gen.normal(size=dim)
            direction /= np.linalg.norm(direction)
            steps = gap + gen.uniform(0, 1e-3 * max(reach - core, 1e-12), size=n)
            pts = np.cumsum(steps)[:, None] * direction[None, :]
        cfg = Configuration(pts)
        h = energy(pot, cfg)
        if math.isfinite(h) and h < -B * n - tol:
            return cfg
    return None


def check_stability_declaration(pot: PairPotential, n_max: int = 8, trials: int = 2000, rng: _rng.SeedLike = 0,
                                dim: int = 1):
    """Raise :class:`StabilityViolated` if the falsifier refutes the declared B."""
    cfg = falsify_stability(pot, pot.stability_B, n_max, trials, rng, dim)
    if cfg is not None:
        raise StabilityViolated(f"declared B={pot.stability_B} refuted by {cfg.points.tolist()}")


def _num(v) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        return float(v)
    return float(v)


def load_tabulated_csv(path, hard_core: bool = False, B: Optional[float] = None) -> Tabulated:
    """Read a two-column (radius, value) CSV; the literal ``inf`` is allowed."""
    radii, values = [], []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                r = float(row[0])
            except ValueError:
                continue  # header
            radii.append(r)
            values.append(_num(row[1]))
    return Tabulated(tuple(radii), tuple(values), hard_core=hard_core, B=B)


def potential_from_dict(spec: dict, base_dir=None) -> PairPotential:
    """Build a potential from its JSON description, e.g. ``{"kind": "hard_core", "r": 0.5}``."""
    kind = spec.get("kind")
    B = spec.get("B")
    if kind == "hard_core":
        return HardCore(float(spec["r"]))
    if kind == "square_well":
        return SquareWell(float(spec["r"]), float(spec["epsilon"]), float(spec["R"]),
                          None if B is None else float(B))
    if kind == "lennard_jones":
        return LennardJonesType(float(spec["epsilon"]), float(spec["sigma"]),
                                None if spec.get("r0") is None else float(spec["r0"]),
                                None if B is None else float(B))
    if kind == "ideal_gas":
        return IdealGas()
    if kind == "tabulated":
        hard = bool(spec.get("hard_core", False))
        if "csv" in spec:
            path = Path(spec["csv"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            pot = load_tabulated_csv(path, hard_core=hard, B=None if B is None else float(B))
            return pot
        return Tabulated(tuple(float(r) for r in spec["radii"]), tuple(_num(v) for v in spec["values"]),
                         hard_core=hard, B=None if B is None else float(B))
    raise ValueError(f"unknown potential kind {kind!r}")
