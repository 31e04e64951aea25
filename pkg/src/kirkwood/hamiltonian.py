"""Configurations, pair energies, interactions and multi-body Hamiltonians.

Energies are extended reals.  Pair potentials are bounded below, so a sum
can be +inf but never +inf + (-inf); finite branches are accumulated with
``math.fsum`` (exactly rounded).  The ``*_batch`` helpers are the vectorized
counterparts used inside Monte Carlo loops, where plain float summation is
sufficient.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .errors import NoAnchor, SubsetCapExceeded
from .potentials import PairPotential

__all__ = [
    "Configuration",
    "MultiBodyHamiltonian",
    "energy",
    "interaction",
    "anchor_index",
    "multibody_energy",
    "pair_energy_batch",
    "interaction_batch",
    "boltzmann_batch",
    "SUBSET_CAP",
]

SUBSET_CAP = 12


class Configuration:
    """Ordered finite list of points in R^d.

    Set-like operations act on indices: :meth:`union` concatenates and
    :meth:`remove` drops one index, preserving the order of the rest.
    """

    __slots__ = ("points",)

    def __init__(self, points=(), dim: Optional[int] = None):
        arr = np.asarray(points, dtype=float)
        if arr.size == 0:
            arr = np.zeros((0, dim or 1))
        elif arr.ndim == 1:
            # a flat list is a list of 1-D points unless dim says otherwise
            arr = arr.reshape(-1, 1) if (dim in (None, 1)) else arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError("points must be a list of d-dimensional vectors")
        if dim is not None and arr.shape[1] != dim:
            raise ValueError(f"points have dimension {arr.shape[1]}, expected {dim}")
        arr = np.array(arr, dtype=float)
        arr.setflags(write=False)
        self.points = arr

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def __eq__(self, other):
        return isinstance(other, Configuration) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.points.shape, self.points.tobytes()))

    def __repr__(self):
        return f"Configuration({self.points.tolist()})"

    def union(self, other: "Configuration") -> "Configuration":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return Configuration(np.vstack([self.points, other.points]))

    def remove(self, i: int) -> "Configuration":
        return Configuration(np.delete(self.points, i, axis=0), dim=self.dim)

    def subset(self, idx: Iterable[int]) -> "Configuration":
        idx = list(idx)
        return Configuration(self.points[idx], dim=self.dim)

    # --- serialization --------------------------------------------------
    def to_json(self) -> list:
        return self.points.tolist()

    @classmethod
    def from_json(cls, data, dim: Optional[int] = None) -> "Configuration":
        return cls(data, dim=dim)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            for p in self.points:
                w.writerow([repr(float(v)) for v in p])

    @classmethod
    def from_csv(cls, path, dim: Optional[int] = None) -> "Configuration":
        rows = []
        with open(Path(path), newline="") as fh:
            for row in csv.reader(fh):
                if row and not row[0].lstrip().startswith("#"):
                    rows.append([float(v) for v in row])
        return cls(rows, dim=dim)


def _extended_sum(values) -> float:
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        return 0.0
    assert not np.any(vals == -np.inf), "pair potentials are bounded below"
    if np.any(np.isinf(vals)):
        return math.inf
    return math.fsum(vals.tolist())


def _cross_u(pot: PairPotential, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return pot(a[:, None, :] - b[None, :, :])


def energy(pot: PairPotential, cfg: Configuration) -> float:
    """H(gamma): sum of u over unordered pairs."""
    n = len(cfg)
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, 1)
    return _extended_sum(pot(cfg.points[i] - cfg.points[j]))


def interaction(pot: PairPotential, eta: Configuration, gamma: Configuration) -> float:
    """W(eta | gamma): sum of u(x - y) over x in eta, y in gamma.

    For finite configurations the sum of |u| is always finite unless a
    term is infinite, in which case the result is +inf.
    """
    if len(eta) == 0 or len(gamma) == 0:
        return 0.0
    return _extended_sum(_cross_u(pot, eta.points, gamma.points))


def anchor_index(pot: PairPotential, cfg: Configuration, B: float) -> int:
    """Smallest (0-based) index i with W(x_i | rest) >= -2B."""
    n = len(cfg)
    if n == 0:
        raise ValueError("anchor of an empty configuration is undefined")
    for i in range(n):
        w = interaction(pot, cfg.subset([i]), cfg.remove(i)) if n > 1 else 0.0
        if w >= -2.0 * B:
            return i
    raise NoAnchor(f"no point satisfies W(x_i | rest) >= {-2 * B}; the declared B is inconsistent")


# --- vectorized forms for Monte Carlo ------------------------------------


def pair_energy_batch(pot: PairPotential, pts: np.ndarray) -> np.ndarray:
    """H for a batch ``pts`` of shape (m, n, d); returns shape (m,)."""
    pts = np.asarray(pts, dtype=float)
    m, n = pts.shape[0], pts.shape[1]
    if n < 2 or pot.kind == "ideal_gas":
        return np.zeros(m)
    i, j = np.triu_indices(n, 1)
    return pot(pts[:, i, :] - pts[:, j, :]).sum(axis=1)


def interaction_batch(pot: PairPotential, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W(a | b) per batch row; ``a`` is (m, n, d) and ``b`` is (m, k, d) or (k, d)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 2:
        b = np.broadcast_to(b, (a.shape[0],) + b.shape)
    if a.shape[1] == 0 or b.shape[1] == 0 or pot.kind == "ideal_gas":
        return np.zeros(a.shape[0])
    return pot(a[:, :, None, :] - b[:, None, :, :]).sum(axis=(1, 2))


def boltzmann_batch(pot: PairPotential, beta: float, pts: np.ndarray, fixed: Optional[np.ndarray] = None,
                    fixed_energy: float = 0.0) -> np.ndarray:
    """exp(-beta H(fixed ∪ pts_row)) for every row of ``pts``.

    ``fixed`` is a shared (n, d) array whose own energy ``fixed_energy``
    the caller supplies once.
    """
    e = pair_energy_batch(pot, pts)
    if fixed is not None and len(fixed):
        e = e + interaction_batch(pot, pts, fixed) + fixed_energy
    elif fixed_energy:
        e = e + fixed_energy
    with np.errstate(over="ignore"):
        return np.exp(-beta * e)


# --- multi-body Hamiltonians ---------------------------------------------

BodyFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MultiBodyHamiltonian:
    """H = sum over l >= 2 of l-body terms u^(l) over increasing index tuples.

    ``pair`` supplies u^(2)(x, y) = u(x - y); ``bodies`` maps l to a
    vectorized callable taking an array of shape (..., l, d) and returning
    shape (...).  An explicit ``bodies[2]`` is added to ``pair``.
    """

    pair: Optional[PairPotential] = None
    bodies: Mapping[int, BodyFn] = field(default_factory=dict)
    stability_B: float = 0.0
    nonnegative: bool = False

    def __post_init__(self):
        if any(l < 2 for l in self.bodies):
            raise ValueError("body orders start at 2")
        if self.stability_B < 0:
            raise ValueError("stability constant must be nonnegative")

    @property
    def max_order(self) -> int:
        return max([2 if self.pair is not None else 0] + list(self.bodies))

    @property
    def is_pair_only(self) -> bool:
        return not self.bodies

    def body(self, l: int, pts: np.ndarray) -> np.ndarray:
        """u^(l) evaluated on (..., l, d) arrays (pair part included for l = 2)."""
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-2])
        if l == 2 and self.pair is not None:
            out = out + self.pair(pts[..., 1, :] - pts[..., 0, :])
        if l in self.bodies:
            out = out + np.asarray(self.bodies[l](pts), dtype=float)
        return out

    @classmethod
    def from_pair(cls, pot: PairPotential) -> "MultiBodyHamiltonian":
        return cls(pair=pot, stability_B=pot.stability_B, nonnegative=pot.nonnegative)


def multibody_energy(H: MultiBodyHamiltonian, cfg: Configuration) -> float:
    """Sum of u^(l) over all increasing index tuples of every size l >= 2."""
    n = len(cfg)
    if n > SUBSET_CAP:
        raise SubsetCapExceeded(f"configuration of size {n} exceeds the cap {SUBSET_CAP}")
    if n < 2:
        return 0.0
    terms = []
    for l in range(2, min(n, H.max_order) + 1):
        idx = np.array(list(itertools.combinations(range(n), l)))
        terms.append(H.body(l, cfg.points[idx]))
    return _extended_sum(np.concatenate(terms)) if terms else 0.0


def configuration_to_json(cfg: Configuration) -> str:
    return json.dumps(cfg.to_json())
