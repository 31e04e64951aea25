"""Partition function, explicit solution and Janossy/correlation transforms.

Everything rests on one family of Monte Carlo integrals

    I_k(x_n) = int_{Lambda^k} exp(-beta H(x_n ∪ y_k)) dy_k,

estimated with uniform proposals.  The proposal points for order k depend
only on (seed, k, chunk); they never depend on x_n or on z.  So one table of
integrals serves both signs of the activity, and integrals with different
fixed points share common random numbers, which is what makes quotients
and sign tests cheap.  Orders k are drawn from independent streams.

In terms of I_k:

    Xi(z)         = sum_k z^k / k! I_k(∅)
    theta^(n)(z)  = sum_k z^(n+k) / k! I_k(x_n) / Xi(z)
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy import special

from . import _rng
from .errors import OutsideDisk, TailTooLarge
from .hamiltonian import Configuration, boltzmann_batch, energy
from .potentials import ModelParams, PairPotential, c_beta, z0

__all__ = [
    "BoxRegion",
    "McEstimate",
    "IntegralTable",
    "boltzmann_integrals",
    "exp_tail",
    "stability_tail",
    "choose_k_max",
    "partition_function",
    "theta_explicit",
    "solution_bound",
    "correlations_from_janossy",
    "janossy_from_correlations",
    "PoissonJanossy",
    "PoissonCorrelations",
    "set_threads",
    "DEFAULT_TAIL_TOL",
    "K_CAP",
]

DEFAULT_TAIL_TOL = 1e-8
K_CAP = 20
_THREADS = 1


def set_threads(n: Optional[int]) -> None:
    """Number of worker threads for chunked Monte Carlo (results do not depend on it)."""
    global _THREADS
    _THREADS = max(1, int(n or 1))


@dataclass(frozen=True)
class BoxRegion:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ValueError("box corners must have the same dimension")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValueError("box needs upper > lower in every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def interval(cls, a: float, b: float) -> "BoxRegion":
        return cls((a,), (b,))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def contains(self, pts) -> bool:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        return bool(np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi))))

    def uniform(self, gen: np.random.Generator, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        u = gen.random(shape + (self.dim,))
        return np.asarray(self.lo) + u * self.lengths

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    samples: int
    seed: tuple
    k_max: Optional[int] = None
    tail_bound: float = 0.0

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError("std_error must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed"] = list(self.seed)
        if isinstance(self.value, complex):
            d["value"] = [self.value.real, self.value.imag]
        return d

    def within(self, target: float, n_sigma: float = 3.0) -> bool:
        return abs(self.value - target) <= n_sigma * self.std_error + self.tail_bound + 1e-15


# --- the shared Monte Carlo integrals --------------------------------------


@dataclass(frozen=True)
class IntegralTable:
    """Estimates of I_k for several fixed configurations, k = 0..k_max.

    ``means[f, k]`` estimates I_k of fixed set f; ``cov[k]`` is the (F, F)
    covariance of the k-th column (zero for k = 0 and for exact entries).
    Different k are independent.
    """

    means: np.ndarray
    cov: np.ndarray
    samples: int
    seed: tuple

    @property
    def k_max(self) -> int:
        return self.means.shape[1] - 1

    def series(self, coeffs: np.ndarray, f: int = 0) -> tuple[complex, float]:
        """Value and std of sum_k coeffs[k] I_k for fixed set f."""
        coeffs = np.asarray(coeffs)
        val = np.sum(coeffs * self.means[f])
        var = np.sum(np.abs(coeffs) ** 2 * self.cov[:, f, f])
        return val, math.sqrt(max(float(var), 0.0))

    def series_cov(self, coeffs_a: np.ndarray, fa: int, coeffs_b: np.ndarray, fb: int) -> float:
        return float(np.real(np.sum(coeffs_a * np.conj(coeffs_b) * self.cov[:, fa, fb])))


def _chunk_stats(pot, beta, box, fixed_sets, fixed_energies, k, size, seed, chunk):
    gen = _rng.stream(seed, _rng.TAG_INTEGRAL, k, chunk)
    y = box.uniform(gen, (size, k))
    vals = np.empty((len(fixed_sets), size))
    for f, (pts, e) in enumerate(zip(fixed_sets, fixed_energies)):
        if not math.isfinite(e):
            vals[f] = 0.0
        else:
            vals[f] = boltzmann_batch(pot, beta, y, pts, e)
    mean = vals.mean(axis=1)
    centered = vals - mean[:, None]
    m2 = centered @ centered.T
    return size, mean, m2


def _combine(stats):
    n_tot, mean_tot, m2_tot = 0, None, None
    for n, mean, m2 in stats:
        if mean_tot is None:
            n_tot, mean_tot, m2_tot = n, mean.copy(), m2.copy()
            continue
        delta = mean - mean_tot
        new_n = n_tot + n
        mean_tot = mean_tot + delta * (n / new_n)
        m2_tot = m2_tot + m2 + np.outer(delta, delta) * (n_tot * n / new_n)
        n_tot = new_n
    return n_tot, mean_tot, m2_tot


def _map_chunks(fn, sizes):
    if _THREADS > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(_THREADS) as ex:
            return list(ex.map(fn, range(len(sizes)), sizes))
    return [fn(i, s) for i, s in enumerate(sizes)]


def _packing_limit(pot: PairPotential, box: BoxRegion) -> Optional[int]:
    return pot.max_points(box.lengths)


@functools.lru_cache(maxsize=256)
def _cached_table(pot, beta, box, fixed_key, k_max, samples, seed):
    fixed_sets = [np.asarray(f, dtype=float).reshape(-1, box.dim) for f in fixed_key]
    fixed_energies = [energy(pot, Configuration(f, dim=box.dim)) if len(f) else 0.0 for f in fixed_sets]
    F = len(fixed_sets)
    means = np.zeros((F, k_max + 1))
    cov = np.zeros((k_max + 1, F, F))
    with np.errstate(over="ignore"):
        means[:, 0] = [math.exp(-beta * e) if math.isfinite(e) else 0.0 for e in fixed_energies]
    limit = _packing_limit(pot, box)
    if not all(box.contains(f) for f in fixed_sets if len(f)):
        limit = None  # the packing bound only counts points inside the box
    vol = box.volume
    for k in range(1, k_max + 1):
        active = [f for f in range(F) if math.isfinite(fixed_energies[f])
                  and not (limit is not None and len(fixed_sets[f]) + k > limit)]
        if not active:
            continue  # exact zeros
        sub_sets = [fixed_sets[f] for f in active]
        sub_en = [fixed_energies[f] for f in active]

        def run(chunk, size, k=k, sub_sets=sub_sets, sub_en=sub_en):
            return _chunk_stats(pot, beta, box, sub_sets, sub_en, k, size, seed, chunk)

        n, mean, m2 = _combine(_map_chunks(run, _rng.chunk_sizes(samples)))
        scale = vol**k
        c = m2 / max(n - 1, 1) / n * scale**2
        idx = np.asarray(active)
        means[idx, k] = mean * scale
        cov[k][np.ix_(idx, idx)] = c
    means.setflags(write=False)
    cov.setflags(write=False)
    return IntegralTable(means, cov, samples, seed)


def _fixed_key(fixed, dim) -> tuple:
    out = []
    for f in fixed:
        pts = f.points if isinstance(f, Configuration) else np.asarray(f, dtype=float).reshape(-1, dim)
        out.append(tuple(tuple(float(v) for v in p) for p in pts))
    return tuple(out)


def boltzmann_integrals(pot: PairPotential, beta: float, box: BoxRegion, fixed: Sequence,
                        k_max: int, samples: int, seed: _rng.SeedLike = 0) -> IntegralTable:
    """Table of I_k(fixed_f) for k <= k_max with common random numbers.

    Exact zeros are used where hereditarity (exp(-beta H(x_n)) = 0) or the
    hard-core packing bound forces them.  Results are cached.
    """
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    if samples < 2 and k_max > 0:
        raise ValueError("need at least two samples per term")
    return _cached_table(pot, float(beta), box, _fixed_key(fixed, box.dim), int(k_max), int(samples),
                         _rng.as_seed_tuple(seed))


# --- tail certificates ------------------------------------------------------


def exp_tail(a: float, K: int) -> float:
    """sum_{k > K} a^k / k! for a >= 0."""
    if a <= 0:
        return 0.0
    return float(math.exp(a) * special.gammainc(K + 1, a))


def stability_tail(absz: float, n: int, vol: float, beta: float, B: float, K: int) -> float:
    """Bound on sum_{k > K} |z|^(n+k)/k! I_k(x_n) from exp(-beta H) <= e^{beta B (n+k)}."""
    xi = absz * math.exp(beta * B)
    return xi**n * exp_tail(xi * vol, K)


def choose_k_max(absz: float, n: int, pot: PairPotential, beta: float, box: BoxRegion,
                 k_max: Optional[int], tail_tol: float, scale: float) -> tuple[int, float]:
    """Pick (or validate) the truncation order and return it with its tail bound.

    ``scale`` is the size of the leading term; the tail must stay below
    ``tail_tol * scale``.  The hard-core packing bound makes the series
    finite, in which case the tail is exactly 0.
    """
    limit = _packing_limit(pot, box)
    B = pot.stability_B
    if limit is not None:
        exact = max(limit - n, 0)
        if k_max is None and exact <= K_CAP:
            return exact, 0.0
        if k_max is not None and k_max >= exact:
            return k_max, 0.0
    budget = tail_tol * max(scale, 0.0)
    if k_max is None:
        for K in range(0, K_CAP + 1):
            t = stability_tail(absz, n, box.volume, beta, B, K)
            if t <= budget:
                return K, t
        raise TailTooLarge(f"stability tail exceeds {budget:.3g} at the cap k_max={K_CAP}")
    t = stability_tail(absz, n, box.volume, beta, B, k_max)
    if t > budget:
        raise TailTooLarge(f"tail bound {t:.3g} at k_max={k_max} exceeds {budget:.3g}")
    return k_max, t


def _coeffs(z, n: int, K: int) -> np.ndarray:
    k = np.arange(K + 1)
    fact = special.factorial(k)
    return np.array([z ** (n + kk) for kk in k]) / fact


def _check_disk(params: ModelParams, margin: float = 1.0) -> float:
    radius = z0(params.potential, params.beta, params.dim)
    if abs(params.activity) >= margin * radius:
        raise OutsideDisk(f"|z|={abs(params.activity):.6g} is not below {margin:g} z0={radius:.6g}; "
                          "z0 is a sufficient radius only")
    return radius


# --- public operations --------------------------------------------------------


def partition_function(params: ModelParams, box: BoxRegion, k_max: Optional[int] = None,
                       mc_per_term: int = 20000, rng: _rng.SeedLike = 0,
                       tail_tol: float = DEFAULT_TAIL_TOL) -> McEstimate:
    """Xi_Lambda(z) = 1 + sum_k z^k/k! int exp(-beta H(y_k)) dy_k."""
    z = params.activity
    K, tail = choose_k_max(abs(z), 0, params.potential, params.beta, box, k_max, tail_tol, 1.0)
    tab = boltzmann_integrals(params.potential, params.beta, box, [()], K, mc_per_term, rng)
    val, sd = tab.series(_coeffs(z, 0, K))
    return McEstimate(_real(val), sd, mc_per_term, _rng.as_seed_tuple(rng), K, tail)


def _real(v):
    v = complex(v)
    return v.real if v.imag == 0 else v


def theta_explicit(params: ModelParams, box: BoxRegion, n: int, x_n, k_max: Optional[int] = None,
                   mc_per_term: int = 20000, rng: _rng.SeedLike = 0, tail_tol: float = DEFAULT_TAIL_TOL,
                   check_disk: bool = True) -> McEstimate:
    """theta^(n)(z; x_n) from the explicit grand-canonical formula.

    Numerator and Xi share the same proposal points, and the reported
    std error is the delta-method std of the ratio.
    """
    x = x_n if isinstance(x_n, Configuration) else Configuration(x_n, dim=box.dim)
    if len(x) != n or n < 1:
        raise ValueError("x_n must hold exactly n >= 1 points")
    if not box.contains(x.points):
        raise ValueError("x_n must lie in the box")
    if check_disk:
        _check_disk(params)
    z, pot, beta = params.activity, params.potential, params.beta
    eH = math.exp(-beta * energy(pot, x)) if math.isfinite(energy(pot, x)) else 0.0
    seed = _rng.as_seed_tuple(rng)
    if eH == 0.0:
        return McEstimate(0.0, 0.0, mc_per_term, seed, 0, 0.0)
    K0, tail0 = choose_k_max(abs(z), 0, pot, beta, box, None if k_max is None else k_max + n, tail_tol, 1.0)
    Kn, tailn = choose_k_max(abs(z), n, pot, beta, box, k_max, tail_tol, abs(z) ** n * eH)
    K = max(K0, Kn)
    tab = boltzmann_integrals(pot, beta, box, [(), x], K, mc_per_term, rng)
    c0, cn = _coeffs(z, 0, K), _coeffs(z, n, K)
    xi, sxi = tab.series(c0, 0)
    s, ss = tab.series(cn, 1)
    th = s / xi
    cov = tab.series_cov(cn, 1, c0, 0)
    var = (ss**2 - 2 * np.real(th * cov) + abs(th) ** 2 * sxi**2) / abs(xi) ** 2
    tail = (tailn + abs(th) * tail0) / max(abs(xi) - tail0, 1e-300)
    return McEstimate(_real(th), math.sqrt(max(float(var), 0.0)), mc_per_term, seed, K, float(tail))


def solution_bound(params: ModelParams, n: int) -> float:
    """(C max{C|z|/(1 - |z|/z0), 1})^n, valid for |z| < z0."""
    C = c_beta(params.potential, params.beta, params.dim)
    radius = z0(params.potential, params.beta, params.dim)
    a = abs(params.activity)
    if a >= radius:
        raise OutsideDisk("solution bound needs |z| < z0")
    return (C * max(C * a / (1 - a / radius), 1.0)) ** n


# --- Janossy <-> correlation transforms ----------------------------------------


class DensityEvaluator(Protocol):
    """Janossy or correlation family evaluated row-wise on (M, m, d) arrays.

    ``evaluate`` returns independent unbiased estimates (exact values for
    closed forms) and ``sup(m)`` a bound on the m-th density.
    """

    def evaluate(self, pts: np.ndarray, seed: tuple) -> np.ndarray: ...

    def sup(self, m: int) -> float: ...


@dataclass(frozen=True)
class PoissonJanossy:
    z: float
    box: BoxRegion

    def evaluate(self, pts, seed=()):
        m = pts.shape[1]
        return np.full(pts.shape[0], self.z**m * math.exp(-self.z * self.box.volume))

    def sup(self, m):
        return self.z**m * math.exp(-self.z * self.box.volume)


@dataclass(frozen=True)
class PoissonCorrelations:
    z: float

    def evaluate(self, pts, seed=()):
        return np.full(pts.shape[0], self.z ** pts.shape[1])

    def sup(self, m):
        return self.z**m


def _series_transform(evaluator, box, n, x_n, k_max, mc_per_term, rng, sign, tail_tol, scale):
    x = x_n if isinstance(x_n, Configuration) else Configuration(x_n, dim=box.dim)
    if n < 1 or len(x) != n:
        raise ValueError("n >= 1 and x_n must hold n points")
    seed = _rng.as_seed_tuple(rng)
    vol = box.volume
    # tail terms |Lambda|^k/k! sup(n+k); sup(m) is geometric for every evaluator here
    def tail_at(K):
        terms, k = [], K + 1
        while True:
            t = vol**k / math.factorial(k) * evaluator.sup(n + k)
            terms.append(t)
            if t < 1e-18 * max(sum(terms), 1e-300) or k > K + 200:
                return math.fsum(terms)
            k += 1

    lead = max(abs(scale), 1e-300)
    if k_max is None:
        for K in range(K_CAP + 1):
            if tail_at(K) <= tail_tol * lead:
                k_max = K
                break
        else:
            raise TailTooLarge(f"tail exceeds tolerance at the cap k_max={K_CAP}")
    tail = tail_at(k_max)
    if tail > tail_tol * lead:
        raise TailTooLarge(f"tail {tail:.3g} at k_max={k_max} exceeds {tail_tol * lead:.3g}")
    total, var = 0.0, 0.0
    base = x.points
    for k in range(k_max + 1):
        coef = sign**k / math.factorial(k)
        if k == 0:
            vals = evaluator.evaluate(base[None], _rng.child_seed(seed, _rng.TAG_TRANSFORM, 0))
            total += coef * float(vals[0])
            continue
        acc, acc2, count = 0.0, 0.0, 0
        for c, size in enumerate(_rng.chunk_sizes(mc_per_term)):
            gen = _rng.stream(seed, _rng.TAG_TRANSFORM, k, c)
            y = box.uniform(gen, (size, k))
            pts = np.concatenate([np.broadcast_to(base, (size,) + base.shape), y], axis=1)
            v = evaluator.evaluate(pts, _rng.child_seed(seed, _rng.TAG_TRANSFORM, k, c)) * vol**k
            acc += float(v.sum())
            acc2 += float((v * v).sum())
            count += size
        mean = acc / count
        s2 = max(acc2 / count - mean * mean, 0.0) * count / max(count - 1, 1)
        total += coef * mean
        var += coef**2 * s2 / count
    return McEstimate(total, math.sqrt(var), mc_per_term, seed, k_max, float(tail))


def correlations_from_janossy(janossy: DensityEvaluator, box: BoxRegion, n: int, x_n,
                              k_max: Optional[int] = None, mc_per_term: int = 20000,
                              rng: _rng.SeedLike = 0, tail_tol: float = 1e-6) -> McEstimate:
    """rho^(n)(x_n) = sum_k 1/k! int j^(n+k)(x_n, y_k) dy_k."""
    return _series_transform(janossy, box, n, x_n, k_max, mc_per_term, rng, 1.0, tail_tol,
                             janossy.sup(n))


def janossy_from_correlations(correlations: DensityEvaluator, box: BoxRegion, n: int, x_n,
                              k_max: Optional[int] = None, mc_per_term: int = 20000,
                              rng: _rng.SeedLike = 0, tail_tol: float = 1e-6) -> McEstimate:
    """j^(n)(x_n) = sum_k (-1)^k/k! int rho^(n+k)(x_n, y_k) dy_k, tail from (xi |Lambda|)^k/k!."""
    return _series_transform(correlations, box, n, x_n, k_max, mc_per_term, rng, -1.0, tail_tol,
                             correlations.sup(n) * math.exp(-correlations.sup(1) * box.volume))
