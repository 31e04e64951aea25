"""Papangelou kernel of the closure process, GNZ residuals and the kernel recursion.

On a bounded window the kernel is a quotient of Janossy densities,

    (-1)^n kappa^(n)(-z; x_n; eta) = j^(N+n)(x_n, eta) / j^(N)(eta),     N = #eta,

and both densities are estimated from the same proposal points, so most of
the noise cancels in the ratio.  Local stability bounds it by
(z e^{2 beta B})^n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _rng
from .closure import ClosureModel
from .errors import DegenerateEnvironment, KernelBoundViolated
from .grand_canonical import (
    DEFAULT_TAIL_TOL,
    BoxRegion,
    McEstimate,
    _coeffs,
    boltzmann_integrals,
    choose_k_max,
    exp_tail,
)
from .hamiltonian import Configuration, energy, interaction, pair_energy_batch
from .potentials import c_beta, mayer
from .sampler import SampleBatch

__all__ = [
    "KernelQuery",
    "papangelou_kernel",
    "kernel_batch",
    "kernel_bound",
    "kernel_bound_check",
    "random_queries",
    "test_function",
    "BATTERY",
    "gnz_residual",
    "kernel_recursion_check",
    "window_convergence",
]


@dataclass(frozen=True)
class KernelQuery:
    x_n: Configuration
    eta: Configuration
    window: BoxRegion

    def __post_init__(self):
        x = self.x_n if isinstance(self.x_n, Configuration) else Configuration(self.x_n, dim=self.window.dim)
        e = self.eta if isinstance(self.eta, Configuration) else Configuration(self.eta, dim=self.window.dim)
        object.__setattr__(self, "x_n", x)
        object.__setattr__(self, "eta", e)
        if len(x) < 1:
            raise ValueError("a kernel query inserts at least one point")
        for c in (x, e):
            if len(c) and not self.window.contains(c.points):
                raise ValueError("query points and environment must lie in the window")

    @property
    def n(self) -> int:
        return len(self.x_n)


def _require_local_stability(model: ClosureModel) -> None:
    if not model.potential.locally_stable:
        raise ValueError(f"the {model.potential.kind} potential is not flagged locally stable; "
                         "the kernel bound and its finite-window construction need local stability")


def _janossy_series(tab, f, n_points, z, K):
    coeffs = z**n_points * _coeffs(-z, 0, K)
    val, sd = tab.series(coeffs, f)
    return float(np.real(val)), sd, coeffs


def papangelou_kernel(model: ClosureModel, q: KernelQuery, k_max: Optional[int] = None, mc_per_term: int = 20000,
                      rng: _rng.SeedLike = 0, tail_tol: float = DEFAULT_TAIL_TOL,
                      enforce_bound: bool = False) -> McEstimate:
    """(-1)^n kappa^(n)(-z; x_n; eta) = j^(N+n)(x_n, eta) / j^(N)(eta) on the query window.

    With ``enforce_bound`` the estimate is checked against (z e^{2 beta B})^n
    and KernelBoundViolated is raised beyond 5 sigma.  The check is off by
    default because the quotient at negative activity does exceed that
    value (Tonks, eta empty, x = 0: 0.18/0.805 > 0.2); see
    ``kernel_bound_check``.
    """
    _require_local_stability(model)
    pot, beta, z, box = model.potential, model.beta, model.z, q.window
    N, n = len(q.eta), q.n
    if not math.isfinite(energy(pot, q.eta)):
        raise DegenerateEnvironment("the environment itself has zero Janossy density")
    num_cfg = q.x_n.union(q.eta)
    seed = _rng.as_seed_tuple(rng)
    K0, t0 = choose_k_max(z, N, pot, beta, box, k_max, tail_tol, z**N)
    K1, t1 = choose_k_max(z, N + n, pot, beta, box, k_max, tail_tol, z ** (N + n))
    K = max(K0, K1)
    tab = boltzmann_integrals(pot, beta, box, [q.eta, num_cfg], K, mc_per_term, rng)
    j0, s0, c0 = _janossy_series(tab, 0, N, z, K)
    j1, s1, c1 = _janossy_series(tab, 1, N + n, z, K)
    if j0 <= 5 * s0 + t0 or j0 <= 0:
        raise DegenerateEnvironment(f"j^({N})(eta) = {j0:.3g} is not resolved from 0 (std {s0:.3g})")
    ratio = j1 / j0
    cov = tab.series_cov(c1, 1, c0, 0)
    var = (s1**2 - 2 * ratio * cov + ratio**2 * s0**2) / j0**2
    sd = math.sqrt(max(var, 0.0))
    tail = (t1 + abs(ratio) * t0) / max(j0 - t0, 1e-300)
    bound = kernel_bound(model, n)
    if enforce_bound and ratio > bound + 5 * sd + tail + 1e-12:
        raise KernelBoundViolated(f"kernel {ratio:.4g} exceeds (z e^(2 beta B))^n = {bound:.4g}")
    return McEstimate(ratio, sd, mc_per_term, seed, K, float(tail))


def kernel_bound(model: ClosureModel, n: int) -> float:
    """(z e^{2 beta B})^n."""
    return (model.z * math.exp(2 * model.beta * model.B)) ** n


def random_queries(model: ClosureModel, box: BoxRegion, count: int, n_max: int = 2, eta_max: int = 2,
                   rng: _rng.SeedLike = 0) -> list[KernelQuery]:
    """Random kernel queries with allowed (finite-energy) environments."""
    gen = _rng.stream(_rng.as_seed_tuple(rng), _rng.TAG_PROBES, 0)
    out = []
    while len(out) < count:
        n = int(gen.integers(1, n_max + 1))
        N = int(gen.integers(0, eta_max + 1))
        eta = Configuration(box.uniform(gen, (N,)), dim=box.dim)
        if not math.isfinite(energy(model.potential, eta)):
            continue
        out.append(KernelQuery(Configuration(box.uniform(gen, (n,)), dim=box.dim), eta, box))
    return out


def kernel_bound_check(model: ClosureModel, queries: Sequence[KernelQuery], mc_per_term: int = 20000,
                       rng: _rng.SeedLike = 0, n_sigma: float = 5.0) -> dict:
    """Compare kernel estimates with (z e^{2 beta B})^n query by query.

    Also records nonnegativity at 3 sigma.  Never raises on a violation;
    the report lists them.
    """
    seed = _rng.as_seed_tuple(rng)
    rows = []
    for i, q in enumerate(queries):
        est = papangelou_kernel(model, q, None, mc_per_term, _rng.child_seed(seed, i))
        bound = kernel_bound(model, q.n)
        rows.append({"n": q.n, "x_n": q.x_n.points.tolist(), "eta": q.eta.points.tolist(), "value": est.value,
                     "std_error": est.std_error, "bound": bound,
                     "within_bound": est.value <= bound + n_sigma * est.std_error + est.tail_bound,
                     "nonnegative": est.value >= -3 * est.std_error})
    viol = [r for r in rows if not r["within_bound"]]
    return {"passed": not viol, "violations": len(viol), "queries": len(rows),
            "nonnegative": all(r["nonnegative"] for r in rows),
            "max_ratio_to_bound": max((r["value"] / r["bound"] for r in rows), default=0.0), "rows": rows,
            "seed": list(seed)}


def kernel_batch(model: ClosureModel, box: BoxRegion, x: np.ndarray, etas: Sequence[np.ndarray], inner: int = 500,
                 rng: _rng.SeedLike = 0, tail_tol: float = DEFAULT_TAIL_TOL, block: int = 1 << 21):
    """Kernel estimates for rows (x[i], etas[i]) with an independent inner sample per row.

    Rows are grouped by #eta; numerator and denominator of each row share
    their proposal points.  Returns (values, std_errors).
    """
    _require_local_stability(model)
    pot, beta, z = model.potential, model.beta, model.z
    x = np.asarray(x, dtype=float)
    R, n, d = x.shape
    seed = _rng.as_seed_tuple(rng)
    sizes = np.array([len(e) for e in etas])
    values = np.zeros(R)
    errs = np.zeros(R)
    vol = box.volume
    limit = pot.max_points(box.lengths)
    for N in np.unique(sizes):
        rows = np.flatnonzero(sizes == N)
        E = np.stack([np.asarray(etas[i], float).reshape(N, d) for i in rows]) if N else np.zeros((rows.size, 0, d))
        X = x[rows]
        num_pts = np.concatenate([X, E], axis=1)
        with np.errstate(over="ignore"):
            b_num = np.exp(-beta * pair_energy_batch(pot, num_pts))
            b_den = np.exp(-beta * pair_energy_batch(pot, E)) if N > 1 else np.ones(rows.size)
        K, _ = choose_k_max(z, int(N), pot, beta, box, None, tail_tol, z**N)
        K1, _ = choose_k_max(z, int(N) + n, pot, beta, box, None, tail_tol, z ** (N + n))
        K = max(K, K1)
        s_num = b_num.copy()
        s_den = b_den.copy()
        v_num = np.zeros(rows.size)
        v_den = np.zeros(rows.size)
        c_nd = np.zeros(rows.size)
        for k in range(1, K + 1):
            if limit is not None and N + k > limit:
                break
            coef = (-z) ** k / math.factorial(k) * vol**k
            per = max(1, block // max(1, inner * (N + n + k) ** 2))
            for c0 in range(0, rows.size, per):
                sl = slice(c0, min(c0 + per, rows.size))
                m = sl.stop - sl.start
                gen = _rng.stream(seed, _rng.TAG_GNZ, int(N), k, c0)
                y = box.uniform(gen, (m, inner, k))
                e_b = np.broadcast_to(E[sl][:, None], (m, inner, N, d))
                x_b = np.broadcast_to(X[sl][:, None], (m, inner, n, d))
                den = np.concatenate([e_b, y], axis=2).reshape(m * inner, N + k, d)
                num = np.concatenate([x_b, e_b, y], axis=2).reshape(m * inner, N + n + k, d)
                with np.errstate(over="ignore"):
                    wd = np.exp(-beta * pair_energy_batch(pot, den)).reshape(m, inner)
                    wn = (np.exp(-beta * pair_energy_batch(pot, num)).reshape(m, inner)
                          if not (limit is not None and N + n + k > limit) else np.zeros((m, inner)))
                s_num[sl] += coef * wn.mean(axis=1)
                s_den[sl] += coef * wd.mean(axis=1)
                if inner > 1:
                    v_num[sl] += coef**2 * wn.var(axis=1, ddof=1) / inner
                    v_den[sl] += coef**2 * wd.var(axis=1, ddof=1) / inner
                    cn = ((wn - wn.mean(axis=1, keepdims=True)) * (wd - wd.mean(axis=1, keepdims=True))).sum(axis=1)
                    c_nd[sl] += coef**2 * cn / (inner - 1) / inner
        if np.any(s_den <= 0):
            raise DegenerateEnvironment("an environment in the batch has a vanishing Janossy density")
        ratio = z**n * s_num / s_den
        var = z ** (2 * n) * (v_num - 2 * (s_num / s_den) * c_nd + (s_num / s_den) ** 2 * v_den) / s_den**2
        values[rows] = ratio
        errs[rows] = np.sqrt(np.maximum(var, 0.0))
    return values, errs


# --- GNZ test functions ---------------------------------------------------------------

TestFunction = Callable[[np.ndarray, np.ndarray], float]


def test_function(name: str, **params) -> TestFunction:
    """Test function F(x_n; rest) from the standard battery.

    ``const``: 1.  ``hardcore_indicator``: every point of x_n is farther
    than ``radius`` from every point of rest.  ``product_window``: all of
    x_n lies in [lo, hi], damped by a factor 1/2 per point of rest in the
    same window.
    """
    if name == "const":
        return lambda x, rest: 1.0
    if name == "hardcore_indicator":
        radius = float(params.get("radius", 0.5))

        def f(x, rest):
            if rest.shape[0] == 0:
                return 1.0
            dist = np.linalg.norm(x[:, None, :] - rest[None, :, :], axis=-1)
            return float(np.all(dist > radius))

        return f
    if name == "product_window":
        lo, hi = float(params.get("lo", 0.0)), float(params.get("hi", 0.5))

        def g(x, rest):
            inside = np.all((x[:, 0] >= lo) & (x[:, 0] <= hi))
            if not inside:
                return 0.0
            k = int(np.sum((rest[:, 0] >= lo) & (rest[:, 0] <= hi))) if rest.shape[0] else 0
            return 0.5**k

        return g
    raise ValueError(f"unknown test function {name!r}")


BATTERY = (("const", {}), ("hardcore_indicator", {"radius": 0.7}), ("product_window", {"lo": 0.0, "hi": 0.75}))


def _lhs_terms(batch: SampleBatch, n: int, F: TestFunction) -> np.ndarray:
    import itertools

    out = np.zeros(len(batch))
    for i, cfg in enumerate(batch.configurations):
        m = len(cfg)
        if m < n:
            continue
        pts = cfg.points
        s = 0.0
        for tup in itertools.permutations(range(m), n):
            rest = np.delete(pts, list(tup), axis=0)
            s += F(pts[list(tup)], rest)
        out[i] = s
    return out


def gnz_residual(model: ClosureModel, box: BoxRegion, test_functions, batch: SampleBatch, n: int = 1,
                 kernel_pairs: int = 20000, inner: int = 500, rng: _rng.SeedLike = 0) -> dict:
    """t-statistics of LHS - RHS of the finite-volume GNZ identity.

    LHS is the batch mean of sum over ordered n-tuples of F(x_n; rest).
    RHS is |Lambda|^n times the mean over ``kernel_pairs`` draws of
    (eta from the batch, x uniform in box^n) of F(x; eta) times the kernel.
    The kernel estimates are shared across the test functions.
    """
    if len(batch) == 0:
        from .errors import EmptyBatch

        raise EmptyBatch("GNZ residual needs samples")
    seed = _rng.as_seed_tuple(rng)
    gen = _rng.stream(seed, _rng.TAG_GNZ, 0)
    picks = gen.integers(0, len(batch), size=kernel_pairs)
    x = box.uniform(gen, (kernel_pairs, n))
    etas = [batch.configurations[i].points for i in picks]
    kap, _ = kernel_batch(model, box, x, etas, inner, _rng.child_seed(seed, 1))
    vol_n = box.volume**n
    if isinstance(test_functions, str) or (isinstance(test_functions, tuple) and len(test_functions) == 2
                                           and isinstance(test_functions[1], dict)):
        test_functions = [test_functions]
    results = []
    for spec in test_functions:
        name, params = (spec, {}) if isinstance(spec, str) else spec
        F = test_function(name, **params)
        lhs = _lhs_terms(batch, n, F)
        rhs = np.array([F(x[i], etas[i]) for i in range(kernel_pairs)]) * kap * vol_n
        L, R = lhs.mean(), rhs.mean()
        sL = lhs.std(ddof=1) / math.sqrt(lhs.size)
        sR = rhs.std(ddof=1) / math.sqrt(rhs.size)
        pooled = math.hypot(sL, sR)
        t = (L - R) / pooled if pooled > 0 else (0.0 if L == R else math.inf)
        results.append({"function": name, "params": params, "n": n, "lhs": L, "rhs": R, "lhs_std": sL,
                        "rhs_std": sR, "t": t, "passed": abs(t) < 4})
    return {"passed": all(r["passed"] for r in results), "results": results, "samples": len(batch),
            "kernel_pairs": kernel_pairs, "inner": inner, "seed": list(seed)}


# --- kernel recursion ------------------------------------------------------------------


def kernel_recursion_check(model: ClosureModel, q: KernelQuery, k_max: Optional[int] = None, mc_per_term: int = 20000,
                           rng: _rng.SeedLike = 0, tail_tol: float = 1e-8) -> dict:
    """Both sides of the first-point recursion of the kernel at activity a = -z.

    LHS numerator: S^(n+N)(a; x_n, eta).  RHS numerator:
    a e^{-beta W(x_1 | x_{2,n} ∪ eta)} sum_{l,j} a^(M+l+j)/(l! j!) J_{l,j}
    with M = n - 1 + N and
    J_{l,j} = int prod_{i<=l} f(x_1 - w_i) exp(-beta H(x_{2,n}, eta, w, y)) dw dy.
    Each (l, j) term has its own stream, independent of the LHS.  Both are
    divided by the common S^(N)(a; eta) and multiplied by (-1)^n.
    """
    _require_local_stability(model)
    pot, beta, z, box = model.potential, model.beta, model.z, q.window
    a = -z
    n, N = q.n, len(q.eta)
    M = n - 1 + N
    seed = _rng.as_seed_tuple(rng)
    x1 = q.x_n.subset([0])
    rest = q.x_n.remove(0).union(q.eta)
    # common denominator and LHS numerator
    K0, _ = choose_k_max(z, N, pot, beta, box, k_max, tail_tol, z**N)
    K1, _ = choose_k_max(z, N + n, pot, beta, box, k_max, tail_tol, z ** (N + n))
    K = max(K0, K1)
    tab = boltzmann_integrals(pot, beta, box, [q.eta, q.x_n.union(q.eta)], K, mc_per_term,
                              _rng.child_seed(seed, 0))
    den, sden = tab.series(_coeffs(a, N, K), 0)
    lhs, slhs = tab.series(_coeffs(a, N + n, K), 1)
    den, lhs = float(np.real(den)), float(np.real(lhs))
    if abs(den) <= 5 * sden or den == 0:
        raise DegenerateEnvironment("environment density is not resolved from 0")
    # right-hand side
    W = interaction(pot, x1, rest)
    pre = 0.0 if not math.isfinite(W) else math.exp(-beta * W)
    C = c_beta(pot, beta, box.dim)
    B = model.B
    limit = pot.max_points(box.lengths)
    absa = abs(a)
    if limit is not None:
        T = max(limit - M, 0)
        tail = 0.0
    else:
        T = next(t for t in range(0, 60) if (absa * math.exp(beta * B)) ** M
                 * exp_tail(absa * math.exp(beta * B) * (C + box.volume), t) <= tail_tol * absa**M)
        tail = (absa * math.exp(beta * B)) ** M * exp_tail(absa * math.exp(beta * B) * (C + box.volume), T)
    tail *= absa * math.exp(2 * beta * B)
    rhs, var = 0.0, 0.0
    rest_pts = rest.points
    h_rest = energy(pot, rest) if len(rest) > 1 else 0.0
    if pre > 0 and math.isfinite(h_rest):
        for s in range(0, T + 1):
            for l in range(0, s + 1):
                j = s - l
                coef = a * pre * a ** (M + l + j) / (math.factorial(l) * math.factorial(j))
                if l + j == 0:
                    val = math.exp(-beta * h_rest)
                    rhs += coef * val
                    continue
                tot, tot2, cnt = 0.0, 0.0, 0
                for c, size in enumerate(_rng.chunk_sizes(mc_per_term)):
                    g = _rng.stream(seed, _rng.TAG_RECURSION, l, j, c)
                    pts = box.uniform(g, (size, l + j))
                    allp = np.concatenate([np.broadcast_to(rest_pts, (size,) + rest_pts.shape), pts], axis=1)
                    with np.errstate(over="ignore"):
                        w = np.exp(-beta * pair_energy_batch(pot, allp))
                    if l:
                        w = w * np.prod(mayer(pot, beta, x1.points[0] - pts[:, :l, :]), axis=1)
                    w = w * box.volume ** (l + j)
                    tot += float(w.sum())
                    tot2 += float((w * w).sum())
                    cnt += size
                mean = tot / cnt
                v = max(tot2 / cnt - mean**2, 0.0) / max(cnt - 1, 1)
                rhs += coef * mean
                var += coef**2 * v
    sign = (-1) ** n
    lhs_k, rhs_k = sign * lhs / den, sign * rhs / den
    sd = math.sqrt(slhs**2 + var)
    t = (lhs - rhs) / sd if sd > 0 else (0.0 if abs(lhs - rhs) <= 1e-14 + tail else math.inf)
    return {"lhs": lhs_k, "rhs": rhs_k, "lhs_std": slhs / abs(den), "rhs_std": math.sqrt(var) / abs(den),
            "t": t, "tail_bound": tail / abs(den), "terms": T, "passed": abs(t) < 4, "seed": list(seed)}


def window_convergence(model: ClosureModel, boxes: Sequence[BoxRegion], x_n, eta=(), mc_per_term: int = 20000,
                       rng: _rng.SeedLike = 0) -> dict:
    """Kernel values on nested windows and their successive differences (diagnostic only).

    The finite-window kernel is a quotient of partition-function-like
    series over the whole window, so it is not exactly local even for a
    finite-range potential; only the differences are reported.
    """
    values = []
    for i, bx in enumerate(boxes):
        if i and not (np.all(np.asarray(bx.lo) <= np.asarray(boxes[i - 1].lo))
                      and np.all(np.asarray(bx.hi) >= np.asarray(boxes[i - 1].hi))):
            raise ValueError("boxes must be nested")
        e = Configuration(eta, dim=bx.dim) if not isinstance(eta, Configuration) else eta
        est = papangelou_kernel(model, KernelQuery(Configuration(x_n, dim=bx.dim) if not isinstance(x_n, Configuration)
                                                   else x_n, e, bx), None, mc_per_term, rng)
        values.append(est)
    diffs = [abs(values[i + 1].value - values[i].value) for i in range(len(values) - 1)]
    sig = [math.hypot(values[i + 1].std_error, values[i].std_error) for i in range(len(values) - 1)]
    return {"values": [v.to_dict() for v in values], "differences": diffs, "difference_std": sig,
            "boxes": [b.to_dict() for b in boxes]}
