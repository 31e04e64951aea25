"""Exact finite-volume sampling of the closure process and correlation estimators.

Sampling is two-stage.  The number of points n is drawn from
q_n = (1/n!) int j^(n), computed from the same integral table as Xi so that
the q_n sum to one identically.  Given n, points are proposed uniformly in
the box and accepted with probability j_hat / M_n, where j_hat is a fresh
unbiased estimate of the Janossy density and M_n bounds it.  As long as
j_hat stays in [0, M_n], the acceptance probability averaged over the inner
noise is exactly j / M_n, so the accepted points follow j exactly.
Excursions outside [0, M_n] are clipped and counted.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from . import _rng
from .closure import ClosureJanossyEvaluator, ClosureModel
from .errors import EmptyBatch, EnvelopeViolated, TailTooLarge
from .grand_canonical import K_CAP, BoxRegion, boltzmann_integrals, exp_tail, partition_function
from .hamiltonian import Configuration, pair_energy_batch
from .potentials import c_beta, z0

__all__ = [
    "CountDistribution",
    "SampleBatch",
    "CorrelationEstimate",
    "count_distribution",
    "envelope",
    "sample",
    "sample_batch",
    "estimate_correlations",
    "pair_bin_measure",
    "triple_bin_measure",
    "closure_bin_average",
    "compare_correlations",
    "pooled_verdict",
]

BLOCK = 4096


@dataclass(frozen=True)
class CountDistribution:
    probs: np.ndarray
    std_errors: np.ndarray
    tail_bound: float
    seed: tuple
    samples: int

    @property
    def n_cut(self) -> int:
        return self.probs.size - 1

    def sampling_weights(self) -> np.ndarray:
        """Probabilities with negative Monte Carlo noise clipped and renormalized."""
        p = np.clip(self.probs, 0.0, None)
        return p / p.sum()

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "std_errors": self.std_errors.tolist(),
                "tail_bound": self.tail_bound, "seed": list(self.seed), "samples": self.samples}


def count_distribution(model: ClosureModel, box: BoxRegion, n_cut: Optional[int] = None,
                       k_max: Optional[int] = None, mc_per_term: int = 20000, rng: _rng.SeedLike = 0,
                       tol: float = 1e-8) -> CountDistribution:
    """q_n = sum_{m >= n} z^n (-z)^(m-n) / (n! (m-n)!) Z_m, with Z_m = int exp(-beta H(y_m)).

    The same table serves every n, so sum_n q_n telescopes to Z_0 = 1
    exactly up to the truncation tail.
    """
    pot, beta, z = model.potential, model.beta, model.z
    vol = box.volume
    limit = pot.max_points(box.lengths)
    xi_vol = model.xi * vol
    if limit is not None and limit <= K_CAP:
        order = limit
        count_tail = 0.0
        order_tail = 0.0
    else:
        order = k_max
        if order is None:
            order = next((m for m in range(K_CAP + 1) if exp_tail(2 * xi_vol, m) <= tol), None)
            if order is None:
                raise TailTooLarge(f"count series tail exceeds {tol} at the cap {K_CAP}")
        order_tail = exp_tail(2 * xi_vol, order)
        if order_tail > tol:
            raise TailTooLarge(f"count series tail {order_tail:.3g} exceeds {tol}")
        count_tail = 0.0
    if n_cut is None:
        n_cut = order
    n_cut = min(n_cut, order)
    if n_cut < order:
        count_tail = exp_tail(xi_vol, n_cut)
        if count_tail > tol:
            raise TailTooLarge(f"mass beyond n_cut={n_cut} may reach {count_tail:.3g}")
    tab = boltzmann_integrals(pot, beta, box, [()], order, mc_per_term, rng)
    Z, var = tab.means[0], tab.cov[:, 0, 0]
    probs = np.zeros(n_cut + 1)
    sds = np.zeros(n_cut + 1)
    for n in range(n_cut + 1):
        m = np.arange(n, order + 1)
        c = z**n * (-z) ** (m - n) / (special.factorial(n) * special.factorial(m - n))
        probs[n] = float(np.sum(c * Z[m]))
        sds[n] = math.sqrt(float(np.sum(c**2 * var[m])))
    total = probs.sum()
    slack = count_tail + order_tail + 5 * math.sqrt(float(np.sum(sds**2))) + 1e-12
    assert abs(total - 1.0) <= slack, (total, slack)
    return CountDistribution(probs, sds, count_tail + order_tail, _rng.as_seed_tuple(rng), mc_per_term)


def envelope(model: ClosureModel, box: BoxRegion, n: int, xi_neg: Optional[float] = None) -> float:
    """Certified bound M_n >= j^(n) on box^n.

    Two bounds are combined: j^(n) <= rho^(n) <= (z e^{beta B})^n (the
    Janossy series of rho has nonnegative terms) and
    j^(n) = Xi(-z) |theta^(n)(-z)| <= Xi(-z) (C max{C z/(1 - z/z0), 1})^n.
    ``xi_neg`` is an upper estimate of Xi(-z) for the second bound.
    """
    ruelle = model.xi**n
    if xi_neg is None:
        return ruelle
    C = c_beta(model.potential, model.beta, model.params.dim)
    radius = z0(model.potential, model.beta, model.params.dim)
    if C == 0 or not math.isfinite(radius):
        return ruelle
    sol = (C * max(C * model.z / (1 - model.z / radius), 1.0)) ** n
    return min(ruelle, xi_neg * sol)


@dataclass
class SampleBatch:
    configurations: list
    model_hash: str
    box: BoxRegion
    seed: tuple
    stats: dict
    counts: Optional[CountDistribution] = None

    def __len__(self):
        return len(self.configurations)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.configurations], dtype=int)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.box.dim
        w.writerow(["config", "point"] + [f"x{i + 1}" for i in range(d)])
        for cid, cfg in enumerate(self.configurations):
            for pid, p in enumerate(cfg.points):
                w.writerow([cid, pid] + [repr(float(v)) for v in p])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {"model_hash": self.model_hash, "box": self.box.to_dict(), "seed": list(self.seed),
                "samples": len(self), "stats": self.stats,
                "count_distribution": None if self.counts is None else self.counts.to_dict()}

    def write(self, directory, stem: str = "sample") -> tuple[Path, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        c, m = out / f"{stem}.csv", out / f"{stem}.json"
        self.to_csv(c)
        m.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return c, m

    @classmethod
    def read_csv(cls, path, box: BoxRegion, n_configs: Optional[int] = None, seed=(0,), model_hash: str = ""):
        rows = {}
        with open(Path(path), newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                rows.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
        n = n_configs if n_configs is not None else (max(rows) + 1 if rows else 0)
        cfgs = [Configuration(rows.get(i, []), dim=box.dim) for i in range(n)]
        return cls(cfgs, model_hash, box, tuple(seed), {})


def _model_hash(model: ClosureModel, box: BoxRegion) -> str:
    text = model.key() + json.dumps(box.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _sample_block(model, box, evaluator, n_values, block, seed, envelopes, max_rounds, audit):
    pot, beta = model.potential, model.beta
    out = [None] * n_values.size
    st = {"proposals": 0, "accepted": 0, "zero_density": 0, "clipped": 0, "negative": 0,
          "max_ratio": 0.0, "inner_std_sum": 0.0, "audit_sq": 0.0, "audit_n": 0}
    for i in np.flatnonzero(n_values == 0):
        out[i] = Configuration(np.zeros((0, box.dim)))
    for n in sorted(set(n_values.tolist()) - {0}):
        pending = np.flatnonzero(n_values == n)
        M = envelopes[n]
        r = 0
        while pending.size:
            if r >= max_rounds:
                raise RuntimeError(f"rejection sampler exceeded {max_rounds} rounds at n={n}")
            gen = _rng.stream(seed, _rng.TAG_SAMPLER_POINTS, block, n, r)
            x = box.uniform(gen, (pending.size, n))
            u = gen.random(pending.size)
            st["proposals"] += pending.size
            with np.errstate(over="ignore"):
                w = np.exp(-beta * pair_energy_batch(pot, x)) if n > 1 else np.ones(pending.size)
            live = w > 0
            st["zero_density"] += int((~live).sum())
            accept = np.zeros(pending.size, dtype=bool)
            if live.any():
                j, s = evaluator.evaluate_with_error(x[live], _rng.child_seed(seed, _rng.TAG_SAMPLER_POINTS,
                                                                              block, n, r))
                if np.any(j > M + 5 * s + 1e-15):
                    worst = float(np.max(j - M))
                    raise EnvelopeViolated(f"density estimate exceeds envelope M_{n}={M:.4g} by {worst:.3g}")
                st["clipped"] += int((j > M).sum())
                st["negative"] += int((j < 0).sum())
                st["max_ratio"] = max(st["max_ratio"], float(np.max(j / M)))
                st["inner_std_sum"] += float(s.sum())
                accept[live] = u[live] * M < j
                if audit and accept[live].any():
                    acc_x = x[live][accept[live]]
                    j2, s2 = evaluator.evaluate_with_error(
                        acc_x, _rng.child_seed(seed, _rng.TAG_SAMPLER_POINTS, block, n, r, 1))
                    j1 = j[accept[live]]
                    st["audit_sq"] += float(np.sum((j1 - j2) ** 2))
                    st["audit_n"] += int(j1.size)
            for pos in np.flatnonzero(accept):
                out[pending[pos]] = Configuration(x[pos])
            st["accepted"] += int(accept.sum())
            pending = pending[~accept]
            r += 1
    return out, st


def sample_batch(model: ClosureModel, box: BoxRegion, count: int, rng: _rng.SeedLike = 0, inner: int = 100_000,
                 mc_per_term: int = 200_000, audit: bool = False, max_rounds: int = 100_000,
                 threads: Optional[int] = None) -> SampleBatch:
    """Draw ``count`` independent configurations of the closure process on ``box``.

    ``inner`` is the Monte Carlo budget of each Janossy evaluation.
    Work is split into fixed blocks of sample indices, each with its own
    streams, so the batch depends only on the seed.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    seed = _rng.as_seed_tuple(rng)
    counts = count_distribution(model, box, mc_per_term=mc_per_term, rng=_rng.child_seed(seed, 0))
    p = counts.sampling_weights()
    gen = _rng.stream(seed, _rng.TAG_SAMPLER_COUNTS)
    n_all = gen.choice(p.size, size=count, p=p)
    xi_neg = counts.probs[0] + 5 * counts.std_errors[0]
    envelopes = {n: envelope(model, box, n, xi_neg) for n in range(p.size)}
    evaluator = ClosureJanossyEvaluator(model, box, inner=inner)
    blocks = [(b, n_all[b * BLOCK:(b + 1) * BLOCK]) for b in range((count + BLOCK - 1) // BLOCK)]

    def run(item):
        b, nv = item
        return _sample_block(model, box, evaluator, nv, b, seed, envelopes, max_rounds, audit)

    if threads and threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, blocks))
    else:
        results = [run(bl) for bl in blocks]
    cfgs, stats = [], {"proposals": 0, "accepted": 0, "zero_density": 0, "clipped": 0, "negative": 0,
                       "max_ratio": 0.0, "inner_std_sum": 0.0, "audit_sq": 0.0, "audit_n": 0}
    for c, st in results:
        cfgs.extend(c)
        for key, v in st.items():
            stats[key] = max(stats[key], v) if key == "max_ratio" else stats[key] + v
    nonempty = int(sum(1 for c in cfgs if len(c)))
    summary = {
        "proposals": stats["proposals"],
        "accepted": stats["accepted"],
        "acceptance_rate": stats["accepted"] / stats["proposals"] if stats["proposals"] else None,
        "zero_density_rejections": stats["zero_density"],
        "clipped": stats["clipped"],
        "negative_estimates": stats["negative"],
        "max_density_over_envelope": stats["max_ratio"],
        "mean_inner_std": stats["inner_std_sum"] / max(stats["proposals"] - stats["zero_density"], 1),
        "inner_budget": inner,
        "envelopes": {str(k): v for k, v in envelopes.items()},
        "nonempty": nonempty,
    }
    if audit:
        summary["audit_rms_disagreement"] = math.sqrt(stats["audit_sq"] / max(stats["audit_n"], 1))
    return SampleBatch(cfgs, _model_hash(model, box), box, seed, summary, counts)


def sample(model: ClosureModel, box: BoxRegion, rng: _rng.SeedLike = 0, **kwargs) -> Configuration:
    """One configuration of the closure process on ``box``."""
    return sample_batch(model, box, 1, rng, **kwargs).configurations[0]


# --- correlation estimators ----------------------------------------------------------


@dataclass(frozen=True)
class CorrelationEstimate:
    order: int
    edges: tuple
    values: np.ndarray
    std_errors: np.ndarray
    samples: int
    measure: np.ndarray

    def __post_init__(self):
        assert np.all(self.values >= 0)

    def centers(self):
        return tuple(0.5 * (np.asarray(e)[1:] + np.asarray(e)[:-1]) for e in self.edges)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin", "value", "std_error"])
            for idx in np.ndindex(self.values.shape):
                label = ";".join(f"{self.edges[a][i]:.6g}-{self.edges[a][i + 1]:.6g}" for a, i in enumerate(idx))
                w.writerow([label, repr(float(self.values[idx])), repr(float(self.std_errors[idx]))])


def pair_bin_measure(box: BoxRegion, edges, samples: int = 1_000_000, seed: _rng.SeedLike = 0) -> np.ndarray:
    """Lebesgue measure of {(x, y) in box^2 : |x - y| in bin} for each distance bin.

    Exact in one dimension, 2 int_bin (L - s)_+ ds; Monte Carlo otherwise.
    """
    edges = np.asarray(edges, dtype=float)
    if box.dim == 1:
        L = box.volume
        a, b = np.clip(edges[:-1], 0, L), np.clip(edges[1:], 0, L)
        return 2 * ((L * b - b**2 / 2) - (L * a - a**2 / 2))
    gen = _rng.stream(seed, _rng.TAG_MEASURE)
    x = box.uniform(gen, samples)
    y = box.uniform(gen, samples)
    h, _ = np.histogram(np.linalg.norm(x - y, axis=1), bins=edges)
    return h / samples * box.volume**2


def _triangle_integral(L, a1, b1, a2, b2):
    """int_{[a1,b1]x[a2,b2]} (L - g1 - g2)_+ dg."""
    def F(g1, g2):
        # antiderivative of (L - g1 - g2)_+ taken twice, per corner
        t = np.maximum(L - g1 - g2, 0.0)
        return t**3 / 6.0

    return F(a1, a2) - F(a1, b2) - F(b1, a2) + F(b1, b2)


def triple_bin_measure(box: BoxRegion, edges1, edges2) -> np.ndarray:
    """Measure of ordered triples in box^3 whose sorted gaps (g1, g2) fall in each 2-D bin (d = 1)."""
    if box.dim != 1:
        raise ValueError("three-point bins are one-dimensional")
    L = box.volume
    e1, e2 = np.asarray(edges1, float), np.asarray(edges2, float)
    out = np.empty((e1.size - 1, e2.size - 1))
    for i in range(e1.size - 1):
        for j in range(e2.size - 1):
            out[i, j] = 6 * _triangle_integral(L, e1[i], e1[i + 1], e2[j], e2[j + 1])
    return out


def _group_by_size(batch: SampleBatch):
    groups = {}
    for c in batch.configurations:
        groups.setdefault(len(c), []).append(c.points)
    return {m: np.stack(v) for m, v in groups.items()}


def estimate_correlations(batch: SampleBatch, n: int, bins) -> CorrelationEstimate:
    """Factorial-moment estimator of rho^(n) on bins.

    n = 1: ``bins`` are edges on the first coordinate (slabs).
    n = 2: ``bins`` are distance edges; each ordered pair of distinct points
    contributes.  n = 3 (d = 1): ``bins`` is a pair of edge arrays for the
    sorted gaps (g1, g2).  Counts are normalized by the exact Lebesgue
    measure of the bin in box^n and by the number of configurations.
    Std errors are the per-configuration sample std over sqrt(count).
    """
    if len(batch) == 0:
        raise EmptyBatch("no configurations to estimate from")
    if n not in (1, 2, 3):
        raise ValueError("orders 1, 2 and 3 are supported")
    box = batch.box
    N = len(batch)
    groups = _group_by_size(batch)
    if n == 1:
        edges = (np.asarray(bins, float),)
        other = float(np.prod(box.lengths[1:])) if box.dim > 1 else 1.0
        measure = np.diff(edges[0]) * other
        shape = (edges[0].size - 1,)
    elif n == 2:
        edges = (np.asarray(bins, float),)
        measure = pair_bin_measure(box, edges[0])
        shape = (edges[0].size - 1,)
    else:
        if box.dim != 1:
            raise ValueError("three-point estimator is one-dimensional")
        edges = (np.asarray(bins[0], float), np.asarray(bins[1], float))
        measure = triple_bin_measure(box, *edges)
        shape = (edges[0].size - 1, edges[1].size - 1)
    s1 = np.zeros(shape)
    s2 = np.zeros(shape)
    for m, pts in groups.items():
        if m < n:
            continue
        per = np.zeros((pts.shape[0],) + shape)
        if n == 1:
            c = np.stack([np.histogram(p[:, 0], bins=edges[0])[0] for p in pts]) if pts.size else per
            per = c.astype(float)
        elif n == 2:
            i, j = np.array(list(itertools.permutations(range(m), 2))).T
            dist = np.linalg.norm(pts[:, i] - pts[:, j], axis=-1)
            idx = np.digitize(dist, edges[0]) - 1
            valid = (idx >= 0) & (idx < shape[0])
            rows = np.broadcast_to(np.arange(pts.shape[0])[:, None], idx.shape)
            np.add.at(per, (rows[valid], idx[valid]), 1.0)
        else:
            combos = np.array(list(itertools.combinations(range(m), 3)))
            trip = np.sort(pts[:, combos, 0], axis=-1)
            g1 = trip[..., 1] - trip[..., 0]
            g2 = trip[..., 2] - trip[..., 1]
            i1 = np.digitize(g1, edges[0]) - 1
            i2 = np.digitize(g2, edges[1]) - 1
            valid = (i1 >= 0) & (i1 < shape[0]) & (i2 >= 0) & (i2 < shape[1])
            rows = np.broadcast_to(np.arange(pts.shape[0])[:, None], i1.shape)
            # each unordered triple stands for 3! ordered ones
            np.add.at(per, (rows[valid], i1[valid], i2[valid]), 6.0)
        s1 += per.sum(axis=0)
        s2 += (per**2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / N
        var = np.maximum(s2 / N - mean**2, 0.0) * N / max(N - 1, 1)
        values = np.where(measure > 0, mean / measure, 0.0)
        errs = np.where(measure > 0, np.sqrt(var / N) / measure, 0.0)
    return CorrelationEstimate(n, tuple(tuple(e.tolist()) for e in edges), values, errs, N, measure)


def closure_bin_average(model: ClosureModel, box: BoxRegion, n: int, bins) -> np.ndarray:
    """Exact closure correlations averaged over each bin with the estimator's weights (d = 1)."""
    pot, beta, z = model.potential, model.beta, model.z
    L = box.volume
    if n == 1:
        return np.full(len(bins) - 1, z)

    def phi(s):
        with np.errstate(over="ignore"):
            return float(np.exp(-beta * pot.radial(np.array(abs(s)))))

    if n == 2:
        if box.dim != 1:
            raise ValueError("bin averages are one-dimensional")
        out = []
        for a, b in zip(bins[:-1], bins[1:]):
            b2 = min(b, L)
            if b2 <= a:
                out.append(0.0)
                continue
            pts = [p for p in pot.breakpoints if a < p < b2]
            num = integrate.quad(lambda s: z**2 * phi(s) * (L - s), a, b2, points=pts or None)[0]
            den = integrate.quad(lambda s: L - s, a, b2)[0]
            out.append(num / den if den > 0 else 0.0)
        return np.array(out)
    e1, e2 = bins
    out = np.zeros((len(e1) - 1, len(e2) - 1))
    for i in range(len(e1) - 1):
        for j in range(len(e2) - 1):
            def w(g2, g1):
                return max(L - g1 - g2, 0.0)

            def f(g2, g1):
                return z**3 * phi(g1) * phi(g2) * phi(g1 + g2) * max(L - g1 - g2, 0.0)

            den = integrate.dblquad(w, e1[i], e1[i + 1], e2[j], e2[j + 1])[0]
            if den <= 0:
                continue
            num = integrate.dblquad(f, e1[i], e1[i + 1], e2[j], e2[j + 1])[0]
            out[i, j] = num / den
    return out


def compare_correlations(est: CorrelationEstimate, exact: np.ndarray) -> dict:
    """Score an estimate against exact bin averages.

    Bins with a positive exact value are admissible and need |t| <= 3,
    with at least 95% at |t| <= 2.  Bins where the exact value is 0 must
    have collected nothing.
    """
    exact = np.asarray(exact, dtype=float)
    adm = exact > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(adm, (est.values - exact) / est.std_errors, 0.0)
    t = np.where(adm & (est.std_errors == 0), np.inf, t)
    n_adm = int(adm.sum())
    within3 = bool(np.all(np.abs(t[adm]) <= 3)) if n_adm else True
    frac2 = float(np.mean(np.abs(t[adm]) <= 2)) if n_adm else 1.0
    empty = bool(np.all(est.values[~adm] == 0))
    return {"order": est.order, "admissible_bins": n_adm, "max_abs_t": float(np.max(np.abs(t[adm]), initial=0.0)),
            "fraction_within_2sigma": frac2, "all_within_3sigma": within3, "forbidden_bins_empty": empty,
            "passed": within3 and frac2 >= 0.95 and empty, "t": [None if not a else (float(v) if np.isfinite(v) else str(v))
                                    for a, v in zip(adm.ravel(), t.ravel())]}


def pooled_verdict(reports) -> dict:
    """Combine per-order reports: every admissible bin within 3 sigma, 95% of all bins within 2 sigma."""
    t = [v for r in reports for v in r["t"] if v is not None]
    absw = [abs(float(v)) for v in t]
    frac2 = float(np.mean([a <= 2 for a in absw])) if absw else 1.0
    within3 = all(a <= 3 for a in absw)
    empty = all(r["forbidden_bins_empty"] for r in reports)
    return {"admissible_bins": len(absw), "fraction_within_2sigma": frac2, "all_within_3sigma": within3,
            "forbidden_bins_empty": empty, "max_abs_t": max(absw, default=0.0),
            "passed": bool(within3 and frac2 >= 0.95 and empty)}
