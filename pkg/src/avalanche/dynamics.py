"""The avalanche process: Poisson additions at rates phi(x) followed by stabilization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .allowed import DEFAULT_ENUMERATION_CAP, EnumerationTooLarge
from .analysis import nu_weights, tv_distance
from .engine import (
    AvalancheRecord,
    HeightConfig,
    RationalConfig,
    add,
    add_rational,
    discretize_array,
    stabilize,
    stabilize_rational,
    to_rational,
)
from .lattice import LatticeSpec
from .sampler import RngStream, as_generator, sample_m, sample_m_batch


# -- rates ----------------------------------------------------------------


@dataclass(frozen=True)
class RateProfile:
    """Addition rate per site; ``kind`` and ``params`` describe how it was built."""

    spec: LatticeSpec
    rates: np.ndarray
    kind: str = "custom"
    params: tuple = ()

    def __post_init__(self) -> None:
        r = np.asarray(self.rates, dtype=float)
        if r.shape != (self.spec.n_sites,):
            raise ValueError("one rate per site is required")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("rates must be finite and non-negative")
        if not np.any(r > 0):
            raise ValueError("at least one site needs a positive rate")
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)

    @classmethod
    def constant(cls, spec: LatticeSpec, rate: float = 1.0) -> "RateProfile":
        return cls(spec, np.full(spec.n_sites, float(rate)), "constant", (float(rate),))

    @classmethod
    def finite_support(cls, spec: LatticeSpec, sites: Sequence, rate: float = 1.0) -> "RateProfile":
        r = np.zeros(spec.n_sites)
        for s in sites:
            r[spec.site_index(s)] = rate
        return cls(spec, r, "finite_support", (float(rate), len(sites)))

    @classmethod
    def decaying(cls, spec: LatticeSpec, rate: float = 1.0, scale: float = 1.0, law: str = "exponential") -> "RateProfile":
        """``rate * exp(-|x|_1/scale)`` or ``rate * (1 + |x|_1)^(-scale)``."""
        dist = spec.l1_norms().astype(float)
        if law == "exponential":
            r = rate * np.exp(-dist / scale)
        elif law == "power":
            r = rate * (1.0 + dist) ** (-scale)
        else:
            raise ValueError(f"unknown decay law {law!r}")
        return cls(spec, r, law, (float(rate), float(scale)))

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.rates > 0)

    def summable(self) -> bool:
        """Whether the same law extended to Z^d keeps ``sum_x phi(x) G(x,y)`` finite.

        ``G`` is the dissipation-free Green function, which is infinite in
        d <= 2 and decays like ``|x|^(2-d)`` otherwise.
        """
        if self.spec.d <= 2:
            return False
        if self.kind in ("finite_support", "exponential"):
            return True
        if self.kind == "power":
            return self.params[1] > 2
        return False

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.rates)


# -- trajectories ---------------------------------------------------------


@dataclass
class Trajectory:
    spec: LatticeSpec
    initial: HeightConfig | RationalConfig
    times: list[float] = field(default_factory=list)
    sites: list[int] = field(default_factory=list)
    records: list[AvalancheRecord] = field(default_factory=list)
    checkpoints: dict[float, HeightConfig | RationalConfig] = field(default_factory=dict)
    final: HeightConfig | RationalConfig | None = None
    t_max: float = 0.0

    @property
    def n_events(self) -> int:
        return len(self.times)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "site", "avalanche_size", "dissipated"])
        for t, x, rec in zip(self.times, self.sites, self.records):
            w.writerow([repr(t), " ".join(map(str, self.spec.sites[x])), rec.size, repr(float(rec.dissipated))])
        return buf.getvalue()

    def summary(self) -> dict:
        sizes = [r.size for r in self.records]
        return {
            "t_max": self.t_max,
            "events": self.n_events,
            "total_topplings": int(sum(r.steps for r in self.records)),
            "mean_avalanche_size": float(np.mean(sizes)) if sizes else 0.0,
            "max_avalanche_size": int(max(sizes, default=0)),
            "dissipated": float(sum(r.dissipated for r in self.records)),
            "checkpoints": sorted(self.checkpoints),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


def _initial(spec, initial, gen, rational):
    if isinstance(initial, str):
        if initial != "stationary":
            raise ValueError(f"unknown initial condition {initial!r}")
        initial = sample_m(spec, gen)
    if rational is not None:
        n, k = rational
        if isinstance(initial, HeightConfig):
            initial = to_rational(initial, n, k)
        if not initial.is_stable():
            raise ValueError("initial configuration must be stable")
        return initial
    if not isinstance(initial, HeightConfig) or not initial.is_stable():
        raise ValueError("initial configuration must be a gamma-stable HeightConfig")
    return initial


def simulate(
    spec: LatticeSpec,
    rates: RateProfile,
    t_max: float,
    initial: HeightConfig | RationalConfig | str = "stationary",
    rng=None,
    checkpoints: Sequence[float] = (),
    rational: tuple[int, int] | None = None,
) -> Trajectory:
    """Event-driven run: exponential waiting times of rate ``sum phi``, site chosen by ``phi``.

    With ``rational=(n, k)`` heights are integer quanta and identities are exact.
    """
    if t_max < 0:
        raise ValueError("t_max must be non-negative")
    if rates.spec != spec:
        raise ValueError("rate profile belongs to a different lattice")
    gen = as_generator(rng)
    state = _initial(spec, initial, gen, rational)
    traj = Trajectory(spec, state, t_max=float(t_max))
    cum = rates.cumulative()
    total = cum[-1]
    marks = sorted(float(c) for c in checkpoints)
    mi = 0
    t = 0.0
    while True:
        t += gen.exponential(1.0 / total)
        # the state just before the event at t is the state at every mark < t
        while mi < len(marks) and marks[mi] < t and marks[mi] <= t_max:
            traj.checkpoints[marks[mi]] = state.copy()
            mi += 1
        if t > t_max:
            break
        x = int(np.searchsorted(cum, gen.random() * total, side="right"))
        x = min(x, spec.n_sites - 1)
        if rational is None:
            state, rec = add(state, x)
        else:
            state, rec = add_rational(state, x)
        traj.times.append(t)
        traj.sites.append(x)
        traj.records.append(rec)
    traj.final = state
    return traj


def replay_batch(traj: Trajectory, order: Sequence[int] | None = None):
    """Stabilize the initial state plus every logged addition in one pass.

    Abelianness makes the result equal to the path's final state; ``order``
    is accepted to make explicit that the order of the log is irrelevant.
    """
    sites = np.asarray(traj.sites if order is None else [traj.sites[i] for i in order], dtype=np.int64)
    counts = np.bincount(sites, minlength=traj.spec.n_sites) if sites.size else np.zeros(traj.spec.n_sites, np.int64)
    start = traj.initial
    if isinstance(start, RationalConfig):
        v = start.values + start.n * counts
        return stabilize_rational(RationalConfig(start.spec, v, start.n, start.k))[0]
    return stabilize(HeightConfig(start.spec, start.heights + counts))[0]


def replay_sequential(traj: Trajectory, order: Sequence[int]):
    """Apply the logged additions one by one in a permuted order."""
    state = traj.initial
    for i in order:
        if isinstance(state, RationalConfig):
            state, _ = add_rational(state, traj.sites[i])
        else:
            state, _ = add(state, traj.sites[i])
    return state


def evolve_batch(spec: LatticeSpec, rates: RateProfile, h0: np.ndarray, t_max: float, rng=None) -> tuple[np.ndarray, int]:
    """Run every row of ``h0`` to ``t_max``; returns final heights and event count."""
    h0 = np.ascontiguousarray(h0, dtype=np.float64)
    out = np.empty_like(h0)
    events = _kernels.evolve_batch(h0, spec.neighbors, spec.gamma, rates.cumulative(), float(t_max),
                                   as_generator(rng), out)
    return out, int(events)


# -- stationarity ---------------------------------------------------------


@dataclass
class StationarityReport:
    spec: dict
    horizon: float
    burn_in: float
    samples: int
    p_values: list[float]
    ks_p_values: list[float]
    alpha: float
    passed: bool
    events: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _chi2_two_sample(a: np.ndarray, b: np.ndarray, k: int) -> float:
    ca = np.bincount(a, minlength=k)
    cb = np.bincount(b, minlength=k)
    keep = (ca + cb) > 0
    if keep.sum() < 2:
        return 1.0
    return float(stats.chi2_contingency(np.vstack([ca[keep], cb[keep]]), correction=False)[1])


def stationarity_test(
    spec: LatticeSpec,
    rates: RateProfile,
    burn_in: float,
    horizon: float,
    samples: int,
    rng: RngStream | int | None = None,
    alpha: float = 1e-3,
) -> StationarityReport:
    """Two-sample per-site comparison of discretized heights at ``burn_in`` and ``horizon``.

    Both groups start from independent stationary draws (separate streams),
    so the two samples are independent and the chi-square test is valid.
    Pass iff every per-site p-value exceeds ``alpha / n_sites`` (Bonferroni).
    """
    base = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    s0, s1, s2, s3 = base.spawn(4)
    first = sample_m_batch(spec, samples, s0)
    later = sample_m_batch(spec, samples, s1)
    events = 0
    if burn_in > 0:
        first, e = evolve_batch(spec, rates, first, burn_in, s2)
        events += e
    later, e = evolve_batch(spec, rates, later, horizon, s3)
    events += e
    k = spec.n_dirs + 1
    a = discretize_array(first, spec.n_dirs)
    b = discretize_array(later, spec.n_dirs)
    pv = [_chi2_two_sample(a[:, i], b[:, i], k) for i in range(spec.n_sites)]
    ks = [float(stats.ks_2samp(first[:, i], later[:, i]).pvalue) for i in range(spec.n_sites)]
    passed = min(pv) > alpha / spec.n_sites
    return StationarityReport(spec.to_dict(), float(horizon), float(burn_in), samples, pv, ks, alpha, passed, events)


# -- zero-dissipation limit -----------------------------------------------


@dataclass
class LimitReport:
    gammas: list[float]
    site: int
    fixed_configs: int
    height_differs: list[float]
    count_differs: list[float]
    max_abs_diff: list[float]
    nested: bool
    nesting_violations: int
    counts_monotone: bool
    tv_height_mc: list[float]
    tv_avalanche_mc: list[float]
    tv_height_exact: list[float] | None
    height_monotone: bool
    samples: int
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def _site_marginal_exact(spec: LatticeSpec, gamma: float, site: int, cap: int) -> np.ndarray:
    rows, p = nu_weights(spec, gamma, cap)
    return np.bincount(rows[:, site], weights=p, minlength=spec.n_dirs + 1)


def gamma_limit_experiment(
    spec: LatticeSpec,
    gammas: Sequence[float],
    rates: RateProfile | None = None,
    samples: int = 10_000,
    rng: RngStream | int | None = None,
    fixed_configs: int = 100,
    t_max: float = 5.0,
    site: int | Sequence[int] | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> LimitReport:
    """Compare the model at each ``gamma`` with ``gamma = 0`` on a fixed box.

    * fixed configurations: stable for every gamma, one addition at ``site``;
      differences of discretized heights and of toppling counts per site;
      nesting of avalanche sets and monotonicity of counts along the list;
    * stationary process: after running to ``t_max`` from a stationary
      start, TV distance of the discretized height at ``site`` and of the
      avalanche size caused by an extra addition at ``site``.

    The box is a finite-volume proxy for the infinite-volume statement.
    """
    gammas = sorted((float(g) for g in gammas), reverse=True)
    if any(g <= 0 for g in gammas):
        raise ValueError("list only positive gammas; gamma = 0 is always the reference")
    base = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    if site is None:
        centre = tuple(0 for _ in range(spec.d))
        site = spec.index.get(centre, spec.n_sites // 2)
    x = spec.site_index(site)
    ref = spec.with_gamma(0.0)
    gen = base.generator()
    full = [*gammas, 0.0]

    # fixed configurations drawn once from the gamma = 0 stationary law (stable for all gamma)
    etas = sample_m_batch(ref, fixed_configs, gen)
    h_diff = np.zeros(len(gammas))
    c_diff = np.zeros(len(gammas))
    max_diff = np.zeros(len(gammas))
    violations = 0
    monotone = True
    for eta in etas:
        results = []
        for g in full:
            after, rec = add(HeightConfig(spec.with_gamma(g), eta), x)
            results.append((after.heights, rec))
        h0, r0 = results[-1]
        d0 = discretize_array(h0, spec.n_dirs)
        for i, (h, rec) in enumerate(results[:-1]):
            h_diff[i] += np.mean(discretize_array(h, spec.n_dirs) != d0)
            c_diff[i] += np.mean(rec.toppling_counts != r0.toppling_counts)
            max_diff[i] = max(max_diff[i], float(np.max(np.abs(h - h0))))
        for (_, big), (_, small) in zip(results, results[1:]):
            if not big.avalanche_set <= small.avalanche_set:
                violations += 1
            if np.any(big.toppling_counts > small.toppling_counts):
                monotone = False
    h_diff /= fixed_configs
    c_diff /= fixed_configs

    # stationary process observables
    heights, sizes = {}, {}
    for i, g in enumerate(full):
        sp = spec.with_gamma(g)
        rp = RateProfile(sp, (rates.rates if rates is not None else np.ones(spec.n_sites)))
        stream = RngStream(base.seed, base.stream_id + 1 + i)
        start = sample_m_batch(sp, samples, stream.generator())
        end, _ = evolve_batch(sp, rp, start, t_max, RngStream(base.seed, base.stream_id + 101 + i))
        heights[g] = np.bincount(discretize_array(end[:, x], spec.n_dirs), minlength=spec.n_dirs + 1)
        sz = np.empty(samples, np.int64)
        for j in range(samples):
            _, rec = add(HeightConfig(sp, end[j]), x)
            sz[j] = rec.size
        sizes[g] = np.bincount(sz, minlength=spec.n_sites + 1)
    tv_h = [tv_distance(heights[g], heights[0.0]) for g in gammas]
    tv_a = [tv_distance(sizes[g], sizes[0.0]) for g in gammas]
    try:
        ref_m = _site_marginal_exact(spec, 0.0, x, cap)
        tv_exact = [tv_distance(_site_marginal_exact(spec, g, x, cap), ref_m) for g in gammas]
    except EnumerationTooLarge:
        tv_exact = None
    return LimitReport(
        gammas=gammas,
        site=x,
        fixed_configs=fixed_configs,
        height_differs=h_diff.tolist(),
        count_differs=c_diff.tolist(),
        max_abs_diff=max_diff.tolist(),
        nested=violations == 0,
        nesting_violations=violations,
        counts_monotone=monotone,
        tv_height_mc=tv_h,
        tv_avalanche_mc=tv_a,
        tv_height_exact=tv_exact,
        height_monotone=_decreasing(tv_exact if tv_exact is not None else tv_h),
        samples=samples,
        seed=base.seed,
    )


def poisson_counts(spec: LatticeSpec, rates: RateProfile, t_max: float, runs: int, rng=None) -> np.ndarray:
    """Number of additions in each of ``runs`` independent runs (for clock checks)."""
    gen = as_generator(rng)
    counts = np.empty(runs, np.int64)
    total = rates.total
    for i in range(runs):
        t, c = 0.0, 0
        while True:
            t += gen.exponential(1.0 / total)
            if t > t_max:
                break
            c += 1
        counts[i] = c
    return counts


def expected_additions(rates: RateProfile, t_max: float) -> float:
    return rates.total * t_max


def poisson_pvalue(counts: np.ndarray, mean: float) -> float:
    """Chi-square goodness of fit of counts to Poisson(mean), tail cells merged."""
    lo = max(0, int(mean - 5 * math.sqrt(mean)))
    hi = int(mean + 5 * math.sqrt(mean)) + 1
    edges = np.arange(lo, hi + 1)
    obs = np.array([np.sum(counts <= lo), *[np.sum(counts == k) for k in edges[1:-1]], np.sum(counts >= hi)], float)
    probs = np.array([stats.poisson.cdf(lo, mean), *stats.poisson.pmf(edges[1:-1], mean), stats.poisson.sf(hi - 1, mean)])
    exp = probs * len(counts)
    # merge cells with expected count below 5 into neighbours
    o, e = [], []
    acc_o = acc_e = 0.0
    for oi, ei in zip(obs, exp):
        acc_o += oi
        acc_e += ei
        if acc_e >= 5:
            o.append(acc_o)
            e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0:
        o[-1] += acc_o
        e[-1] += acc_e
    e = np.array(e) * (sum(o) / sum(e))
    return float(stats.chisquare(o, e).pvalue)
