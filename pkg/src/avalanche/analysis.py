"""Green's functions, Dhar's formula, covariance decay and exact measure metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import cg
from scipy.special import gammaln, logsumexp

from . import _kernels
from .allowed import DEFAULT_ENUMERATION_CAP, EnumerationTooLarge, exact_nu
from .lattice import LatticeSpec, toppling_matrix, toppling_matrix_sparse
from .sampler import DEFAULT_MAX_WALK_STEPS, WalkLimitExceeded, _check_reachable, _order, as_generator, RngStream

DENSE_SOLVE_LIMIT = 40_000
RESIDUAL_TOL = 1e-10


class InsufficientTruncation(ValueError):
    def __init__(self, required: int, given: int) -> None:
        super().__init__(f"series truncation {given} too short; at least {required} terms are needed")
        self.required = required
        self.given = given


class InsufficientSignal(RuntimeError):
    """No covariance estimate clears the 3-standard-error threshold."""


# -- Green's functions ----------------------------------------------------


@dataclass(frozen=True)
class GreenTable:
    spec: LatticeSpec
    values: np.ndarray

    def __call__(self, x, y) -> float:
        return float(self.values[self.spec.site_index(x), self.spec.site_index(y)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        labels = [" ".join(map(str, s)) for s in self.spec.sites]
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                w.writerow([a, b, repr(float(self.values[i, j]))])
        return buf.getvalue()

    def restrict(self, sites: Sequence[Sequence[int]]) -> np.ndarray:
        idx = [self.spec.site_index(s) for s in sites]
        return self.values[np.ix_(idx, idx)]


def green_exact(spec: LatticeSpec) -> GreenTable:
    """``(Delta^(gamma)_Lambda)^{-1}`` with residual ``|Delta G - I| <= 1e-10``.

    Dense Cholesky up to ``DENSE_SOLVE_LIMIT`` sites, conjugate gradients
    column by column above that.
    """
    n = spec.n_sites
    if spec.gamma == 0 and not np.any(spec.boundary_counts):
        raise np.linalg.LinAlgError("toppling matrix is singular: gamma = 0 and no boundary")
    if n <= DENSE_SOLVE_LIMIT:
        delta = toppling_matrix(spec).entries
        try:
            factor = linalg.cho_factor(delta, lower=True)
        except linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("toppling matrix is not positive definite") from exc
        eye = np.eye(n)
        g = linalg.cho_solve(factor, eye)
        # one step of iterative refinement if rounding left a visible residual
        r = eye - delta @ g
        if np.max(np.abs(r)) > RESIDUAL_TOL:
            g += linalg.cho_solve(factor, r)
            r = eye - delta @ g
        if np.max(np.abs(r)) > RESIDUAL_TOL:
            raise np.linalg.LinAlgError(f"residual {np.max(np.abs(r)):.3g} above {RESIDUAL_TOL}")
    else:
        g = np.column_stack([green_column(spec, j) for j in range(n)])
    return GreenTable(spec, 0.5 * (g + g.T))


def green_column(spec: LatticeSpec, x: int | Sequence[int]) -> np.ndarray:
    """``G(., x)`` by conjugate gradients on the sparse toppling matrix."""
    j = spec.site_index(x)
    a = toppling_matrix_sparse(spec)
    b = np.zeros(spec.n_sites)
    b[j] = 1.0
    sol, info = cg(a, b, rtol=RESIDUAL_TOL * 1e-2, atol=0.0, maxiter=100 * spec.n_sites)
    if info != 0 or np.max(np.abs(a @ sol - b)) > RESIDUAL_TOL:
        raise np.linalg.LinAlgError(f"conjugate gradients did not converge for column {j}")
    return sol


def series_depth(d: int, gamma: float, tol: float = RESIDUAL_TOL) -> int:
    """Terms needed so the geometric tail of the Green series is below ``tol``."""
    q = 2 * d / (2 * d + gamma)
    # tail after N terms <= q^N / ((2d+gamma)(1-q))
    bound = tol * (2 * d + gamma) * (1 - q)
    return max(1, math.ceil(math.log(bound) / math.log(q)))


def _log_p1(n: np.ndarray, k: int) -> np.ndarray:
    """log P(simple walk on Z is at k after n steps); -inf where impossible."""
    k = abs(k)
    ok = (n >= k) & ((n - k) % 2 == 0)
    out = np.full(n.shape, -np.inf)
    m = n[ok]
    out[ok] = gammaln(m + 1) - gammaln((m + k) / 2 + 1) - gammaln((m - k) / 2 + 1) - m * math.log(2)
    return out


def _log_pn(d: int, x: Sequence[int], n: np.ndarray) -> np.ndarray:
    if d == 1:
        return _log_p1(n, x[0])
    if d == 2:
        # rotating by 45 degrees splits the 2D walk into two independent 1D walks
        a, b = x
        return _log_p1(n, a + b) + _log_p1(n, a - b)
    raise ValueError("closed-form transition probabilities only for d <= 2")


def _pn_dp(d: int, x: Sequence[int], depth: int) -> np.ndarray:
    """Transition probabilities by dynamic programming on a grid (d >= 3)."""
    size = 2 * depth + 1
    if size**d > 5 * 10**7:
        raise ValueError(f"needs a grid of {size}^{d} cells; reduce the depth or raise gamma")
    p = np.zeros((size,) * d)
    p[(depth,) * d] = 1.0
    target = tuple(depth + int(c) for c in x)
    out = np.empty(depth + 1)
    for n in range(depth + 1):
        out[n] = p[target]
        nxt = np.zeros_like(p)
        for axis in range(d):
            nxt += np.roll(p, 1, axis) + np.roll(p, -1, axis)
        p = nxt / (2 * d)
    return out


def green_infinite(d: int, gamma: float, x: Sequence[int], truncation: int | None = None) -> float:
    """``G^(gamma)(0, x)`` on Z^d as ``sum_n (2d/(2d+gamma))^n p_n(0,x) / (2d+gamma)``.

    The ``1/(2d+gamma)`` prefactor makes the series equal to the inverse of
    the toppling matrix.  Refuses a truncation whose tail bound exceeds 1e-10.
    """
    if gamma <= 0:
        raise ValueError("the infinite-volume series needs gamma > 0")
    x = tuple(int(c) for c in x)
    if len(x) != d:
        raise ValueError("point has the wrong dimension")
    required = series_depth(d, gamma)
    if truncation is None:
        truncation = required
    elif truncation < required:
        raise InsufficientTruncation(required, truncation)
    logq = math.log(2 * d) - math.log(2 * d + gamma)
    n = np.arange(truncation + 1)
    if d <= 2:
        terms = n * logq + _log_pn(d, x, n)
        return float(np.exp(logsumexp(terms)) / (2 * d + gamma))
    p = _pn_dp(d, x, truncation)
    return float(np.sum(np.exp(n * logq) * p) / (2 * d + gamma))


def green_decay_rate(d: int, gamma: float, distances: Sequence[int]) -> float:
    """Least-squares slope of ``-log G(0, r e_1)`` against ``r``."""
    r = np.asarray(distances, dtype=float)
    logg = [math.log(green_infinite(d, gamma, (int(v),) + (0,) * (d - 1))) for v in r]
    slope, _ = np.polyfit(r, logg, 1)
    return float(-slope)


def green_window(gamma: float, lo: float = 2.0, hi: float = 6.0) -> list[int]:
    """Distances from ``lo`` to ``hi`` correlation lengths ``1/sqrt(gamma)``."""
    scale = 1.0 / math.sqrt(gamma)
    return list(range(max(1, round(lo * scale)), round(hi * scale) + 1))


# -- Dhar's formula -------------------------------------------------------


@dataclass
class DharEstimate:
    x: int
    y: int
    estimate: float
    stderr: float
    exact: float
    p_topple: float
    p_topple_se: float
    samples: int

    @property
    def z(self) -> float:
        return (self.estimate - self.exact) / self.stderr if self.stderr > 0 else math.inf

    def within(self, k: float = 3.0) -> bool:
        return abs(self.estimate - self.exact) <= k * self.stderr

    def markov_ok(self, k: float = 3.0) -> bool:
        """``P(n >= 1) <= G`` up to ``k`` standard errors."""
        return self.p_topple <= self.exact + k * self.p_topple_se


def dhar_statistics(
    spec: LatticeSpec,
    samples: int,
    rng=None,
    sources: Sequence[int] | None = None,
    max_steps: int = DEFAULT_MAX_WALK_STEPS,
) -> list[DharEstimate]:
    """Monte Carlo toppling numbers after a unit addition under the stationary law.

    Returns one estimate per (source, site) pair; all pairs share the same
    stationary samples.
    """
    if spec.gamma <= 0:
        raise ValueError("Dhar's formula check needs gamma > 0")
    if samples < 2:
        raise ValueError("need at least two samples for a standard error")
    n = spec.n_sites
    src = np.arange(n, dtype=np.int64) if sources is None else np.asarray(
        [spec.site_index(s) for s in sources], dtype=np.int64)
    total = np.zeros((len(src), n), dtype=np.float64)
    total_sq = np.zeros_like(total)
    hits = np.zeros((len(src), n), dtype=np.int64)
    status = _kernels.dhar_accumulate(spec.neighbors, spec.gamma, _order(spec, None), as_generator(rng),
                                      samples, src, total, total_sq, hits, max_steps)
    if status != _kernels.STATUS_OK:
        raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
    g = green_exact(spec).values
    mean = total / samples
    var = np.maximum(total_sq / samples - mean**2, 0.0) * samples / (samples - 1)
    se = np.sqrt(var / samples)
    ph = hits / samples
    ph_se = np.sqrt(ph * (1 - ph) / samples)
    out = []
    for a, x in enumerate(src):
        for y in range(n):
            out.append(DharEstimate(int(x), y, float(mean[a, y]), float(se[a, y]), float(g[x, y]),
                                    float(ph[a, y]), float(ph_se[a, y]), samples))
    return out


def check_dhar(spec: LatticeSpec, x, y, samples: int, rng=None) -> DharEstimate:
    i, j = spec.site_index(x), spec.site_index(y)
    return dhar_statistics(spec, samples, rng, sources=[i])[j]


def rational_form(gamma: float, max_denominator: int = 64) -> tuple[int, int] | None:
    """``(n, k)`` with ``gamma == k/n`` exactly in floating point, or None."""
    frac = Fraction(gamma).limit_denominator(max_denominator)
    if float(frac) != float(gamma):
        return None
    return frac.denominator, frac.numerator


def dhar_exact(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Exact stationary mean of toppling numbers for rational ``gamma``.

    Heights in quanta of ``1/n`` are uniform over the recurrent integer
    configurations; the fractional parts are irrelevant for toppling.
    Independent of the linear solve, so it tests Dhar's formula directly.
    """
    form = rational_form(spec.gamma)
    if form is None:
        raise ValueError(f"gamma = {spec.gamma} has no small rational form")
    n, k = form
    required = (spec.n_dirs * n + k) ** spec.n_sites
    if required > cap:
        raise EnumerationTooLarge(required, cap)
    total = np.zeros((spec.n_sites, spec.n_sites), dtype=np.int64)
    m = _kernels.dhar_exact(spec.neighbors, np.int64(n), np.int64(k), total)
    return total / m


# -- determinantal maximal-height field -----------------------------------


def max_height_kernel(spec: LatticeSpec) -> np.ndarray:
    """``K = gamma * G``: special-edge transfer-current kernel at finite volume."""
    if spec.gamma <= 0:
        raise ValueError("the maximal-height kernel needs gamma > 0")
    return spec.gamma * green_exact(spec).values


def max_height_probability(kernel: np.ndarray, sites: Sequence[int]) -> float:
    """``P(all of sites have maximal height) = det K[sites, sites]``."""
    idx = list(sites)
    if not idx:
        return 1.0
    return float(np.linalg.det(kernel[np.ix_(idx, idx)]))


def max_height_probability_exact(spec: LatticeSpec, sites: Sequence[int], cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    rows, p = exact_nu(spec, cap)
    idx = list(sites)
    mask = np.all(rows[:, idx] == spec.n_dirs, axis=1) if idx else np.ones(len(rows), bool)
    return float(p[mask].sum())


# -- covariance decay -----------------------------------------------------


@dataclass
class CovPoint:
    r: int
    cov: float
    se: float
    pairs: int
    exact: float | None = None

    @property
    def significant(self) -> bool:
        return abs(self.cov) > 3 * self.se


@dataclass
class DecayFit:
    gamma: float
    points: list[CovPoint]
    rate: float | None
    rate_se: float | None
    rate_ci: tuple[float, float] | None
    exact_rate: float | None = None
    samples: int = 0
    diagnostic: str = ""

    @property
    def used(self) -> list[CovPoint]:
        return [p for p in self.points if p.significant]

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "samples": self.samples,
            "points": [asdict(p) for p in self.points],
            "rate": self.rate,
            "rate_ci": list(self.rate_ci) if self.rate_ci else None,
            "exact_rate": self.exact_rate,
            "diagnostic": self.diagnostic,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _wls_rate(r: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> tuple[float, float]:
    """Weighted fit ``y = a - rate * r``; returns (rate, standard error)."""
    w = 1.0 / sigma**2
    a = np.column_stack([np.ones_like(r), -r])
    cov = np.linalg.inv(a.T @ (a * w[:, None]))
    beta = cov @ (a.T @ (w * y))
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


def fit_decay(points: Sequence[CovPoint], gamma: float, samples: int = 0) -> DecayFit:
    """WLS of ``log|cov|`` on ``r`` using only points with ``|cov| > 3 SE``.

    The log scale standard error is ``SE/|cov|`` (delta method), so the
    weights are ``(cov/SE)^2``.
    """
    pts = list(points)
    used = [p for p in pts if p.significant]
    exact_rate = None
    ex = [p for p in pts if p.exact is not None and p.exact != 0]
    if len(ex) >= 2:
        rr = np.array([p.r for p in ex], float)
        slope, _ = np.polyfit(rr, np.log(np.abs([p.exact for p in ex])), 1)
        exact_rate = float(-slope)
    if len(used) < 2:
        return DecayFit(gamma, pts, None, None, None, exact_rate, samples,
                        f"insufficient signal: {len(used)} of {len(pts)} distances clear 3 standard errors")
    r = np.array([p.r for p in used], float)
    cov = np.array([p.cov for p in used])
    se = np.array([p.se for p in used])
    rate, rate_se = _wls_rate(r, np.log(np.abs(cov)), se / np.abs(cov))
    ci = (rate - 1.96 * rate_se, rate + 1.96 * rate_se)
    return DecayFit(gamma, pts, rate, rate_se, ci, exact_rate, samples, f"fit on {len(used)} distances")


def pair_table(spec: LatticeSpec, distances: Sequence[int]) -> np.ndarray:
    """``partner[o, x]`` for axis offsets ``r * e_i`` (distance ``o // d``, axis ``o % d``).

    A pair is kept only when both sites are at lattice distance at least
    ``r`` from the outside of ``Lambda``.
    """
    d = spec.d
    coords = np.asarray(spec.sites)
    nbr = spec.neighbors
    # graph distance to the sink along ordinary edges, by breadth-first layers
    depth = np.full(spec.n_sites, -1, np.int64)
    frontier = np.flatnonzero(spec.boundary_counts > 0)
    depth[frontier] = 1
    level = 1
    while frontier.size:
        level += 1
        nxt = np.unique(nbr[frontier].ravel())
        nxt = nxt[(nxt >= 0)]
        nxt = nxt[depth[nxt] < 0]
        depth[nxt] = level
        frontier = nxt
    partner = np.full((len(distances) * d, spec.n_sites), -1, np.int64)
    for a, r in enumerate(distances):
        for axis in range(d):
            shift = np.zeros(d, int)
            shift[axis] = r
            for x in range(spec.n_sites):
                if depth[x] < r:
                    continue
                y = spec.index.get(tuple((coords[x] + shift).tolist()))
                if y is not None and depth[y] >= r:
                    partner[a * d + axis, x] = y
    return partner


def covariance_points(
    spec: LatticeSpec,
    distances: Sequence[int],
    samples: int,
    rng: RngStream | int | None = None,
    batches: int = 20,
    exact: bool = True,
    max_steps: int = DEFAULT_MAX_WALK_STEPS,
    threads: int = 1,
) -> list[CovPoint]:
    """Spatially averaged covariance of maximal-height indicators at axis distances.

    Each of ``batches`` independent streams yields one estimate per distance
    (mean over tracked pairs of joint frequency minus product of marginal
    frequencies); point estimates and standard errors are batch means.
    """
    _check_reachable(spec)
    if batches < 2 or samples < batches:
        raise ValueError("need at least two batches and one sample per batch")
    base = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    partner = pair_table(spec, distances)
    d = spec.d
    n_off = partner.shape[0]
    order = _order(spec, None)
    per = [samples // batches + (1 if b < samples % batches else 0) for b in range(batches)]
    tracked = [[np.flatnonzero(partner[a * d + axis] >= 0) for axis in range(d)] for a in range(len(distances))]

    def one_batch(b: int, stream: RngStream) -> np.ndarray:
        site_hits = np.zeros(spec.n_sites, np.int64)
        pair_hits = np.zeros((n_off, spec.n_sites), np.int64)
        status = _kernels.special_pair_counts(spec.neighbors, spec.gamma, order, stream.generator(),
                                              per[b], partner, site_hits, pair_hits, max_steps)
        if status != _kernels.STATUS_OK:
            raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
        p = site_hits / per[b]
        row = np.empty(len(distances))
        for a in range(len(distances)):
            vals = [pair_hits[a * d + axis, xs] / per[b] - p[xs] * p[partner[a * d + axis, xs]]
                    for axis, xs in enumerate(tracked[a])]
            row[a] = np.concatenate(vals).mean()
        return row

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        est = np.array(list(pool.map(one_batch, range(batches), base.spawn(batches))))
    exact_vals: list[float | None] = [None] * len(distances)
    if exact:
        g = green_exact(spec).values
        for a in range(len(distances)):
            vals = []
            for axis in range(d):
                o = a * d + axis
                xs = np.flatnonzero(partner[o] >= 0)
                vals.append(-(spec.gamma * g[xs, partner[o, xs]]) ** 2)
            exact_vals[a] = float(np.concatenate(vals).mean())
    out = []
    for a, r in enumerate(distances):
        npairs = int(sum(np.count_nonzero(partner[a * d + axis] >= 0) for axis in range(d)))
        out.append(CovPoint(int(r), float(est[:, a].mean()), float(est[:, a].std(ddof=1) / math.sqrt(batches)),
                            npairs, exact_vals[a]))
    return out


def covariance_window(gamma: float, lo: float = 0.6, hi: float = 1.2) -> list[int]:
    """Integer distances spanning ``[lo, hi]`` correlation lengths."""
    scale = 1.0 / math.sqrt(gamma)
    return list(range(max(1, round(lo * scale)), round(hi * scale) + 1))


def covariance_decay(
    spec: LatticeSpec,
    gammas: Sequence[float],
    samples: int,
    rng: RngStream | int | None = None,
    distances: dict[float, Sequence[int]] | None = None,
    batches: int = 20,
    threads: int = 1,
) -> list[DecayFit]:
    """Decay fit of the maximal-height covariance for each ``gamma``.

    By default distances cover the same range in units of the correlation
    length ``1/sqrt(gamma)`` for every ``gamma``.
    """
    base = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    fits = []
    for i, g in enumerate(gammas):
        dist = list(distances[g]) if distances and g in distances else covariance_window(g)
        sp = spec.with_gamma(g)
        stream = RngStream(base.seed, base.stream_id + i * 10_000)
        fits.append(fit_decay(covariance_points(sp, dist, samples, stream, batches, threads=threads), g, samples))
    return fits


# -- zero-dissipation limit -----------------------------------------------


def nu_weights(spec: LatticeSpec, gamma: float, cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[np.ndarray, np.ndarray]:
    rows, _ = exact_nu(spec.with_gamma(max(gamma, 1.0)), cap)
    n_max = np.count_nonzero(rows == spec.n_dirs, axis=1)
    w = np.power(float(gamma), n_max.astype(float))  # 0**0 == 1
    return rows, w / w.sum()


def tv_distance_exact(spec: LatticeSpec, gamma1: float, gamma2: float, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Total variation between the exact discrete stationary laws at two dissipations."""
    _, p1 = nu_weights(spec, gamma1, cap)
    _, p2 = nu_weights(spec, gamma2, cap)
    return float(0.5 * np.abs(p1 - p2).sum())


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())
