"""Acceptance criteria, one test each, with the stated tolerances and runtime limits.

Every Monte Carlo test uses a seed fixed up front (SEED, streams numbered by
criterion); nothing here is retried or tuned after the fact.
"""

import itertools
import os
import time

import numpy as np
import pytest
from scipy import stats

from avalanche.allowed import check_bijection, exact_nu, tree_counts, weight_total
from avalanche.analysis import (
    covariance_decay,
    dhar_statistics,
    green_decay_rate,
    green_exact,
    green_infinite,
    green_window,
    max_height_kernel,
    max_height_probability,
    max_height_probability_exact,
    tv_distance_exact,
)
from avalanche.dynamics import RateProfile, replay_batch, simulate, stationarity_test
from avalanche.engine import (
    HeightConfig,
    RationalConfig,
    add,
    add_rational,
    rational_residual,
    residual,
    stabilize,
    stabilize_rational,
)
from avalanche.lattice import lattice_from_sites, make_box, rect_box, toppling_matrix
from avalanche.sampler import RngStream, sample_nu_batch

from conftest import small_shapes

SEED = 20240601


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_c01_volume_identity(acceptance):
    worst = 0.0
    cases = 0
    with Timer() as t:
        for shape in small_shapes(6):
            for gamma in (0.0, 0.25, 1.0, 2.0):
                spec = rect_box(shape, gamma)
                det = toppling_matrix(spec).det()
                counts = tree_counts(spec)
                tree_weight = float(sum(c * gamma**j for j, c in enumerate(counts)))
                allowed = weight_total(spec)
                worst = max(worst, abs(allowed - det) / det, abs(tree_weight - det) / det)
                cases += 1
    ok = worst <= 1e-9 and t.seconds < 10
    acceptance(1, ok, f"{cases} (box, gamma) cases, max rel err {worst:.2e}, {t.seconds:.1f}s")
    assert ok


def test_c02_bijection(acceptance):
    specs = [rect_box(s, 1.0) for s in small_shapes(8)]
    # two non-rectangular 8-site sets: an L shape and a ring around a hole
    specs.append(lattice_from_sites([(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (0, 1), (0, 2), (0, 3)], 1.0))
    specs.append(lattice_from_sites([p for p in itertools.product(range(3), repeat=2) if p != (1, 1)], 1.0))
    failures, total = [], 0
    with Timer() as t:
        for spec in specs:
            rep = check_bijection(spec)
            total += rep["allowed"]
            if not rep["passed"] or rep["allowed"] != rep["trees"]:
                failures.append((spec.sites, rep))
    ok = not failures and t.seconds < 30
    acceptance(2, ok, f"{len(specs)} specs, {total} allowed configs matched both ways, {t.seconds:.1f}s")
    assert ok, failures


def test_c03_dhar(acceptance):
    details, bad = [], []
    with Timer() as t:
        for i, gamma in enumerate((0.25, 1.0)):
            spec = rect_box((3, 3), gamma)
            est = dhar_statistics(spec, 100_000, RngStream(SEED, 300 + i))
            worst = max(abs(e.z) for e in est)
            bad += [(gamma, e.x, e.y, e.z) for e in est if not e.within()]
            details.append(f"gamma={gamma}: 81 pairs, max |z|={worst:.2f}")
        single = dhar_statistics(make_box(2, 0, 1.0), 100_000, RngStream(SEED, 302))[0]
    single_ok = single.exact == pytest.approx(0.2, abs=1e-15) and single.within()
    ok = not bad and single_ok and t.seconds < 120
    acceptance(3, ok, "; ".join(details) + f"; single site {single.estimate:.4f} vs 0.2 (z={single.z:.2f}), "
               f"{t.seconds:.1f}s")
    assert ok, bad


def test_c04_abelian_conservation(acceptance):
    rng = np.random.default_rng(SEED + 4)
    spec = rect_box((3, 3), 0.5)
    n, k = 2, 1
    thr = spec.n_dirs * n + k
    worst_float = 0.0
    exact_fail = 0
    with Timer() as t:
        for _ in range(1000):
            x, y = (int(v) for v in rng.integers(spec.n_sites, size=2))
            eta = RationalConfig(spec, rng.integers(0, thr, spec.n_sites), n, k)
            xy = add_rational(add_rational(eta, x)[0], y)[0]
            yx = add_rational(add_rational(eta, y)[0], x)[0]
            big = RationalConfig(spec, rng.integers(0, 6 * thr, spec.n_sites), n, k)
            out, counts = stabilize_rational(big)
            exact_fail += (xy != yx) + (rational_residual(big, out, counts) != 0)

            h = HeightConfig(spec, rng.random(spec.n_sites) * spec.max_height * 0.999999)
            fxy = add(add(h, x)[0], y)[0]
            fyx = add(add(h, y)[0], x)[0]
            hb = HeightConfig(spec, rng.random(spec.n_sites) * 6 * spec.max_height)
            hout, hcounts = stabilize(hb)
            worst_float = max(worst_float, float(np.abs(fxy.heights - fyx.heights).max()), residual(hb, hout, hcounts))
    ok = exact_fail == 0 and worst_float <= 1e-9 and t.seconds < 10
    acceptance(4, ok, f"1000 cases: rational failures {exact_fail}, float max err {worst_float:.1e}, "
               f"{t.seconds:.1f}s")
    assert ok


def test_c05_gamma_monotonicity(acceptance):
    rng = np.random.default_rng(SEED + 5)
    spec = rect_box((5, 5), 0.0)
    gammas = (1.0, 0.1, 0.01, 0.0)
    violations = 0
    with Timer() as t:
        for _ in range(200):
            # stable at gamma = 0, hence stable for every gamma
            eta = rng.random(spec.n_sites) * spec.n_dirs * 0.999999
            x = int(rng.integers(spec.n_sites))
            prev = None
            for g in gammas:
                _, rec = add(HeightConfig(spec.with_gamma(g), eta), x)
                if prev is not None:
                    violations += int(np.any(prev.toppling_counts > rec.toppling_counts))
                    violations += int(not prev.avalanche_set <= rec.avalanche_set)
                prev = rec
    ok = violations == 0 and t.seconds < 30
    acceptance(5, ok, f"200 configurations x {len(gammas)} gammas, {violations} violations, {t.seconds:.1f}s")
    assert ok


def _chi2_vs_exact(spec, xi):
    rows, p = exact_nu(spec)
    keys = {tuple(r): i for i, r in enumerate(rows.tolist())}
    obs = np.bincount([keys[tuple(r)] for r in xi.tolist()], minlength=len(rows))
    return stats.chisquare(obs, p * len(xi)).pvalue


def test_c06_sampler_exactness(acceptance):
    results = []
    with Timer() as t:
        for shape in ((2,), (2, 2)):
            for gamma in (0.25, 1.0):
                spec = rect_box(shape, gamma)
                perm = np.random.default_rng(SEED + 6).permutation(spec.n_sites)
                for label, order in (("lex", None), ("reversed", "reversed"), ("random", perm)):
                    stream = RngStream(SEED, 600 + len(results))
                    xi = sample_nu_batch(spec, 200_000, stream, order=order)
                    results.append((shape, gamma, label, _chi2_vs_exact(spec, xi)))
    pmin = min(r[3] for r in results)
    ok = pmin > 1e-3 and t.seconds < 120
    acceptance(6, ok, f"{len(results)} chi-square tests at 2e5 samples, min p = {pmin:.3g}, {t.seconds:.1f}s")
    assert ok, results


def test_c07_stationarity(acceptance):
    spec = rect_box((3, 3), 1.0)
    with Timer() as t:
        rep = stationarity_test(spec, RateProfile.constant(spec), 0.0, 50.0, 100_000, RngStream(SEED, 700))
    ok = rep.passed and t.seconds < 300
    acceptance(7, ok, f"min per-site p = {min(rep.p_values):.3g} (Bonferroni threshold {1e-3 / 9:.2g}), "
               f"{rep.events} events, {t.seconds:.1f}s")
    assert ok


def test_c08_determinantal(acceptance):
    worst = 0.0
    checked = 0
    with Timer() as t:
        for shape in small_shapes(4):
            for gamma in (0.25, 1.0, 2.0):
                spec = rect_box(shape, gamma)
                k = max_height_kernel(spec)
                for size in range(1, spec.n_sites + 1):
                    for sites in itertools.combinations(range(spec.n_sites), size):
                        err = abs(max_height_probability(k, sites) - max_height_probability_exact(spec, sites))
                        worst = max(worst, err)
                        checked += 1
        pair = rect_box((2,), 1.0)
        two = max_height_probability(max_height_kernel(pair), [0, 1])
    ok = worst <= 1e-9 and abs(two - 1 / 8) <= 1e-12 and t.seconds < 10
    acceptance(8, ok, f"{checked} site sets, max err {worst:.1e}, pair joint {two:.12f}, {t.seconds:.2f}s")
    assert ok


def test_c09_zero_dissipation_tv(acceptance):
    pair = rect_box((2,), 1.0)
    with Timer() as t:
        tv = [tv_distance_exact(pair, g, 0.0) for g in (1.0, 0.5, 0.1, 0.01, 0.001)]
    decreasing = all(a > b for a, b in zip(tv, tv[1:]))
    ok = abs(tv[0] - 5 / 8) <= 1e-12 and decreasing and tv[-1] < 0.002 and t.seconds < 5
    acceptance(9, ok, "TV = " + ", ".join(f"{v:.6f}" for v in tv) + f", {t.seconds:.2f}s")
    assert ok


@pytest.mark.slow
def test_c10_correlation_length(acceptance):
    spec = make_box(2, 40, 0.01)
    threads = int(os.environ.get("AVALANCHE_THREADS", os.cpu_count() or 1))
    with Timer() as t:
        low, high = covariance_decay(spec, [0.01, 0.04], 1_000_000, RngStream(SEED, 1000), threads=threads)
    ratio = high.rate / low.rate if (low.rate and high.rate) else None
    exact = high.exact_rate / low.exact_rate
    ok = ratio is not None and 1.6 <= ratio <= 2.4 and t.seconds < 1800
    acceptance(10, ok, f"rates {low.rate} / {high.rate}, ratio {ratio} (exact-kernel ratio {exact:.3f}), "
               f"{low.diagnostic}; {high.diagnostic}; {t.seconds:.0f}s")
    assert ok, (low.to_dict(), high.to_dict())


def test_c11_green_consistency(acceptance):
    with Timer() as t:
        spec = make_box(1, 60, 1.0)
        g = green_exact(spec)
        err = max(abs(green_infinite(1, 1.0, (r,)) - g((0,), (r,))) for r in range(6))
        r1 = green_decay_rate(2, 0.01, green_window(0.01))
        r4 = green_decay_rate(2, 0.04, green_window(0.04))
    ratio = r4 / r1
    ok = err < 1e-6 and 1.6 <= ratio <= 2.4 and t.seconds < 60
    acceptance(11, ok, f"series vs box max err {err:.1e}; decay rates {r1:.5f}, {r4:.5f}, ratio {ratio:.4f}, "
               f"{t.seconds:.1f}s")
    assert ok


def test_c12_batch_identity(acceptance):
    spec = rect_box((3, 3), 0.5)
    rates = RateProfile.constant(spec)
    mismatches, events = 0, 0
    with Timer() as t:
        for i in range(100):
            traj = simulate(spec, rates, 20.0, rng=RngStream(SEED, 1200 + i), rational=(2, 1))
            events += traj.n_events
            mismatches += replay_batch(traj) != traj.final
    ok = mismatches == 0 and t.seconds < 30
    acceptance(12, ok, f"100 trajectories, {events} additions, {mismatches} mismatches, {t.seconds:.1f}s")
    assert ok
