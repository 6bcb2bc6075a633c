import itertools
import json
import math

import numpy as np
import pytest
from scipy import stats

from avalanche.allowed import EnumerationTooLarge, exact_nu
from avalanche.analysis import (
    CovPoint,
    DecayFit,
    InsufficientTruncation,
    check_dhar,
    covariance_points,
    covariance_window,
    dhar_exact,
    dhar_statistics,
    fit_decay,
    green_column,
    green_decay_rate,
    green_exact,
    green_infinite,
    green_window,
    max_height_kernel,
    max_height_probability,
    max_height_probability_exact,
    nu_weights,
    pair_table,
    rational_form,
    series_depth,
    tv_distance,
    tv_distance_exact,
)
from avalanche.lattice import lattice_from_sites, make_box, rect_box, toppling_matrix
from avalanche.sampler import RngStream, sample_nu_batch

from conftest import small_shapes


def test_green_examples(pair):
    assert green_exact(make_box(2, 0, 1.0)).values[0, 0] == pytest.approx(0.2)
    assert np.allclose(green_exact(pair).values, np.array([[3, 1], [1, 3]]) / 8, atol=1e-15)


def test_green_residual_and_symmetry():
    spec = make_box(2, 4, 0.05)
    g = green_exact(spec).values
    a = toppling_matrix(spec).entries
    assert np.abs(a @ g - np.eye(spec.n_sites)).max() <= 1e-10
    assert np.array_equal(g, g.T) or np.allclose(g, g.T, atol=1e-14)
    assert g.min() >= 0


def test_green_gamma_zero_with_boundary():
    # finite sets always touch the sink, so gamma = 0 stays invertible
    g = green_exact(rect_box((3,), 0.0)).values
    assert g[1, 1] == pytest.approx(1.0)


def test_green_column_matches_dense():
    spec = make_box(2, 5, 0.1)
    g = green_exact(spec).values
    x = spec.site_index((0, 0))
    assert np.abs(green_column(spec, (0, 0)) - g[:, x]).max() < 1e-10


def test_green_monotone_in_volume():
    small, big = make_box(2, 1, 0.3), make_box(2, 2, 0.3)
    gs, gb = green_exact(small), green_exact(big)
    for x, y in itertools.product(small.sites, repeat=2):
        assert gs(x, y) <= gb(x, y) + 1e-15


def test_green_table_csv(pair):
    lines = green_exact(pair).to_csv().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == 5
    x, y, v = lines[2].split(",")
    assert (x, y) == ("0", "1") and float(v) == pytest.approx(1 / 8)


def test_green_infinite_large_gamma():
    assert green_infinite(1, 1e6, (0,)) == pytest.approx(1 / (2 + 1e6), abs=1e-9)


def test_green_infinite_truncation():
    need = series_depth(1, 1.0)
    with pytest.raises(InsufficientTruncation) as info:
        green_infinite(1, 1.0, (0,), truncation=need // 2)
    assert info.value.required == need
    with pytest.raises(ValueError):
        green_infinite(1, 0.0, (0,))


@pytest.mark.parametrize("d,gamma,radius", [(1, 1.0, 60), (2, 1.0, 30), (3, 2.0, 12)])
def test_green_infinite_against_large_box(d, gamma, radius):
    g = green_exact(make_box(d, radius, gamma)) if d < 3 else None
    spec = make_box(d, radius, gamma)
    for r in range(6):
        x = (r,) + (0,) * (d - 1)
        if g is None:
            col = green_column(spec, (0,) * d)
            box = col[spec.site_index(x)]
        else:
            box = g((0,) * d, x)
        assert abs(green_infinite(d, gamma, x) - box) < 1e-6


def test_green_infinite_closed_form_d1():
    # on Z, G(0, x) = lambda^|x| / sqrt(gamma^2 + 4 gamma) with lambda the small root
    gamma = 0.5
    lam = ((2 + gamma) - math.sqrt((2 + gamma) ** 2 - 4)) / 2
    for x in range(8):
        exact = lam**x / math.sqrt(gamma**2 + 4 * gamma)
        assert green_infinite(1, gamma, (x,)) == pytest.approx(exact, rel=1e-9)


def test_green_decay_ratio():
    r1 = green_decay_rate(2, 0.01, green_window(0.01))
    r4 = green_decay_rate(2, 0.04, green_window(0.04))
    assert 0.8 * 2 <= r4 / r1 <= 1.2 * 2
    assert green_window(0.01) == list(range(20, 61))


def test_dhar_exact_matches_inverse():
    for spec in [make_box(2, 0, 1.0), rect_box((2,), 1.0), rect_box((2, 2), 0.5), rect_box((3,), 0.25)]:
        assert np.abs(dhar_exact(spec) - green_exact(spec).values).max() < 1e-12
    with pytest.raises(EnumerationTooLarge):
        dhar_exact(make_box(2, 2, 1.0), cap=1000)
    with pytest.raises(ValueError):
        dhar_exact(rect_box((2,), math.pi / 10))


def test_rational_form():
    assert rational_form(0.25) == (4, 1)
    assert rational_form(1.0) == (1, 1)
    assert rational_form(2.5) == (2, 5)
    assert rational_form(math.sqrt(2)) is None


def test_check_dhar_single_site():
    est = check_dhar(make_box(2, 0, 1.0), (0, 0), (0, 0), 100_000, RngStream(1))
    assert est.exact == pytest.approx(0.2)
    assert est.within() and est.markov_ok()
    assert est.samples == 100_000


def test_check_dhar_pair(pair):
    est = check_dhar(pair, (0,), (1,), 50_000, RngStream(2))
    assert est.exact == pytest.approx(1 / 8)
    assert est.within()


def test_dhar_markov_bound():
    spec = rect_box((3, 3), 0.5)
    for est in dhar_statistics(spec, 20_000, RngStream(3)):
        assert est.markov_ok()
        assert est.p_topple <= est.estimate + 1e-12  # P(n >= 1) <= E[n] sample-wise


def test_dhar_rejects_bad_input(pair):
    with pytest.raises(ValueError):
        dhar_statistics(pair.with_gamma(0.0), 10, 0)
    with pytest.raises(ValueError):
        dhar_statistics(pair, 1, 0)


def test_kernel_examples(pair):
    k1 = max_height_kernel(make_box(2, 0, 1.0))
    assert k1[0, 0] == pytest.approx(0.2)
    k = max_height_kernel(pair)
    assert max_height_probability(k, [0, 1]) == pytest.approx(1 / 8)
    assert max_height_probability_exact(pair, [0, 1]) == pytest.approx(1 / 8)
    assert max_height_probability(k, []) == 1.0


@pytest.mark.parametrize("shape", small_shapes(4))
def test_determinantal_identity(shape):
    spec = rect_box(shape, 0.5)
    k = max_height_kernel(spec)
    for size in range(1, spec.n_sites + 1):
        for sites in itertools.combinations(range(spec.n_sites), size):
            assert abs(max_height_probability(k, sites) - max_height_probability_exact(spec, sites)) < 1e-9


def test_kernel_marginal_matches_sampler():
    spec = rect_box((3, 3), 0.5)
    k = max_height_kernel(spec)
    xi = sample_nu_batch(spec, 100_000, RngStream(4))
    freq = (xi == spec.n_dirs).mean(axis=0)
    se = np.sqrt(np.diag(k) * (1 - np.diag(k)) / len(xi))
    assert np.all(np.abs(freq - np.diag(k)) <= 3 * se)


def test_tv_examples(pair):
    assert tv_distance_exact(pair, 1.0, 0.0) == pytest.approx(5 / 8)
    assert tv_distance_exact(pair, 0.3, 0.3) == 0.0
    assert tv_distance([1, 1], [1, 1]) == 0.0


@pytest.mark.parametrize("shape", small_shapes(6))
def test_tv_strictly_decreasing(shape):
    spec = rect_box(shape, 1.0)
    tv = [tv_distance_exact(spec, g, 0.0) for g in (1.0, 0.5, 0.1, 0.01)]
    assert all(a > b for a, b in zip(tv, tv[1:]))


def test_nu_weights_match_exact_nu():
    spec = rect_box((2, 2), 0.5)
    rows, p = nu_weights(spec, 0.5)
    r2, p2 = exact_nu(spec)
    assert np.array_equal(rows, r2) and np.allclose(p, p2)


def test_fit_decay_refuses_noise():
    pts = [CovPoint(r, 1e-6, 1e-5, 10) for r in (2, 4, 6, 8)]
    fit = fit_decay(pts, 0.1)
    assert fit.rate is None and "insufficient signal" in fit.diagnostic


def test_fit_decay_recovers_rate():
    pts = [CovPoint(r, -math.exp(-0.3 * r), 1e-4 * math.exp(-0.3 * r), 10) for r in range(1, 8)]
    pts.append(CovPoint(20, 1e-7, 1e-3, 10))  # below 3 SE, must be ignored
    fit = fit_decay(pts, 0.1)
    assert fit.rate == pytest.approx(0.3, rel=1e-9)
    assert len(fit.used) == 7
    lo, hi = fit.rate_ci
    assert lo < 0.3 < hi


def test_decay_fit_json():
    fit = fit_decay([CovPoint(2, -0.1, 0.001, 4), CovPoint(4, -0.01, 0.001, 4)], 0.25, samples=9)
    obj = json.loads(fit.to_json())
    assert {"gamma", "points", "rate", "rate_ci"} <= set(obj)
    assert {"r", "cov", "se"} <= set(obj["points"][0])
    assert isinstance(fit, DecayFit)


def test_pair_table_respects_boundary():
    spec = make_box(2, 4, 0.1)
    table = pair_table(spec, [1, 3])
    # 9x9 box, depth >= 3 means max |coord| <= 2; a shift of 3 along e1 keeps x1 in {-2, -1}
    xs = np.flatnonzero(table[2] >= 0)
    assert len(xs) == 5 * 2
    for o, r in ((0, 1), (1, 1), (2, 3), (3, 3)):
        for x in np.flatnonzero(table[o] >= 0):
            diff = np.subtract(spec.sites[table[o, x]], spec.sites[x])
            assert np.abs(diff).sum() == r


def test_covariance_distance_zero_is_variance():
    spec = make_box(2, 3, 0.5)
    pts = covariance_points(spec, [0], 20_000, RngStream(5), batches=10, exact=False)
    kd = np.diag(max_height_kernel(spec))
    xs = np.flatnonzero(pair_table(spec, [0])[0] >= 0)
    var = np.mean(kd[xs] * (1 - kd[xs]))
    assert pts[0].cov > 0
    # ten batch means: the studentized error follows t with 9 degrees of freedom
    assert abs(pts[0].cov - var) <= stats.t.ppf(1 - 5e-4, 9) * pts[0].se


def test_covariance_matches_exact():
    spec = make_box(2, 4, 0.25)
    pts = covariance_points(spec, [1, 2], 100_000, RngStream(6), batches=20)
    for p in pts:
        assert p.exact < 0
        assert abs(p.cov - p.exact) <= 4 * p.se


def test_covariance_thread_independent():
    spec = make_box(2, 3, 0.5)
    a = covariance_points(spec, [1, 2], 4000, RngStream(7), batches=4, threads=1)
    b = covariance_points(spec, [1, 2], 4000, RngStream(7), batches=4, threads=4)
    assert [p.cov for p in a] == [p.cov for p in b]


def test_covariance_window():
    assert covariance_window(0.01) == list(range(6, 13))
    assert covariance_window(0.04) == list(range(3, 7))


def test_covariance_requires_dissipation_or_boundary():
    spec = lattice_from_sites([(0, 0)], 0.5)
    with pytest.raises(ValueError):
        covariance_points(spec, [1], 10, 0, batches=1)
