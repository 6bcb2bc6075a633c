import json

import numpy as np
import pytest
from scipy import stats

from avalanche.allowed import exact_nu
from avalanche.dynamics import (
    RateProfile,
    evolve_batch,
    expected_additions,
    gamma_limit_experiment,
    poisson_counts,
    poisson_pvalue,
    replay_batch,
    replay_sequential,
    simulate,
    stationarity_test,
)
from avalanche.engine import HeightConfig, discretize_array, stabilize
from avalanche.lattice import make_box, rect_box
from avalanche.sampler import RngStream, sample_m_batch

P_MIN = 1e-3


def test_rate_profiles():
    spec = make_box(2, 2, 0.5)
    c = RateProfile.constant(spec, 2.0)
    assert c.total == pytest.approx(50.0) and len(c.support) == 25
    f = RateProfile.finite_support(spec, [(0, 0), (1, 0)])
    assert f.total == 2.0 and len(f.support) == 2
    e = RateProfile.decaying(spec, 1.0, 2.0)
    assert e.rates[spec.site_index((0, 0))] == 1.0
    assert e.rates[spec.site_index((2, 2))] == pytest.approx(np.exp(-2.0))
    with pytest.raises(ValueError):
        RateProfile(spec, np.zeros(spec.n_sites))
    with pytest.raises(ValueError):
        RateProfile(spec, -np.ones(spec.n_sites))
    with pytest.raises(ValueError):
        RateProfile.decaying(spec, law="gaussian")


def test_summability():
    s3 = make_box(3, 1, 0.5)
    assert RateProfile.finite_support(s3, [(0, 0, 0)]).summable()
    assert RateProfile.decaying(s3, scale=3.0, law="power").summable()
    assert not RateProfile.decaying(s3, scale=1.0, law="power").summable()
    assert not RateProfile.constant(s3).summable()
    assert not RateProfile.finite_support(make_box(2, 1, 0.5), [(0, 0)]).summable()


def test_poisson_clock_single_site():
    spec = make_box(2, 0, 1.0)
    rates = RateProfile.constant(spec)
    gen = np.random.default_rng(0)
    counts = np.array([simulate(spec, rates, 10.0, rng=gen).n_events for _ in range(10_000)])
    assert expected_additions(rates, 10.0) == 10.0
    assert abs(counts.mean() - 10.0) < 3 * np.sqrt(10.0 / len(counts))
    assert poisson_pvalue(counts, 10.0) > P_MIN
    assert poisson_pvalue(poisson_counts(spec, rates, 10.0, 10_000, 1), 10.0) > P_MIN


def test_poisson_pvalue_detects_wrong_mean():
    counts = np.random.default_rng(1).poisson(12.0, 10_000)
    assert poisson_pvalue(counts, 10.0) < 1e-6


def test_trajectory_invariants():
    spec = rect_box((3, 3), 0.5)
    traj = simulate(spec, RateProfile.constant(spec), 20.0, rng=RngStream(2), checkpoints=(5.0, 10.0, 30.0))
    assert np.all(np.diff(traj.times) > 0)
    assert max(traj.times) <= 20.0
    assert set(traj.checkpoints) == {5.0, 10.0}
    assert all(h.is_stable() for h in traj.checkpoints.values())
    assert traj.final.is_stable()
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,site,avalanche_size,dissipated" and len(lines) == traj.n_events + 1
    summary = json.loads(traj.to_json())
    assert summary["events"] == traj.n_events


def test_checkpoint_is_state_before_later_events():
    spec = rect_box((2,), 1.0)
    traj = simulate(spec, RateProfile.constant(spec), 10.0, rng=RngStream(3), checkpoints=(4.0,),
                    rational=(1, 1))
    before = [i for i, t in enumerate(traj.times) if t < 4.0]
    partial = replay_sequential(traj, before)
    assert partial == traj.checkpoints[4.0]


def test_batch_identity_rational():
    spec = rect_box((3, 3), 0.5)
    rates = RateProfile.constant(spec)
    for seed in range(20):
        traj = simulate(spec, rates, 15.0, rng=RngStream(seed), rational=(2, 1))
        assert replay_batch(traj) == traj.final
        perm = np.random.default_rng(seed).permutation(traj.n_events)
        assert replay_sequential(traj, perm) == traj.final
        assert replay_batch(traj, perm) == traj.final


def test_batch_identity_float():
    spec = rect_box((3, 3), 0.5)
    traj = simulate(spec, RateProfile.constant(spec), 15.0, rng=RngStream(4))
    out = replay_batch(traj)
    assert np.max(np.abs(out.heights - traj.final.heights)) < 1e-9


def test_simulate_validation():
    spec = rect_box((2,), 1.0)
    rates = RateProfile.constant(spec)
    with pytest.raises(ValueError):
        simulate(spec, rates, -1.0)
    with pytest.raises(ValueError):
        simulate(spec, rates, 1.0, initial=HeightConfig(spec, np.array([3.0, 0.0])))
    with pytest.raises(ValueError):
        simulate(spec, RateProfile.constant(rect_box((3,), 1.0)), 1.0)
    with pytest.raises(ValueError):
        simulate(spec, rates, 1.0, initial="empty")


def test_evolve_batch_basics():
    spec = rect_box((3, 3), 0.5)
    h0 = sample_m_batch(spec, 50, RngStream(5))
    same, events = evolve_batch(spec, RateProfile.constant(spec), h0, 0.0, RngStream(6))
    assert events == 0 and np.array_equal(same, h0)
    out, events = evolve_batch(spec, RateProfile.constant(spec), h0, 3.0, RngStream(7))
    assert events > 0
    assert np.all(out < spec.max_height) and np.all(out >= 0)


def test_stationarity_single_site_uniform():
    spec = make_box(2, 0, 1.0)
    h0 = sample_m_batch(spec, 100_000, RngStream(8))
    out, _ = evolve_batch(spec, RateProfile.constant(spec), h0, 5.0, RngStream(9))
    assert stats.kstest(out[:, 0], stats.uniform(0, 5).cdf).pvalue > P_MIN


def test_stationarity_pair_matches_exact_marginal():
    spec = rect_box((2,), 0.5)
    rows, p = exact_nu(spec)
    h0 = sample_m_batch(spec, 100_000, RngStream(10))
    out, _ = evolve_batch(spec, RateProfile.constant(spec), h0, 10.0, RngStream(11))
    xi = discretize_array(out, spec.n_dirs)
    for site in range(2):
        marginal = np.bincount(rows[:, site], weights=p, minlength=3)
        obs = np.bincount(xi[:, site], minlength=3)
        assert stats.chisquare(obs, marginal * len(xi)).pvalue > P_MIN


def test_stationarity_zero_time_self_test():
    spec = rect_box((2, 2), 1.0)
    rep = stationarity_test(spec, RateProfile.constant(spec), 0.0, 0.0, 20_000, RngStream(12))
    assert rep.passed and rep.events == 0 and len(rep.p_values) == 4


def test_stationarity_detects_non_stationary_start():
    # evolving an empty box is far from stationary at short times
    spec = rect_box((2, 2), 1.0)
    rates = RateProfile.constant(spec)
    out, _ = evolve_batch(spec, rates, np.zeros((20_000, 4)), 0.5, RngStream(13))
    ref = discretize_array(sample_m_batch(spec, 20_000, RngStream(14)), 4)
    xi = discretize_array(out, 4)
    table = np.vstack([np.bincount(xi[:, 0], minlength=5), np.bincount(ref[:, 0], minlength=5)])
    assert stats.chi2_contingency(table[:, table.sum(0) > 0])[1] < 1e-6


@pytest.mark.parametrize("gamma", [0.25, 1.0])
def test_stationarity_boxes(gamma):
    spec = rect_box((3, 3), gamma)
    rep = stationarity_test(spec, RateProfile.constant(spec), 1.0, 10.0, 20_000, RngStream(15))
    assert rep.passed, rep.p_values
    assert json.dumps(rep.to_dict())


def test_gamma_limit_report():
    spec = make_box(2, 1, 1.0)
    rep = gamma_limit_experiment(spec, [0.1, 0.01, 0.001], samples=3000, rng=RngStream(16),
                                 fixed_configs=100, t_max=2.0)
    assert rep.gammas == [0.1, 0.01, 0.001]
    assert rep.nested and rep.nesting_violations == 0 and rep.counts_monotone
    assert rep.height_differs[-1] <= rep.height_differs[0]
    assert rep.count_differs[-1] <= rep.count_differs[0]
    assert rep.tv_height_exact is not None and rep.height_monotone
    assert json.dumps(rep.to_dict())
    with pytest.raises(ValueError):
        gamma_limit_experiment(spec, [0.1, 0.0], samples=10)


def test_gamma_monotone_counts_on_samples():
    spec = rect_box((4, 4), 0.0)
    etas = sample_m_batch(spec, 100, RngStream(17))
    for eta in etas:
        for x in (0, 5, 15):
            prev = None
            for g in (1.0, 0.1, 0.01, 0.0):
                h = eta.copy()
                h[x] += 1.0
                _, n = stabilize(HeightConfig(spec.with_gamma(g), h))
                if prev is not None:
                    assert np.all(prev <= n)
                prev = n
