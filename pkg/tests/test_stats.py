import math

import numpy as np
import pytest

from conftest import centered_path
from ustlab.constants import d_f, d_w, kappa
from ustlab.errors import InsufficientDataError, ValidationError
from ustlab.kernel import heat_kernel_exact
from ustlab.stats import (ScalingResult, bootstrap_slope, column_means, curve_collapse, default_window,
                          displacement_experiment, fit_line, fit_power_law, fluctuation_tracker, geometric_grid,
                          lerw_growth_experiment, long_path_tail, offdiag_stretched_fit, rescaled_curve,
                          short_path_tail, volume_profile, volume_radius_grid, wilson_interval)


def test_wilson_interval_known_values():
    lo, hi = wilson_interval(5, 10)
    assert lo == pytest.approx(0.23659309, abs=1e-7) and hi == pytest.approx(0.76340691, abs=1e-7)
    lo, hi = wilson_interval(0, 50)
    assert lo == 0.0 and hi == pytest.approx(0.0713476, abs=1e-6)
    assert wilson_interval(50, 50)[1] == 1.0
    with pytest.raises(ValidationError):
        wilson_interval(3, 2)
    with pytest.raises(ValidationError):
        wilson_interval(0, 0)


def test_fit_line_cases():
    f = fit_line([0, 1, 2, 3], [1, 3, 5, 7])
    assert f.slope == pytest.approx(2) and f.intercept == pytest.approx(1) and f.r2 == pytest.approx(1)
    c = fit_line([1, 2, 3], [4, 4, 4])
    assert c.slope == 0 and c.intercept == 4
    with pytest.raises(InsufficientDataError):
        fit_line([1], [2])
    with pytest.raises(InsufficientDataError):
        fit_line([2, 2, 2], [1, 2, 3])


def test_power_law_exact_and_window():
    x = np.array([2, 4, 8, 16, 32, 64, 128], float)
    y = 3 * x ** 1.6
    f = fit_power_law(zip(x, y))
    assert f.slope == pytest.approx(1.6) and math.exp(f.intercept) == pytest.approx(3)
    assert f.window == (2, 128) and f.n_points == 7
    y2 = y.copy()
    y2[0] = 1e9  # outlier outside the window
    g = fit_power_law(zip(x, y2), window=(4, 128))
    assert g.slope == pytest.approx(1.6) and g.n_points == 6
    y3 = y.copy()
    y3[1] = 0.0
    assert fit_power_law(zip(x, y3)).n_points == 6
    with pytest.raises(InsufficientDataError):
        fit_power_law(zip(x, y), window=(60, 200))
    assert default_window(x) == (4, 64)


def test_power_law_synthetic_noise():
    gen = np.random.default_rng(0)
    x = np.geomspace(8, 1024, 8)
    samples = 2 * x[None, :] ** -0.6 * gen.lognormal(0, 0.3, (400, x.size))
    res = ScalingResult.from_samples("synthetic", x, samples, 0.6, sign=-1, bootstrap=200)
    # lognormal mean factor is constant, so the slope is unbiased
    assert res.exponent == pytest.approx(0.6, abs=4 * res.fit.combined_stderr() + 1e-3)
    assert res.fit.bootstrap_stderr > 0
    assert res.fit_report()["target_exponent"] == 0.6
    assert np.allclose(res.means, column_means(samples))
    assert bootstrap_slope(x, samples, resamples=50) == bootstrap_slope(x, samples, resamples=50)
    with pytest.raises(ValidationError):
        ScalingResult.from_samples("bad", x, samples[:, :3], 0.6)


def test_geometric_grid():
    g = geometric_grid(16, 1024, 7)
    assert g[0] == 16 and g[-1] == 1024 and np.all(np.diff(g) > 0)
    assert geometric_grid(1, 3, 10).tolist() == [1, 2, 3]
    with pytest.raises(ValidationError):
        lerw_growth_experiment([2, 4, 8], 2)
    with pytest.raises(ValidationError):
        lerw_growth_experiment([2, 8, 4, 16], 2)


def test_offdiag_fit_recovers_theta():
    theta = 32 / 45
    a = d_f / d_w
    n = np.array([64, 128, 256, 512, 1024, 64, 128, 256], float)
    r = np.array([20, 30, 45, 70, 100, 35, 60, 80], float)
    z = r ** (kappa * d_w) / n
    p = n ** -a * np.exp(-0.7 * z ** (theta / (d_w - 1)))
    f = offdiag_stretched_fit(n, r, p)
    assert not f.inconclusive and f.theta == pytest.approx(theta)
    # Gaussian decay (theta = d_w - 1 on the 1/n scale) is recovered too
    pg = n ** -a * np.exp(-z / 1e4)  # scaled to stay above underflow; slope unchanged
    assert offdiag_stretched_fit(n, r, pg).theta == pytest.approx(d_w - 1)
    few = offdiag_stretched_fit(n[:2], r[:2], p[:2])
    assert few.inconclusive and math.isnan(few.theta)


def test_curve_collapse_exact_power_law():
    a = d_f / d_w
    nmax = 1024
    prof = np.ones(nmax + 1)
    prof[1:] = np.arange(1, nmax + 1, dtype=float) ** -a
    t = np.array([0.5, 1, 2, 4])
    rep = curve_collapse(prof, [16, 32, 64, 128], t)
    assert rep.max_distance < 1e-12
    assert rep.scale == pytest.approx(1.0)
    assert rep.exponent == pytest.approx(a)
    assert np.allclose(rescaled_curve(prof, 1, [1, 2, 3]), prof[[1, 2, 3]])
    with pytest.raises(ValidationError):
        rescaled_curve(prof, 512, [4])
    with pytest.raises(ValidationError):
        curve_collapse(prof, [4], [0, 1])


def test_fluctuation_tracker():
    r = np.array([2, 4, 8, 16, 32], float)
    c = np.array([[1.0], [2.0], [0.5]])
    vols = c * r[None, :] ** d_f
    rep = fluctuation_tracker(vols, r)
    assert rep.ratio_min == pytest.approx(0.5)
    ok = np.log(np.log(r)) > 0
    assert ok.tolist() == [False, True, True, True, True]
    assert rep.upper_normalized_max == pytest.approx(2.0 / np.log(np.log(r[ok])).min() ** 0.2)
    assert np.all(np.diff(rep.running_max) >= 0) and rep.running_max[0] < rep.running_max[1]
    assert rep.big_volume[1.5] == pytest.approx(1 / 3)  # r^{2/kappa} = r^{d_f}
    assert rep.small_volume[1.5] == pytest.approx(1 / 3)
    assert set(rep.to_dict()) >= {"r_grid", "running_max"}


def test_tails_from_given_lengths():
    x = (8, 0)
    s = 8 ** kappa
    lengths = np.array([3, 5, 8, 12, 20, 40, 80, 150, 300, 600])
    lam = [1.5, 2, 4, 8]
    short = short_path_tail(x, lam, 0, lengths=lengths)
    assert short.counts == [int((lengths < s / l).sum()) for l in lam]
    long_ = long_path_tail(x, lam, 0, lengths=lengths)
    assert long_.counts == [int((lengths >= l * s).sum()) for l in lam]
    assert short.monotone() and long_.monotone()
    assert all(lo <= p <= hi for p, (lo, hi) in zip(long_.probabilities, long_.intervals))


def test_tails_sampled_are_monotone():
    est = long_path_tail((4, 0), [1, 2, 4, 8], 300, master_seed=2, L_out=64)
    assert est.monotone() and est.n == 300
    assert all(a >= b for a, b in zip(est.counts, est.counts[1:]))


def test_zero_power_displacement_is_one():
    a, b = displacement_experiment(p=0.0, L=6, margin=2, realizations_count=3, walks_per=2,
                                   checkpoints=[4, 8, 16, 32])
    assert np.allclose(a.means, 1.0) and np.allclose(b.means, 1.0)
    assert a.exponent == 0.0 and b.exponent == 0.0


def test_path_graph_pipeline():
    # one-dimensional sanity run: return probability ~ n^{-1/2}, volume ~ r
    t = centered_path(2100)
    prof = heat_kernel_exact(t, (0, 0), 2048)
    n = np.array([64, 128, 256, 512, 1024, 2048])
    f = fit_power_law(zip(n, prof.on_diagonal[n]))
    assert -f.slope == pytest.approx(0.5, abs=0.01)
    r = np.array([4, 8, 16, 32, 64])
    vol = volume_profile(t, r)
    assert vol.tolist() == (2 * (2 * r + 1)).tolist()
    assert fit_power_law(zip(r, vol)).slope == pytest.approx(1.0, abs=0.05)
    assert volume_radius_grid(96)[-1] <= 96


def test_lerw_growth_small():
    res = lerw_growth_experiment([2, 4, 8, 16], 60, master_seed=1)
    assert np.all(np.diff(res.means) > 0)
    assert 0.8 < res.exponent < 1.7
