import csv

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import centered_path, path_tree
from ustlab import RngStream, Window
from ustlab.constants import d_w
from ustlab.errors import CapacityError, CappedRunError
from ustlab.kernel import (exit_time, heat_kernel_exact, hitting_time, phi, srw_checkpoints, srw_sample,
                           transition_probabilities)
from ustlab.treemetrics import intrinsic_dist
from ustlab.wilson import sample_ust


def dense_P(u):
    A = np.zeros((u.n_nodes, u.n_nodes))
    for a, b in u.edges().tolist():
        A[a, b] += 1
        A[b, a] += 1
    return A / A.sum(axis=1, keepdims=True)


@pytest.fixture(scope="module")
def tree5():
    return sample_ust(Window(5, 5), rng=RngStream(11, 0))


def test_single_edge():
    t = path_tree(2)
    prof = heat_kernel_exact(t, (0, 0), 6, track=[(1, 0)])
    assert np.allclose(prof.raw_diagonal, [1, 0, 1, 0, 1, 0, 1, 0])
    assert np.allclose(prof.on_diagonal, 0.5)
    assert np.allclose(prof.off_diagonal, 0.5)
    assert prof.leaked == 0.0


def test_matches_matrix_powers(tree5):
    u = tree5
    P = dense_P(u)
    mu = u.degree.astype(float)
    x, ys = u.node((1, -2)), [(1, -2), (0, 0), (3, 1), (-4, 4)]
    prof = heat_kernel_exact(u, x, 40, track=ys)
    Pn = np.eye(u.n_nodes)
    raw = []
    rawt = []
    for n in range(42):
        raw.append(Pn[x, x] / mu[x])
        rawt.append([Pn[x, u.node(y)] / mu[u.node(y)] for y in ys])
        Pn = Pn @ P
    raw, rawt = np.array(raw), np.array(rawt)
    assert np.allclose(prof.raw_diagonal, raw, atol=1e-13)
    assert np.allclose(prof.on_diagonal, 0.5 * (raw[:-1] + raw[1:]), atol=1e-13)
    assert np.allclose(prof.off_diagonal, 0.5 * (rawt[:-1] + rawt[1:]), atol=1e-13)
    tp = transition_probabilities(u, x, 17)
    Pn = np.linalg.matrix_power(P, 17)
    assert sum(tp.values()) == pytest.approx(1.0)
    for v, p in tp.items():
        assert p == pytest.approx(Pn[x, v], abs=1e-13)


def test_reversibility_and_parity(tree5):
    u = tree5
    a, b = (2, 2), (-3, 0)
    pa = heat_kernel_exact(u, a, 60, track=[b])
    pb = heat_kernel_exact(u, b, 60, track=[a])
    assert np.allclose(pa.off_diagonal[:, 0], pb.off_diagonal[:, 0], atol=1e-14)
    # bipartite: odd return times are impossible, and p_n(a,b)=0 when parities disagree
    assert np.all(pa.raw_diagonal[1::2] == 0)
    d = intrinsic_dist(u, a, b)
    raw_ab = pa.off_diagonal  # smoothed; check the raw law instead
    tp = transition_probabilities(u, a, d + 1)
    assert u.node(b) not in tp
    assert raw_ab.shape == (61, 1)


def test_even_returns_nonincreasing(tree5):
    prof = heat_kernel_exact(tree5, (0, 0), 200)
    even = prof.raw_diagonal[::2]
    assert np.all(np.diff(even) <= 1e-15)
    assert np.all(prof.on_diagonal > 0)


def test_truncated_ball_error_bounded_by_leak():
    u = sample_ust(Window(8, 8), rng=RngStream(11, 1))
    full = heat_kernel_exact(u, (0, 0), 120)
    cut = heat_kernel_exact(u, (0, 0), 120, radius=15)
    assert full.leaked == pytest.approx(0.0, abs=1e-12)
    assert cut.leaked > 0
    assert np.all(np.abs(full.raw_diagonal - cut.raw_diagonal) * u.degree[u.node((0, 0))] <= cut.leaked + 1e-15)
    with pytest.raises(ValueError):
        heat_kernel_exact(u, (0, 0), 120, radius=3, track=[(8, 8)])


def test_far_tracked_site_is_exact_zero():
    t = centered_path(50)
    prof = heat_kernel_exact(t, (0, 0), 10, track=[(40, 0), (3, 0)])
    assert np.all(prof.off_diagonal[:, 0] == 0)
    assert prof.off_diagonal[:, 1].max() > 0


def test_moments_match_law(tree5):
    u = tree5
    prof = heat_kernel_exact(u, (0, 0), 20, moment_times=[7, 12])
    tp = transition_probabilities(u, (0, 0), 12)
    want = sum(p * intrinsic_dist(u, (0, 0), v) for v, p in tp.items())
    assert prof.mean_intrinsic[12] == pytest.approx(want)
    assert np.isnan(prof.mean_intrinsic[5])


def test_srw_sample_law(tree5):
    u = tree5
    n = 9
    tp = transition_probabilities(u, (0, 0), n)
    keys = sorted(tp)
    gen = np.random.default_rng(7)
    counts = dict.fromkeys(keys, 0)
    for _ in range(6000):
        s = srw_sample(u, (0, 0), n, gen)
        v = u.node(s.final_site)
        counts[v] += 1
        assert s.intrinsic == intrinsic_dist(u, (0, 0), v)
        assert s.max_euclid >= (s.euclid if s.euclid == s.euclid else 0)
    exp = np.array([tp[k] for k in keys]) * 6000
    obs = np.array([counts[k] for k in keys])
    big = exp >= 5
    obs_b = np.append(obs[big], obs[~big].sum())
    exp_b = np.append(exp[big], exp[~big].sum())
    if exp_b[-1] == 0:
        obs_b, exp_b = obs_b[:-1], exp_b[:-1]
    assert chisquare(obs_b, exp_b * obs_b.sum() / exp_b.sum()).pvalue > 1e-3


def test_checkpoints_are_consistent():
    t = centered_path(100)
    e, d, m, s = srw_checkpoints(t, (0, 0), [0, 5, 50, 400], RngStream(1, 2))
    assert e[0] == 0 and d[0] == 0
    assert np.all(np.diff(m) >= 0)
    # on a straight path the intrinsic and Euclidean displacements agree
    assert np.allclose(e, d)
    with pytest.raises(ValueError):
        srw_checkpoints(t, (0, 0), [-1], 0)


def test_exit_time_on_path_mean_is_r_squared():
    t = centered_path(60)
    gen = np.random.default_rng(3)
    for r in (5, 12):
        ts = [exit_time(t, (0, 0), r, gen) for _ in range(4000)]
        assert np.mean(ts) == pytest.approx(r * r, rel=0.05)
        assert min(ts) >= r and all((v - r) % 2 == 0 for v in ts)
    assert exit_time(t, (0, 0), 0, gen) == 0


def test_hitting_time_and_cap():
    t = centered_path(20)
    gen = np.random.default_rng(4)
    assert hitting_time(t, (3, 0), (3, 0), gen) == 0
    assert hitting_time(t, (0, 0), (1, 0), gen) % 2 == 1
    with pytest.raises(CappedRunError):
        hitting_time(t, (-20, 0), (20, 0), gen, cap=10)
    with pytest.raises(CappedRunError):
        exit_time(t, (0, 0), 15, gen, cap=5)


def test_phi():
    assert phi(1.0, 1.0) == 1.0
    assert phi(2.0, 3.0) == pytest.approx((3 ** d_w / 2) ** (1 / (d_w - 1)))
    assert phi(10.0, 2.0) > phi(20.0, 2.0)
    with pytest.raises(ValueError):
        phi(0, 1)


def test_csv_export(tmp_path, tree5):
    prof = heat_kernel_exact(tree5, (0, 0), 5)
    p = tmp_path / "k.csv"
    prof.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["n", "value"] and len(rows) == 7
    assert [float(r[1]) for r in rows[1:]] == prof.on_diagonal.tolist()
    prof2 = heat_kernel_exact(tree5, (0, 0), 5, track=[(1, 0), (0, 1)])
    prof2.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["n", "dx", "dy", "value"] and len(rows) == 1 + 6 * 2


def test_capacity_and_validation(tree5):
    with pytest.raises(CapacityError):
        heat_kernel_exact(tree5, (0, 0), 10, horizon_cap=5)
    with pytest.raises(ValueError):
        heat_kernel_exact(tree5, (0, 0), -1)
