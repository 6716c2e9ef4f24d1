"""Property-based checks over random inputs."""

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ustlab import RngStream, Window
from ustlab.harness import ExperimentSpec, realization_from_bytes, snapshot_bytes
from ustlab.kernel import heat_kernel_exact, transition_probabilities
from ustlab.stats import fit_power_law, wilson_interval
from ustlab.treemetrics import effective_resistance, intrinsic_dist, schramm_dist
from ustlab.walk import STEPS, WalkPath, loop_erase
from ustlab.wilson import sample_ust

seeds = st.integers(0, 2**32 - 1)
small_windows = st.tuples(st.integers(1, 6), st.integers(0, 3), st.sampled_from(["wired", "free"])).map(
    lambda t: Window(t[0], t[0] + t[1], t[2]))


@st.composite
def lattice_walks(draw):
    steps = draw(st.lists(st.integers(0, 3), min_size=0, max_size=300))
    x, y = draw(st.integers(-5, 5)), draw(st.integers(-5, 5))
    sites = [(x, y)]
    for d in steps:
        x, y = x + STEPS[d][0], y + STEPS[d][1]
        sites.append((x, y))
    return sites


@given(lattice_walks())
def test_loop_erasure_properties(sites):
    le = loop_erase(WalkPath(tuple(sites))).sites
    assert le[0] == sites[0] and le[-1] == sites[-1]
    assert len(set(le)) == len(le)
    assert set(le) <= set(sites)
    assert all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 for a, b in zip(le, le[1:]))
    assert loop_erase(WalkPath(le)).sites == le


@given(small_windows)
def test_window_index_round_trip(w):
    for i in range(w.n_nodes):
        assert w.index(w.site(i)) == i
    assert w.n_sites == w.side ** 2


@given(seeds, st.integers(0, 1000))
def test_rng_streams_reproducible(seed, i):
    a = RngStream(seed, i).generator.integers(0, 2**62, 4)
    b = RngStream(seed, i).generator.integers(0, 2**62, 4)
    c = RngStream(seed, i + 1).generator.integers(0, 2**62, 4)
    assert (a == b).all() and not (a == c).all()


@given(st.integers(1, 2000), st.data())
def test_wilson_interval_properties(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1
    lo4, hi4 = wilson_interval(4 * k, 4 * n)
    assert hi4 - lo4 < hi - lo + 1e-12


@given(small_windows, seeds, st.sampled_from(["lexicographic", "random", "adaptive-spiral"]))
def test_sampled_trees_valid_and_snapshot_round_trip(w, seed, ordering):
    u = sample_ust(w, ordering, RngStream(seed, 0))
    assert u.is_valid()
    assert len(u.edges()) == u.n_nodes - 1
    v = realization_from_bytes(snapshot_bytes(u))
    assert np.array_equal(u.parent, v.parent)


@given(seeds, st.data())
def test_tree_metric_axioms(seed, data):
    u = sample_ust(Window(4, 5), rng=RngStream(seed, 1))
    pick = st.tuples(st.integers(-5, 5), st.integers(-5, 5))
    a, b, c = data.draw(pick), data.draw(pick), data.draw(pick)
    dab, dbc, dac = intrinsic_dist(u, a, b), intrinsic_dist(u, b, c), intrinsic_dist(u, a, c)
    assert dab == intrinsic_dist(u, b, a)
    assert dac <= dab + dbc
    assert (dab == 0) == (a == b)
    assert schramm_dist(u, a, b) == schramm_dist(u, b, a) >= max(abs(a[0] - b[0]), abs(a[1] - b[1]))


@given(seeds, st.integers(1, 8))
def test_resistance_bounds(seed, r):
    u = sample_ust(Window(6, 10), rng=RngStream(seed, 2))
    R = effective_resistance(u, (0, 0), r)
    assert 0 < R <= r


@given(seeds, st.integers(0, 30))
def test_kernel_mass_and_symmetry(seed, n):
    u = sample_ust(Window(3, 4), rng=RngStream(seed, 3))
    tp = transition_probabilities(u, (0, 0), n)
    assert math.isclose(sum(tp.values()), 1.0, rel_tol=1e-12)
    a = heat_kernel_exact(u, (0, 0), n, track=[(2, -1)])
    b = heat_kernel_exact(u, (2, -1), n, track=[(0, 0)])
    assert np.allclose(a.off_diagonal, b.off_diagonal, atol=1e-14)


@given(st.floats(-3, 3), st.floats(0.1, 10), st.integers(3, 10))
def test_power_law_recovers_exponent(alpha, c, npts):
    x = np.geomspace(2, 2 ** 10, npts)
    f = fit_power_law(zip(x, c * x ** alpha))
    assert f.slope == pytest.approx(alpha, abs=1e-9)


specs = st.builds(
    ExperimentSpec,
    kind=st.just("volume"),
    replicates=st.integers(1, 10**6),
    master_seed=st.integers(0, 2**63 - 1),
    L=st.integers(1, 512),
    margin=st.floats(1, 8),
    boundary=st.sampled_from(["wired", "free"]),
    r_grid=st.lists(st.integers(1, 10**4), min_size=1, max_size=8),
    params=st.dictionaries(st.text("abcdef", min_size=1, max_size=5), st.integers(-5, 5) | st.text(max_size=5)),
)


@given(specs)
def test_spec_serialization_round_trip(spec):
    assume(spec.L * spec.margin < 10**5)
    assert ExperimentSpec.from_json(spec.to_json()) == spec
    again = ExperimentSpec.from_toml(spec.to_toml())
    assert again == spec and again.spec_hash == spec.spec_hash
