"""Quenched heat kernels, walk trajectories and stopping times on a tree."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from ustlab.constants import d_w
from ustlab.errors import CapacityError, CappedRunError, UndefinedResistanceError
from ustlab.rng import as_generator
from ustlab.tree import SpanningTree
from ustlab.treemetrics import _ball_bfs

HORIZON_CAP = 1 << 16


@numba.njit(cache=True)
def _local_csr(nodes, indptr, indices, n_global):
    loc = np.full(n_global, -1, np.int64)
    # caller guarantees n_global covers all node ids; a dense map is cheapest
    for i in range(nodes.shape[0]):
        loc[nodes[i]] = i
    m = nodes.shape[0]
    lp = np.zeros(m + 1, np.int64)
    for i in range(m):
        v = nodes[i]
        c = 0
        for k in range(indptr[v], indptr[v + 1]):
            if loc[indices[k]] >= 0:
                c += 1
        lp[i + 1] = lp[i] + c
    li = np.empty(lp[m], np.int64)
    for i in range(m):
        v = nodes[i]
        c = lp[i]
        for k in range(indptr[v], indptr[v + 1]):
            j = loc[indices[k]]
            if j >= 0:
                li[c] = j
                c += 1
    return lp, li, loc


@numba.njit(cache=True)
def _iterate(lp, li, inv_mu, active_upto, steps, track, dist, coords_norm, moment_mask):
    """Push the probability vector ``steps`` times from local node 0.

    Returns (P_n(0) for n = 0..steps, P_n(track) rows, leaked mass per step,
    E|X_n| and E d(0, X_n) for n = 0..steps where moment_mask[n]).
    """
    m = lp.shape[0] - 1
    P = np.zeros(m)
    Q = np.zeros(m)
    P[0] = 1.0
    diag = np.empty(steps + 1)
    tr = np.empty((steps + 1, track.shape[0]))
    leak = np.empty(steps + 1)
    mom_e = np.full(steps + 1, np.nan)
    mom_d = np.full(steps + 1, np.nan)
    diag[0] = 1.0
    for j in range(track.shape[0]):
        tr[0, j] = P[track[j]]
    leak[0] = 0.0
    mom_e[0] = coords_norm[0]
    mom_d[0] = 0.0
    for n in range(1, steps + 1):
        hi = active_upto[min(n - 1, active_upto.shape[0] - 1)]
        top = active_upto[min(n, active_upto.shape[0] - 1)]
        for i in range(top):
            Q[i] = 0.0
        for i in range(hi):
            q = P[i] * inv_mu[i]
            if q != 0.0:
                for k in range(lp[i], lp[i + 1]):
                    Q[li[k]] += q
        s = 0.0
        for i in range(top):
            P[i] = Q[i]
            s += Q[i]
        diag[n] = P[0]
        for j in range(track.shape[0]):
            tr[n, j] = P[track[j]]
        leak[n] = 1.0 - s
        if moment_mask[n]:
            a = 0.0
            b = 0.0
            for i in range(top):
                if coords_norm[i] == coords_norm[i]:
                    a += P[i] * coords_norm[i]
                b += P[i] * dist[i]
            mom_e[n] = a
            mom_d[n] = b
    return diag, tr, leak, mom_e, mom_d


@dataclass
class HeatKernelProfile:
    """Exact smoothed kernel values from one origin.

    ``on_diagonal[n]`` is p~_n(x0, x0) for n = 0..n_max; ``raw_diagonal[n]`` is
    p_n(x0, x0) for n = 0..n_max+1. ``leaked`` is the probability mass that
    left the computation ball (zero when the ball radius is at least n_max+1).
    """

    origin: tuple
    n_max: int
    raw_diagonal: np.ndarray
    on_diagonal: np.ndarray
    tracked_sites: list = field(default_factory=list)
    off_diagonal: np.ndarray | None = None  # shape (n_max+1, len(tracked_sites))
    leaked: float = 0.0
    radius: int = 0
    mean_euclid: np.ndarray | None = None
    mean_intrinsic: np.ndarray | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            if self.off_diagonal is None or not self.tracked_sites:
                wr.writerow(["n", "value"])
                for n, v in enumerate(self.on_diagonal):
                    wr.writerow([n, repr(float(v))])
            else:
                wr.writerow(["n", "dx", "dy", "value"])
                ox, oy = self.origin
                for n in range(self.n_max + 1):
                    for j, s in enumerate(self.tracked_sites):
                        wr.writerow([n, s[0] - ox, s[1] - oy, repr(float(self.off_diagonal[n, j]))])


def heat_kernel_exact(
    u: SpanningTree,
    x0,
    n_max: int,
    track=(),
    radius: int | None = None,
    moment_times=(),
    horizon_cap: int = HORIZON_CAP,
) -> HeatKernelProfile:
    """Iterate the walk's law on ``B_U(x0, radius)`` for ``n_max + 1`` steps.

    With the default radius (``n_max + 1``) nothing can leave the ball and the
    result is exact. A smaller radius kills the walk on leaving; the lost mass
    is reported in ``leaked`` and bounds the absolute error of every
    probability.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    if n_max > horizon_cap:
        raise CapacityError(f"n_max={n_max} exceeds horizon cap {horizon_cap}")
    steps = n_max + 1
    R = steps if radius is None else int(radius)
    v0 = u.node(x0)
    nodes, pred, dist = _ball_bfs(u.indptr, u.indices, v0, R)
    lp, li, loc = _local_csr(nodes, u.indptr, u.indices, u.n_nodes)
    mu = u.degree[nodes].astype(np.float64)
    if mu[0] == 0:
        raise UndefinedResistanceError("isolated origin")
    inv_mu = 1.0 / mu
    # dist is non-decreasing in BFS order: prefix length of nodes within distance k
    active_upto = np.searchsorted(dist, np.arange(R + 1), side="right").astype(np.int64)
    track = list(track)
    tloc = np.array([loc[u.node(s)] for s in track], dtype=np.int64)
    outside = tloc < 0
    if outside.any() and R < steps:
        raise ValueError("tracked sites must lie inside the truncated computation ball")
    # beyond distance R >= steps the walk cannot arrive: exact zeros
    tloc[outside] = 0
    c0 = u.coords[v0]
    lat = u.lattice[nodes]
    norm = np.where(lat, np.sqrt(((u.coords[nodes] - c0) ** 2).sum(axis=1)), np.nan)
    mask = np.zeros(steps + 1, np.bool_)
    for t in moment_times:
        if 0 <= t <= steps:
            mask[int(t)] = True
    diag, tr, leak, me, md = _iterate(lp, li, inv_mu, active_upto, steps, tloc, dist.astype(np.float64), norm, mask)
    raw = diag * inv_mu[0]
    smooth = 0.5 * (raw[:-1] + raw[1:])
    off = None
    if track:
        pt = tr * inv_mu[tloc][None, :]
        pt[:, outside] = 0.0
        off = 0.5 * (pt[:-1] + pt[1:])
    return HeatKernelProfile(
        origin=u.site(v0),
        n_max=n_max,
        raw_diagonal=raw,
        on_diagonal=smooth,
        tracked_sites=[u.site(u.node(s)) for s in track],
        off_diagonal=off,
        leaked=float(max(leak.max(), 0.0)),
        radius=R,
        mean_euclid=me if mask.any() else None,
        mean_intrinsic=md if mask.any() else None,
    )


def transition_probabilities(u: SpanningTree, x0, n: int) -> dict:
    """Exact P_{x0}(X_n = y) for every reachable y (small trees / tests)."""
    v0 = u.node(x0)
    nodes, _, dist = _ball_bfs(u.indptr, u.indices, v0, n + 1)
    lp, li, loc = _local_csr(nodes, u.indptr, u.indices, u.n_nodes)
    inv_mu = 1.0 / u.degree[nodes].astype(np.float64)
    P = np.zeros(nodes.shape[0])
    P[0] = 1.0
    for _ in range(n):
        Q = np.zeros_like(P)
        for i in range(P.shape[0]):
            if P[i]:
                Q[li[lp[i]:lp[i + 1]]] += P[i] * inv_mu[i]
        P = Q
    return {int(nodes[i]): float(P[i]) for i in range(P.shape[0]) if P[i] > 0}


@numba.njit(cache=True)
def _walk_checkpoints(indptr, indices, x0, checkpoints, rng, cx, cy, lattice):
    """One trajectory; at each checkpoint record |X_t|, d_U(x0, X_t) and
    running max |X_s|. The geodesic back to x0 is kept as a stack."""
    T = checkpoints[-1]
    k = checkpoints.shape[0]
    out_e = np.empty(k)
    out_d = np.empty(k, np.int64)
    out_m = np.empty(k)
    out_site = np.empty(k, np.int64)
    stack = np.empty(T + 1, np.int64)
    stack[0] = x0
    top = 0
    v = x0
    runmax = 0.0
    j = 0
    while j < k and checkpoints[j] == 0:
        out_e[j] = 0.0
        out_d[j] = 0
        out_m[j] = 0.0
        out_site[j] = x0
        j += 1
    for t in range(1, T + 1):
        deg = indptr[v + 1] - indptr[v]
        w = indices[indptr[v] + rng.integers(0, deg)]
        if top > 0 and stack[top - 1] == w:
            top -= 1
        else:
            top += 1
            stack[top] = w
        v = w
        if lattice[v]:
            e = np.sqrt((cx[v] - cx[x0]) ** 2 + (cy[v] - cy[x0]) ** 2)
        else:
            e = np.nan
        if e == e and e > runmax:
            runmax = e
        while j < k and checkpoints[j] == t:
            out_e[j] = e
            out_d[j] = top
            out_m[j] = runmax
            out_site[j] = v
            j += 1
    return out_e, out_d, out_m, out_site


@dataclass(frozen=True)
class TrajectorySummary:
    final_site: object
    euclid: float
    intrinsic: int
    max_euclid: float


def srw_sample(u: SpanningTree, x0, n: int, rng) -> TrajectorySummary:
    """One n-step walk on the tree from x0, summarised."""
    e, d, m, s = srw_checkpoints(u, x0, [n], rng)
    return TrajectorySummary(u.site(int(s[0])), float(e[0]), int(d[0]), float(m[0]))


def srw_checkpoints(u: SpanningTree, x0, checkpoints, rng):
    """Arrays (|X_t|, d_U(x0, X_t), max_{s<=t}|X_s|, X_t node) at sorted times."""
    cp = np.asarray(sorted(int(t) for t in checkpoints), dtype=np.int64)
    if cp.size == 0 or cp[0] < 0:
        raise ValueError("checkpoints must be nonnegative")
    return _walk_checkpoints(
        u.indptr, u.indices, u.node(x0), cp, as_generator(rng),
        u.coords[:, 0].copy(), u.coords[:, 1].copy(), u.lattice,
    )


@numba.njit(cache=True)
def _exit_time(indptr, indices, x, r, rng, cap):
    if r <= 0:
        return 0
    stack = np.empty(r + 2, np.int64)
    stack[0] = x
    top = 0
    v = x
    t = 0
    while top < r:
        if t >= cap:
            return -1
        deg = indptr[v + 1] - indptr[v]
        w = indices[indptr[v] + rng.integers(0, deg)]
        if top > 0 and stack[top - 1] == w:
            top -= 1
        else:
            top += 1
            stack[top] = w
        v = w
        t += 1
    return t


@numba.njit(cache=True)
def _hit_time(indptr, indices, s, x, rng, cap):
    v = s
    t = 0
    while v != x:
        if t >= cap:
            return -1
        deg = indptr[v + 1] - indptr[v]
        v = indices[indptr[v] + rng.integers(0, deg)]
        t += 1
    return t


def exit_time(u: SpanningTree, x, r: int, rng, cap: int = 10**9) -> int:
    """sigma_{x,r}: first time the walk from x is at intrinsic distance r."""
    t = _exit_time(u.indptr, u.indices, u.node(x), int(r), as_generator(rng), int(cap))
    if t < 0:
        raise CappedRunError(f"exit time from B_U({x}, {r}) exceeded cap {cap}")
    return int(t)


def hitting_time(u: SpanningTree, start, x, rng, cap: int = 10**9) -> int:
    """T_x for the walk started at ``start``."""
    t = _hit_time(u.indptr, u.indices, u.node(start), u.node(x), as_generator(rng), int(cap))
    if t < 0:
        raise CappedRunError(f"hitting time of {x} exceeded cap {cap}")
    return int(t)


def phi(t: float, r: float) -> float:
    """(r^{d_w} / t)^{1/(d_w - 1)}."""
    if t <= 0 or r <= 0:
        raise ValueError("t and r must be positive")
    return (r ** d_w / t) ** (1.0 / (d_w - 1.0))
