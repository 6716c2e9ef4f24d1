"""Intrinsic geometry of a sampled tree: geodesics, balls, depths, resistance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numba
import numpy as np

from ustlab.constants import d_f, kappa
from ustlab.errors import (
    InconclusiveError,
    UndefinedResistanceError,
    UnsupportedConventionError,
)
from ustlab.tree import SpanningTree
from ustlab.walk import LoopErasedPath


@numba.njit(cache=True)
def _ball_bfs(indptr, indices, start, radius):
    """Truncated BFS on a tree; returns (nodes, pred, dist) in BFS order."""
    cap = 64
    nodes = np.empty(cap, np.int64)
    pred = np.empty(cap, np.int64)
    dist = np.empty(cap, np.int64)
    nodes[0] = start
    pred[0] = -1
    dist[0] = 0
    head = 0
    tail = 1
    while head < tail:
        v = nodes[head]
        pv = pred[head]
        dv = dist[head]
        head += 1
        if dv >= radius:
            continue
        for k in range(indptr[v], indptr[v + 1]):
            w = indices[k]
            if w == pv:
                continue
            if tail == cap:
                cap *= 2
                n2 = np.empty(cap, np.int64)
                p2 = np.empty(cap, np.int64)
                d2 = np.empty(cap, np.int64)
                n2[:tail] = nodes[:tail]
                p2[:tail] = pred[:tail]
                d2[:tail] = dist[:tail]
                nodes, pred, dist = n2, p2, d2
            nodes[tail] = w
            pred[tail] = v
            dist[tail] = dv + 1
            tail += 1
    return nodes[:tail], pred[:tail], dist[:tail]


@numba.njit(cache=True)
def _pred_pos(nodes, pred):
    """Position of each node's predecessor in the BFS arrays."""
    n = nodes.shape[0]
    pos = np.full(n, -1, np.int64)
    # BFS order: predecessor always appears earlier; map via sorted lookup
    order = np.argsort(nodes)
    sn = nodes[order]
    for i in range(1, n):
        j = np.searchsorted(sn, pred[i])
        pos[i] = order[j]
    return pos


@numba.njit(cache=True)
def _resistance(ppos, dist, degree_at, r):
    """Resistance from BFS index 0 to the distance-r ball sites with an
    outside neighbour, unit conductance per edge. inf if none reachable."""
    n = dist.shape[0]
    cond = np.zeros(n)  # conductance from node down to ground; inf = grounded
    for i in range(n - 1, -1, -1):
        if dist[i] > r:
            continue
        if dist[i] == r:
            if degree_at[i] > (1 if i > 0 else 0):
                cond[i] = np.inf
            else:
                cond[i] = 0.0
        if i == 0:
            break
        c = cond[i]
        if c == np.inf:
            contrib = 1.0
        elif c == 0.0:
            contrib = 0.0
        else:
            contrib = c / (1.0 + c)
        cond[ppos[i]] += contrib
    c0 = cond[0]
    if c0 == np.inf:
        return 0.0
    if c0 == 0.0:
        return np.inf
    return 1.0 / c0


@dataclass(frozen=True)
class BallSummary:
    center: object
    radius: int
    nodes: np.ndarray
    dist: np.ndarray
    volume: int
    extrinsic_radius: int
    touches_exterior: bool  # contains the wired root or a window-boundary site
    tree: SpanningTree

    @property
    def members(self) -> frozenset:
        return frozenset(self.tree.site(int(v)) for v in self.nodes)

    @property
    def boundary(self) -> frozenset:
        return frozenset(self.tree.site(int(v)) for v in self.nodes[self.dist == self.radius])

    def __len__(self):
        return int(self.nodes.shape[0])


def _bfs(u: SpanningTree, x, r):
    return _ball_bfs(u.indptr, u.indices, u.node(x), int(r))


def path_between(u: SpanningTree, x, y) -> LoopErasedPath:
    """The tree geodesic from ``x`` to ``y``, by climbing parent pointers."""
    return LoopErasedPath(tuple(u.site(int(v)) for v in geodesic_nodes(u, x, y)))


def geodesic_nodes(u: SpanningTree, x, y) -> np.ndarray:
    a, b = u.node(x), u.node(y)
    depth, parent = u.depth, u.parent
    left, right = [a], [b]
    while depth[a] > depth[b]:
        a = int(parent[a])
        left.append(a)
    while depth[b] > depth[a]:
        b = int(parent[b])
        right.append(b)
    while a != b:
        a = int(parent[a])
        b = int(parent[b])
        left.append(a)
        right.append(b)
    return np.array(left + right[-2::-1], dtype=np.int64)


def intrinsic_dist(u: SpanningTree, x, y) -> int:
    a, b = u.node(x), u.node(y)
    depth, parent = u.depth, u.parent
    d = 0
    while depth[a] > depth[b]:
        a = parent[a]
        d += 1
    while depth[b] > depth[a]:
        b = parent[b]
        d += 1
    while a != b:
        a = parent[a]
        b = parent[b]
        d += 2
    return d


def schramm_dist(u: SpanningTree, x, y) -> int:
    """d_inf-diameter of the geodesic: the larger per-axis coordinate range.

    Only lattice vertices count; a wired root on the geodesic is skipped.
    """
    g = geodesic_nodes(u, x, y)
    g = g[u.lattice[g]]
    c = u.coords[g]
    span = c.max(axis=0) - c.min(axis=0)
    return int(span.max())


def ball(u: SpanningTree, x, r: int) -> BallSummary:
    nodes, _, dist = _bfs(u, x, r)
    lat = u.lattice[nodes]
    c0 = u.coords[u.node(x)]
    c = u.coords[nodes[lat]]
    ext = int(np.abs(c - c0).max()) if c.shape[0] else 0
    touches = not lat.all()
    w = getattr(u, "window", None)
    if w is not None and c.shape[0]:
        touches = touches or bool(np.abs(c).max() >= w.L_out)
    return BallSummary(
        center=u.site(u.node(x)),
        radius=int(r),
        nodes=nodes,
        dist=dist,
        volume=int(u.degree[nodes].sum()),
        extrinsic_radius=ext,
        touches_exterior=touches,
        tree=u,
    )


def component_depth(u: SpanningTree, x) -> int:
    """dep(A_x): height of the subtree hanging below ``x`` (root side excluded)."""
    w = getattr(u, "window", None)
    if w is None or not w.wired or u.root != w.n_sites:
        raise UnsupportedConventionError("component depth needs a wired realization rooted at the wired root")
    v = u.node(x)
    # BFS away from the root: the parent plays the role of the excluded predecessor
    nodes, pred, dist = _subtree_bfs(u.indptr, u.indices, v, int(u.parent[v]))
    return int(dist.max())


@numba.njit(cache=True)
def _subtree_bfs(indptr, indices, start, excluded):
    n_max = indptr.shape[0] - 1
    nodes = np.empty(n_max, np.int64)
    pred = np.empty(n_max, np.int64)
    dist = np.empty(n_max, np.int64)
    nodes[0] = start
    pred[0] = excluded
    dist[0] = 0
    head = 0
    tail = 1
    while head < tail:
        v = nodes[head]
        pv = pred[head]
        head += 1
        for k in range(indptr[v], indptr[v + 1]):
            w = indices[k]
            if w != pv:
                nodes[tail] = w
                pred[tail] = v
                dist[tail] = dist[head - 1] + 1
                tail += 1
    return nodes[:tail], pred[:tail], dist[:tail]


def descendants(u: SpanningTree, x) -> np.ndarray:
    """Vertex set of A_x (x together with everything whose root path crosses x)."""
    v = u.node(x)
    nodes, _, _ = _subtree_bfs(u.indptr, u.indices, v, int(u.parent[v]))
    return nodes


def effective_resistance(u: SpanningTree, x, r: int, exact: bool = False):
    """Resistance from ``x`` to the shorted exterior of ``B_U(x, r)``.

    The ball's sites at distance exactly ``r`` that have a tree neighbour
    outside the ball are grounded. Returns a float, or a Fraction when
    ``exact`` is set.
    """
    nodes, pred, dist = _bfs(u, x, r + 1)
    ppos = _pred_pos(nodes, pred)
    deg = u.degree[nodes]
    if exact:
        return _resistance_exact(ppos, dist, deg, r)
    res = _resistance(ppos, dist, deg, int(r))
    if math.isinf(res):
        raise UndefinedResistanceError(f"B_U({u.site(u.node(x))}, {r}) has no exterior")
    return res


def _resistance_exact(ppos, dist, deg, r) -> Fraction:
    n = dist.shape[0]
    cond = [Fraction(0)] * n
    grounded = [False] * n
    for i in range(n - 1, -1, -1):
        if dist[i] > r:
            continue
        if dist[i] == r and deg[i] > (1 if i > 0 else 0):
            grounded[i] = True
        if i == 0:
            break
        if grounded[i]:
            cond[ppos[i]] += 1
        elif cond[i] != 0:
            c = cond[i]
            cond[ppos[i]] += c / (1 + c)
    if grounded[0]:
        return Fraction(0)
    if cond[0] == 0:
        raise UndefinedResistanceError("ball has no exterior")
    return 1 / cond[0]


def resistance_profile(u: SpanningTree, x, r_values) -> np.ndarray:
    """Effective resistance for several radii from one BFS (inf where undefined)."""
    r_values = np.asarray(r_values, dtype=np.int64)
    nodes, pred, dist = _bfs(u, x, int(r_values.max()) + 1)
    ppos = _pred_pos(nodes, pred)
    deg = u.degree[nodes]
    return np.array([_resistance(ppos, dist, deg, int(r)) for r in r_values])


def check_regular(u: SpanningTree, region, lam: float, r1: float, r2: float):
    """(lam, r1, r2)-regularity of a site set; returns (ok, violating pair or None).

    All clauses whose condition applies are enforced, so the boundary cases
    d^S in {r1, r2} must satisfy both neighbouring clauses.
    """
    if not (1 <= r1 <= r2) or lam <= 1:
        raise ValueError("need 1 <= r1 <= r2 and lam > 1")
    region = list(region)
    for i in range(len(region)):
        for j in range(i + 1, len(region)):
            x, y = region[i], region[j]
            du = intrinsic_dist(u, x, y)
            ds = schramm_dist(u, x, y)
            if r1 <= ds <= r2 and not (ds ** kappa / lam <= du <= lam * ds ** kappa):
                return False, (x, y)
            if ds <= r1 and not du <= lam * r1 ** kappa:
                return False, (x, y)
            if ds >= r2 and not du >= r2 ** kappa / lam:
                return False, (x, y)
    return True, None


@dataclass(frozen=True)
class _RadiusProfile:
    """Per-radius volume, extent and resistance around one centre."""

    radii: np.ndarray
    volume: np.ndarray
    extent: np.ndarray
    resistance: np.ndarray
    touches: np.ndarray


def _radius_profile(u: SpanningTree, x, radii) -> _RadiusProfile:
    radii = np.asarray(radii, dtype=np.int64)
    rmax = int(radii.max())
    nodes, pred, dist = _bfs(u, x, rmax + 1)
    ppos = _pred_pos(nodes, pred)
    deg = u.degree[nodes]
    c0 = u.coords[u.node(x)]
    lat = u.lattice[nodes]
    ext = np.where(lat, np.abs(u.coords[nodes] - c0).max(axis=1), 0.0)
    w = getattr(u, "window", None)
    at_edge = ~lat
    if w is not None:
        at_edge = at_edge | (lat & (np.abs(u.coords[nodes]).max(axis=1) >= w.L_out))
    vol_by_d = np.bincount(dist, weights=deg, minlength=rmax + 2)
    ext_by_d = np.zeros(rmax + 2)
    np.maximum.at(ext_by_d, dist, ext)
    edge_by_d = np.zeros(rmax + 2, bool)
    np.logical_or.at(edge_by_d, dist, at_edge)
    vol = np.cumsum(vol_by_d)[radii]
    extent = np.maximum.accumulate(ext_by_d)[radii]
    touches = np.logical_or.accumulate(edge_by_d)[radii]
    res = np.array([_resistance(ppos, dist, deg, int(r)) for r in radii])
    return _RadiusProfile(radii, vol, extent, res, touches)


def _good_clauses(prof: _RadiusProfile, lam: float, w_half: float | None, cx=0.0, cy=0.0):
    r = prof.radii.astype(float)
    vol_ok = (prof.volume >= r ** d_f / lam) & (prof.volume <= lam * r ** d_f)
    res_ok = prof.resistance >= r / lam * (1 - 1e-12)  # ties are exact in rationals
    box = lam * r ** (1 / kappa)
    cont_ok = prof.extent <= box
    if w_half is not None:
        too_big = (np.maximum(abs(cx), abs(cy)) + box > w_half) & prof.touches
        undecided = too_big & cont_ok
    else:
        undecided = np.zeros_like(cont_ok)
    return vol_ok & res_ok & cont_ok, undecided


def check_good_ball(u: SpanningTree, x, r: int, lam: float) -> bool:
    """lam-goodness of B_U(x, r): volume sandwich, resistance floor, containment.

    Raises InconclusiveError when the box ``B_inf(x, lam r^{1/kappa})`` leaves
    the window while the ball itself reaches the window edge.
    """
    prof = _radius_profile(u, x, [int(r)])
    w = getattr(u, "window", None)
    cx, cy = u.coords[u.node(x)]
    good, undecided = _good_clauses(prof, lam, w.L_out if w else None, cx, cy)
    if undecided[0]:
        raise InconclusiveError(f"containment of B_U({u.site(u.node(x))}, {r}) undecidable in this window")
    return bool(good[0])


def f1_radius_range(lam: float, n: int) -> np.ndarray:
    lo = math.exp(-lam ** (1 / 40)) * n ** kappa
    hi = n ** kappa
    return np.arange(max(1, math.ceil(lo)), math.floor(hi) + 1, dtype=np.int64)


def check_F1(u: SpanningTree, lam: float, n: int):
    """F_1(lam, n): every B_U(x, r), x in B_inf(0, n), r in the prescribed
    range, is lam-good. Returns (ok, first failing (x, r) or None)."""
    radii = f1_radius_range(lam, n)
    if radii.size == 0:
        return True, None
    w = getattr(u, "window", None)
    for yy in range(-n, n + 1):
        for xx in range(-n, n + 1):
            prof = _radius_profile(u, (xx, yy), radii)
            good, undecided = _good_clauses(prof, lam, w.L_out if w else None, xx, yy)
            if undecided.any():
                r = int(radii[np.argmax(undecided)])
                raise InconclusiveError(f"containment of B_U(({xx}, {yy}), {r}) undecidable in this window")
            if not good.all():
                return False, ((xx, yy), int(radii[np.argmin(good)]))
    return True, None
