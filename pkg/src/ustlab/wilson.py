"""Wilson's algorithm on lattice windows, staged runs and dual trees."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ustlab.errors import CappedRunError, DomainError, ValidationError
from ustlab.lattice import WIRED_ROOT, Site, Window
from ustlab.rng import RngStream, as_generator
from ustlab.tree import SpanningTree
from ustlab.walk import LoopErasedPath, default_step_cap

ORDERINGS = ("lexicographic", "random", "adaptive-spiral")

# direction codes: 0 +x, 1 -x, 2 +y, 3 -y
_DX = np.array([1, -1, 0, 0], np.int64)
_DY = np.array([0, 0, 1, -1], np.int64)
_TWO62 = 4611686018427387904


@numba.njit(cache=True, inline="always")
def _step(u, side, nsites, wired, rng, buf, left):
    """One SRW step on the window graph.

    ``buf``/``left`` carry unused direction bits (31 two-bit draws per
    64-bit integer). Returns (next vertex, direction code, buf, left).
    Leaving the wired root, the code is the outward direction of the
    exterior edge that was used.
    """
    if wired and u == nsites:
        e = rng.integers(0, 4 * side)
        k = e // side
        p = e % side
        if k == 0:
            return p * side + (side - 1), 0, buf, left
        elif k == 1:
            return p * side, 1, buf, left
        elif k == 2:
            return (side - 1) * side + p, 2, buf, left
        return p, 3, buf, left
    cy = u // side
    cx = u - cy * side
    while True:
        if left == 0:
            buf = np.uint64(rng.integers(0, _TWO62))
            left = 31
        d = np.int64(buf & np.uint64(3))
        buf = buf >> np.uint64(2)
        left -= 1
        if d == 0:
            if cx + 1 < side:
                return u + 1, d, buf, left
        elif d == 1:
            if cx > 0:
                return u - 1, d, buf, left
        elif d == 2:
            if cy + 1 < side:
                return u + side, d, buf, left
        else:
            if cy > 0:
                return u - side, d, buf, left
        if wired:
            return nsites, d, buf, left


@numba.njit(cache=True)
def _wilson(L_out, wired, order, in_tree, nxt, ndir, rng, step_cap):
    side = 2 * L_out + 1
    nsites = side * side
    buf = np.uint64(0)
    left = 0
    for s in order:
        u = s
        steps = 0
        while not in_tree[u]:
            v, d, buf, left = _step(u, side, nsites, wired, rng, buf, left)
            nxt[u] = v
            ndir[u] = d
            u = v
            steps += 1
            if steps > step_cap:
                return s
        u = s
        while not in_tree[u]:
            in_tree[u] = True
            u = nxt[u]
    return -1


@numba.njit(cache=True)
def _walk_to_tree(start, L_out, wired, in_tree, allowed, rng, step_cap):
    """Raw walk from ``start`` until it enters the tree.

    Returns (path, dirs, status): status 0 hit, 1 left ``allowed`` (aborted),
    2 step cap exceeded. ``allowed`` of length 0 means no restriction.
    """
    side = 2 * L_out + 1
    nsites = side * side
    buf = np.uint64(0)
    left = 0
    cap = 1024
    path = np.empty(cap, np.int64)
    dirs = np.empty(cap, np.int64)
    path[0] = start
    dirs[0] = -1
    n = 1
    u = start
    restrict = allowed.shape[0] > 0
    status = 0
    while True:
        # inner loop runs without reallocation checks
        lim = min(cap, step_cap + 1)
        while n < lim and not in_tree[u]:
            if restrict and not allowed[u]:
                status = 1
                break
            v, d, buf, left = _step(u, side, nsites, wired, rng, buf, left)
            path[n] = v
            dirs[n] = d
            n += 1
            u = v
        if status == 1 or in_tree[u]:
            break
        if n > step_cap:
            status = 2
            break
        cap *= 2
        p2 = np.empty(cap, np.int64)
        d2 = np.empty(cap, np.int64)
        p2[:n] = path[:n]
        d2[:n] = dirs[:n]
        path = p2
        dirs = d2
    return path[:n], dirs[:n], status

@numba.njit(cache=True)
def _loop_erase_idx(path, dirs, n_nodes):
    pos = np.full(n_nodes, -1, np.int64)
    out = np.empty(path.shape[0], np.int64)
    odir = np.empty(path.shape[0], np.int64)
    m = 0
    for i in range(path.shape[0]):
        v = path[i]
        k = pos[v]
        if k >= 0:
            for j in range(k + 1, m):
                pos[out[j]] = -1
            m = k + 1
        else:
            pos[v] = m
            out[m] = v
            odir[m] = dirs[i]
            m += 1
    return out[:m].copy(), odir[:m].copy()


@dataclass(frozen=True)
class Provenance:
    master_seed: int
    stream_index: int
    ordering: str


class UstRealization(SpanningTree):
    """A spanning tree of a window graph.

    For wired windows the root is the contracted exterior vertex (last index);
    for free windows it is the origin. ``exit_dir[v]`` records which exterior
    edge a boundary site uses when its parent is the wired root.
    """

    def __init__(self, window: Window, parent, provenance: Provenance, exit_dir=None):
        super().__init__(parent, window.coords(), window.lattice_mask())
        self.window = window
        self.provenance = provenance
        self.exit_dir = exit_dir

    def node(self, s) -> int:
        if isinstance(s, (int, np.integer)):
            return int(s)
        return self.window.index(s)

    def site(self, v: int):
        return self.window.site(int(v))

    @property
    def mu(self) -> np.ndarray:
        return self.degree


def _ordering(w: Window, ordering: str, gen) -> np.ndarray:
    n = w.n_sites
    if ordering == "lexicographic":
        return np.arange(n, dtype=np.int64)
    if ordering == "random":
        return gen.permutation(n).astype(np.int64)
    if ordering == "adaptive-spiral":
        c = w.coords()[:n]
        ring = np.maximum(np.abs(c[:, 0]), np.abs(c[:, 1]))
        ang = np.arctan2(c[:, 1], c[:, 0])
        return np.lexsort((ang, ring)).astype(np.int64)
    raise ValidationError(f"ordering must be one of {ORDERINGS}")


def _canonical_exit_dir(w: Window, parent, ndir) -> np.ndarray | None:
    if not w.wired:
        return None
    ed = np.full(w.n_nodes, -1, np.int8)
    at_root = parent == w.n_sites
    ed[at_root] = ndir[at_root]
    return ed


def sample_ust(w: Window, ordering: str = "lexicographic", rng=None, step_cap: int | None = None) -> UstRealization:
    """Uniform spanning tree of the window graph by Wilson's algorithm."""
    if rng is None:
        rng = RngStream(0, 0)
    gen = as_generator(rng)
    order = _ordering(w, ordering, gen)
    n = w.n_nodes
    in_tree = np.zeros(n, np.bool_)
    nxt = np.full(n, -1, np.int64)
    ndir = np.full(n, -1, np.int64)
    root = w.root_index
    in_tree[root] = True
    if step_cap is None:
        step_cap = default_step_cap(n)
    bad = _wilson(w.L_out, w.wired, order, in_tree, nxt, ndir, gen, step_cap)
    if bad >= 0:
        raise CappedRunError(f"walk from site {w.site(bad)} exceeded step cap {step_cap}")
    nxt[root] = -1
    prov = Provenance(*_identity(rng), ordering)
    return UstRealization(w, nxt, prov, _canonical_exit_dir(w, nxt, ndir))


def _identity(rng) -> tuple:
    return rng.identity if isinstance(rng, RngStream) else (0, 0)


@dataclass
class Stage:
    start: object
    walk: np.ndarray  # vertex indices, start .. first tree vertex
    branch: LoopErasedPath
    branch_idx: np.ndarray  # vertex indices of the branch, start .. attach
    attach: object  # x_i': the single prior-tree vertex on the branch
    aborted: bool = False


@dataclass
class StagedRun:
    """Prefix of Wilson's algorithm from prescribed starts.

    ``parent``/``in_tree`` hold the partial tree; :meth:`complete` fills the
    remaining sites in lexicographic order.
    """

    window: Window
    root_seed: object
    stages: list = field(default_factory=list)
    parent: np.ndarray = None
    in_tree: np.ndarray = None
    ndir: np.ndarray = None
    identity: tuple = (0, 0)
    aborted: bool = False

    def complete(self, rng, step_cap: int | None = None) -> UstRealization:
        if self.aborted:
            raise ValidationError("cannot complete an aborted staged run")
        w = self.window
        gen = as_generator(rng)
        in_tree = self.in_tree.copy()
        nxt = self.parent.copy()
        ndir = self.ndir.copy()
        if step_cap is None:
            step_cap = default_step_cap(w.n_nodes)
        order = np.arange(w.n_nodes, dtype=np.int64)
        bad = _wilson(w.L_out, w.wired, order, in_tree, nxt, ndir, gen, step_cap)
        if bad >= 0:
            raise CappedRunError(f"completion walk exceeded step cap {step_cap}")
        root = w.index(self.root_seed)
        nxt[root] = -1
        tmp = SpanningTree(nxt, w.coords(), w.lattice_mask())
        parent = tmp.rerooted(w.root_index)
        desc = "staged:" + ";".join(str(tuple(s.start)) if s.start is not WIRED_ROOT else "root" for s in self.stages)
        ndir_final = ndir.copy()
        # edges reversed by rerooting lose their exterior direction; recover it
        if w.wired:
            for v in np.flatnonzero((parent == w.n_sites) & (nxt != w.n_sites)):
                ndir_final[v] = ndir[w.n_sites]
        prov = Provenance(self.identity[0], self.identity[1], desc)
        return UstRealization(w, parent, prov, _canonical_exit_dir(w, parent, ndir_final))


def new_staged_run(w: Window, root_seed=None, rng=None) -> StagedRun:
    if root_seed is None:
        root_seed = WIRED_ROOT if w.wired else Site(0, 0)
    n = w.n_nodes
    in_tree = np.zeros(n, np.bool_)
    in_tree[w.index(root_seed)] = True
    return StagedRun(
        window=w,
        root_seed=root_seed,
        parent=np.full(n, -1, np.int64),
        in_tree=in_tree,
        ndir=np.full(n, -1, np.int64),
        identity=_identity(rng) if rng is not None else (0, 0),
    )


def run_stage(run: StagedRun, start, rng, allowed: np.ndarray | None = None, step_cap: int | None = None) -> Stage:
    """One Wilson step from ``start``.

    A start already in the tree gives a trivial stage (zero-step walk).

    If ``allowed`` is given and the walk leaves it before reaching the tree,
    the stage is recorded as aborted and the run stops growing.
    """
    if run.aborted:
        raise ValidationError("staged run already aborted")
    w = run.window
    s = w.index(start)
    if run.in_tree[s]:
        idx = np.array([s], np.int64)
        stage = Stage(start, idx, LoopErasedPath((w.site(s),)), idx, w.site(s))
        run.stages.append(stage)
        return stage
    gen = as_generator(rng)
    if step_cap is None:
        step_cap = default_step_cap(w.n_nodes)
    mask = np.zeros(0, np.bool_) if allowed is None else allowed
    path, dirs, status = _walk_to_tree(s, w.L_out, w.wired, run.in_tree, mask, gen, step_cap)
    if status == 2:
        raise CappedRunError(f"stage walk from {start} exceeded step cap {step_cap}")
    if status == 1:
        run.aborted = True
        stage = Stage(start, path, LoopErasedPath(()), np.zeros(0, np.int64), None, aborted=True)
        run.stages.append(stage)
        return stage
    le, ledir = _loop_erase_idx(path, dirs, w.n_nodes)
    run.parent[le[:-1]] = le[1:]
    run.ndir[le[:-1]] = ledir[1:]
    run.in_tree[le[:-1]] = True
    branch = LoopErasedPath(w.sites(le))
    stage = Stage(start, path, branch, le, w.site(int(le[-1])))
    run.stages.append(stage)
    return stage


def sample_ust_staged(w: Window, starts, root_seed=None, rng=None) -> StagedRun:
    """Wilson steps from the prescribed ``starts`` in order."""
    if rng is None:
        rng = RngStream(0, 0)
    starts = list(starts)
    if len(set(starts)) != len(starts):
        raise ValidationError("starts must be distinct")
    for s in starts:
        if s is not WIRED_ROOT and not w.contains(s):
            raise DomainError(f"start {s} outside window")
    run = new_staged_run(w, root_seed, rng)
    for s in starts:
        if s == run.root_seed:
            continue  # the root seed is the tree already; no stage
        run_stage(run, s, rng)
    return run


class TreeScratch:
    """Reusable tree arrays; only touched entries are reset between replicates."""

    def __init__(self, w: Window, root: int):
        n = w.n_nodes
        self.in_tree = np.zeros(n, np.bool_)
        self.parent = np.full(n, -1, np.int64)
        self.ndir = np.full(n, -1, np.int64)
        self.root = root
        self.in_tree[root] = True
        self.touched: list = []

    def add_branch(self, le: np.ndarray, ledir: np.ndarray) -> None:
        self.parent[le[:-1]] = le[1:]
        self.ndir[le[:-1]] = ledir[1:]
        self.in_tree[le[:-1]] = True
        self.touched.append(le)

    def reset(self) -> None:
        for le in self.touched:
            self.in_tree[le] = False
            self.parent[le] = -1
            self.ndir[le] = -1
        self.in_tree[self.root] = True
        self.touched = []


def _reverse_dir(d: int, into_root: bool) -> int:
    # root -> site side codes coincide with the outward direction codes
    return d if into_root else d ^ 1


def ust_branch(w: Window, a, b, rng, scratch: TreeScratch | None = None, step_cap: int | None = None):
    """UST path from ``a`` to ``b`` and the step directions along it.

    Sampled as two Wilson branches toward the wired root, which has the same
    law as the loop erasure of a walk from ``a`` stopped at ``b`` but avoids
    that walk's heavy-tailed hitting time.
    """
    if not w.wired:
        raise ValidationError("ust_branch needs a wired window")
    gen = as_generator(rng)
    sc = TreeScratch(w, w.root_index) if scratch is None else scratch
    cap = default_step_cap(w.n_nodes) if step_cap is None else step_cap
    empty = np.zeros(0, np.bool_)
    ia, ib = w.index(a), w.index(b)
    p, d, st = _walk_to_tree(ia, w.L_out, True, sc.in_tree, empty, gen, cap)
    if st == 2:
        raise CappedRunError(f"walk from {a} exceeded step cap {cap}")
    A, Adir = _loop_erase_idx(p, d, w.n_nodes)
    sc.add_branch(A, Adir)
    if sc.in_tree[ib]:
        B = np.array([ib], np.int64)
        Bdir = np.array([-1], np.int64)
    else:
        p, d, st = _walk_to_tree(ib, w.L_out, True, sc.in_tree, empty, gen, cap)
        if st == 2:
            sc.reset()
            raise CappedRunError(f"walk from {b} exceeded step cap {cap}")
        B, Bdir = _loop_erase_idx(p, d, w.n_nodes)
    sc.reset()
    v = B[-1]
    cut = int(np.flatnonzero(A == v)[0])
    # direction of step j is the direction of the edge path[j] -> path[j+1]
    fwd = list(Adir[1:cut + 1])
    back = []
    for j in range(len(B) - 1, 0, -1):
        back.append(_reverse_dir(int(Bdir[j]), B[j] == w.root_index))
    path = np.concatenate([A[:cut + 1], B[-2::-1]]) if len(B) > 1 else A[:cut + 1].copy()
    dirs = np.array([-1] + fwd + back, np.int64)
    return path, dirs


@numba.njit(cache=True)
def _wilson_graph(indptr, indices, root, rng, step_cap):
    n = indptr.shape[0] - 1
    in_tree = np.zeros(n, np.bool_)
    nxt = np.full(n, -1, np.int64)
    in_tree[root] = True
    steps = 0
    for s in range(n):
        u = s
        while not in_tree[u]:
            deg = indptr[u + 1] - indptr[u]
            nxt[u] = indices[indptr[u] + rng.integers(0, deg)]
            u = nxt[u]
            steps += 1
            if steps > step_cap:
                return nxt, s
        # last-exit pointers already trace the loop erasure
        u = s
        while not in_tree[u]:
            in_tree[u] = True
            u = nxt[u]
    return nxt, -1


def sample_ust_graph(n: int, edges, root: int = 0, rng=None, step_cap: int | None = None) -> np.ndarray:
    """Wilson's algorithm on an arbitrary connected graph on ``0..n-1``.

    Returns the parent array (``-1`` at ``root``). Used for small exact checks.
    """
    import scipy.sparse as sp

    e = np.asarray(edges, np.int64).reshape(-1, 2)
    g = sp.coo_matrix((np.ones(2 * e.shape[0]), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                      shape=(n, n)).tocsr()
    g.sum_duplicates()
    indptr, indices = g.indptr.astype(np.int64), g.indices.astype(np.int64)
    if (np.diff(indptr) == 0).any() and n > 1:
        raise ValidationError("graph has isolated vertices")
    gen = as_generator(rng if rng is not None else RngStream(0, 0))
    nxt, bad = _wilson_graph(indptr, indices, int(root), gen, step_cap or default_step_cap(n))
    if bad >= 0:
        raise CappedRunError(f"walk from vertex {bad} exceeded step cap")
    nxt[root] = -1
    return nxt


def dual_tree(u: UstRealization) -> SpanningTree:
    """Dual spanning tree on half-integer sites.

    A wired primal on ``B_inf(0, L_out)`` gives a free dual on the half-integer
    box of half-width ``L_out + 1/2``; a free primal gives a wired dual whose
    extra vertex is the outer face. The dual is rooted at (1/2, 1/2) when that
    is a dual site.
    """
    w = u.window
    L = w.L_out
    side = w.side
    c = w.coords()[: w.n_sites]
    # all primal edges as (site index, direction code)
    e_site = []
    e_dir = []
    xs, ys = c[:, 0], c[:, 1]
    idx = np.arange(w.n_sites)
    for d in range(4):
        tx, ty = xs + _DX[d], ys + _DY[d]
        inside = (np.abs(tx) <= L) & (np.abs(ty) <= L)
        if d in (0, 2):
            sel = inside
        else:
            sel = np.zeros_like(inside)
        if w.wired:
            sel = sel | ~inside
        e_site.append(idx[sel])
        e_dir.append(np.full(int(sel.sum()), d))
    e_site = np.concatenate(e_site)
    e_dir = np.concatenate(e_dir)
    # which of these primal edges are tree edges
    p = u.parent[e_site]
    tx = xs[e_site] + _DX[e_dir]
    ty = ys[e_site] + _DY[e_dir]
    inside = (np.abs(tx) <= L) & (np.abs(ty) <= L)
    tgt = np.where(inside, (ty + L) * side + (tx + L), w.n_sites)
    in_tree = np.zeros(e_site.shape[0], bool)
    in_tree |= p == tgt
    tidx = np.where(inside, tgt, 0)
    in_tree |= inside & (u.parent[tidx] == e_site)
    if w.wired:
        in_tree &= inside | (u.exit_dir[e_site] == e_dir)
    # dual endpoints (doubled coordinates keep everything integral)
    X, Y = 2 * xs[e_site], 2 * ys[e_site]
    dd = e_dir
    ax = np.where(dd == 0, X + 1, np.where(dd == 1, X - 1, X - 1))
    ay = np.where(dd == 0, Y - 1, np.where(dd == 1, Y - 1, np.where(dd == 2, Y + 1, Y - 1)))
    bx = np.where(dd == 0, X + 1, np.where(dd == 1, X - 1, X + 1))
    by = np.where(dd == 0, Y + 1, np.where(dd == 1, Y + 1, np.where(dd == 2, Y + 1, Y - 1)))
    keep = ~in_tree
    ax, ay, bx, by = ax[keep], ay[keep], bx[keep], by[keep]
    if w.wired:
        h = L + 1  # dual doubled coords run over odd values in [-(2L+1), 2L+1]
        dside = 2 * L + 2
        dual_wired = False
    else:
        h = L
        dside = 2 * L
        dual_wired = True
    nd = dside * dside

    def didx(qx, qy):
        i = (qx + 2 * h - 1) // 2
        j = (qy + 2 * h - 1) // 2
        ok = (i >= 0) & (i < dside) & (j >= 0) & (j < dside)
        return np.where(ok, j * dside + i, nd)

    a = didx(ax, ay)
    b = didx(bx, by)
    n_dual = nd + (1 if dual_wired else 0)
    r = np.arange(dside)
    dcoords = np.stack([np.tile(r, dside), np.repeat(r, dside)], axis=1) - (h - 0.5)
    dcoords = dcoords.astype(np.float64)
    lattice = np.ones(n_dual, bool)
    if dual_wired:
        dcoords = np.vstack([dcoords, [[0.0, 0.0]]])
        lattice[-1] = False
    parent = _parent_from_edges(n_dual, a, b, _dual_root(dside, h, nd, dual_wired))
    tree = SpanningTree(parent, dcoords, lattice)
    tree.dual_of = u
    return tree


def _dual_root(dside, h, nd, dual_wired) -> int:
    if dual_wired:
        return nd
    i = (1 + 2 * h - 1) // 2
    return i * dside + i


def _parent_from_edges(n, a, b, root) -> np.ndarray:
    if a.shape[0] != n - 1:
        raise ValidationError(f"dual has {a.shape[0]} edges for {n} vertices; not a tree")
    import scipy.sparse as sp
    from scipy.sparse.csgraph import breadth_first_order

    g = sp.coo_matrix((np.ones(a.shape[0]), (a, b)), shape=(n, n)).tocsr()
    order, pred = breadth_first_order(g, root, directed=False, return_predecessors=True)
    if order.shape[0] != n:
        raise ValidationError("dual edge set is disconnected")
    parent = pred.astype(np.int64)
    parent[root] = -1
    return parent
