"""Scale-m path constructions, the F_m path-forcing event, and Harnack/packing diagnostics.

Region conventions: every region is a finite union of closed axis-aligned
rectangles, and a lattice site belongs to it when it lies in the interior of
that union. Boundary sites are excluded; internal seams between adjacent
pieces are not.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ustlab.constants import kappa
from ustlab.errors import ContractError, DomainError, ValidationError
from ustlab.lattice import WIRED_ROOT, Site, Window
from ustlab.rng import RngStream, as_generator
from ustlab.stats import fit_line, wilson_interval
from ustlab.tree import SpanningTree
from ustlab.treemetrics import _ball_bfs, _pred_pos
from ustlab.walk import LoopErasedPath
from ustlab.wilson import Stage, StagedRun, TreeScratch, run_stage, ust_branch

SHAPES = ("straight", "grid-S", "spiral", "custom")
M0_DEFAULT = 256
M0_FLOOR = 8
CONVENTIONS = {
    "regions": "interior of a union of closed rectangles; boundary sites excluded",
    "path_length": "|gamma| counts vertices, attachment point included",
    "G1_hit": "the stage walk is read up to its first tree hit; that hit must lie on gamma_{i-1} and in Q_i",
    "R_i": "B_{m/lam^2}(x_i) plus the adjacent square toward x_{i-1}",
    "Q_i": "near half of B_m(x_i), far half of B_m(x_{i-1}) (toward x_i when i=1), and B_{m/lam^2}(x_{i-1})",
}


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def covers(self, x, y):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


class Region:
    """Interior of a union of closed rectangles, evaluated on lattice points."""

    _EPS = 1e-7

    def __init__(self, rects):
        self.rects = tuple(rects)

    def __or__(self, other: "Region") -> "Region":
        return Region(self.rects + other.rects)

    def contains(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ok = np.ones(np.broadcast(x, y).shape, dtype=bool)
        for sx in (-self._EPS, self._EPS):
            for sy in (-self._EPS, self._EPS):
                hit = np.zeros_like(ok)
                for r in self.rects:
                    hit |= r.covers(x + sx, y + sy)
                ok &= hit
        return ok

    def __contains__(self, s) -> bool:
        return bool(self.contains(s[0], s[1]))

    def mask(self, w: Window) -> np.ndarray:
        c = w.coords()
        m = self.contains(c[:, 0], c[:, 1])
        return m & w.lattice_mask()

    def sites(self) -> list:
        xs = [r.x0 for r in self.rects] + [r.x1 for r in self.rects]
        ys = [r.y0 for r in self.rects] + [r.y1 for r in self.rects]
        gx = np.arange(math.floor(min(xs)), math.ceil(max(xs)) + 1)
        gy = np.arange(math.floor(min(ys)), math.ceil(max(ys)) + 1)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        keep = self.contains(X, Y)
        return [Site(int(a), int(b)) for a, b in zip(X[keep], Y[keep])]


def box(center, r: float) -> Region:
    """``B_r(z) = B_inf(z, r/2)``."""
    cx, cy = center
    h = r / 2
    return Region([Rect(cx - h, cx + h, cy - h, cy + h)])


def _frame_rect(center, e, a0, a1, b0, b1) -> Region:
    """Rectangle ``{center + a e + b f}`` with ``f`` perpendicular to the unit axis vector ``e``."""
    f = (-e[1], e[0])
    xs, ys = [], []
    for a in (a0, a1):
        for b in (b0, b1):
            xs.append(center[0] + a * e[0] + b * f[0])
            ys.append(center[1] + a * e[1] + b * f[1])
    return Region([Rect(min(xs), max(xs), min(ys), max(ys))])


def _unit(a, b, m):
    return ((b[0] - a[0]) // m, (b[1] - a[1]) // m)


# --------------------------------------------------------------------------
# scale paths


@dataclass(frozen=True)
class ScalePath:
    """A scale-m path ``x_0, ..., x_N``.

    Grid vertices lie in ``(mZ)^2`` and consecutive ones are one axis step of
    length ``m`` apart. The endpoint is either such a step or a point of
    ``B_m(x_{N-1})``.
    """

    m: int
    vertices: tuple
    shape: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(Site(int(v[0]), int(v[1])) for v in self.vertices))
        v, m = self.vertices, self.m
        if m < 1:
            raise ValidationError("m must be positive")
        if self.shape not in SHAPES:
            raise ValidationError(f"shape must be one of {SHAPES}")
        if len(v) < 2:
            raise ValidationError("a scale path needs at least two vertices")
        if len(set(v)) != len(v):
            raise ValidationError("path vertices must be distinct")
        for i in range(len(v) - 1):
            if v[i][0] % m or v[i][1] % m:
                raise ValidationError(f"x_{i}={tuple(v[i])} not in (mZ)^2")
        for i in range(1, len(v) - 1):
            if abs(v[i][0] - v[i - 1][0]) + abs(v[i][1] - v[i - 1][1]) != m or (
                v[i][0] != v[i - 1][0] and v[i][1] != v[i - 1][1]
            ):
                raise ValidationError(f"x_{i - 1} -> x_{i} is not an axis step of length m")
        a, b = v[-2], v[-1]
        grid_step = (b[0] % m == 0 and b[1] % m == 0 and abs(b[0] - a[0]) + abs(b[1] - a[1]) == m
                     and (a[0] == b[0] or a[1] == b[1]))
        in_box = max(abs(b[0] - a[0]), abs(b[1] - a[1])) <= m / 2
        if not (grid_step or in_box):
            raise ValidationError("x_N must be a grid step from x_{N-1} or lie in B_m(x_{N-1})")

    @property
    def N(self) -> int:
        return len(self.vertices) - 1

    @property
    def start(self) -> Site:
        return self.vertices[0]

    @property
    def end(self) -> Site:
        return self.vertices[-1]

    def boxes(self) -> list:
        return [box(v, self.m) for v in self.vertices]

    def extent(self) -> float:
        """Largest ``d_inf`` from the origin reached by any box ``B_m(x_i)``."""
        return max(max(abs(v[0]), abs(v[1])) for v in self.vertices) + self.m / 2


def _check_scale(m: int, m0: int) -> None:
    if not M0_FLOOR <= m0 <= M0_DEFAULT:
        raise ValidationError(f"m0 must lie in [{M0_FLOOR}, {M0_DEFAULT}]")
    if m < m0:
        raise ValidationError(f"m={m} below the configured minimum scale m0={m0}")
    if m < M0_DEFAULT:
        warnings.warn(f"desk-scale m={m} < {M0_DEFAULT}", stacklevel=3)


def build_straight_path(x, m: int, m0: int = M0_DEFAULT) -> ScalePath:
    """Axis-aligned scale-m path from the origin to ``x``."""
    _check_scale(m, m0)
    x = Site(int(x[0]), int(x[1]))
    if x[0] != 0 and x[1] != 0:
        raise DomainError("straight paths need x on a coordinate axis")
    if x == (0, 0):
        raise DomainError("x must differ from the origin")
    axis = 0 if x[1] == 0 else 1
    t = x[axis]
    sign = 1 if t > 0 else -1
    j = int(math.floor(abs(t) / m + 0.5))  # nearest grid index, ties away from 0
    if abs(t) - j * m > m / 2:
        j += 1
    if j * m == abs(t):
        idx = range(j + 1)
        pts = [sign * i * m for i in idx]
    else:
        pts = [sign * i * m for i in range(j + 1)] + [t]
    verts = [Site(p, 0) if axis == 0 else Site(0, p) for p in pts]
    return ScalePath(m, tuple(verts), "straight")


def build_grid_event_paths(N: int, m: int, m0: int = M0_DEFAULT) -> list:
    """The finger construction: a horizontal trunk plus one vertical string per column.

    Element 0 is the trunk ``0 -> ((N-1)m, 0)``; element ``1 + j`` climbs
    column ``j`` from its trunk vertex to height ``(N-1)m``.
    """
    _check_scale(m, m0)
    if N < 2:
        raise ValidationError("grid construction needs N >= 2")
    trunk = ScalePath(m, tuple(Site(j * m, 0) for j in range(N)), "grid-S")
    fingers = [ScalePath(m, tuple(Site(j * m, h * m) for h in range(N)), "grid-S") for j in range(N)]
    return [trunk] + fingers


def spiral_offsets(N: int) -> list:
    """Box centres (in units of m) of a square spiral from the origin covering an N x N block."""
    if N < 1:
        raise ValidationError("N must be >= 1")
    out = [(0, 0)]
    x = y = 0
    dirs = ((1, 0), (0, 1), (-1, 0), (0, -1))
    run, d = 1, 0
    while len(out) < N * N:
        for _ in range(2):
            dx, dy = dirs[d % 4]
            for _ in range(run):
                x, y = x + dx, y + dy
                out.append((x, y))
                if len(out) == N * N:
                    return out
            d += 1
        run += 1
    return out


def build_spiral_path(N: int, m: int, m0: int = M0_DEFAULT) -> ScalePath:
    """Scale-m path spiralling outward through the N x N boxes around the origin."""
    _check_scale(m, m0)
    if N < 2:
        raise ValidationError("spiral needs N >= 2")
    return ScalePath(m, tuple(Site(a * m, b * m) for a, b in spiral_offsets(N)), "spiral")


def build_s_path(N: int, m: int, m0: int = M0_DEFAULT) -> ScalePath:
    """S-shaped path on the rows y = -m, 0, m; ``3(2N+1)`` vertices."""
    _check_scale(m, m0)
    if N < 1:
        raise ValidationError("N must be >= 1")
    row = list(range(-N, N + 1))
    tilde = [(a, -1) for a in row] + [(a, 0) for a in reversed(row)] + [(a, 1) for a in row]
    return ScalePath(m, tuple(Site(a * m, b * m) for a, b in tilde), "grid-S")


def event_window(paths, margin: int | None = None) -> Window:
    """Wired window holding every box of every path, plus ``margin`` (default m)."""
    paths = [paths] if isinstance(paths, ScalePath) else list(paths)
    ext = max(p.extent() for p in paths)
    mg = max(p.m for p in paths) if margin is None else margin
    L_out = int(math.ceil(ext)) + int(mg)
    return Window(L_out, L_out)


# --------------------------------------------------------------------------
# the event F_m(x, pi)


@dataclass
class _StageGeometry:
    kind: str  # "first", "middle", "last"
    masks: dict
    toward: tuple = None  # unit vector from x_i toward x_{i-1}


@dataclass
class FmGeometry:
    path: ScalePath
    lam: float
    k: int
    window: Window
    first_start: Site
    stages: list

    @property
    def starts(self) -> list:
        return [self.first_start] + list(self.path.vertices[1:])


def fm_geometry(path: ScalePath, lam: float, k: int, window: Window | None = None) -> FmGeometry:
    """Precompute the region masks of every stage of ``F_m(x, path)``."""
    if lam < 2:
        raise ValidationError("lambda must be >= 2")
    if k < 1:
        raise ValidationError("k must be a positive integer")
    m, v, N = path.m, path.vertices, path.N
    w = event_window(path) if window is None else window
    if not w.wired:
        raise ValidationError("F_m geometry needs a wired window")
    for z in v:
        if not w.contains(z):
            raise DomainError(f"path vertex {tuple(z)} outside the window")
    if path.extent() > w.L_out:
        raise DomainError("path boxes exceed the window")
    s = m / lam**2
    first = Site(v[0][0], v[0][1] + m // k)
    stages = [_StageGeometry("first", {"box": box(v[0], m).mask(w)})]
    for i in range(1, N):
        e = _unit(v[i], v[i - 1], m)
        R = _frame_rect(v[i], e, -s / 2, 3 * s / 2, -s / 2, s / 2)
        near = _frame_rect(v[i], e, s / 2, m / 2, -m / 2, m / 2)
        g = _unit(v[i - 2], v[i - 1], m) if i >= 2 else (-e[0], -e[1])
        far = _frame_rect(v[i - 1], g, s / 2, m / 2, -m / 2, m / 2)
        Q = near | far | box(v[i - 1], s)
        masks = {"R": R.mask(w), "Q": Q.mask(w), "core": box(v[i], 3 * s).mask(w)}
        masks["allowed"] = masks["R"] | masks["Q"]
        stages.append(_StageGeometry("middle", masks, e))
    stages.append(_StageGeometry("last", {"box": (box(v[N - 1], m) | box(v[N], m)).mask(w)}))
    return FmGeometry(path, float(lam), int(k), w, first, stages)


@dataclass
class EventReport:
    event_id: str
    stage_flags: list
    overall: bool
    lengths: list
    core_counts: list
    attach: list
    d_U: int | None
    bounds: dict
    sandwich_ok: bool | None
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=_jsonable, indent=2)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if o is WIRED_ROOT:
        return "root"
    raise TypeError(type(o).__name__)


def _g1(walk: np.ndarray, coords: np.ndarray, geo: _StageGeometry, prev_branch: np.ndarray) -> bool:
    """Exit R_i through its near side, then reach gamma_{i-1} without leaving Q_i."""
    R, Q = geo.masks["R"], geo.masks["Q"]
    inR = R[walk]
    if not inR[0]:
        return False
    out = np.flatnonzero(~inR)
    if out.size == 0:
        return False
    t = int(out[0])
    step = coords[walk[t]] - coords[walk[t - 1]]
    if (int(step[0]), int(step[1])) != geo.toward:
        return False
    if not Q[walk[t:]].all():
        return False
    return bool(np.isin(walk[-1], prev_branch))


def stage_flags(i: int, stage: Stage, geo: _StageGeometry, prev: Stage | None, lam: float, m: int, coords) -> dict:
    mk = m**kappa
    n = len(stage.branch_idx)
    if stage.aborted:
        names = ("G",) if geo.kind != "middle" else ("G1", "G2", "G3")
        return {"stage": i, **{g: False for g in names}, "length": None, "core": None}
    if geo.kind in ("first", "last"):
        inside = bool(geo.masks["box"][stage.branch_idx].all())
        return {"stage": i, "G": inside and n <= lam * mk, "length": n, "core": None}
    g1 = _g1(stage.walk, coords, geo, prev.branch_idx)
    g2 = lam ** -1 * mk <= n <= lam * mk
    core = int(geo.masks["core"][stage.branch_idx].sum())
    g3 = core <= lam * (3 * m / lam**2) ** kappa
    return {"stage": i, "G1": bool(g1), "G2": bool(g2), "G3": bool(g3), "length": n, "core": core}


def _passed(f: dict) -> bool:
    return all(v for k, v in f.items() if k.startswith("G"))


def _tree_depth(parent: np.ndarray, v: int) -> int:
    d = 0
    while parent[v] >= 0:
        v = parent[v]
        d += 1
    return d


def _distance_bounds(N: int, lam: float, m: int, lengths, cores) -> dict:
    mk = m**kappa
    out = {
        "upper_displayed": 2 * lam * N * mk,
        "upper_sum": float(sum(lengths)),
        "lower_displayed": (N - 1) * (1 / lam - 3**kappa * lam**-1.5) * mk,
    }
    if N >= 2 and all(c is not None for c in cores[1:N]):
        out["lower_sum"] = float(sum(lengths[i] - cores[i] for i in range(1, N)))
    return out


def _report(geo: FmGeometry, stages: list, parent: np.ndarray) -> EventReport:
    path, w = geo.path, geo.window
    N, m, lam = path.N, path.m, geo.lam
    coords = _coords_cache(w)
    flags = []
    for i, st in enumerate(stages):
        prev = stages[i - 1] if i > 0 else None
        flags.append(stage_flags(i, st, geo.stages[i], prev, lam, m, coords))
    for i in range(len(stages), N + 1):
        flags.append({"stage": i, "evaluated": False})
    overall = len(stages) == N + 1 and all(_passed(f) for f in flags)
    lengths = [f.get("length") for f in flags]
    cores = [f.get("core") for f in flags]
    attach = [st.attach for st in stages]
    d_U = None
    bounds: dict = {}
    ok = None
    if overall:
        d_U = _tree_depth(parent, w.index(path.end))
        bounds = _distance_bounds(N, lam, m, lengths, cores)
        ok = d_U <= bounds["upper_sum"] <= bounds["upper_displayed"] and bounds["lower_displayed"] <= d_U
        if "lower_sum" in bounds:
            ok = ok and bounds["lower_sum"] <= d_U
    eid = f"F_m[{path.shape},N={N},m={m},lam={lam:g},k={geo.k}]"
    return EventReport(eid, flags, overall, lengths, cores, attach, d_U, bounds, ok)


def detect_Fm(run: StagedRun, path: ScalePath, lam: float, k: int, geometry: FmGeometry | None = None) -> EventReport:
    """Evaluate every stage flag of ``F_m(x, path)`` on a staged Wilson run.

    The run must be rooted at ``x_0`` with starts ``x_0 + (0, floor(m/k))``,
    ``x_1, ..., x_N``; a shorter (stopped or aborted) run leaves the missing
    stages unevaluated and the event false.
    """
    geo = geometry if geometry is not None else fm_geometry(path, lam, k, run.window)
    if geo.path != path or geo.lam != float(lam) or geo.k != int(k):
        raise ContractError("geometry was built for a different path or parameters")
    if run.window != geo.window:
        raise ContractError("run window differs from the event geometry window")
    if run.root_seed is WIRED_ROOT or tuple(run.root_seed) != tuple(path.start):
        raise ContractError("run must be rooted at the path start x_0")
    expected = geo.starts
    if len(run.stages) > len(expected):
        raise ContractError("run has more stages than the path")
    for st, s in zip(run.stages, expected):
        if st.start is WIRED_ROOT or tuple(st.start) != tuple(s):
            raise ContractError(f"stage start {st.start} does not match expected {tuple(s)}")
    return _report(geo, list(run.stages), run.parent)


# --------------------------------------------------------------------------
# Monte Carlo estimation


@dataclass
class EventEstimate:
    event_id: str
    replicates: int
    successes: int
    p_hat: float
    interval: tuple
    one_sided: bool
    stage_reached: list
    stage_passed: list
    sandwich_violations: int
    detections: list = field(default_factory=list)

    @property
    def conditional_rates(self) -> list:
        """Observed ``P(G_i | G_0, ..., G_{i-1})`` per stage (nan if never reached)."""
        return [p / r if r else float("nan") for p, r in zip(self.stage_passed, self.stage_reached)]


def _one_trial(geo: FmGeometry, gamma0, gen, sc: TreeScratch):
    """Continue a trial from a given first branch; stop at the first failed stage."""
    w = geo.window
    path = geo.path
    le, ledir = gamma0
    run = StagedRun(window=w, root_seed=path.start, parent=sc.parent, in_tree=sc.in_tree, ndir=sc.ndir)
    sc.add_branch(le, ledir)
    sites = w.sites(le)
    run.stages.append(Stage(geo.first_start, le, LoopErasedPath(sites), le, w.site(int(le[-1]))))
    coords = _coords_cache(w)
    reached = [0] * (path.N + 1)
    passed = [0] * (path.N + 1)
    reached[0] = 1
    f = stage_flags(0, run.stages[0], geo.stages[0], None, geo.lam, path.m, coords)
    if not _passed(f):
        return run, reached, passed, None
    passed[0] = 1
    for i in range(1, path.N + 1):
        sg = geo.stages[i]
        allowed = sg.masks["allowed"] if sg.kind == "middle" else None
        before = len(run.stages)
        st = run_stage(run, path.vertices[i], gen, allowed=allowed)
        if not st.aborted and len(st.branch_idx) > 1:
            sc.touched.append(st.branch_idx)
        assert len(run.stages) == before + 1
        reached[i] = 1
        f = stage_flags(i, st, sg, run.stages[i - 1], geo.lam, path.m, coords)
        if not _passed(f):
            return run, reached, passed, None
        passed[i] = 1
    rep = _report(geo, run.stages, run.parent)
    return run, reached, passed, rep


_COORDS: dict = {}


def _coords_cache(w: Window) -> np.ndarray:
    c = _COORDS.get(w)
    if c is None:
        _COORDS.clear()
        c = _COORDS[w] = w.coords()
    return c


class EventSampler:
    """Shared state for event trials over several paths with a common start and scale.

    :meth:`trial` runs replicate ``r`` from ``RngStream(master_seed, r)``: one
    first branch is sampled and reused by every path, then each path's stages
    run in order, stopping at the first failure.
    """

    def __init__(self, paths, lam: float, k: int, window: Window | None = None):
        self.paths = list(paths)
        if not self.paths:
            raise ValidationError("need at least one path")
        if len({(p.start, p.m) for p in self.paths}) != 1:
            raise ValidationError("paths must share their start and scale")
        self.lam, self.k = lam, k
        self.window = w = event_window(self.paths) if window is None else window
        self.geos = [fm_geometry(p, lam, k, w) for p in self.paths]
        self.x0 = self.paths[0].start
        self._sc = TreeScratch(w, w.index(self.x0))
        self._branch_sc = TreeScratch(w, w.root_index)

    def trial(self, master_seed: int, r: int) -> list:
        """``[(reached, passed, report_or_None), ...]``, one entry per path."""
        gen = RngStream(master_seed, r).generator
        gamma0 = ust_branch(self.window, self.geos[0].first_start, self.x0, gen, scratch=self._branch_sc)
        out = []
        for geo in self.geos:
            _, reached, passed, rep = _one_trial(geo, gamma0, gen, self._sc)
            self._sc.reset()
            out.append((reached, passed, rep))
        return out

    def event_id(self, j: int) -> str:
        p = self.paths[j]
        return f"F_m[{p.shape},N={p.N},m={p.m},lam={self.lam:g},k={self.k}]"

    def summarize(self, j: int, replicates: int, trials, keep_reports: bool = True) -> EventEstimate:
        """Fold the ``j``-th entries of per-replicate trial outputs into an estimate."""
        N = self.paths[j].N
        reached = np.zeros(N + 1, np.int64)
        passed = np.zeros(N + 1, np.int64)
        succ = viol = 0
        reps = []
        for rc, ps, rep in trials:
            reached += rc
            passed += ps
            if rep is not None and rep.overall:
                succ += 1
                viol += not rep.sandwich_ok
                if keep_reports:
                    reps.append(rep)
        lo, hi = wilson_interval(succ, replicates)
        return EventEstimate(self.event_id(j), replicates, succ, succ / replicates, (lo, hi), succ == 0,
                             reached.tolist(), passed.tolist(), viol, reps)


def estimate_event_probabilities(paths, lam: float, k: int, replicates: int, master_seed: int = 0,
                                 window: Window | None = None, keep_reports: bool = True) -> list:
    """Monte Carlo frequency of ``F_m`` for several paths sharing ``x_0`` and ``m``.

    Middle-stage walks are abandoned once they leave ``R_i`` or ``Q_i``,
    which already decides ``G_i^1``. See :class:`EventSampler`.
    """
    if replicates < 1:
        raise ValidationError("replicates must be >= 1")
    smp = EventSampler(paths, lam, k, window)
    acc = [[] for _ in smp.paths]
    for r in range(replicates):
        for j, t in enumerate(smp.trial(master_seed, r)):
            acc[j].append(t)
    return [smp.summarize(j, replicates, acc[j], keep_reports) for j in range(len(smp.paths))]


def estimate_event_probability(path: ScalePath, lam: float, k: int, replicates: int, master_seed: int = 0,
                               window: Window | None = None) -> EventEstimate:
    if replicates < 100:
        raise ValidationError("replicates must be >= 100")
    return estimate_event_probabilities([path], lam, k, replicates, master_seed, window)[0]


@dataclass
class DecayFit:
    """``log p_N ~ intercept - c N`` over the N values with at least one success."""

    Ns: list
    log_p: list
    c: float
    stderr: float
    r2: float
    dropped: list


def fit_event_decay(estimates) -> DecayFit:
    Ns, lp, dropped = [], [], []
    for e in estimates:
        n = int(e.event_id.split("N=")[1].split(",")[0])
        if e.successes == 0:
            dropped.append(n)
            continue
        Ns.append(n)
        lp.append(math.log(e.p_hat))
    if len(Ns) < 2:
        return DecayFit(Ns, lp, float("nan"), float("nan"), float("nan"), dropped)
    fit = fit_line(np.array(Ns, float), np.array(lp))
    return DecayFit(Ns, lp, -fit.slope, fit.stderr, fit.r2, dropped)


# --------------------------------------------------------------------------
# Harnack ratios and packing numbers


@dataclass
class HarnackReport:
    R: int
    ratios: list
    infinite: int

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else float("nan")


def _ball(u: SpanningTree, x0: int, r: int):
    """BFS ball; ``pred`` holds BFS positions, not vertex ids."""
    nodes, pred, dist = _ball_bfs(u.indptr, u.indices, x0, r)
    return nodes, _pred_pos(nodes, pred), dist


def harmonic_extension(u: SpanningTree, x0, radius: int, boundary_values) -> tuple:
    """Harmonic extension into ``B_U(x0, radius)`` of data on its distance-``radius`` sphere.

    Tree elimination: a leaves-up pass writes ``h(v) = a_v h(parent) + b_v``,
    a root-down pass substitutes. Returns ``(nodes, dist, values)`` in BFS order.
    ``boundary_values`` is indexed like the sphere nodes in BFS order.
    """
    x0 = u.node(x0)
    nodes, pred, dist = _ball(u, x0, radius)
    sphere = np.flatnonzero(dist == radius)
    if sphere.size == 0:
        raise DomainError("the ball exhausts the tree; no boundary sphere")
    if not u.lattice[nodes].all():
        raise DomainError("the ball reaches a non-lattice vertex")
    bv = np.asarray(boundary_values, dtype=np.float64)
    if bv.shape != sphere.shape:
        raise ValueError(f"expected {sphere.size} boundary values")
    n = nodes.size
    mu = u.degree[nodes].astype(np.float64)
    a = np.zeros(n)
    b = np.zeros(n)
    bsum = np.zeros(n)
    asum = np.zeros(n)
    is_bd = dist == radius
    b[sphere] = bv
    for j in range(n - 1, -1, -1):
        if is_bd[j]:
            a[j] = 0.0
        else:
            den = mu[j] - asum[j]
            if j == 0:
                a[j] = 0.0
                b[j] = bsum[j] / den
                break
            a[j] = 1.0 / den
            b[j] = bsum[j] * a[j]
        p = pred[j]
        if p >= 0:
            asum[p] += a[j]
            bsum[p] += b[j]
    h = np.empty(n)
    h[0] = b[0]
    for j in range(1, n):
        h[j] = a[j] * h[pred[j]] + b[j]
    return nodes, dist, h


def harnack_ratio(u: SpanningTree, x0, R: int, trials: int, rng, adversarial: bool = False) -> HarnackReport:
    """Worst observed ``sup/inf`` over ``B_U(x0, R)`` of harmonic extensions from ``B_U(x0, 2R)``.

    Boundary data are i.i.d. uniform(0, 1), or with ``adversarial`` the
    indicator of the sphere points below one randomly chosen ball vertex.
    """
    if R < 1 or trials < 1:
        raise ValidationError("R and trials must be positive")
    gen = as_generator(rng)
    x0 = u.node(x0)
    nodes, pred, dist = _ball(u, x0, 2 * R)
    sphere = np.flatnonzero(dist == 2 * R)
    if sphere.size == 0:
        raise DomainError("B_U(x0, 2R) is the whole tree")
    inner = dist <= R
    ratios, inf_count = [], 0
    for _ in range(trials):
        if adversarial:
            v = int(gen.integers(1, nodes.size)) if nodes.size > 1 else 0
            below = _below(pred, v)
            data = below[sphere].astype(np.float64)
            if not data.any():
                data[:] = 1.0
        else:
            data = gen.random(sphere.size)
        _, _, h = harmonic_extension(u, x0, 2 * R, data)
        hi, lo = h[inner].max(), h[inner].min()
        if lo <= 0:
            inf_count += 1
            ratios.append(math.inf)
        else:
            ratios.append(float(hi / lo))
    return HarnackReport(R, ratios, inf_count)


def _below(pred: np.ndarray, v: int) -> np.ndarray:
    """Mask of BFS positions in the subtree hanging below position ``v``."""
    mark = np.zeros(pred.size, bool)
    mark[v] = True
    for j in range(v + 1, pred.size):
        if pred[j] >= 0 and mark[pred[j]]:
            mark[j] = True
    return mark


def packing_number(u: SpanningTree, x0, R: int, delta: float) -> int:
    """Greedy packing of ``B_U(x0, R)`` by balls of radius ``delta R``.

    Candidates are scanned in lexicographic site order; a candidate is kept
    when its ball stays in ``B_U(x0, R)`` and it is more than ``2 delta R``
    from every kept centre.
    """
    return len(packing_centers(u, x0, R, delta))


def packing_centers(u: SpanningTree, x0, R: int, delta: float) -> list:
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    x0 = u.node(x0)
    nodes, _, dist = _ball(u, x0, R)
    dmap = dict(zip(nodes.tolist(), dist.tolist()))
    rho = math.floor(delta * R)
    sep = 2 * delta * R
    c = u.coords[nodes]
    order = np.lexsort((c[:, 1], c[:, 0]))
    blocked: set = set()
    centers = []
    for j in order:
        v = int(nodes[j])
        if v in blocked:
            continue
        bn, _, _ = _ball(u, v, rho)
        if any(dmap.get(int(t), R + 1) > R for t in bn):
            continue
        centers.append(v)
        near, _, _ = _ball(u, v, int(math.floor(sep)))
        blocked.update(near.tolist())
    return centers
