"""Exponent fits, tail estimates, curve collapse and fluctuation summaries.

Every experiment draws replicate ``i`` from ``RngStream(master_seed, i)``,
so results depend only on the arguments. Ensemble means use compensated
summation (:func:`math.fsum`) so the reduction order does not matter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from ustlab.constants import d_f, d_w, kappa
from ustlab.errors import InsufficientDataError, ValidationError
from ustlab.lattice import Site, Window
from ustlab.rng import RngStream

BOOTSTRAP_RESAMPLES = 200
BOOTSTRAP_STREAM = (1 << 64) - 1  # reserved stream index for resampling
Z95 = 1.959963984540054


# --------------------------------------------------------------------------
# basic estimators


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple:
    """Wilson score interval for a binomial proportion ``k/n``."""
    if n <= 0:
        raise ValidationError("n must be positive")
    if not 0 <= k <= n:
        raise ValidationError("need 0 <= k <= n")
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (0.0 if k == 0 else max(0.0, mid - half), 1.0 if k == n else min(1.0, mid + half))


def ensemble_mean(values) -> float:
    v = list(values)
    return math.fsum(v) / len(v)


def column_means(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    return np.array([math.fsum(col) / samples.shape[0] for col in samples.T])


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    stderr: float
    r2: float
    n: int


def fit_line(x, y) -> LineFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise InsufficientDataError("need at least two points")
    if np.ptp(x) == 0:
        raise InsufficientDataError("abscissae are all equal")
    if np.ptp(y) == 0:  # linregress reports nan r for constant data
        return LineFit(0.0, float(y[0]), 0.0, 1.0, int(x.size))
    res = sps.linregress(x, y)
    se = float(res.stderr) if x.size > 2 else float("nan")
    return LineFit(float(res.slope), float(res.intercept), se, float(res.rvalue**2), int(x.size))


@dataclass
class PowerLawFit:
    """``log y = intercept + slope log x`` on the points inside ``window``."""

    slope: float
    intercept: float
    stderr: float
    r2: float
    window: tuple
    n_points: int
    bootstrap_stderr: float | None = None

    def combined_stderr(self) -> float:
        return self.bootstrap_stderr if self.bootstrap_stderr is not None else self.stderr


def _in_window(x, window):
    if window is None:
        return np.ones(len(x), bool)
    lo, hi = window
    return (x >= lo) & (x <= hi)


def fit_power_law(points, window=None) -> PowerLawFit:
    """Least squares on ``(log x, log y)``; points with ``y <= 0`` are ignored."""
    pts = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    keep = _in_window(x, window) & (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < 3:
        raise InsufficientDataError(f"only {int(keep.sum())} usable points in window {window}")
    lf = fit_line(np.log(x[keep]), np.log(y[keep]))
    win = (float(x[keep].min()), float(x[keep].max())) if window is None else tuple(window)
    return PowerLawFit(lf.slope, lf.intercept, lf.stderr, lf.r2, win, int(keep.sum()))


def default_window(x) -> tuple:
    """Drop the smallest and the largest octave of the abscissa."""
    x = np.asarray(x, dtype=np.float64)
    return (2 * x.min(), x.max() / 2)


def bootstrap_slope(x, samples, window=None, resamples: int = BOOTSTRAP_RESAMPLES, master_seed: int = 0) -> float:
    """Bootstrap standard error of the power-law slope of column means.

    ``samples`` has one row per replicate; rows are resampled with replacement.
    """
    samples = np.asarray(samples, dtype=np.float64)
    gen = RngStream(master_seed, BOOTSTRAP_STREAM).generator
    n = samples.shape[0]
    slopes = []
    for _ in range(resamples):
        idx = gen.integers(0, n, size=n)
        means = samples[idx].mean(axis=0)
        try:
            slopes.append(fit_power_law(zip(x, means), window).slope)
        except InsufficientDataError:
            continue
    if len(slopes) < 2:
        return float("nan")
    return float(np.std(slopes, ddof=1))


@dataclass
class ScalingResult:
    """Ensemble samples of an observable on an abscissa grid, with a power-law fit.

    ``exponent = sign * slope`` so that decaying observables report positive
    exponents when ``sign = -1``.
    """

    experiment: str
    x: np.ndarray
    samples: np.ndarray
    fit: PowerLawFit
    target: float
    sign: int = 1
    seed: int = 0

    @property
    def means(self) -> np.ndarray:
        return column_means(self.samples)

    @property
    def stderr(self) -> np.ndarray:
        s = np.asarray(self.samples, dtype=np.float64)
        return s.std(axis=0, ddof=1) / math.sqrt(s.shape[0]) if s.shape[0] > 1 else np.full(s.shape[1], np.nan)

    @property
    def exponent(self) -> float:
        return self.sign * self.fit.slope

    def fit_report(self) -> dict:
        return {
            "experiment": self.experiment,
            "target_exponent": self.target,
            "estimate": self.exponent,
            "stderr": self.fit.combined_stderr(),
            "window": list(self.fit.window),
            "n_points": self.fit.n_points,
            "seed": self.seed,
        }

    @classmethod
    def from_samples(cls, experiment, x, samples, target, sign=1, window=None, seed=0,
                     bootstrap: int = BOOTSTRAP_RESAMPLES) -> "ScalingResult":
        x = np.asarray(x, dtype=np.float64)
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != x.size:
            raise ValidationError("samples must be (replicates, len(x))")
        fit = fit_power_law(zip(x, column_means(samples)), window)
        if bootstrap and samples.shape[0] > 1:
            fit.bootstrap_stderr = bootstrap_slope(x, samples, window, bootstrap, seed)
        return cls(experiment, x, samples, fit, target, sign, seed)


def geometric_grid(lo: float, hi: float, points: int, integer: bool = True) -> np.ndarray:
    g = np.geomspace(lo, hi, points)
    if integer:
        g = np.unique(np.round(g).astype(np.int64))
    return g


def _check_geometric(grid, min_points=4):
    g = np.asarray(grid, dtype=np.float64)
    if g.size < min_points:
        raise ValidationError(f"grid needs at least {min_points} points")
    if np.any(g <= 0) or np.any(np.diff(g) <= 0):
        raise ValidationError("grid must be positive and increasing")


# --------------------------------------------------------------------------
# experiments


def lerw_growth_experiment(n_grid, replicates: int, master_seed: int = 0, window=None,
                           bootstrap: int = BOOTSTRAP_RESAMPLES) -> ScalingResult:
    """Mean LERW length ``M_n`` to exit ``[-n, n]^2``; the fitted slope estimates kappa."""
    from ustlab.walk import lerw_box_length

    _check_geometric(n_grid)
    if replicates < 1:
        raise ValidationError("replicates must be >= 1")
    n_grid = [int(n) for n in n_grid]
    samples = np.empty((replicates, len(n_grid)))
    for i in range(replicates):
        gen = RngStream(master_seed, i).generator
        for j, n in enumerate(n_grid):
            samples[i, j] = lerw_box_length(n, gen)
    return ScalingResult.from_samples("lerw-growth", n_grid, samples, kappa, 1, window, master_seed, bootstrap)


def realizations(L: int, margin: float, count: int, master_seed: int = 0, boundary: str = "wired", start: int = 0,
                 with_rng: bool = False):
    """Independent realizations ``i = start .. start + count - 1`` on ``Window.with_margin(L, margin)``.

    With ``with_rng`` each item is ``(u, stream)``, the stream positioned just
    after the draws that built ``u``.
    """
    from ustlab.wilson import sample_ust

    w = Window.with_margin(L, margin, boundary)
    for i in range(start, start + count):
        rs = RngStream(master_seed, i)
        u = sample_ust(w, rng=rs)
        yield (u, rs) if with_rng else u


def volume_profile(u, r_grid, center=Site(0, 0)) -> np.ndarray:
    """``mu(B_U(center, r))`` for each radius."""
    from ustlab.treemetrics import _ball_bfs

    r_grid = np.asarray(r_grid, dtype=np.int64)
    nodes, _, dist = _ball_bfs(u.indptr, u.indices, u.node(center), int(r_grid.max()))
    mu = u.degree[nodes]
    order = np.argsort(dist, kind="stable")
    csum = np.cumsum(mu[order])
    ds = dist[order]
    idx = np.searchsorted(ds, r_grid, side="right") - 1
    return csum[idx].astype(np.float64)


def volume_radius_grid(L: int, points: int = 7, lo: float = 4) -> np.ndarray:
    # the top stays well inside the window; raise lo to drop the lattice-scale transient
    return geometric_grid(lo, L**kappa / 4, points)


def volume_scaling_experiment(L: int = 96, margin: float = 4, realizations_count: int = 300, master_seed: int = 0,
                              r_grid=None, window=None) -> ScalingResult:
    """Ensemble mean of ``mu(B_U(0, r))``; slope estimates ``d_f = 8/5``."""
    r_grid = volume_radius_grid(L) if r_grid is None else np.asarray(r_grid)
    rows = [volume_profile(u, r_grid) for u in realizations(L, margin, realizations_count, master_seed)]
    return ScalingResult.from_samples(f"volume[L={L},margin={margin}]", r_grid, np.array(rows), d_f, 1, window,
                                      master_seed)


def ondiag_scaling_experiment(L: int = 96, margin: float = 4, n_max: int = 1 << 13, realizations_count: int = 200,
                              master_seed: int = 0, n_grid=None, radius=None, window=None) -> ScalingResult:
    """Averaged smoothed return probability; exponent estimates ``d_f/d_w = 8/13``."""
    from ustlab.kernel import heat_kernel_exact

    n_grid = geometric_grid(16, n_max, 10) if n_grid is None else np.asarray(n_grid)
    rows = []
    for u in realizations(L, margin, realizations_count, master_seed):
        prof = heat_kernel_exact(u, (0, 0), int(n_grid.max()), radius=radius)
        rows.append(prof.on_diagonal[n_grid])
    return ScalingResult.from_samples(f"ondiag[L={L}]", n_grid, np.array(rows), d_f / d_w, -1, window, master_seed)


def displacement_experiment(p: float = 1.0, L: int = 64, margin: float = 4, realizations_count: int = 1000,
                            walks_per: int = 10, checkpoints=None, master_seed: int = 0, window=None):
    """Mean ``|X_n|^p`` and ``d_U(0, X_n)^p`` from walks on fresh realizations.

    Returns ``(extrinsic, intrinsic)`` ScalingResults with targets
    ``p/(kappa d_w) = 4p/13`` and ``p/d_w = 5p/13``; one sample row per walk.
    """
    from ustlab.kernel import srw_checkpoints

    checkpoints = geometric_grid(16, 1 << 13, 10) if checkpoints is None else np.asarray(checkpoints)
    ext, intr = [], []
    for u, gen in realizations(L, margin, realizations_count, master_seed, with_rng=True):
        for _ in range(walks_per):
            e, d, _, _ = srw_checkpoints(u, (0, 0), checkpoints, gen)
            ext.append(np.asarray(e, dtype=np.float64) ** p)
            intr.append(np.asarray(d, dtype=np.float64) ** p)
    a = ScalingResult.from_samples(f"displacement-euclid[p={p}]", checkpoints, np.array(ext), p / (kappa * d_w), 1,
                                   window, master_seed)
    b = ScalingResult.from_samples(f"displacement-intrinsic[p={p}]", checkpoints, np.array(intr), p / d_w, 1, window,
                                   master_seed)
    return a, b


# --------------------------------------------------------------------------
# path-length tails


def path_length_samples(x, replicates: int, master_seed: int = 0, L_out: int | None = None) -> np.ndarray:
    """``d_U(0, x)`` in the wired window of half-width ``L_out`` (default ``64 d_inf(0, x)``)."""
    from ustlab.wilson import TreeScratch, ust_branch

    x = Site(int(x[0]), int(x[1]))
    d = max(abs(x[0]), abs(x[1]))
    if d < 1:
        raise ValidationError("x must differ from the origin")
    w = Window(L_out or 64 * d, L_out or 64 * d)
    sc = TreeScratch(w, w.root_index)
    out = np.empty(replicates, np.int64)
    for i in range(replicates):
        path, _ = ust_branch(w, x, Site(0, 0), RngStream(master_seed, i), scratch=sc)
        out[i] = path.shape[0] - 1
    return out


@dataclass
class TailEstimate:
    law: str
    x: tuple
    lam_grid: list
    counts: list
    n: int
    probabilities: list
    intervals: list
    slope: float | None
    slope_stderr: float | None
    target_slope: float
    dropped: list = field(default_factory=list)

    def monotone(self) -> bool:
        """Non-increasing along the lambda grid, up to overlapping intervals."""
        p = self.probabilities
        iv = self.intervals
        return all(p[i + 1] <= p[i] or iv[i + 1][0] <= iv[i][1] for i in range(len(p) - 1))


def _tail(law, x, lengths, lam_grid, event, transform, target) -> TailEstimate:
    d = max(abs(x[0]), abs(x[1]))
    n = len(lengths)
    counts, probs, ivs = [], [], []
    for lam in lam_grid:
        k = int(np.count_nonzero(event(lengths, lam, d**kappa)))
        counts.append(k)
        probs.append(k / n)
        ivs.append(wilson_interval(k, n))
    xs, ys, dropped = [], [], []
    for lam, p in zip(lam_grid, probs):
        t = transform(lam, p)
        if t is None:
            dropped.append(lam)
        else:
            xs.append(t[0])
            ys.append(t[1])
    slope = se = None
    if len(xs) >= 2:
        lf = fit_line(xs, ys)
        slope, se = lf.slope, lf.stderr
    return TailEstimate(law, tuple(x), list(lam_grid), counts, n, probs, ivs, slope, se, target, dropped)


def short_path_tail(x, lam_grid, replicates: int, master_seed: int = 0, L_out=None, lengths=None) -> TailEstimate:
    """``P(d_U(0, x) < d_inf(0, x)^kappa / lam)``; slope of ``log(-log p)`` against ``log lam``."""
    if lengths is None:
        lengths = path_length_samples(x, replicates, master_seed, L_out)

    def tr(lam, p):
        if p <= 0 or p >= 1:
            return None
        return math.log(lam), math.log(-math.log(p))

    return _tail("short", x, lengths, lam_grid, lambda ln, lam, s: ln < s / lam, tr, 4.0)


def long_path_tail(x, lam_grid, replicates: int, master_seed: int = 0, L_out=None, lengths=None) -> TailEstimate:
    """``P(d_U(0, x) >= lam d_inf(0, x)^kappa)``; log-log slope (target ``-(2-kappa)/kappa``)."""
    if lengths is None:
        lengths = path_length_samples(x, replicates, master_seed, L_out)

    def tr(lam, p):
        if p <= 0:
            return None
        return math.log(lam), math.log(p)

    return _tail("long", x, lengths, lam_grid, lambda ln, lam, s: ln >= lam * s, tr, -(2 - kappa) / kappa)


# --------------------------------------------------------------------------
# off-diagonal decay and curve collapse


@dataclass
class OffDiagFit:
    slope: float
    theta: float
    stderr: float
    n_points: int
    inconclusive: bool


def offdiag_stretched_fit(n, r, p, d_f_: float = d_f, d_w_: float = d_w, kappa_: float = kappa,
                          min_points: int = 3) -> OffDiagFit:
    """Fit ``log(-log(p n^{d_f/d_w}))`` against ``log(r^{kappa d_w}/n)``.

    The slope is ``theta/(d_w - 1)``. Points outside the tail regime
    (``p n^{d_f/d_w} >= 1`` or ``p <= 0``) are skipped.
    """
    n = np.asarray(n, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = p * n ** (d_f_ / d_w_)
    keep = (p > 0) & (q < 1) & (r > 0)
    if keep.sum() < min_points:
        return OffDiagFit(float("nan"), float("nan"), float("nan"), int(keep.sum()), True)
    X = np.log(r[keep] ** (kappa_ * d_w_) / n[keep])
    Y = np.log(-np.log(q[keep]))
    lf = fit_line(X, Y)
    return OffDiagFit(lf.slope, lf.slope * (d_w_ - 1), lf.stderr * (d_w_ - 1), lf.n, False)


@dataclass
class CurveCollapseReport:
    n_grid: list
    t_grid: np.ndarray
    curves: dict
    max_distance: float
    scale: float
    collapsed: np.ndarray
    fit: PowerLawFit

    @property
    def relative_distance(self) -> float:
        return self.max_distance / self.scale

    @property
    def exponent(self) -> float:
        return -self.fit.slope


def rescaled_curve(mean_diag: np.ndarray, n: int, t_grid, d_f_: float = d_f, d_w_: float = d_w) -> np.ndarray:
    """``t -> n^{d_f/d_w} p~_{floor(t n)}``."""
    idx = np.floor(np.asarray(t_grid, dtype=np.float64) * n).astype(np.int64)
    if idx.max() >= mean_diag.shape[0]:
        raise ValidationError(f"profile too short for t*n up to {idx.max()}")
    return n ** (d_f_ / d_w_) * mean_diag[idx]


def curve_collapse(mean_diag: np.ndarray, n_grid, t_grid) -> CurveCollapseReport:
    """Overlay rescaled averaged on-diagonal curves; all share ``t_grid``.

    The curve scale is the collapsed curve's value at ``t = 1`` (interpolated
    in log-log coordinates when 1 is not on the grid).
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid <= 0):
        raise ValidationError("t grid must lie in (0, inf)")
    n_grid = [int(n) for n in n_grid]
    curves = {n: rescaled_curve(np.asarray(mean_diag), n, t_grid) for n in n_grid}
    dist = 0.0
    for i, a in enumerate(n_grid):
        for b in n_grid[i + 1:]:
            dist = max(dist, float(np.max(np.abs(curves[a] - curves[b]))))
    collapsed = np.mean([curves[n] for n in n_grid], axis=0)
    scale = float(np.exp(np.interp(0.0, np.log(t_grid), np.log(collapsed))))
    fit = fit_power_law(zip(t_grid, collapsed))
    return CurveCollapseReport(n_grid, t_grid, curves, dist, scale, collapsed, fit)


# --------------------------------------------------------------------------
# volume fluctuations


@dataclass
class FluctuationReport:
    r_grid: np.ndarray
    upper_normalized_max: float
    lower_normalized_min: float
    running_max: np.ndarray
    ratio_min: float
    big_volume: dict
    small_volume: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_grid"] = self.r_grid.tolist()
        d["running_max"] = self.running_max.tolist()
        return d


def fluctuation_tracker(volumes, r_grid, lam_grid=(1.5, 2.0, 3.0)) -> FluctuationReport:
    """Extremes of ``mu(B_U(0, r)) / r^{d_f}`` under the two log-log normalizations.

    ``volumes`` has one row per realization. Radii with ``log log r <= 0`` are
    left out of the normalized statistics. ``running_max[i]`` is the largest
    upper-normalized ratio among the first ``i + 1`` realizations.
    """
    v = np.asarray(volumes, dtype=np.float64)
    r = np.asarray(r_grid, dtype=np.float64)
    ratio = v / r**d_f
    ok = np.log(np.log(np.maximum(r, 1.0 + 1e-12))) > 0 if r.size else np.zeros(0, bool)
    ll = np.log(np.log(r[ok]))
    upper = ratio[:, ok] / ll**0.2
    lower = ratio[:, ok] * ll**0.6
    per_real = upper.max(axis=1) if upper.size else np.zeros(v.shape[0])
    running = np.maximum.accumulate(per_real)
    big = {float(l): float(np.mean(v >= l * r ** (2 / kappa))) for l in lam_grid}
    small = {float(l): float(np.mean(v <= r ** (2 / kappa) / l)) for l in lam_grid}
    return FluctuationReport(r, float(upper.max()) if upper.size else float("nan"),
                             float(lower.min()) if lower.size else float("nan"), running,
                             float(ratio.min()), big, small)
