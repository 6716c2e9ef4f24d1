"""Experiment orchestration: declarative specs, deterministic sweeps, persistence.

A run writes into ``spec.output_dir``::

    spec.toml, spec.json      the spec, in both formats
    replicates/r00000042.json one record per finished replicate (resume unit)
    results.csv | results.json long-format samples, ordered by replicate
    fit.json                  reductions (FitReport objects and summaries)
    manifest.json             spec hash, code version, streams, digests

Replicate ``i`` always draws from ``RngStream(master_seed, i)`` and its
record depends on nothing else, so outputs are identical for any worker count
or scheduling. Every output file carries the spec hash.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from ustlab import __version__
from ustlab.errors import CorruptInputError, CorruptSnapshotError, RunFailedError, UstLabError, ValidationError
from ustlab.lattice import BOUNDARIES, FREE, WIRED, Site, Window
from ustlab.rng import RngStream

log = logging.getLogger("ustlab.harness")

SPEC_VERSION = 1
KINDS = ("lerw-growth", "volume", "ondiag", "offdiag", "displacement", "tails", "collapse", "events", "harnack",
         "packing", "fluctuation")
OUTPUT_FORMATS = ("csv", "json")
ENV_WORKERS = "USTLAB_WORKERS"

# fields that never influence results; left out of the spec hash
_VOLATILE = ("workers", "output_dir")


# --------------------------------------------------------------------------
# spec


@dataclass
class ExperimentSpec:
    """Declarative description of one experiment.

    Grid fields are used as the kind needs them: ``n_grid`` holds times
    (walk lengths, kernel times, box sizes), ``r_grid`` radii or distances,
    ``lam_grid`` tail thresholds and ``t_grid`` rescaled times. Kind-specific
    scalars go in ``params``.
    """

    kind: str
    replicates: int
    master_seed: int = 0
    L: int = 96
    margin: float = 4.0
    boundary: str = WIRED
    n_grid: list = field(default_factory=list)
    r_grid: list = field(default_factory=list)
    lam_grid: list = field(default_factory=list)
    t_grid: list = field(default_factory=list)
    fit_window: list | None = None
    max_failure_fraction: float = 0.0
    workers: int = 1
    output_dir: str = "results"
    params: dict = field(default_factory=dict)
    version: int = SPEC_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.version != SPEC_VERSION:
            raise ValidationError(f"unsupported spec version {self.version}")
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise ValidationError("replicates must be >= 1")
        if self.master_seed < 0:
            raise ValidationError("master_seed must be >= 0")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.boundary not in BOUNDARIES:
            raise ValidationError(f"boundary must be one of {BOUNDARIES}")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ValidationError("max_failure_fraction must lie in [0, 1]")
        if self.fit_window is not None and len(self.fit_window) != 2:
            raise ValidationError("fit_window must be [lo, hi]")
        Window.with_margin(self.L, self.margin, self.boundary)
        for name in _GRIDS_NEEDED.get(self.kind, ()):
            g = getattr(self, name)
            if not g:
                raise ValidationError(f"{self.kind} needs a nonempty {name}")
            if any((not isinstance(v, (int, float))) or v <= 0 for v in g):
                raise ValidationError(f"{name} must hold positive numbers")
        if self.kind == "events":
            self._validate_events()

    def _validate_events(self) -> None:
        # build the paths now so bad parameters fail before any replicate runs
        import warnings

        p = self.params
        if float(p.get("lam", 8)) < 2 or int(p.get("k", 4)) < 1:
            raise ValidationError("events need lam >= 2 and k >= 1")
        Ns = p.get("N", [1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            event_paths(p.get("shape", "straight"), Ns if isinstance(Ns, list) else [Ns], int(p.get("m", 32)),
                        p.get("m0"))

    # -- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["fit_window"] is None:
            del d["fit_window"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown spec fields {sorted(extra)}")
        if "kind" not in d or "replicates" not in d:
            raise ValidationError("spec needs 'kind' and 'replicates'")
        try:
            return cls(**d)
        except TypeError as e:
            raise ValidationError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ValidationError(f"bad JSON spec: {e}") from None

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentSpec":
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as e:
            raise ValidationError(f"bad TOML spec: {e}") from None

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            return cls.from_json(text)
        if path.suffix == ".toml":
            return cls.from_toml(text)
        raise ValidationError("spec files must end in .toml or .json")

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json() if path.suffix == ".json" else self.to_toml())

    @property
    def spec_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _VOLATILE}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def window(self) -> Window:
        return Window.with_margin(self.L, self.margin, self.boundary)


_GRIDS_NEEDED = {
    "lerw-growth": ("n_grid",),
    "volume": ("r_grid",),
    "ondiag": ("n_grid",),
    "offdiag": ("n_grid", "r_grid"),
    "displacement": ("n_grid",),
    "tails": ("lam_grid",),
    "collapse": ("n_grid", "t_grid"),
    "harnack": ("r_grid",),
    "packing": ("r_grid",),
    "fluctuation": ("r_grid",),
}


# --------------------------------------------------------------------------
# per-replicate work
#
# Each function returns a JSON-ready dict. Floats survive the JSON round trip
# exactly, so reductions over re-read records match in-memory ones.


def _tree(spec, i):
    from ustlab.wilson import sample_ust

    rs = RngStream(spec.master_seed, i)
    return sample_ust(spec.window(), rng=rs), rs


def _rep_lerw(spec, i):
    from ustlab.walk import lerw_box_length

    gen = RngStream(spec.master_seed, i).generator
    return {"values": [lerw_box_length(int(n), gen) for n in spec.n_grid]}


def _rep_volume(spec, i):
    from ustlab.stats import volume_profile

    u, _ = _tree(spec, i)
    return {"values": volume_profile(u, spec.r_grid).tolist()}


def _kernel(spec, u, times, track=()):
    from ustlab.kernel import heat_kernel_exact

    n_max = int(spec.params.get("n_max", max(times)))
    return heat_kernel_exact(u, (0, 0), n_max, track=track, radius=spec.params.get("radius"))


def _rep_ondiag(spec, i):
    u, _ = _tree(spec, i)
    prof = _kernel(spec, u, spec.n_grid)
    return {"values": prof.on_diagonal[np.asarray(spec.n_grid, np.int64)].tolist(), "leaked": prof.leaked}


def _collapse_times(spec) -> np.ndarray:
    t = np.asarray(spec.t_grid, dtype=np.float64)
    return np.unique(np.concatenate([np.floor(t * int(n)).astype(np.int64) for n in spec.n_grid]))


def _rep_collapse(spec, i):
    u, _ = _tree(spec, i)
    times = _collapse_times(spec)
    prof = _kernel(spec, u, times)
    return {"values": prof.on_diagonal[times].tolist(), "leaked": prof.leaked}


def _rep_offdiag(spec, i):
    u, _ = _tree(spec, i)
    track = [Site(int(r), 0) for r in spec.r_grid]
    prof = _kernel(spec, u, spec.n_grid, track)
    sel = prof.off_diagonal[np.asarray(spec.n_grid, np.int64)]
    return {"values": sel.tolist(), "leaked": prof.leaked}


def _rep_displacement(spec, i):
    from ustlab.kernel import srw_checkpoints

    u, rs = _tree(spec, i)
    p = float(spec.params.get("p", 1.0))
    ext, intr = [], []
    for _ in range(int(spec.params.get("walks_per", 10))):
        e, d, _, _ = srw_checkpoints(u, (0, 0), np.asarray(spec.n_grid, np.int64), rs)
        ext.append((np.asarray(e, np.float64) ** p).tolist())
        intr.append((np.asarray(d, np.float64) ** p).tolist())
    return {"euclid": ext, "intrinsic": intr}


def _tail_point(spec):
    x = spec.params.get("x", [8, 0])
    return Site(int(x[0]), int(x[1]))


def _rep_tails(spec, i):
    # same draws as stats.path_length_samples
    return {"length": int(_tail_sample(_tail_point(spec), spec.master_seed, i, spec.params.get("L_out")))}


_CACHE: dict = {}


def _tail_sample(x, seed, i, L_out):
    from ustlab.wilson import TreeScratch, ust_branch

    d = max(abs(x[0]), abs(x[1]))
    key = ("tails", L_out or 64 * d)
    if key not in _CACHE:
        w = Window(L_out or 64 * d, L_out or 64 * d)
        _CACHE[key] = (w, TreeScratch(w, w.root_index))
    w, sc = _CACHE[key]
    path, _ = ust_branch(w, x, Site(0, 0), RngStream(seed, i), scratch=sc)
    return path.shape[0] - 1


def event_paths(shape: str, Ns, m: int, m0: int | None = None) -> list:
    """Paths for the ``events`` kind and the ``event`` command."""
    from ustlab.events import (build_grid_event_paths, build_s_path, build_spiral_path, build_straight_path)

    m0 = m if m0 is None else m0
    out = []
    for N in Ns:
        if shape == "straight":
            out.append(build_straight_path((N * m, 0), m, m0))
        elif shape == "grid":
            out.extend(build_grid_event_paths(N, m, m0))
        elif shape == "spiral":
            out.append(build_spiral_path(N, m, m0))
        elif shape == "s":
            out.append(build_s_path(N, m, m0))
        else:
            raise ValidationError(f"shape must be straight, grid, spiral or s; got {shape!r}")
    return out


def _event_samplers(spec):
    key = ("events", spec.spec_hash)
    if key not in _CACHE:
        import warnings

        from ustlab.events import EventSampler

        p = spec.params
        Ns = p.get("N", [1])
        Ns = [int(n) for n in (Ns if isinstance(Ns, list) else [Ns])]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            paths = event_paths(p.get("shape", "straight"), Ns, int(p.get("m", 32)), p.get("m0"))
        groups: dict = {}
        for path in paths:
            groups.setdefault((path.start, path.m), []).append(path)
        _CACHE[key] = [EventSampler(g, float(p.get("lam", 8)), int(p.get("k", 4))) for g in groups.values()]
    return _CACHE[key]


def _rep_events(spec, i):
    out = []
    for smp in _event_samplers(spec):
        for j, (reached, passed, rep) in enumerate(smp.trial(spec.master_seed, i)):
            ok = rep is not None and rep.overall
            out.append({"event_id": smp.event_id(j), "reached": list(reached), "passed": list(passed),
                        "success": ok, "sandwich_ok": rep.sandwich_ok if ok else None,
                        "d_U": rep.d_U if ok else None})
    return {"paths": out}


def _rep_harnack(spec, i):
    from ustlab.events import harnack_ratio

    u, rs = _tree(spec, i)
    trials = int(spec.params.get("trials", 4))
    adv = bool(spec.params.get("adversarial", False))
    vals = []
    for R in spec.r_grid:
        rep = harnack_ratio(u, (0, 0), int(R), trials, rs, adversarial=adv)
        m = rep.max_ratio
        vals.append(None if not math.isfinite(m) else m)
    return {"values": vals}


def _rep_packing(spec, i):
    from ustlab.events import packing_number

    u, _ = _tree(spec, i)
    delta = float(spec.params.get("delta", 0.125))
    return {"values": [packing_number(u, (0, 0), int(R), delta) for R in spec.r_grid]}


_REPLICATE = {
    "lerw-growth": _rep_lerw,
    "volume": _rep_volume,
    "ondiag": _rep_ondiag,
    "offdiag": _rep_offdiag,
    "displacement": _rep_displacement,
    "tails": _rep_tails,
    "collapse": _rep_collapse,
    "events": _rep_events,
    "harnack": _rep_harnack,
    "packing": _rep_packing,
    "fluctuation": _rep_volume,
}


def run_replicate(spec: ExperimentSpec, i: int) -> dict:
    """The record for replicate ``i``; errors are captured, not raised."""
    rec = {"spec_hash": spec.spec_hash, "replicate": i, "stream": [spec.master_seed, i]}
    try:
        rec["data"] = _REPLICATE[spec.kind](spec, i)
        rec["status"] = "ok"
    except Exception as e:  # noqa: BLE001 - recorded per replicate
        rec["status"] = "error"
        rec["error"] = f"{type(e).__name__}: {e}"
    return rec


def _worker(args):
    spec_dict, i = args
    return run_replicate(ExperimentSpec.from_dict(spec_dict), i)


# --------------------------------------------------------------------------
# long-format rows and reductions


def _rows(spec, rec) -> list:
    """``(observable, x, value)`` triples of one record."""
    d = rec["data"]
    k = spec.kind
    if k in ("lerw-growth", "volume", "ondiag", "fluctuation", "harnack", "packing"):
        xs = spec.n_grid if k in ("lerw-growth", "ondiag") else spec.r_grid
        return [(k, x, v) for x, v in zip(xs, d["values"])]
    if k == "collapse":
        return [("ondiag", int(t), v) for t, v in zip(_collapse_times(spec), d["values"])]
    if k == "offdiag":
        return [(f"offdiag[r={r}]", n, row[j]) for n, row in zip(spec.n_grid, d["values"])
                for j, r in enumerate(spec.r_grid)]
    if k == "displacement":
        out = []
        for w, (e, q) in enumerate(zip(d["euclid"], d["intrinsic"])):
            out += [(f"euclid[walk={w}]", x, v) for x, v in zip(spec.n_grid, e)]
            out += [(f"intrinsic[walk={w}]", x, v) for x, v in zip(spec.n_grid, q)]
        return out
    if k == "tails":
        return [("d_U", 0, d["length"])]
    if k == "events":
        return [(p["event_id"], "success", int(p["success"])) for p in d["paths"]]
    raise AssertionError(k)


def reduce_records(spec: ExperimentSpec, records: list) -> dict:
    """Fit summaries from the successful records, in replicate order."""
    from ustlab import stats

    ok = [r["data"] for r in records if r["status"] == "ok"]
    k = spec.kind
    out = {"spec_hash": spec.spec_hash, "kind": k, "replicates_ok": len(ok), "replicates": spec.replicates}
    if not ok:
        return out
    win = tuple(spec.fit_window) if spec.fit_window else None
    seed = spec.master_seed

    def scaling(name, x, samples, target, sign=1):
        return stats.ScalingResult.from_samples(name, x, np.asarray(samples, np.float64), target, sign, win, seed)

    if k == "lerw-growth":
        res = scaling("lerw-growth", spec.n_grid, [d["values"] for d in ok], stats.kappa)
        out["fits"] = [res.fit_report()]
        out["means"] = res.means.tolist()
    elif k == "volume":
        res = scaling(f"volume[L={spec.L},margin={spec.margin:g}]", spec.r_grid, [d["values"] for d in ok],
                      stats.d_f)
        out["fits"] = [res.fit_report()]
        out["means"] = res.means.tolist()
    elif k == "ondiag":
        res = scaling(f"ondiag[L={spec.L}]", spec.n_grid, [d["values"] for d in ok], stats.d_f / stats.d_w, -1)
        out["fits"] = [res.fit_report()]
        out["means"] = res.means.tolist()
        out["max_leaked"] = max(d["leaked"] for d in ok)
    elif k == "collapse":
        times = _collapse_times(spec)
        mean = stats.column_means([d["values"] for d in ok])
        full = np.full(int(times.max()) + 1, np.nan)
        full[times] = mean
        rep = stats.curve_collapse(full, spec.n_grid, spec.t_grid)
        out["relative_distance"] = rep.relative_distance
        out["scale"] = rep.scale
        out["collapsed"] = rep.collapsed.tolist()
        out["fits"] = [{"experiment": "collapse", "target_exponent": stats.d_f / stats.d_w,
                        "estimate": rep.exponent, "stderr": rep.fit.stderr, "window": list(rep.fit.window),
                        "n_points": rep.fit.n_points, "seed": seed}]
        out["max_leaked"] = max(d["leaked"] for d in ok)
    elif k == "offdiag":
        mean = np.mean([d["values"] for d in ok], axis=0)
        nn, rr = np.meshgrid(np.asarray(spec.n_grid, float), np.asarray(spec.r_grid, float), indexing="ij")
        f = stats.offdiag_stretched_fit(nn.ravel(), rr.ravel(), mean.ravel())
        out["offdiag"] = asdict(f)
        out["mean"] = mean.tolist()
    elif k == "displacement":
        p = float(spec.params.get("p", 1.0))
        a = scaling(f"displacement-euclid[p={p:g}]", spec.n_grid, [r for d in ok for r in d["euclid"]],
                    p / (stats.kappa * stats.d_w))
        b = scaling(f"displacement-intrinsic[p={p:g}]", spec.n_grid, [r for d in ok for r in d["intrinsic"]],
                    p / stats.d_w)
        out["fits"] = [a.fit_report(), b.fit_report()]
    elif k == "tails":
        x = _tail_point(spec)
        lengths = np.array([d["length"] for d in ok], np.int64)
        sh = stats.short_path_tail(x, spec.lam_grid, len(ok), lengths=lengths)
        lo = stats.long_path_tail(x, spec.lam_grid, len(ok), lengths=lengths)
        out["short"] = asdict(sh)
        out["long"] = asdict(lo)
    elif k == "events":
        from ustlab.events import EventEstimate, fit_event_decay

        ests = []
        ids = [p["event_id"] for p in ok[0]["paths"]]
        for j, eid in enumerate(ids):
            rows = [d["paths"][j] for d in ok]
            succ = sum(r["success"] for r in rows)
            reached = np.sum([r["reached"] for r in rows], axis=0).tolist()
            passed = np.sum([r["passed"] for r in rows], axis=0).tolist()
            viol = sum(1 for r in rows if r["success"] and not r["sandwich_ok"])
            n = len(rows)
            ests.append(EventEstimate(eid, n, succ, succ / n, stats.wilson_interval(succ, n), succ == 0,
                                      reached, passed, viol))
        out["estimates"] = [{**{k2: v for k2, v in asdict(e).items() if k2 != "detections"},
                             "conditional_rates": e.conditional_rates} for e in ests]
        out["decay"] = asdict(fit_event_decay(ests))
    elif k == "harnack":
        vals = np.array([[np.inf if v is None else v for v in d["values"]] for d in ok], np.float64)
        running = np.maximum.accumulate(vals, axis=0)
        out["max_ratio"] = [None if not math.isfinite(v) else float(v) for v in running[-1]]
        out["running_max"] = [[None if not math.isfinite(v) else float(v) for v in row] for row in running]
        out["R"] = list(spec.r_grid)
    elif k == "packing":
        vals = np.array([d["values"] for d in ok], np.int64)
        out["R"] = list(spec.r_grid)
        out["max"] = vals.max(axis=0).tolist()
        out["mean"] = vals.mean(axis=0).tolist()
    elif k == "fluctuation":
        lam = spec.lam_grid or [1.5, 2.0, 3.0]
        out["fluctuation"] = stats.fluctuation_tracker([d["values"] for d in ok], spec.r_grid, lam).to_dict()
    return out


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


# --------------------------------------------------------------------------
# manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    spec_hash: str
    code_version: str
    master_seed: int
    stream_indices: list
    wall_time: float
    files: dict
    failures: list
    complete: bool
    output_dir: str = ""

    def to_json(self) -> str:
        return dumps(asdict(self))

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except (json.JSONDecodeError, TypeError) as e:
            raise CorruptInputError(f"bad manifest {path}: {e}") from None

    def verify(self, directory=None) -> None:
        """Raise :class:`CorruptInputError` unless every listed digest matches."""
        base = Path(directory or self.output_dir)
        for name, digest in self.files.items():
            p = base / name
            if not p.exists():
                raise CorruptInputError(f"missing output file {name}")
            if _sha256(p) != digest:
                raise CorruptInputError(f"digest mismatch for {name}")


# --------------------------------------------------------------------------
# run


def _rep_path(out: Path, i: int) -> Path:
    return out / "replicates" / f"r{i:08d}.json"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _read_record(path: Path, spec_hash: str) -> dict:
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CorruptInputError(f"unreadable replicate record {path}: {e}") from None
    if rec.get("spec_hash") != spec_hash:
        raise CorruptInputError(f"{path} belongs to spec {rec.get('spec_hash')}, not {spec_hash}")
    return rec


def resolve_workers(flag: int | None, spec: ExperimentSpec | None = None) -> int:
    """``--workers`` if given, else ``$USTLAB_WORKERS``, else the spec's count, else 1."""
    if flag is not None:
        n = flag
    elif os.environ.get(ENV_WORKERS):
        try:
            n = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise ValidationError(f"{ENV_WORKERS} must be an integer") from None
    else:
        n = spec.workers if spec is not None else 1
    if n < 1:
        raise ValidationError("workers must be >= 1")
    return n


def _write_results(out: Path, spec: ExperimentSpec, records: list, fmt: str) -> str:
    h = spec.spec_hash
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["spec_hash", "replicate", "observable", "x", "value"])
        for rec in records:
            if rec["status"] != "ok":
                continue
            for obs, x, v in _rows(spec, rec):
                wr.writerow([h, rec["replicate"], obs, x, "" if v is None else repr(v)])
        name = "results.csv"
        _atomic_write(out / name, buf.getvalue())
    else:
        rows = [{"replicate": rec["replicate"], "observable": o, "x": x, "value": v}
                for rec in records if rec["status"] == "ok" for o, x, v in _rows(spec, rec)]
        name = "results.json"
        _atomic_write(out / name, dumps({"spec_hash": h, "rows": rows}))
    return name


def _gnuplot(spec: ExperimentSpec) -> str:
    return (f"# spec_hash {spec.spec_hash}\n"
            "set datafile separator ','\nset logscale xy\nset key off\n"
            f"set title '{spec.kind}'\n"
            "plot 'results.csv' using 4:5 every ::1 with points pt 7 ps 0.3\n")


def run_experiment(spec: ExperimentSpec, workers: int | None = None, output_format: str = "csv",
                   resume: bool = True, limit: int | None = None, gnuplot: bool = False) -> RunManifest:
    """Run (or finish) ``spec`` and write its outputs.

    Replicates already on disk are reused when ``resume`` is set. ``limit``
    caps how many new replicates this call computes; a partial run returns a
    manifest with ``complete = False`` and writes no aggregate files.
    """
    if output_format not in OUTPUT_FORMATS:
        raise ValidationError(f"output format must be one of {OUTPUT_FORMATS}")
    spec.validate()
    workers = resolve_workers(workers, spec)
    out = Path(spec.output_dir)
    (out / "replicates").mkdir(parents=True, exist_ok=True)
    h = spec.spec_hash
    t0 = time.perf_counter()
    if resume and (out / "manifest.json").exists():
        other = RunManifest.load(out / "manifest.json").spec_hash
        if other != h:
            raise CorruptInputError(f"{out} holds a run of spec {other}")
    spec_doc = spec.to_dict()
    _atomic_write(out / "spec.json", dumps({**spec_doc, "spec_hash": h}))
    _atomic_write(out / "spec.toml", f"# spec_hash = {h}\n" + spec.to_toml())

    if resume:
        have = {i for i in range(spec.replicates) if _rep_path(out, i).exists()}
    else:
        have = set()
        for p in (out / "replicates").glob("r*.json"):
            p.unlink()
    todo = [i for i in range(spec.replicates) if i not in have]
    if limit is not None:
        todo = todo[:max(limit, 0)]
    log.info("spec %s: %d cached, %d to run on %d worker(s)", h, len(have), len(todo), workers)

    def sink(rec):
        _atomic_write(_rep_path(out, rec["replicate"]), dumps(rec))
        if rec["status"] != "ok":
            log.warning("replicate %d failed: %s", rec["replicate"], rec["error"])

    if workers == 1 or len(todo) <= 1:
        for i in todo:
            sink(run_replicate(spec, i))
    else:
        sd = spec.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(_worker, [(sd, i) for i in todo], chunksize=max(1, len(todo) // (8 * workers))):
                sink(rec)

    done = {i for i in range(spec.replicates) if _rep_path(out, i).exists()}
    complete = len(done) == spec.replicates
    files = {}
    failures = []
    if complete:
        records = [_read_record(_rep_path(out, i), h) for i in range(spec.replicates)]
        failures = [{"replicate": r["replicate"], "error": r["error"]} for r in records if r["status"] != "ok"]
        name = _write_results(out, spec, records, output_format)
        files[name] = _sha256(out / name)
        if len(failures) > spec.max_failure_fraction * spec.replicates:
            raise RunFailedError(f"{len(failures)} of {spec.replicates} replicates failed "
                                 f"(allowed fraction {spec.max_failure_fraction:g})")
        _atomic_write(out / "fit.json", dumps(reduce_records(spec, records)))
        files["fit.json"] = _sha256(out / "fit.json")
        if gnuplot:
            _atomic_write(out / "plot.gp", _gnuplot(spec))
            files["plot.gp"] = _sha256(out / "plot.gp")
    files["spec.json"] = _sha256(out / "spec.json")
    man = RunManifest(h, __version__, spec.master_seed, sorted(done), time.perf_counter() - t0, files, failures,
                      complete, str(out))
    _atomic_write(out / "manifest.json", man.to_json())
    return man


def load_fit_inputs(directory) -> tuple:
    """``(spec, records)`` from a results directory, refusing mixed spec hashes."""
    d = Path(directory)
    if not (d / "spec.json").exists():
        raise CorruptInputError(f"{d} has no spec.json")
    doc = json.loads((d / "spec.json").read_text())
    h = doc.pop("spec_hash", None)
    spec = ExperimentSpec.from_dict(doc)
    if h is not None and h != spec.spec_hash:
        raise CorruptInputError("spec.json does not match its recorded hash")
    hashes = {spec.spec_hash}
    records = []
    for p in sorted((d / "replicates").glob("r*.json")):
        rec = json.loads(p.read_text())
        hashes.add(rec.get("spec_hash"))
        records.append(rec)
    for name in ("results.json", "fit.json", "manifest.json"):
        if (d / name).exists():
            hashes.add(json.loads((d / name).read_text()).get("spec_hash"))
    if (d / "results.csv").exists():
        with open(d / "results.csv", newline="") as fh:
            rd = csv.DictReader(fh)
            hashes.update(row["spec_hash"] for row in rd)
    if len(hashes) > 1:
        raise CorruptInputError(f"mixed spec hashes in {d}: {sorted(map(str, hashes))}")
    if not records:
        raise CorruptInputError(f"{d} holds no replicate records")
    records.sort(key=lambda r: r["replicate"])
    return spec, records


# --------------------------------------------------------------------------
# snapshots
#
# Header (little endian, 36 bytes): magic "USTSNAP1", version u16, boundary u8
# (0 wired, 1 free), one pad byte, L u32, L_out u32, master seed u64, stream
# index u64. Then one u32 per lattice site in row-major order: the parent's
# site index; ROOT_SENTINEL at the root of a free tree; EXTERIOR_BASE + d when
# the parent is the wired root, reached through the exterior edge in
# direction d (0 +x, 1 -x, 2 +y, 3 -y).

SNAP_MAGIC = b"USTSNAP1"
SNAP_VERSION = 1
_HEADER = struct.Struct("<8sHBxIIQQ")
ROOT_SENTINEL = 0xFFFFFFFF
EXTERIOR_BASE = 0xFFFFFFF0
_BCODE = {WIRED: 0, FREE: 1}
_DX = (1, -1, 0, 0)
_DY = (0, 0, 1, -1)


def snapshot_bytes(u) -> bytes:
    w = u.window
    ns = w.n_sites
    par = u.parent[:ns].astype(np.int64)
    body = np.empty(ns, np.uint32)
    lat = (par >= 0) & (par < ns)
    body[lat] = par[lat]
    body[par < 0] = ROOT_SENTINEL
    if w.wired:
        ext = np.flatnonzero(par == ns)
        ed = u.exit_dir
        if ed is None or (ed[ext] < 0).any():
            raise ValidationError("wired realization lacks exterior directions")
        body[ext] = EXTERIOR_BASE + ed[ext].astype(np.uint32)
    prov = u.provenance
    head = _HEADER.pack(SNAP_MAGIC, SNAP_VERSION, _BCODE[w.boundary], w.L, w.L_out, prov.master_seed,
                        prov.stream_index)
    return head + body.astype("<u4").tobytes()


def save_realization(u, path) -> None:
    Path(path).write_bytes(snapshot_bytes(u))


def realization_from_bytes(data: bytes):
    from ustlab.wilson import Provenance, UstRealization

    if len(data) < _HEADER.size:
        raise CorruptSnapshotError("truncated header")
    magic, ver, bcode, L, L_out, seed, stream = _HEADER.unpack_from(data)
    if magic != SNAP_MAGIC:
        raise CorruptSnapshotError("bad magic")
    if ver != SNAP_VERSION:
        raise CorruptSnapshotError(f"unsupported snapshot version {ver}")
    boundary = {v: k for k, v in _BCODE.items()}.get(bcode)
    if boundary is None:
        raise CorruptSnapshotError(f"bad boundary code {bcode}")
    try:
        w = Window(L, L_out, boundary)
    except ValidationError as e:
        raise CorruptSnapshotError(f"bad window: {e}") from None
    ns = w.n_sites
    if len(data) != _HEADER.size + 4 * ns:
        raise CorruptSnapshotError(f"expected {_HEADER.size + 4 * ns} bytes, got {len(data)}")
    body = np.frombuffer(data, "<u4", offset=_HEADER.size).astype(np.int64)
    n = w.n_nodes
    parent = np.empty(n, np.int64)
    parent[:ns] = body
    exit_dir = None
    is_root = body == ROOT_SENTINEL
    is_ext = (body >= EXTERIOR_BASE) & (body < EXTERIOR_BASE + 4)
    is_lat = body < ns
    if not (is_root | is_ext | is_lat).all():
        raise CorruptSnapshotError("parent index out of range")
    idx = np.arange(ns)
    x, y = idx % w.side, idx // w.side
    px, py = body % w.side, body // w.side
    step = np.abs(px - x) + np.abs(py - y)
    if (is_lat & (step != 1)).any():
        raise CorruptSnapshotError("parent is not a lattice neighbour")
    if w.wired:
        if is_root.any():
            raise CorruptSnapshotError("wired snapshot has a lattice root")
        d = body - EXTERIOR_BASE
        nx = x + np.take(_DX, np.where(is_ext, d, 0))
        ny = y + np.take(_DY, np.where(is_ext, d, 0))
        inside = (nx >= 0) & (nx < w.side) & (ny >= 0) & (ny < w.side)
        if (is_ext & inside).any():
            raise CorruptSnapshotError("exterior edge from an interior site")
        parent[:ns][is_ext] = ns
        parent[ns] = -1
        exit_dir = np.full(n, -1, np.int8)
        exit_dir[:ns][is_ext] = d[is_ext]
    else:
        if is_ext.any() or is_root.sum() != 1:
            raise CorruptSnapshotError("free snapshot needs exactly one root and no exterior edges")
        parent[:ns][is_root] = -1
    try:
        u = UstRealization(w, parent, Provenance(seed, stream, "snapshot"), exit_dir)
    except ValueError as e:
        raise CorruptSnapshotError(str(e)) from None
    if not u.is_valid():
        raise CorruptSnapshotError("parent array is not a spanning tree")
    return u


def load_realization(path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CorruptSnapshotError(f"no such snapshot {path}") from None
    return realization_from_bytes(data)


__all__ = [
    "ExperimentSpec", "RunManifest", "run_experiment", "run_replicate", "reduce_records", "load_fit_inputs",
    "save_realization", "load_realization", "snapshot_bytes", "realization_from_bytes", "resolve_workers",
    "event_paths", "KINDS", "UstLabError",
]
