"""Command-line entry point ``ustlab``.

Exit codes: 0 success, 2 validation error, 3 capacity or step-cap error
(including runs with too many failed replicates), 4 corrupt input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import tempfile
from pathlib import Path

from ustlab.errors import (CapacityError, CappedRunError, CorruptInputError, RunFailedError, UstLabError)

EXIT_OK, EXIT_VALIDATION, EXIT_CAPACITY, EXIT_CORRUPT = 0, 2, 3, 4

log = logging.getLogger("ustlab")


def _site(text: str) -> tuple:
    try:
        x, y = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y, got {text!r}") from None
    return (x, y)


def _globals(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--workers", type=int, default=default, help="worker processes (default $USTLAB_WORKERS or 1)")
    p.add_argument("--output-format", choices=("csv", "json"), default=default)
    p.add_argument("--log-level", default=default, choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ustlab", description="Uniform spanning tree experiments.")
    _globals(p, None)
    common = argparse.ArgumentParser(add_help=False)
    # accept the global flags after the subcommand as well
    _globals(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run an experiment spec (.toml or .json)")
    r.add_argument("spec")
    r.add_argument("--out", help="override the spec's output directory")
    r.add_argument("--fresh", action="store_true", help="discard cached replicates")
    r.add_argument("--gnuplot", action="store_true", help="also write plot.gp")

    s = sub.add_parser("sample", parents=[common], help="sample one realization to a snapshot")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--Lout", type=int, required=True)
    s.add_argument("--boundary", choices=("wired", "free"), default="wired")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stream", type=int, default=0)
    s.add_argument("--ordering", default="lexicographic", choices=("lexicographic", "random", "adaptive-spiral"))
    s.add_argument("--out", required=True)

    k = sub.add_parser("kernel", parents=[common], help="exact heat kernel from a snapshot")
    k.add_argument("--snapshot", required=True)
    k.add_argument("--origin", type=_site, default=(0, 0))
    k.add_argument("--nmax", type=int, required=True)
    k.add_argument("--radius", type=int)
    k.add_argument("--track", type=_site, nargs="*", default=[])
    k.add_argument("--out", required=True)

    f = sub.add_parser("fit", parents=[common], help="re-fit a results directory")
    f.add_argument("results_dir")

    e = sub.add_parser("event", parents=[common], help="estimate event frequencies")
    e.add_argument("--shape", choices=("straight", "grid", "spiral", "s"), default="straight")
    e.add_argument("--N", type=int, nargs="+", required=True)
    e.add_argument("--m", type=int, required=True)
    e.add_argument("--m0", type=int)
    e.add_argument("--lambda", dest="lam", type=float, required=True)
    e.add_argument("--k", type=int, required=True)
    e.add_argument("--replicates", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="results directory (default: a temporary one)")
    return p


def _emit(rows: list, fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows, indent=2, default=str) + "\n")
        return
    keys = list(rows[0]) if rows else []
    wr = csv.DictWriter(out, fieldnames=keys, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})


def _fit_rows(fit: dict) -> list:
    h = fit["spec_hash"]
    if "fits" in fit:
        return [{"spec_hash": h, **r} for r in fit["fits"]]
    if "estimates" in fit:
        return [{"spec_hash": h, "event_id": e["event_id"], "replicates": e["replicates"],
                 "successes": e["successes"], "p_hat": e["p_hat"], "ci_low": e["interval"][0],
                 "ci_high": e["interval"][1], "sandwich_violations": e["sandwich_violations"],
                 "conditional_rates": e["conditional_rates"]} for e in fit["estimates"]]
    return [{"spec_hash": h, **{k: v for k, v in fit.items() if k != "spec_hash"}}]


def _cmd_run(a) -> int:
    from ustlab.harness import ExperimentSpec, run_experiment

    spec = ExperimentSpec.load(a.spec)
    if a.out:
        spec.output_dir = a.out
    man = run_experiment(spec, workers=a.workers, output_format=a.output_format, resume=not a.fresh,
                         gnuplot=a.gnuplot)
    fit = json.loads((Path(spec.output_dir) / "fit.json").read_text())
    _emit(_fit_rows(fit), a.output_format)
    log.info("wrote %s in %.1fs", spec.output_dir, man.wall_time)
    return EXIT_OK


def _cmd_sample(a) -> int:
    from ustlab.harness import save_realization
    from ustlab.lattice import Window
    from ustlab.rng import RngStream
    from ustlab.wilson import sample_ust

    w = Window(a.L, a.Lout, a.boundary)
    u = sample_ust(w, a.ordering, RngStream(a.seed, a.stream))
    save_realization(u, a.out)
    _emit([{"file": a.out, "L": a.L, "L_out": a.Lout, "boundary": a.boundary, "seed": a.seed,
            "stream": a.stream, "n_nodes": u.n_nodes}], a.output_format)
    return EXIT_OK


def _cmd_kernel(a) -> int:
    from ustlab.harness import load_realization
    from ustlab.kernel import heat_kernel_exact

    u = load_realization(a.snapshot)
    prof = heat_kernel_exact(u, a.origin, a.nmax, track=a.track, radius=a.radius)
    if a.output_format == "json":
        doc = {"origin": list(prof.origin), "n_max": prof.n_max, "radius": prof.radius, "leaked": prof.leaked,
               "on_diagonal": prof.on_diagonal.tolist(), "tracked_sites": [list(s) for s in prof.tracked_sites],
               "off_diagonal": None if prof.off_diagonal is None else prof.off_diagonal.tolist()}
        Path(a.out).write_text(json.dumps(doc) + "\n")
    else:
        prof.to_csv(a.out)
    log.info("kernel to n=%d written to %s (leaked %.3g)", a.nmax, a.out, prof.leaked)
    return EXIT_OK


def _cmd_fit(a) -> int:
    from ustlab.harness import dumps, load_fit_inputs, reduce_records

    spec, records = load_fit_inputs(a.results_dir)
    if len(records) != spec.replicates:
        log.warning("%d of %d replicates present", len(records), spec.replicates)
    _emit(_fit_rows(json.loads(dumps(reduce_records(spec, records)))), a.output_format)
    return EXIT_OK


def _cmd_event(a) -> int:
    from ustlab.harness import ExperimentSpec, run_experiment

    out = a.out or tempfile.mkdtemp(prefix="ustlab-event-")
    params = {"shape": a.shape, "N": a.N, "m": a.m, "lam": a.lam, "k": a.k}
    if a.m0 is not None:
        params["m0"] = a.m0
    spec = ExperimentSpec("events", a.replicates, master_seed=a.seed, output_dir=out, params=params)
    run_experiment(spec, workers=a.workers, output_format=a.output_format)
    fit = json.loads((Path(out) / "fit.json").read_text())
    _emit(_fit_rows(fit), a.output_format)
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "sample": _cmd_sample, "kernel": _cmd_kernel, "fit": _cmd_fit, "event": _cmd_event}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    a.output_format = a.output_format or "csv"
    logging.basicConfig(level=a.log_level or "WARNING", format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[a.command](a)
    except CorruptInputError as e:
        log.error("corrupt input: %s", e)
        return EXIT_CORRUPT
    except (CapacityError, CappedRunError, RunFailedError) as e:
        log.error("%s", e)
        return EXIT_CAPACITY
    except (UstLabError, ValueError) as e:
        log.error("invalid input: %s", e)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        log.error("missing input: %s", e)
        return EXIT_CORRUPT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
