"""Command line front-end: train, sweep, gradcheck, report, gen.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import oracle
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, parse_f_list
from .data import ParseError
from .evaluation import (
    COHORTS,
    average_reports,
    compare,
    compare_reports,
    read_report,
    write_comparison,
)
from .figures import plot_comparison, plot_losses, plot_precision, plot_sweep
from .replay import RepulsionConfig, generate_replay
from .trainer import REPLAY_SEED, load_checkpoint, run_sequence

log = logging.getLogger("repulsive_replay")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _new_dir(parent: Path, label: str) -> Path:
    """A fresh timestamped directory; existing runs are never reused."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    base = parent / f"{stamp}-{label}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
    if getattr(args, "variant", None) is not None:
        cfg.set("train", "variant", args.variant)
    if getattr(args, "out", None) is not None:
        cfg.set("run", "out", args.out)
    cfg.train_config()


def _train_once(cfg: RunConfig, run_dir: Path, quiet: bool = False):
    ds = cfg.load_dataset()
    tasks = cfg.task_sequence(ds)
    mc = cfg.model_config(ds)
    tc = cfg.train_config()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.ini")
    result = run_sequence(tasks, mc, tc, out_dir=run_dir)
    report = result.final_report
    plot_precision(report, run_dir / "precision.png",
                   title=f"{tc.effective_variant}, seed {tc.seed}")
    plot_losses(result.history, run_dir / "losses.png")
    if not quiet:
        s = report.summary()
        print(f"{run_dir}: overall {s['overall']:.2f}  first50 {s['first50']:.2f}  "
              f"first20 {s['first20']:.2f}")
    return result


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if args.f is not None:
        fs = parse_f_list(args.f)
        if len(fs) != 1:
            raise ConfigError("--f", "train takes a single repulsion factor")
        cfg.set("train", "repulsion_factor", fs[0])
        cfg.train_config()
    tc = cfg.train_config()
    run_dir = _new_dir(Path(cfg.get("run", "out")), f"{tc.variant}-s{tc.seed}")
    _train_once(cfg, run_dir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    fs = parse_f_list(args.f) if args.f is not None else cfg.f_sweep
    # fail on bad data/model settings before any compute
    cfg.model_config(cfg.load_dataset())
    sweep_dir = _new_dir(Path(cfg.get("run", "out")), f"sweep-s{cfg.seed}")

    cfg.set("train", "variant", "baseline")
    base = _train_once(cfg, sweep_dir / "baseline").final_report
    rows = []
    for f in fs:
        cfg.set("train", "variant", "rr_ra")
        cfg.set("train", "repulsion_factor", f)
        rep = _train_once(cfg, sweep_dir / f"f{f:g}").final_report
        for name, _ in COHORTS:
            c = compare(base.cohort(name), rep.cohort(name))
            rows.append({"f": f, "cohort": name, "abs_change": c.absolute_change,
                         "rel_change": c.relative_change})
    lines = ["f,cohort,abs_change,rel_change"]
    lines += [f"{r['f']:g},{r['cohort']},{r['abs_change']:.2f},"
              + ("undefined" if math.isnan(r["rel_change"]) else f"{r['rel_change']:.2f}")
              for r in rows]
    (sweep_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    plot_sweep(rows, sweep_dir / "sweep.png")
    print("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = oracle.run_gradcheck(points=args.points, seed=args.seed or 0)
    failed = []
    for name, err in worst.items():
        ok = err <= oracle.TOLERANCE
        print(f"{name:20s} max rel error {err:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _reports(arg: str):
    dirs = [Path(p) for p in arg.split(",") if p]
    reports = []
    for d in dirs:
        path = d / "report.csv" if d.is_dir() else d
        if not path.is_file():
            raise UsageError(f"no report CSV at {path}")
        reports.append(read_report(path))
    if not reports:
        raise UsageError(f"no run directories in {arg!r}")
    return average_reports(reports)


def cmd_report(args) -> int:
    base, variant = _reports(args.baseline), _reports(args.variant)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        comps = write_comparison(base, variant, out / "comparison.csv")
        plot_comparison(base, variant, out / "comparison.png")
    else:
        comps = compare_reports(base, variant)
    for name, _ in COHORTS:
        print(f"{name},{base.cohort(name):.2f},{variant.cohort(name):.2f},{comps[name].formatted()}")
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def cmd_gen(args) -> int:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "checkpoint.ckpt"
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    classes = state.seen_classes
    if not classes:
        raise UsageError("checkpoint has not seen any class yet")
    mc = state.model_config
    shape = mc.image_shape if mc.image_shape and len(mc.image_shape) == 2 else (1, mc.feature_count)
    seed = state.train_config.seed if args.seed is None else args.seed
    f = state.train_config.repulsion.factor if args.f is None else parse_f_list(args.f)[0]
    batch = generate_replay(state.model, args.n, classes, seed + REPLAY_SEED, RepulsionConfig(f))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _new_dir(Path.cwd(), "gen")
    it = state.adam_t
    for idx, (img, label) in enumerate(zip(batch.images, batch.labels)):
        write_pgm(out / f"gen_{it}_{idx}_{label}.pgm", img.reshape(shape))
    print(f"wrote {len(batch)} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repulsive-replay", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train one run and write metrics, report and checkpoint")
    common(t)
    t.add_argument("--variant", choices=("baseline", "rr_ra"))
    t.add_argument("--f", help="repulsion factor")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="baseline plus one rr_ra run per repulsion factor")
    common(s)
    s.add_argument("--f", help="comma-separated repulsion factors")
    s.set_defaults(func=cmd_sweep, variant=None)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--points", type=int, default=20)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="compare two runs (comma-separate dirs to average seeds)")
    r.add_argument("baseline")
    r.add_argument("variant")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    gen = sub.add_parser("gen", help="dump generated samples as PGM images")
    gen.add_argument("checkpoint", help="checkpoint file or run directory")
    gen.add_argument("--n", type=int, default=16)
    gen.add_argument("--f", help="repulsion factor used to fill competing sets")
    common(gen, config=False)
    gen.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ParseError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
