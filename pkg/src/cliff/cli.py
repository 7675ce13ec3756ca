"""Command-line interface: gen, train, eval, landscape, gradcheck, experiment."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import diffgraph as dg
from .config import RunConfig, dump_config, load_config
from .evalkit import LANDSCAPE_COLUMNS, detect_thresholds, landscape_sweep, mcc, quantized_agreement
from .experiment import dataset_for, run_seed, seeded_config, summarize
from .gradcheck import TOLERANCE, run_gradcheck
from .synthdata import read_dataset, write_dataset
from .trainer import NumericalAbort, encode_numpy, params_from_json, params_to_json, run_seeds, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("cliff")


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def write_atomic(files: dict[Path, str]) -> None:
    """Write every file to a temp sibling first, then rename all of them."""
    staged = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def sidecar_path(data_path) -> Path:
    return Path(data_path).with_suffix(".json")


def _config(args) -> RunConfig:
    try:
        return load_config(args.config)
    except (OSError, json.JSONDecodeError, ValidationError) as err:
        raise UsageError(f"invalid config {args.config}: {err}") from err


def _load_data(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset {path} not found")
    side = sidecar_path(path)
    try:
        return read_dataset(path, side if side.exists() else None), side.exists()
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot parse dataset {path}: {err}") from err


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seeds(dataset_seed=args.seed)
    out = Path(args.out)
    try:
        ds = dataset_for(cfg)
    except ValueError as err:
        raise UsageError(f"invalid data spec: {err}") from err
    with tempfile.TemporaryDirectory() as tmp:
        tmp_csv, tmp_json = Path(tmp) / "d.csv", Path(tmp) / "d.json"
        write_dataset(ds, tmp_csv, tmp_json)
        write_atomic({out: tmp_csv.read_text(), sidecar_path(out): tmp_json.read_text()})
    print(f"wrote {out} ({len(ds.z)} rows) and {sidecar_path(out)}")
    return EXIT_OK


def _train_files(result, enc, cfg: RunConfig, out: Path) -> dict[Path, str]:
    params_json = params_to_json(result.params, enc, seeds=cfg.seeds.model_dump(), init="uniform_fan_in")
    metrics = csv_text(("epoch", "l_uni", "l_biv", "l_kl_uni", "total"), result.metrics_rows())
    return {
        out / "params.json": params_json,
        out / "metrics.csv": metrics,
        out / "config.json": dump_config(cfg),
    }


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seeds(init_seed=args.seed)
    ds, _ = _load_data(args.data)
    out = Path(args.out)
    if (out / "params.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a trained model; pass --force to overwrite")
    enc = cfg.encoder_spec(ds.x.shape[1])
    try:
        result = train(ds.x, enc, cfg.train_config())
    except NumericalAbort as err:
        print(f"numerical abort: {err} (last good epoch {err.last_good_epoch})", file=sys.stderr)
        return EXIT_NUMERIC
    write_atomic(_train_files(result, enc, cfg, out))
    print(f"trained {cfg.train.epochs} epochs; final loss {result.history[-1].total if result.history else float('nan'):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds, has_side = _load_data(args.data)
    try:
        params, enc = params_from_json(Path(args.params).read_text())
        recovered = encode_numpy(params, ds.x, enc)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot use params {args.params}: {err}") from err
    if not np.all(np.isfinite(recovered)):
        print("recovered factors are not finite", file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out) if args.out else Path(args.params).parent
    report = mcc(ds.z, recovered)
    files = {out / "mcc.json": report.to_json() + "\n"}
    agreement = None
    if has_side and ds.spec is not None:
        det = detect_thresholds(recovered, cfg.kernel_config(), cfg.eval.min_prominence, cfg.eval.edge_fraction)
        thr = quantized_agreement(ds.z, ds.spec, recovered, det)
        files[out / "thresholds.json"] = thr.to_json() + "\n"
        agreement = thr.agreement
    else:
        print("warning: no dataset sidecar with a grid spec; reporting MCC only", file=sys.stderr)
    write_atomic(files)
    agree = "n/a" if agreement is None else f"{agreement:.4f}"
    print(f"mcc={report.mcc:.4f} agreement={agree}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _config(args)
    ds, _ = _load_data(args.data)
    if ds.z.shape[1] != 2:
        raise UsageError(f"landscape needs a 2-factor dataset, got d={ds.z.shape[1]}")
    step = args.step if args.step is not None else cfg.eval.landscape_step
    try:
        rows = landscape_sweep(ds.z, step, cfg.cliff_weights(), zeta_seed=cfg.seeds.zeta_seed)
    except ValueError as err:
        raise UsageError(str(err)) from err
    write_atomic({Path(args.out): csv_text(LANDSCAPE_COLUMNS, [r[:-1] + (int(r[-1]),) for r in rows])})
    best = min(rows, key=lambda r: r[5])
    print(f"wrote {len(rows)} rows; argmin total at ({best[0]:g}, {best[1]:g})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = args.seeds if args.seeds else [args.seed]
    broken = args.break_op or []
    with dg.inject_fault(*broken):
        checks = run_gradcheck(seeds=seeds, fd_step=args.fd_step)
    worst: dict[str, float] = {}
    for c in checks:
        worst[c.term] = max(worst.get(c.term, 0.0), c.max_rel_error)
    ok = True
    for term, err in worst.items():
        status = "PASS" if err <= TOLERANCE else "FAIL"
        ok &= err <= TOLERANCE
        print(f"{status} {term}: max relative error {err:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else 1


def cmd_experiment(args) -> int:
    base = _config(args)
    out = Path(args.out)
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")

    def work(seed):
        outcome, ds, result = run_seed(base, seed)
        cfg = seeded_config(base, seed)
        sub = out / f"seed_{seed:02d}"
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(ds, Path(tmp) / "d.csv", Path(tmp) / "d.json")
            files = {
                sub / "data.csv": (Path(tmp) / "d.csv").read_text(),
                sub / "data.json": (Path(tmp) / "d.json").read_text(),
            }
        files.update(_train_files(result, cfg.encoder_spec(ds.x.shape[1]), cfg, sub))
        files[sub / "outcome.json"] = json.dumps(outcome.to_dict(), indent=1) + "\n"
        write_atomic(files)
        print(f"seed {seed}: mcc={outcome.mcc:.2f} agreement={outcome.agreement:.3f}", flush=True)
        return outcome

    try:
        outcomes = run_seeds(seeds, work, args.workers)
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = summarize(outcomes)
    write_atomic({out / "summary.json": json.dumps(summary, indent=1) + "\n"})
    print(f"MCC {summary['mcc_mean']:.2f} +- {summary['mcc_stderr']:.2f} (standard error, {len(seeds)} seeds)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cliff", description="Cliff disentanglement toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an encoder on a dataset")
    t.add_argument("data")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained params against a dataset")
    e.add_argument("data")
    e.add_argument("params")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    ls = sub.add_parser("landscape", help="loss landscape over projection angles")
    ls.add_argument("data")
    ls.add_argument("--config")
    ls.add_argument("--step", type=float)
    ls.add_argument("--out", required=True)
    ls.set_defaults(func=cmd_landscape)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, nargs="+")
    gc.add_argument("--fd-step", type=float, default=1e-5)
    gc.add_argument("--break-op", action="append", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", help="multi-seed synthetic identification")
    x.add_argument("--config")
    x.add_argument("--seeds", type=int, default=10)
    x.add_argument("--seed-start", type=int, default=0)
    x.add_argument("--workers", type=int, default=1)
    x.add_argument("--out", required=True)
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
