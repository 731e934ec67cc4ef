"""Command-line entry point: generate, train, eval, infer, poles, laplace-check."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _train_csv(path: Path) -> Path:
    return path / "train.csv" if path.is_dir() else path


def cmd_generate(args) -> int:
    from .data import GeneratorConfig, write_generated

    cfg = GeneratorConfig.from_json(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    paths = write_generated(cfg, args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import NormStats, read_dataset, split_by_contact_angle, stats_path
    from .train import RunConfig, train_pipeline

    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    data_path = _train_csv(Path(args.data))
    ds = read_dataset(data_path)
    # reuse the corpus statistics so checkpoints stay compatible with its sidecars
    sidecar = stats_path(data_path)
    stats = NormStats.load(sidecar) if sidecar.exists() else None
    if args.held_out:
        ds, _ = split_by_contact_angle(ds, args.held_out)

    def report(epoch, rep):
        if epoch % cfg.log_every == 0:
            print(f"epoch {epoch:6d}  total {rep.total:.6e}  data {rep.data:.6e}", flush=True)

    res = train_pipeline(cfg, ds, args.out, stats=stats, callback=report)
    if res.lbfgs is not None:
        print(f"l-bfgs: {res.lbfgs.status} after {res.lbfgs.iterations} iterations, loss {res.lbfgs.f:.6e}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_checkpoint

    rep = evaluate_checkpoint(args.ckpt, args.data, times=args.times, errors_csv=args.errors)
    print(rep.table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import COLUMNS, read_points
    from .model import encode_input, load_checkpoint, predict

    params, stats = load_checkpoint(args.ckpt)
    if stats is None:
        raise ValueError(f"{args.ckpt}: checkpoint carries no normalization statistics")
    pts = read_points(args.points)
    enc = encode_input(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], stats)
    if enc.n_clamped:
        print(f"warning: {enc.n_clamped} coordinate values outside the training range were clamped",
              file=sys.stderr)
    out = stats.denormalize_outputs(predict(params, enc.coords))
    rows = np.concatenate([pts, out], axis=1).tolist()
    with open(args.out, "w") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(map(repr, r)) + "\n")
    print(f"wrote {len(rows)} predictions to {args.out}")
    return EXIT_OK


def cmd_poles(args) -> int:
    from .model import load_checkpoint

    params, _ = load_checkpoint(args.ckpt)
    print(f"{'layer':>5} {'m':>4} {'sigma':>14} {'omega':>14}")
    for i, (sigma, omega) in enumerate(params.poles()):
        for m in np.argsort(sigma):
            print(f"{i:>5} {m:>4} {sigma[m]:>14.6e} {omega[m]:>14.6e}")
    return EXIT_OK


def cmd_laplace_check(args) -> int:
    from .laplace import oracle_suite

    rows = oracle_suite()
    width = max(len(r[0]) for r in rows)
    for name, err, tol, ok in rows:
        print(f"{name:<{width}}  {err:10.3e}  tol {tol:8.1e}  {'PASS' if ok else 'FAIL'}")
    n_fail = sum(not r[3] for r in rows)
    print(f"{len(rows) - n_fail}/{len(rows)} oracles passed")
    return EXIT_OK if n_fail == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pilno", description="Physics-informed Laplace neural operator toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a manufactured train/test corpus")
    g.add_argument("--config", help="generator config JSON (defaults if omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config JSON (defaults if omitted)")
    t.add_argument("--data", required=True, help="dataset directory (uses train.csv) or CSV file")
    t.add_argument("--out", required=True, help="run directory for ckpt.json and loss_history.csv")
    t.add_argument("--held-out", type=float, nargs="*", default=None,
                   help="contact angles to exclude from training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset CSV")
    e.add_argument("--times", type=float, nargs="+", help="only evaluate these snapshot times")
    e.add_argument("--errors", help="write per-point absolute errors to this CSV")
    e.add_argument("--json", help="write the metric report as JSON")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict fields at query points")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--points", required=True, help="CSV with header x,y,t,theta_s")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    o = sub.add_parser("poles", help="print learned pole decay rates and frequencies")
    o.add_argument("--ckpt", required=True)
    o.set_defaults(func=cmd_poles)

    lc = sub.add_parser("laplace-check", help="run the Laplace inversion oracle suite")
    lc.set_defaults(func=cmd_laplace_check)
    return p


def main(argv=None) -> int:
    from .data import DatasetError
    from .laplace import LaplaceError
    from .model import CheckpointError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DatasetError, LaplaceError, CheckpointError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
