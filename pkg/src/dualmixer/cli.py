"""Command-line entry points.

Subcommands: train, eval, ablate, grid, export, synth. Every run-shaped
command resolves its configuration the same way: dataclass defaults, then
an optional JSON config file, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as dd
from . import harness as hx
from . import model as dm
from . import synthdata as sx

logger = logging.getLogger(__name__)

_HYPER_FLAGS = {
    # flag name -> RunConfig field
    "d": "d",
    "layers": "n_layers",
    "tau": "tau",
    "beta": "beta",
    "sigma1": "sigma1",
    "sigma2": "sigma2",
    "lambda": "lam",
    "m": "m",
    "batch": "b",
    "lr": "lr",
    "epochs": "epochs",
    "window": "w",
    "stride": "sl",
}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", choices=hx.DATASETS)
    parser.add_argument("--data-dir", dest="data_dir")
    parser.add_argument("--mode", choices=hx.MODES)
    parser.add_argument("--variant", choices=dm.VARIANTS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--config", help="JSON file of config fields")
    parser.add_argument("--out", dest="out_dir")
    parser.add_argument("--holdout", action="store_true", default=None,
                        help="evaluate on 10%% of training units instead of the test split")
    int_flags = {"d", "layers", "m", "batch", "epochs", "window", "stride"}
    for flag, field in _HYPER_FLAGS.items():
        kind = int if flag in int_flags else float
        parser.add_argument(f"--{flag}", dest=f"hp_{field}", type=kind)


def resolve_config(args: argparse.Namespace) -> hx.RunConfig:
    values = {}
    if args.config:
        with open(args.config) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        values.update(loaded)
    for name in ("dataset", "data_dir", "mode", "variant", "seed", "out_dir",
                 "holdout"):
        got = getattr(args, name, None)
        if got is not None:
            values[name] = got
    for field in _HYPER_FLAGS.values():
        got = getattr(args, f"hp_{field}", None)
        if got is not None:
            values[field] = got
    cfg = hx.config_from_dict(values)
    cfg.validate()
    return cfg


def _load_checkpoint_and_data(args) -> tuple:
    cfg = resolve_config(args)
    params = dm.load_checkpoint(args.checkpoint)
    if params.config.l != cfg.w:
        raise ValueError(f"checkpoint window {params.config.l} != configured {cfg.w}")
    train, test = hx.load_dataset(cfg)
    return cfg, params, train, test


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    report = hx.run_one(cfg, resume=not args.force)
    print(f"run dir: {os.path.join(cfg.out_dir, cfg.run_name())}")
    mape = "n/a" if report.mape is None else f"{report.mape:.3f}%"
    print(f"rmse: {report.rmse:.6f}  mape: {mape}")
    return 0


def cmd_eval(args) -> int:
    cfg, params, _, test = _load_checkpoint_and_data(args)
    rmse, mape = hx.evaluate(params, test)
    print(f"rmse: {rmse:.6f}")
    print("mape: " + ("undefined (all labels below floor)" if mape is None
                      else f"{mape:.3f}%"))
    if args.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "eval.json")
        with open(path, "w") as f:
            json.dump({"checkpoint": args.checkpoint, "dataset": cfg.dataset,
                       "rmse": rmse, "mape": mape}, f, indent=2)
            f.write("\n")
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    reports = hx.run_ablation(cfg)
    print(f"{'variant':8s} {'rmse':>10s} {'mape':>10s} {'params':>10s}")
    for variant, rep in zip(dm.VARIANTS, reports):
        mape = "n/a" if rep.mape is None else f"{rep.mape:.2f}"
        print(f"{variant:8s} {rep.rmse:10.6f} {mape:>10s} {rep.param_count:10d}")
    print(f"wrote {os.path.join(cfg.out_dir, 'ablation.csv')}")
    return 0


def cmd_grid(args) -> int:
    cfg = resolve_config(args)
    n_list = [int(v) for v in args.n_list.split(",")]
    d_list = [int(v) for v in args.d_list.split(",")]
    matrix = hx.grid_search(cfg, n_list, d_list)
    header = "N\\d  " + "  ".join(f"{d:>8d}" for d in d_list)
    print(header)
    for i, n in enumerate(n_list):
        print(f"{n:<4d} " + "  ".join(f"{v:8.5f}" for v in matrix[i]))
    print(f"wrote {os.path.join(cfg.out_dir, 'grid.csv')}")
    return 0


def cmd_export(args) -> int:
    cfg, params, train, test = _load_checkpoint_and_data(args)
    samples = train if args.split == "train" else test
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "features.csv")
    hx.export_features(params, samples, path)
    print(f"wrote {path} ({len(samples)} rows)")
    return 0


def cmd_synth(args) -> int:
    if args.vars != 21:
        raise ValueError("emitting the 26-column file format requires 21 sensor columns")
    lo, hi = args.cycles
    train = sx.generate(sx.SynthSpec(n_units=args.units, cycles=(lo, hi),
                                     n_vars=args.vars, gamma=args.gamma,
                                     noise_std=args.noise, seed=args.seed))
    full_test = sx.generate(sx.SynthSpec(n_units=args.test_units, cycles=(lo, hi),
                                         n_vars=args.vars, gamma=args.gamma,
                                         noise_std=args.noise, seed=args.seed + 1))
    test, ruls = sx.make_test_split(full_test, seed=args.seed + 2)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = sx.emit_cmapss(args.out_dir, args.tag, train, test, ruls)
    for kind, path in paths.items():
        print(f"wrote {kind}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmixer",
        description="Dual-path mixer RUL models: training, sweeps, and export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write its report")
    _add_run_flags(p)
    p.add_argument("--force", action="store_true",
                   help="retrain even if this configuration already has a report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all six variants on one seed")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grid", help="sweep layer count and model width")
    _add_run_flags(p)
    p.add_argument("--n-list", default="2,4,6,8,10,12",
                   help="comma-separated layer counts")
    p.add_argument("--d-list", default="16,32,64,128",
                   help="comma-separated model widths")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("export", help="dump merged features and predictions to CSV")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="emit a synthetic dataset in the on-disk format")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--tag", default="SY001")
    p.add_argument("--units", type=int, default=20)
    p.add_argument("--test-units", type=int, default=10)
    p.add_argument("--cycles", type=int, nargs=2, default=[90, 140],
                   metavar=("LO", "HI"))
    p.add_argument("--vars", type=int, default=21)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, dd.ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
