"""Command-line entry point: ``mtms <subcommand> [flags]``.

Effective settings are the built-in defaults, then ``--config FILE``
(flat ``key = value`` lines), then ``--set key=value`` and the named flags.
Every run writes ``config.txt`` with the effective settings next to its
outputs.  Exit codes: 0 success, 1 usage error, 2 numeric or runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mtms.config import ConfigError, format_config, load_config, parse_value, substream, substream_seed

log = logging.getLogger("mtms")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# dataclass <-> flat dotted keys --------------------------------------------------

def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(obj, overrides: dict):
    """Copy of dataclass ``obj`` with dotted-key overrides; unknown keys are usage errors."""
    known = flatten(obj)
    for key in overrides:
        if key not in known:
            raise UsageError(f"unknown setting {key!r}; known settings: {', '.join(sorted(known))}")

    def rebuild(o, prefix):
        changes = {}
        for f in dataclasses.fields(o):
            v = getattr(o, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                changes[f.name] = rebuild(v, key + ".")
            elif key in overrides:
                changes[f.name] = _coerce(overrides[key], v, key)
        return dataclasses.replace(o, **changes)

    return rebuild(obj, "")


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = parse_value(v)
    return out


def _resolve(defaults, args, flag_map: dict) -> tuple[object, dict]:
    """Defaults <- config file <- --set <- named flags."""
    overrides = {}
    if args.config:
        try:
            overrides.update(load_config(args.config))
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    overrides.update(_parse_sets(args.set))
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    cfg = apply_overrides(defaults, overrides)
    return cfg, flatten(cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, command: str, seed: int, settings: dict) -> None:
    (out / "config.txt").write_text(format_config({"command": command, "seed": seed, **settings}))


# run settings per subcommand ------------------------------------------------------

@dataclasses.dataclass
class Prop1Settings:
    instances: int = 100


@dataclasses.dataclass
class ScaleSettings:
    paths: int = 1000
    rounds: int = 12
    low: float = 0.25
    high: float = 1.0


@dataclasses.dataclass
class SimSettings:
    replications: int = 10_000
    participants: int = 163
    rounds: int = 12
    thresholds: tuple[int, ...] = (20, 80)
    selection_noise: float = 0.2
    participant_vol: float = 0.01


@dataclasses.dataclass
class AdaptSettings:
    loss: str = "mse"
    optimizer: str = "adadelta"
    lr: float = 1.0
    steps: int = 2000
    restarts: int = 3


# handlers -----------------------------------------------------------------------------

def cmd_sin(args) -> int:
    from mtms.benchmarks import SineConfig, run_sinusoidal, sweep_mesa, write_curves, write_report
    from mtms.model import save_checkpoint

    cfg, flat = _resolve(SineConfig(), args, {"k": "k", "m_train": "m_train", "m_eval": "m_eval"})
    out = _out_dir(args)
    _snapshot(out, "sin", args.seed, flat)
    report, model = run_sinusoidal(cfg, args.seed)
    write_report(report, out)
    write_curves(sweep_mesa(model), out / f"{report.name}_curves.csv")
    save_checkpoint(model, out / f"{report.name}_checkpoint.json")
    res = report.methods["mtms"]
    print(f"sin K={cfg.k}: mean MSE {res.mean:.4f} +- {res.ci95:.4f} over {len(res.per_task)} tasks "
          f"({report.runtime:.0f}s)")
    return 0


def cmd_m4like(args) -> int:
    from mtms.benchmarks import M4LikeConfig, run_m4like, write_report
    from mtms.linear import read_series_csv

    cfg, flat = _resolve(M4LikeConfig(), args, {"n_series": "n_series", "d_x": "d_x", "horizon": "horizon",
                                                "freq": "freq"})
    out = _out_dir(args)
    _snapshot(out, "m4like", args.seed, {**flat, "input": args.input})
    series = read_series_csv(args.input) if args.input else None
    report = run_m4like(cfg, args.seed, series)
    write_report(report, out)
    for name, res in report.methods.items():
        print(f"{name:16s} MASE {res.mean:.4f} +- {res.ci95:.4f}")
    return 0


def cmd_quintile(args) -> int:
    from mtms.benchmarks import run_quintile, write_report
    from mtms.model import save_checkpoint
    from mtms.quintile import QuintileConfig, SynthMarketConfig, write_feature_csv

    defaults = QuintileConfig(market=SynthMarketConfig.homogeneous()) if args.homogeneous else QuintileConfig()
    cfg, flat = _resolve(defaults, args, {"n_assets": "n_assets", "n_weeks": "n_weeks"})
    out = _out_dir(args)
    _snapshot(out, "quintile", args.seed, flat)
    report, run = run_quintile(cfg, args.seed)
    write_report(report, out)
    save_checkpoint(run.model, out / "quintile_checkpoint.json")
    write_feature_csv(run.test_table.subset(run.test_table.universe_id == 0), out / "quintile_test_features.csv")
    print(f"quintile: held-out RPS {report.extra['aggregate_rps']:.5f} (uniform 0.16), "
          f"corr(P(q1), P(q5)) {report.extra['corr_q1_q5']:.3f}")
    return 0


def cmd_prop1(args) -> int:
    from mtms.prop1 import run_instances

    cfg, flat = _resolve(Prop1Settings(), args, {"instances": "instances"})
    out = _out_dir(args)
    _snapshot(out, "prop1", args.seed, flat)
    results = run_instances(cfg.instances, substream(args.seed, "prop1"))
    n_equal = sum(r.equal for r in results)
    doc = {"instances": cfg.instances, "equal": n_equal,
           "all_inner_unique": all(r.inner_unique for r in results)}
    (out / "prop1_summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"{n_equal}/{cfg.instances} equal")
    return 0 if n_equal == cfg.instances else 2


def cmd_portfolio_scale(args) -> int:
    from mtms.portfolio import scaling_experiment, write_scaling

    cfg, flat = _resolve(ScaleSettings(), args, {"paths": "paths"})
    out = _out_dir(args)
    _snapshot(out, "portfolio-scale", args.seed, flat)
    exp = scaling_experiment(cfg.paths, cfg.rounds, seed=substream_seed(args.seed, "market"),
                             low=cfg.low, high=cfg.high)
    write_scaling(exp, out / "scaling.csv", out / "scaling_summary.json")
    print(f"IR({cfg.low}) > IR({cfg.high}) on {exp.frac_low_beats_high:.1%} of paths; "
          f"mean curve slope {exp.mean_curve.slope:.4f}, R^2 {exp.mean_curve.r2:.5f}")
    return 0


def cmd_portfolio_sim(args) -> int:
    from mtms.portfolio import CompetitorConfig, make_adaptive_policy, simulate_competition, static_policy, \
        write_simulation

    cfg, flat = _resolve(SimSettings(), args, {"replications": "replications"})
    out = _out_dir(args)
    _snapshot(out, "portfolio-sim", args.seed, flat)
    if len(cfg.thresholds) != 2:
        raise UsageError("thresholds needs two ranks, e.g. [20, 80]")
    comp = CompetitorConfig(selection_noise=cfg.selection_noise, participant_vol=cfg.participant_vol)
    policies = {"adaptive": make_adaptive_policy(tuple(cfg.thresholds)), "static": static_policy}
    res = simulate_competition(policies, cfg.participants, cfg.rounds, cfg.replications,
                               substream_seed(args.seed, "competition"), competitors=comp)
    write_simulation(res, out / "simulation.csv", out / "simulation_summary.json")
    s = res.summary
    d = s["diff_top20_adaptive_minus_static"]
    print(f"P(top 20): adaptive {s['adaptive']['p_top20']:.4f}, static {s['static']['p_top20']:.4f}, "
          f"difference 95% CI [{d['ci95'][0]:.4f}, {d['ci95'][1]:.4f}]")
    print(f"mean return: adaptive {s['adaptive']['mean_cumulative_return']:.4f}, "
          f"static {s['static']['mean_cumulative_return']:.4f}")
    return 0


def _read_task_csv(path, model, loss: str):
    """Rows of a new task: either ``x*``/``y*`` columns or a quintile feature file."""
    from mtms.losses import one_hot
    from mtms.model import Task
    from mtms.quintile import FEATURE_NAMES, LABEL_COLUMNS, Normalizer

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    data = np.array([[float(v) for v in r] for r in rows]) if rows else np.zeros((0, len(header)))
    if all(c in header for c in LABEL_COLUMNS):
        missing = [c for c in FEATURE_NAMES if c not in header]
        if missing:
            raise ValueError(f"feature file {path} lacks column {missing[0]!r}")
        x = Normalizer.from_dict(model.norm_stats).transform(data[:, [header.index(c) for c in FEATURE_NAMES]])
        y = data[:, [header.index(c) for c in LABEL_COLUMNS]]
        return Task(x, y), "rps"
    xcols = [i for i, c in enumerate(header) if c.startswith("x")]
    ycols = [i for i, c in enumerate(header) if c.startswith("y")]
    if len(xcols) != model.base_spec.n_in:
        raise ValueError(f"{path} has {len(xcols)} x columns, the model expects {model.base_spec.n_in}")
    if len(ycols) != model.base_spec.n_out:
        raise ValueError(f"{path} has {len(ycols)} y columns, the model expects {model.base_spec.n_out}")
    return Task(data[:, xcols], data[:, ycols]), loss


def cmd_adapt(args) -> int:
    from mtms.model import AdaptConfig, adapt_new_task, load_checkpoint

    cfg, flat = _resolve(AdaptSettings(), args, {"loss": "loss"})
    out = _out_dir(args)
    _snapshot(out, "adapt", args.seed, {**flat, "checkpoint": args.checkpoint, "data": args.data})
    model = load_checkpoint(args.checkpoint)
    task, loss = _read_task_csv(args.data, model, cfg.loss)
    acfg = AdaptConfig(optimizer=cfg.optimizer, lr=cfg.lr, steps=cfg.steps, restarts=cfg.restarts)
    theta = adapt_new_task(model, task, loss, acfg, substream(args.seed, "adapt"))
    doc = {"theta": theta.tolist(), "n_rows": int(task.n_train), "loss": loss}
    (out / "theta.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print("theta =", " ".join(f"{v:.6g}" for v in theta))
    return 0


def cmd_predict(args) -> int:
    from mtms.model import load_checkpoint
    from mtms.quintile import predict_quintiles, read_feature_csv, write_submission

    out = _out_dir(args)
    _snapshot(out, "predict", args.seed, {"checkpoint": args.checkpoint, "features": args.features})
    model = load_checkpoint(args.checkpoint)
    names = tuple(model.norm_stats.get("features", ()))
    if not names:
        raise ValueError("checkpoint normalization stats lack the feature list")
    ids, feats = read_feature_csv(args.features, names)
    probs = predict_quintiles(model, ids, feats)
    path = out / "submission.csv"
    write_submission(ids, probs, path)
    print(f"wrote {len(ids)} rows to {path}")
    return 0


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtms", description="Meta/mesa hypernetwork experiments.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, handler, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0, help="root seed for all random substreams")
        sp.add_argument("--out", default="results", help="output directory")
        sp.add_argument("--config", help="flat key = value settings file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        sp.add_argument("--threads", type=int, default=1, help="worker cap (runs are single-threaded)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(handler=handler)
        return sp

    sp = add("sin", cmd_sin, "sine-regression benchmark")
    sp.add_argument("--k", type=int)
    sp.add_argument("--m-train", type=int)
    sp.add_argument("--m-eval", type=int)

    sp = add("m4like", cmd_m4like, "pooled vs clustered vs mesa-localised AR forecasts")
    sp.add_argument("--input", help="series CSV (one series per line); synthetic when omitted")
    sp.add_argument("--freq")
    sp.add_argument("--n-series", type=int)
    sp.add_argument("--d-x", type=int)
    sp.add_argument("--horizon", type=int)

    sp = add("quintile", cmd_quintile, "synthetic quintile-forecasting run")
    sp.add_argument("--n-assets", type=int)
    sp.add_argument("--n-weeks", type=int)
    sp.add_argument("--homogeneous", action="store_true", help="every asset has the same return law")

    sp = add("prop1", cmd_prop1, "bilevel vs single-level enumeration check")
    sp.add_argument("--instances", type=int)

    sp = add("portfolio-scale", cmd_portfolio_scale, "IR against gross exposure")
    sp.add_argument("--paths", type=int)

    sp = add("portfolio-sim", cmd_portfolio_sim, "leaderboard Monte Carlo: adaptive vs static shorting")
    sp.add_argument("--replications", type=int)

    sp = add("adapt", cmd_adapt, "fit a mesa vector for a new task with the network frozen")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="CSV with x*/y* columns or a quintile feature file")
    sp.add_argument("--loss", choices=("mse", "mae", "rps"))

    sp = add("predict", cmd_predict, "quintile probabilities for a feature file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ArithmeticError, ValueError, KeyError, IndexError, OSError, RuntimeError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
