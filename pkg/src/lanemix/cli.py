"""Command-line entry point: ``lanemix <verb> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from . import intent
from .learner import LOSS_COLUMNS
from .sim import ConfigError, UsageError

SCHEMAS = f"""\
output files (CSV, header row first, one record per line):
  episodes.csv            {", ".join(H.EPISODE_COLUMNS)}
  losses.csv              {", ".join(LOSS_COLUMNS)}
  metrics.csv             run, {", ".join(H.METRIC_COLUMNS)}
  ablation.csv            variant, {", ".join(H.METRIC_COLUMNS)}
  summary.csv (sweep)     {", ".join(H.SWEEP_COLUMNS)}
  runs.csv (sweep)        value, seed, {", ".join(H.METRIC_COLUMNS)}
  curves.csv (sweep)      {", ".join(H.CURVE_COLUMNS)}
  urgency_histogram.csv   low, high, count, proportion

units: length in decision ticks (1 s), mean_speed in m/s, rewards unitless.
config file: one "key = value" per line, keys named after ExperimentConfig
fields (algorithm, episodes, lam, epsilon, density_mode, hidden, ...).
"""


def _override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), H._parse_value(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value experiment file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                        metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")

    p = argparse.ArgumentParser(
        prog="lanemix",
        description="Train and evaluate multi-agent lane-change policies.",
        epilog=SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=SCHEMAS,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    t = verb("train", "train one algorithm; writes episodes.csv, losses.csv, checkpoints/")
    t.add_argument("--algorithm", choices=H.ALGORITHMS)
    t.add_argument("--episodes", type=int)

    e = verb("eval", "evaluate a checkpoint (or the random policy); writes metrics.csv")
    e.add_argument("--checkpoint", type=Path, help="checkpoint directory; omit for random")
    e.add_argument("--algorithm", choices=H.ALGORITHMS, help="expected algorithm")
    e.add_argument("--episodes", type=int, default=50)

    a = verb("ablate", "full mqlc plus each ablation; writes ablation.csv")
    a.add_argument("--variants", nargs="+", help="subset of: full " + " ".join(H.ABLATIONS))

    s = verb("sweep", "lam or epsilon sweep over several seeds")
    s.add_argument("--parameter", required=True, choices=sorted(H.SWEEP_PARAMETERS))
    s.add_argument("--values", required=True, nargs="+", type=float)
    s.add_argument("--seeds", type=int, default=5)

    c = verb("collect-intent-data", "roll out scripted episodes into a trajectory dataset")
    c.add_argument("--episodes", type=int, default=100)
    c.add_argument("--policy", choices=("random", "idle"), default="random")

    ti = verb("train-intent", "fit the trajectory predictor; writes predictor/")
    ti.add_argument("--dataset", type=Path, help="dataset file; collected on the fly if absent")
    ti.add_argument("--epochs", type=int, default=50)
    ti.add_argument("--lr", type=float, default=1e-3)

    u = verb("urgency-hist", "urgency histogram over an mqlc training run")
    u.add_argument("--ticks", type=int, help="cap on recorded decision ticks")
    u.add_argument("--episodes", type=int)
    return p


def _config(args) -> H.ExperimentConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key in ("algorithm", "episodes"):
        value = getattr(args, key, None)
        if value is not None and args.verb in ("train", "urgency-hist"):
            overrides[key] = value
    return H.load_config(args.config, overrides)


def _print_metrics(m: H.EvalMetrics) -> None:
    for name in H.METRIC_COLUMNS:
        print(f"{name}: {getattr(m, name)}")


def run(args) -> int:
    out: Path = args.out_dir
    if args.verb == "eval":
        cfg = _config(args)
        m = H.cmd_eval(args.checkpoint, cfg.scenario, args.episodes, args.algorithm)
        H.write_metrics(out / "metrics.csv", [(str(args.checkpoint or "random"),) + m.row()])
        _print_metrics(m)
        return 0
    cfg = _config(args)
    if args.verb == "train":
        res = H.cmd_train(cfg, out)
        print(f"trained {cfg.algorithm} for {cfg.episodes} episodes; best reward {res.best_reward:.4f}")
        print(f"outputs in {out}")
    elif args.verb == "ablate":
        for name, m in H.cmd_ablate(cfg, out, args.variants).items():
            print(name, " ".join(f"{k}={v:.4g}" for k, v in zip(H.METRIC_COLUMNS, m.row())))
    elif args.verb == "sweep":
        for row in H.cmd_sweep(args.parameter, args.values, cfg, out, args.seeds):
            print(" ".join(f"{k}={v:.4g}" for k, v in zip(H.SWEEP_COLUMNS, row)))
    elif args.verb == "collect-intent-data":
        data = intent.collect_dataset(cfg.scenario, args.episodes, cfg.obs_cfg, args.policy, cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        intent.save_dataset(out / "trajectories.bin", data)
        print(f"wrote {len(data)} windows to {out / 'trajectories.bin'}")
    elif args.verb == "train-intent":
        if args.dataset is not None:
            data = intent.load_dataset(args.dataset)
        else:
            data = intent.collect_dataset(cfg.scenario, cfg.intent_episodes, cfg.obs_cfg, seed=cfg.seed)
        params, report = intent.train_predictor(data, args.epochs, args.lr,
                                                hidden=cfg.intent_hidden, seed=cfg.seed)
        params.save(out / "predictor")
        print(f"best epoch {report.best_epoch}, val loss {report.val_loss[report.best_epoch]:.6f}")
        print(f"predictor saved to {out / 'predictor'}")
    elif args.verb == "urgency-hist":
        for lo, hi, count, prop in H.cmd_urgency_histogram(cfg, out, args.ticks):
            print(f"[{lo}, {hi}): {count} ({prop:.3f})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, UsageError, H.CheckpointError, ValueError, OSError) as exc:
        print(f"lanemix: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
