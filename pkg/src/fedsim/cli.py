"""Command-line front end.

Subcommands:
  run         single experiment from a JSON config
  ab          fedavg and fedfish under identical seeds
  sweep       cross product of local-epoch counts and algorithms
  toy-figure  two-client regression study across overlap regimes

Exit codes: 0 success, 1 config error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import reporting
from .runner import (ExperimentConfig, build_dataset, config_from_dict,
                     config_to_dict, run_ab, run_experiment)


class ConfigError(Exception):
    pass


def _parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_override(obj: dict, path: list[str], value) -> None:
    node = obj
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {'.'.join(path)!r} crosses a non-object value")
    node[path[-1]] = value


def _load_config(args) -> tuple[ExperimentConfig, dict]:
    path = Path(args.config)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    for text in args.override or ():
        key_path, value = _parse_override(text)
        _apply_override(obj, key_path, value)
    if getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    try:
        cfg = config_from_dict(obj)
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    return cfg, config_to_dict(cfg)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_dataset_checked(cfg: ExperimentConfig):
    try:
        data = build_dataset(cfg)
    except (ValueError, OSError, KeyError) as err:
        raise ConfigError(f"dataset: {err}") from err
    if cfg.clients_per_round > len(data.train_clients):
        raise ConfigError(
            f"clients_per_round {cfg.clients_per_round} exceeds "
            f"{len(data.train_clients)} train clients")
    return data


def _write_effective_config(effective: dict, out: Path) -> None:
    (out / "effective_config.json").write_text(
        json.dumps(effective, indent=2) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    cfg, effective = _load_config(args)
    data = _build_dataset_checked(cfg)
    out = _prepare_out(args)
    record = run_experiment(cfg, data)
    _write_effective_config(effective, out)
    reporting.write_metrics_csv([record], out / "metrics.csv")
    reporting.render_run_figure(record, out / "run_curves.png")
    last = record.per_round[-1]
    print(f"{cfg.agg.algo}: round {last.round} global_loss {last.global_loss:.6g} "
          f"global_metric {last.global_metric:.6g} csb {last.csb:.6g}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_ab(args) -> int:
    cfg, effective = _load_config(args)
    data = _build_dataset_checked(cfg)
    out = _prepare_out(args)
    rec_avg, rec_fish = run_ab(cfg, data)
    _write_effective_config(effective, out)
    reporting.write_metrics_csv([rec_avg, rec_fish], out / "metrics.csv")
    reporting.write_cohorts_csv([rec_avg, rec_fish], out / "cohorts.csv")
    reporting.render_ab_figure(rec_avg, rec_fish, out / "csb_scatter.png")
    for rec in (rec_avg, rec_fish):
        last = rec.per_round[-1]
        print(f"{rec.config.agg.algo}: global_metric {last.global_metric:.6g} "
              f"csb {last.csb:.6g}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg, effective = _load_config(args)
    try:
        epochs = [int(e) for e in args.epochs.split(",") if e]
        algos = [a for a in args.algos.split(",") if a]
    except ValueError as err:
        raise ConfigError(f"bad sweep list: {err}") from err
    if not epochs or not algos:
        raise ConfigError("sweep needs at least one epoch count and one algo")
    for algo in algos:
        if algo not in ("fedavg", "fedfish"):
            raise ConfigError(f"unknown algo {algo!r} in --algos")
    data = _build_dataset_checked(cfg)
    out = _prepare_out(args)
    _write_effective_config(effective, out)

    summary = []
    for e in epochs:
        for algo in algos:
            cell_cfg = replace(cfg, local=replace(cfg.local, epochs=e),
                               agg=replace(cfg.agg, algo=algo))
            record = run_experiment(cell_cfg, data)
            cell_dir = out / "cells" / f"E{e}_{algo}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            reporting.write_metrics_csv([record], cell_dir / "metrics.csv")
            last = record.per_round[-1]
            summary.append({"local_epochs": e, "algo": algo,
                            "global_loss": last.global_loss,
                            "global_metric": last.global_metric, "csb": last.csb})
            print(f"E={e} {algo}: global_metric {last.global_metric:.6g} "
                  f"csb {last.csb:.6g}")
    reporting.write_sweep_summary(summary, out / "sweep_summary.csv")
    reporting.render_sweep_figure(summary, out / "sweep_figure.png")
    print(f"wrote {out / 'sweep_summary.csv'}")
    return 0


def cmd_toy_figure(args) -> int:
    out = _prepare_out(args)
    panels = reporting.toy_figure_data(seed=args.seed)
    for overlap, panel in panels.items():
        reporting.write_toy_curves_csv(panel, out / f"toy_curves_{overlap}.csv")
        print(f"{overlap}: csb_fedavg {panel['csb_fedavg']:.6g} "
              f"csb_fedfish {panel['csb_fedfish']:.6g}")
    reporting.write_toy_csb_summary(panels, out / "toy_csb_summary.csv")
    reporting.render_toy_figure(panels, out / "toy_figure.png")
    print(f"wrote {out / 'toy_figure.png'}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim",
                                     description="Federated learning simulator")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="JSON experiment config")
            p.add_argument("--override", action="append", default=[],
                           metavar="KEY=VALUE",
                           help="dotted-path config override, repeatable")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="replace the config seed")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(handler=cmd_run)

    p_ab = sub.add_parser("ab", help="matched-seed fedavg/fedfish pair")
    common(p_ab)
    p_ab.set_defaults(handler=cmd_ab)

    p_sweep = sub.add_parser("sweep", help="local-epoch x algo cross product")
    common(p_sweep)
    p_sweep.add_argument("--epochs", default="1,4,16",
                         help="comma-separated local epoch counts")
    p_sweep.add_argument("--algos", default="fedavg,fedfish",
                         help="comma-separated algorithms")
    p_sweep.set_defaults(handler=cmd_sweep)

    p_toy = sub.add_parser("toy-figure", help="two-client regression study")
    common(p_toy, config_required=False)
    p_toy.set_defaults(handler=cmd_toy_figure)
    p_toy.set_defaults(seed=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as err:  # runtime failures, including divergence
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
