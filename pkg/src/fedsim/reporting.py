"""Delimited metric files and rendered figures for completed runs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .nn_core import forward
from .datasets import OVERLAP_REGIMES, toy_target
from .runner import RunRecord, build_dataset, default_toy_config, run_ab

METRICS_HEADER = ("round", "algo", "global_loss", "global_metric", "csb",
                  "fallback_coords", "comm_bits_up_cum", "comm_bits_down_cum",
                  "p13n_frac", "p13n_before", "p13n_after", "fsd_kl")
TOY_CURVES_HEADER = ("x", "y_true", "y_client0", "y_client1", "y_fedavg", "y_fedfish")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str | Path, header: tuple[str, ...], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def metrics_rows(record: RunRecord) -> list[list]:
    """One row per evaluated round and personalization fraction; rounds
    without personalization produce a single row with empty p13n fields."""
    algo = record.config.agg.algo
    rows = []
    for rm in record.per_round:
        base = [rm.round, algo, rm.global_loss, rm.global_metric, rm.csb,
                rm.fallback_coords, rm.comm_bits_up_cum, rm.comm_bits_down_cum]
        if rm.personalization:
            for frac in sorted(rm.personalization):
                before, after = rm.personalization[frac]
                rows.append(base + [frac, before, after, rm.fsd_kl])
        else:
            rows.append(base + [None, None, None, rm.fsd_kl])
    return rows


def write_metrics_csv(records: list[RunRecord], path: str | Path) -> None:
    rows = []
    for record in records:
        rows.extend(metrics_rows(record))
    _write_csv(path, METRICS_HEADER, rows)


def write_cohorts_csv(records: list[RunRecord], path: str | Path) -> None:
    rows = []
    for record in records:
        for r, cohort in enumerate(record.cohorts, start=1):
            rows.append([r, record.config.agg.algo, " ".join(str(c) for c in cohort)])
    _write_csv(path, ("round", "algo", "client_ids"), rows)


def render_run_figure(record: RunRecord, path: str | Path) -> None:
    rounds = [rm.round for rm in record.per_round]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(rounds, [rm.global_loss for rm in record.per_round], marker="o")
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("global loss")
    axes[1].plot(rounds, [rm.global_metric for rm in record.per_round],
                 marker="o", color="tab:green")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("global metric")
    axes[2].plot(rounds, [rm.csb for rm in record.per_round], marker="o", color="tab:red")
    axes[2].set_xlabel("round")
    axes[2].set_ylabel("client-server barrier")
    fig.suptitle(f"{record.config.agg.algo}, seed {record.config.seed}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ab_figure(rec_avg: RunRecord, rec_fish: RunRecord, path: str | Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for rec, color in ((rec_avg, "tab:blue"), (rec_fish, "tab:orange")):
        axes[0].plot([rm.round for rm in rec.per_round],
                     [rm.csb for rm in rec.per_round],
                     marker="o", color=color, label=rec.config.agg.algo)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("client-server barrier")
    axes[0].legend()
    a = [rm.csb for rm in rec_avg.per_round]
    b = [rm.csb for rm in rec_fish.per_round]
    axes[1].scatter(a, b, color="tab:purple")
    lim = [min(a + b), max(a + b)]
    axes[1].plot(lim, lim, linestyle="--", color="gray")
    axes[1].set_xlabel("csb fedavg")
    axes[1].set_ylabel("csb fedfish")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_sweep_summary(rows: list[dict], path: str | Path) -> None:
    _write_csv(path, ("local_epochs", "algo", "global_loss", "global_metric", "csb"),
               [[r["local_epochs"], r["algo"], r["global_loss"],
                 r["global_metric"], r["csb"]] for r in rows])


def render_sweep_figure(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with local_epochs, algo, global_metric."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    for algo, color in (("fedavg", "tab:blue"), ("fedfish", "tab:orange")):
        pts = sorted((r["local_epochs"], r["global_metric"]) for r in rows
                     if r["algo"] == algo)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", color=color, label=algo)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("local epochs")
    ax.set_ylabel("final global metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def toy_figure_data(seed: int = 0, overlaps: tuple[str, ...] = OVERLAP_REGIMES) -> dict:
    """Run the two-client regression for each overlap regime under both
    algorithms and collect prediction curves plus barrier values."""
    panels: dict[str, dict] = {}
    grid = np.linspace(-2.1, 2.1, 211).reshape(-1, 1)
    for overlap in overlaps:
        cfg = default_toy_config(overlap, seed=seed)
        data = build_dataset(cfg)
        rec_avg, rec_fish = run_ab(cfg, data)
        spec = cfg.model
        # One round from a shared init with matched seeds, so the client
        # end points of the two runs are the same models.
        client_params = rec_avg.final_round_client_params
        panels[overlap] = {
            "x": grid[:, 0],
            "y_true": toy_target(grid)[:, 0],
            "y_client0": forward(spec, client_params[0], grid)[:, 0],
            "y_client1": forward(spec, client_params[1], grid)[:, 0],
            "y_fedavg": forward(spec, rec_avg.final_params, grid)[:, 0],
            "y_fedfish": forward(spec, rec_fish.final_params, grid)[:, 0],
            "train_points": [(c.train.inputs[:, 0], c.train.targets[:, 0])
                             for c in data.train_clients],
            "csb_fedavg": rec_avg.per_round[-1].csb,
            "csb_fedfish": rec_fish.per_round[-1].csb,
        }
    return panels


def write_toy_curves_csv(panel: dict, path: str | Path) -> None:
    rows = [
        [panel["x"][i], panel["y_true"][i], panel["y_client0"][i],
         panel["y_client1"][i], panel["y_fedavg"][i], panel["y_fedfish"][i]]
        for i in range(len(panel["x"]))
    ]
    _write_csv(path, TOY_CURVES_HEADER, rows)


def write_toy_csb_summary(panels: dict, path: str | Path) -> None:
    rows = []
    for overlap, panel in panels.items():
        ratio = panel["csb_fedfish"] / panel["csb_fedavg"] if panel["csb_fedavg"] else None
        rows.append([overlap, panel["csb_fedavg"], panel["csb_fedfish"], ratio])
    _write_csv(path, ("regime", "csb_fedavg", "csb_fedfish", "ratio"), rows)


def render_toy_figure(panels: dict, path: str | Path) -> None:
    names = list(panels)
    fig, axes = plt.subplots(1, len(names), figsize=(4.2 * len(names), 3.6),
                             sharey=True, squeeze=False)
    for ax, overlap in zip(axes[0], names):
        panel = panels[overlap]
        for (px, py), color in zip(panel["train_points"], ("tab:blue", "tab:orange")):
            ax.scatter(px, py, s=8, alpha=0.35, color=color)
        ax.plot(panel["x"], panel["y_true"], color="black", linestyle=":", label="target")
        ax.plot(panel["x"], panel["y_client0"], color="tab:blue", linewidth=1, label="client 0")
        ax.plot(panel["x"], panel["y_client1"], color="tab:orange", linewidth=1, label="client 1")
        ax.plot(panel["x"], panel["y_fedavg"], color="tab:red", linewidth=2, label="fedavg")
        ax.plot(panel["x"], panel["y_fedfish"], color="tab:green", linewidth=2, label="fedfish")
        ax.set_title(overlap)
        ax.set_xlabel("x")
        ax.set_ylim(-2.0, 2.0)
    axes[0][0].set_ylabel("y")
    axes[0][-1].legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
