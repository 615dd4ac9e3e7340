"""Evaluation suite: global performance, personalization, the client-server
barrier, and a function-space distance diagnostic.

The barrier measures how much the aggregated model loses relative to each
client's own model on that client's training data; lower is better under
both supported metric kinds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Batch, ModelSpec, batch_loss, forward, predict_metric, _log_softmax
from .local_training import LocalTrainConfig, fed_local_train
from .datasets import ClientDataset

CSB_METRIC_KINDS = ("loss", "error")


@dataclass
class RoundMetrics:
    """Per-round record; comm fields carry both the round's bits and the
    running totals. personalization maps fraction -> (before, after)."""

    round: int
    global_loss: float
    global_metric: float
    csb: float
    fallback_coords: int
    comm_bits_up: int
    comm_bits_down: int
    comm_bits_up_cum: int
    comm_bits_down_cum: int
    personalization: dict[float, tuple[float, float]] | None = None
    fsd_kl: float | None = None

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round must be >= 1")
        for bits in (self.comm_bits_up, self.comm_bits_down,
                     self.comm_bits_up_cum, self.comm_bits_down_cum):
            if bits < 0:
                raise ValueError("comm bits must be >= 0")


def global_performance(spec: ModelSpec, params: np.ndarray,
                       clients: list[ClientDataset]) -> tuple[float, float]:
    """Unweighted mean over clients of eval-split loss and metric."""
    if not clients:
        raise ValueError("clients must be nonempty")
    losses = []
    metrics = []
    for client in clients:
        if client.eval.n == 0:
            raise ValueError(f"client {client.client_id} has an empty eval split")
        losses.append(batch_loss(spec, params, client.eval))
        metrics.append(predict_metric(spec, params, client.eval))
    return float(np.mean(losses)), float(np.mean(metrics))


def personalize_and_eval(spec: ModelSpec, params_global: np.ndarray,
                         client: ClientDataset, epochs: int, lr: float,
                         fraction: float, batch_size: int = 32,
                         seed: int = 0) -> tuple[float, float]:
    """Metric on the client's eval split before and after fine-tuning on
    its personalize split. The client must already be re-split for the
    given fraction; fraction 0 skips training entirely."""
    before = predict_metric(spec, params_global, client.eval)
    if fraction == 0.0 or client.personalize.n == 0:
        return before, before
    cfg = LocalTrainConfig(epochs=epochs, batch_size=min(batch_size, client.personalize.n),
                           lr_local=lr, fisher_mode="none")
    update = fed_local_train(spec, params_global, client.personalize, cfg, seed,
                             client_id=client.client_id)
    after = predict_metric(spec, params_global - update.delta, client.eval)
    return before, after


def _barrier_value(spec: ModelSpec, params: np.ndarray, batch: Batch,
                   metric_kind: str) -> float:
    if metric_kind == "loss":
        return batch_loss(spec, params, batch)
    return 1.0 - predict_metric(spec, params, batch)


def client_server_barrier(spec: ModelSpec, params_global: np.ndarray,
                          client_models: list[np.ndarray],
                          clients: list[ClientDataset],
                          metric_kind: str = "loss") -> float:
    """Mean over clients of L_i(global) - L_i(own model) on train splits.

    metric_kind "loss" uses the training loss; "error" uses one minus
    accuracy (classification head only). Lower is better for both.
    """
    if metric_kind not in CSB_METRIC_KINDS:
        raise ValueError(f"unknown metric_kind {metric_kind!r}, expected one of {CSB_METRIC_KINDS}")
    if metric_kind == "error" and spec.head != "classification_softmax_ce":
        raise ValueError("metric_kind 'error' requires a classification head")
    if len(client_models) != len(clients):
        raise ValueError("client_models and clients must have equal lengths")
    if not clients:
        raise ValueError("clients must be nonempty")
    gaps = [
        _barrier_value(spec, params_global, c.train, metric_kind)
        - _barrier_value(spec, theta, c.train, metric_kind)
        for theta, c in zip(client_models, clients)
    ]
    return float(np.mean(gaps))


def function_space_distance(spec: ModelSpec, params_a: np.ndarray,
                            params_b: np.ndarray, inputs: np.ndarray) -> float:
    """Output divergence between two parameter vectors on probe inputs.

    Classification: mean KL between the softmax outputs, with params_b the
    reference distribution. Regression: mean squared output distance per
    input row.
    """
    out_a = forward(spec, params_a, inputs)
    out_b = forward(spec, params_b, inputs)
    if spec.head == "classification_softmax_ce":
        log_pa = _log_softmax(out_a)
        log_pb = _log_softmax(out_b)
        kl_rows = np.sum(np.exp(log_pb) * (log_pb - log_pa), axis=1)
        return float(np.mean(kl_rows))
    return float(np.mean(np.sum((out_a - out_b) ** 2, axis=1)))
