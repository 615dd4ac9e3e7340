"""Client-side local training.

Runs E epochs of minibatch SGD from the broadcast parameters and returns
the accumulated model delta together with a diagonal squared-gradient
curvature estimate. The delta is maintained incrementally (delta += lr * g
per step), so it equals broadcast minus final parameters up to float
accumulation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Batch, DivergenceError, ModelSpec, loss_and_grad

FISHER_MODES = ("extra_pass", "last_epoch", "none")
FISHER_NORMALIZATIONS = ("sum", "mean_per_batch")

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class LocalTrainConfig:
    """Knobs for one client's local pass.

    fisher_mode picks how the curvature diagonal is estimated:
      - extra_pass: one additional sweep over the data at the final
        parameters (reusing the final epoch's batch partition).
      - last_epoch: accumulate squared gradients during the final training
        epoch itself, at the evolving parameters; costs no extra pass.
      - none: all-ones sentinel, which turns Fisher-weighted aggregation
        into a plain weighted average.
    fisher_normalize: "sum" keeps the raw sum of per-batch squared
    gradients; "mean_per_batch" divides by the number of batches. The
    aggregate is invariant to rescaling all clients by the same constant
    but not to per-client rescaling, so this matters when clients have
    unequal batch counts.
    """

    epochs: int
    batch_size: int
    lr_local: float
    fisher_mode: str = "extra_pass"
    fisher_normalize: str = "sum"
    shuffle_each_epoch: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr_local = 0 is allowed as a no-motion probe (delta stays zero).
        if self.lr_local < 0:
            raise ValueError("lr_local must be >= 0")
        if self.fisher_mode not in FISHER_MODES:
            raise ValueError(f"unknown fisher_mode {self.fisher_mode!r}, expected one of {FISHER_MODES}")
        if self.fisher_normalize not in FISHER_NORMALIZATIONS:
            raise ValueError(
                f"unknown fisher_normalize {self.fisher_normalize!r}, "
                f"expected one of {FISHER_NORMALIZATIONS}"
            )


@dataclass
class ClientUpdate:
    """One client's round output: delta (broadcast minus final), curvature
    diagonal, and the example-count weight used by the server."""

    client_id: int
    delta: np.ndarray
    fisher: np.ndarray
    weight: float
    examples_seen: int
    fisher_passes: int = 0

    def __post_init__(self) -> None:
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.fisher = np.asarray(self.fisher, dtype=np.float64)
        if self.delta.shape != self.fisher.shape:
            raise ValueError("delta and fisher must have equal lengths")
        if not np.all(np.isfinite(self.fisher)) or np.any(self.fisher < 0):
            raise ValueError("fisher entries must be finite and >= 0")
        if self.weight <= 0:
            raise ValueError("weight must be > 0")


def _epoch_partition(n: int, batch_size: int, shuffle: bool, seed: int,
                     epoch: int) -> list[np.ndarray]:
    if shuffle:
        order = np.random.default_rng([seed & _SEED_MASK, epoch]).permutation(n)
    else:
        order = np.arange(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def fisher_diag(spec: ModelSpec, params: np.ndarray, data: Batch,
                batch_size: int) -> np.ndarray:
    """Sum of elementwise squared minibatch gradients at fixed params.

    Batches are consecutive slices of the data in its given order; the
    final partial batch is kept. The result is the unnormalized sum over
    batches.
    """
    if data.n == 0:
        raise ValueError("data must be nonempty")
    fisher = np.zeros_like(params)
    for start in range(0, data.n, batch_size):
        _, g = loss_and_grad(spec, params, data.take(np.arange(start, min(start + batch_size, data.n))))
        fisher += g * g
    return fisher


def fed_local_train(spec: ModelSpec, params_global: np.ndarray, data: Batch,
                    cfg: LocalTrainConfig, seed: int, client_id: int = 0) -> ClientUpdate:
    """E epochs of minibatch SGD from params_global.

    The batch partition of each epoch is a deterministic function of
    (seed, epoch). Raises on non-finite loss, naming the epoch and batch.
    """
    if data.n == 0:
        raise ValueError("data must be nonempty")
    params = params_global.copy()
    delta = np.zeros_like(params)
    fisher = np.zeros_like(params)
    fisher_batches = 0
    last_partition: list[np.ndarray] = []
    for epoch in range(cfg.epochs):
        last_epoch = epoch == cfg.epochs - 1
        last_partition = _epoch_partition(data.n, cfg.batch_size,
                                          cfg.shuffle_each_epoch, seed, epoch)
        for bi, idx in enumerate(last_partition):
            try:
                _, g = loss_and_grad(spec, params, data.take(idx))
            except DivergenceError as err:
                raise DivergenceError(f"epoch {epoch} batch {bi}: {err}") from err
            if last_epoch and cfg.fisher_mode == "last_epoch":
                fisher += g * g
                fisher_batches += 1
            step = cfg.lr_local * g
            params -= step
            delta += step

    fisher_passes = 0
    if cfg.fisher_mode == "extra_pass":
        fisher_passes = 1
        for bi, idx in enumerate(last_partition):
            try:
                _, g = loss_and_grad(spec, params, data.take(idx))
            except DivergenceError as err:
                raise DivergenceError(f"fisher pass batch {bi}: {err}") from err
            fisher += g * g
            fisher_batches += 1
    elif cfg.fisher_mode == "none":
        fisher = np.ones_like(params)

    if cfg.fisher_mode != "none" and cfg.fisher_normalize == "mean_per_batch":
        fisher /= fisher_batches

    return ClientUpdate(
        client_id=client_id,
        delta=delta,
        fisher=fisher,
        weight=float(data.n),
        examples_seen=cfg.epochs * data.n,
        fisher_passes=fisher_passes,
    )
