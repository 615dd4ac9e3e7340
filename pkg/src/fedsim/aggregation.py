"""Server-side aggregation of client updates.

fedavg combines deltas by example-count weights; fedfish additionally
weights every parameter coordinate by its client curvature (Fisher
diagonal), normalizing by the summed curvature. Coordinates where every
client reports zero curvature carry no information, so with fisher_eps = 0
they fall back to the fedavg value and are counted for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nn_core import DivergenceError
from .local_training import ClientUpdate

ALGOS = ("fedavg", "fedfish")
SERVER_OPTS = ("sgd", "adam")

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
BITS_PER_REAL = 64


@dataclass(frozen=True)
class AggregatorConfig:
    algo: str
    lr_global: float
    fisher_eps: float = 0.0
    server_opt: str = "sgd"

    def __post_init__(self) -> None:
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}, expected one of {ALGOS}")
        # lr_global = 0 is allowed as a no-step probe.
        if self.lr_global < 0:
            raise ValueError("lr_global must be >= 0")
        if self.fisher_eps < 0:
            raise ValueError("fisher_eps must be >= 0")
        if self.server_opt not in SERVER_OPTS:
            raise ValueError(f"unknown server_opt {self.server_opt!r}, expected one of {SERVER_OPTS}")


@dataclass
class ServerState:
    """Global parameters plus Adam moments (unused under sgd)."""

    params: np.ndarray
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step: int = 0

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)
        if self.m.shape != self.params.shape or self.v.shape != self.params.shape:
            raise ValueError("moment arrays must match param length")
        if self.step < 0:
            raise ValueError("step counter must be >= 0")


def aggregate(updates: list[ClientUpdate], cfg: AggregatorConfig) -> tuple[np.ndarray, int]:
    """Combine client deltas into a pseudo-gradient.

    Returns (pseudo_grad, fallback_coords) where fallback_coords counts the
    coordinates that fell back to the fedavg value because the summed
    weighted curvature was exactly zero (possible only with fisher_eps = 0).
    """
    if not updates:
        raise ValueError("updates must be nonempty")
    length = updates[0].delta.size
    if any(u.delta.size != length for u in updates):
        raise ValueError("updates must have equal parameter lengths")

    total_weight = sum(u.weight for u in updates)
    favg = sum(u.weight * u.delta for u in updates) / total_weight
    if cfg.algo == "fedavg":
        return favg, 0

    num = np.zeros(length)
    den = np.zeros(length)
    for u in updates:
        num += u.weight * u.fisher * u.delta
        den += u.weight * u.fisher
    dead = den == 0.0
    fallback = int(np.count_nonzero(dead)) if cfg.fisher_eps == 0.0 else 0
    safe_den = den + cfg.fisher_eps
    pseudo_grad = np.divide(num, safe_den, out=np.zeros(length), where=safe_den != 0.0)
    if cfg.fisher_eps == 0.0:
        pseudo_grad[dead] = favg[dead]
    return pseudo_grad, fallback


def closed_form_merge(params_list: list[np.ndarray], fishers: list[np.ndarray],
                      eps: float = 0.0) -> np.ndarray:
    """Curvature-weighted average of parameter vectors.

    out[j] = sum_i F_i[j] * theta_i[j] / (sum_i F_i[j] + eps); coordinates
    with zero summed curvature (eps = 0) fall back to the unweighted mean.
    """
    if not params_list:
        raise ValueError("params_list must be nonempty")
    if len(params_list) != len(fishers):
        raise ValueError("params_list and fishers must have equal lengths")
    length = params_list[0].size
    if any(p.size != length for p in params_list) or any(f.size != length for f in fishers):
        raise ValueError("all vectors must have equal lengths")
    num = np.zeros(length)
    den = np.zeros(length)
    for theta, f in zip(params_list, fishers):
        num += f * theta
        den += f
    dead = den == 0.0
    safe_den = den + eps
    out = np.divide(num, safe_den, out=np.zeros(length), where=safe_den != 0.0)
    if eps == 0.0 and dead.any():
        out[dead] = np.mean([p[dead] for p in params_list], axis=0)
    return out


def server_step(state: ServerState, pseudo_grad: np.ndarray,
                cfg: AggregatorConfig) -> ServerState:
    """One server optimizer step treating pseudo_grad as a gradient."""
    if pseudo_grad.shape != state.params.shape:
        raise ValueError("pseudo_grad length must match params")
    if cfg.server_opt == "sgd":
        params = state.params - cfg.lr_global * pseudo_grad
        new = ServerState(params, state.m.copy(), state.v.copy(), state.step)
    else:
        step = state.step + 1
        m = _ADAM_BETA1 * state.m + (1.0 - _ADAM_BETA1) * pseudo_grad
        v = _ADAM_BETA2 * state.v + (1.0 - _ADAM_BETA2) * pseudo_grad * pseudo_grad
        m_hat = m / (1.0 - _ADAM_BETA1 ** step)
        v_hat = v / (1.0 - _ADAM_BETA2 ** step)
        params = state.params - cfg.lr_global * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        new = ServerState(params, m, v, step)
    if not np.all(np.isfinite(new.params)):
        raise DivergenceError("server step produced non-finite parameters")
    return new


class CommCost(NamedTuple):
    up_bits: int
    down_bits: int


def comm_cost(updates: list[ClientUpdate], cfg: AggregatorConfig) -> CommCost:
    """Per-round communication in bits, assuming 64-bit reals.

    Upstream: each client sends its delta (and, under fedfish, its Fisher
    diagonal of equal length). Downstream: one broadcast of the parameters.
    An empty round costs nothing.
    """
    if not updates:
        return CommCost(0, 0)
    p = updates[0].delta.size
    vectors_per_client = 2 if cfg.algo == "fedfish" else 1
    return CommCost(len(updates) * vectors_per_client * p * BITS_PER_REAL,
                    p * BITS_PER_REAL)
