"""Synthetic federated dataset generators with controllable heterogeneity.

Two families: a two-client 1-d regression problem whose client supports
overlap fully, partially, or not at all, and a multi-client Gaussian-blob
classification problem partitioned by a symmetric Dirichlet over classes.
All generators are pure functions of their arguments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn_core import Batch, empty_batch

OVERLAP_REGIMES = ("full", "partial", "disjoint")
PERSONALIZE_FRACTIONS = (0.0, 0.25, 0.5)

# Client x-supports per overlap regime for the two-client regression problem.
_TOY_SUPPORTS = {
    "full": ((-2.0, 2.0), (-2.0, 2.0)),
    "partial": ((-2.0, 1.0), (-1.0, 2.0)),
    "disjoint": ((-2.0, -0.2), (0.2, 2.0)),
}


def toy_target(x: np.ndarray) -> np.ndarray:
    # Even target: equal means on the symmetric disjoint supports, so a
    # single shared output bias can serve both clients after aggregation.
    return np.cos(2.0 * x)


@dataclass
class ClientDataset:
    """One client's data, split into disjoint train / personalize / eval parts."""

    client_id: int
    train: Batch
    personalize: Batch
    eval: Batch


@dataclass
class FederatedDataset:
    train_clients: list[ClientDataset]
    heldout_clients: list[ClientDataset]
    input_dim: int
    output_dim: int

    def __post_init__(self) -> None:
        ids = [c.client_id for c in self.train_clients + self.heldout_clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        if not self.train_clients:
            raise ValueError("need at least one train client")


def _toy_client(rng: np.random.Generator, cid: int, lo: float, hi: float,
                n: int, noise_sd: float, heldout: bool) -> ClientDataset:
    def sample(count: int) -> Batch:
        x = rng.uniform(lo, hi, size=(count, 1))
        y = toy_target(x) + noise_sd * rng.standard_normal((count, 1))
        return Batch(x, y)

    if heldout:
        return ClientDataset(cid, empty_batch(1, 1), empty_batch(1, 1), sample(n))
    return ClientDataset(cid, sample(n), empty_batch(1, 1), sample(n))


def gen_toy_regression(overlap: str, n_per_client: int, noise_sd: float,
                       seed: int) -> FederatedDataset:
    """Two-client regression on y = cos(2x) with overlap-controlled supports.

    Train clients carry n_per_client train points plus a same-sized fresh
    eval draw; the two held-out clients mirror the supports with all fresh
    samples in their eval split.
    """
    if overlap not in _TOY_SUPPORTS:
        raise ValueError(f"unknown overlap regime {overlap!r}, expected one of {OVERLAP_REGIMES}")
    if n_per_client < 2:
        raise ValueError("n_per_client must be >= 2")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    supports = _TOY_SUPPORTS[overlap]
    train_clients = [
        _toy_client(rng, cid, lo, hi, n_per_client, noise_sd, heldout=False)
        for cid, (lo, hi) in enumerate(supports)
    ]
    heldout_clients = [
        _toy_client(rng, 2 + cid, lo, hi, n_per_client, noise_sd, heldout=True)
        for cid, (lo, hi) in enumerate(supports)
    ]
    return FederatedDataset(train_clients, heldout_clients, input_dim=1, output_dim=1)


def _dirichlet_client(rng: np.random.Generator, cid: int, means: np.ndarray,
                      alpha: float, n: int, input_sd: float) -> ClientDataset:
    num_classes, input_dim = means.shape
    proportions = rng.dirichlet(np.full(num_classes, alpha))
    labels = rng.choice(num_classes, size=n, p=proportions)
    inputs = means[labels] + input_sd * rng.standard_normal((n, input_dim))
    targets = np.zeros((n, num_classes))
    targets[np.arange(n), labels] = 1.0
    batch = Batch(inputs, targets)
    n_train = int(0.8 * n)
    n_pers = int(0.1 * n)
    idx = np.arange(n)  # labels are already an iid draw; prefix split keeps determinism
    return ClientDataset(
        cid,
        batch.take(idx[:n_train]),
        batch.take(idx[n_train: n_train + n_pers]),
        batch.take(idx[n_train + n_pers:]),
    )


def gen_dirichlet_classification(num_clients: int, num_classes: int, alpha: float,
                                 examples_per_client: int, input_dim: int,
                                 seed: int) -> FederatedDataset:
    """Gaussian-blob classification with Dirichlet(alpha) class proportions per client.

    Class means sit on a radius-2 sphere (fixed by seed, shared by all
    clients); inputs are isotropic Gaussians with sd 0.5 around the mean of
    their class. Every client gets an 80/10/10 train/personalize/eval split.
    Small alpha concentrates each client on few classes; large alpha is
    near-iid. A quarter of num_clients (at least 2) extra clients are
    generated as held-out personalization clients.
    """
    if num_clients < 2:
        raise ValueError("num_clients must be >= 2")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if examples_per_client < 10:
        raise ValueError("examples_per_client must be >= 10 so every split is nonempty")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, input_dim))
    means *= 2.0 / np.linalg.norm(means, axis=1, keepdims=True)

    train_clients = [
        _dirichlet_client(rng, cid, means, alpha, examples_per_client, input_sd=0.5)
        for cid in range(num_clients)
    ]
    num_heldout = max(2, num_clients // 4)
    heldout_clients = [
        _dirichlet_client(rng, num_clients + cid, means, alpha, examples_per_client, input_sd=0.5)
        for cid in range(num_heldout)
    ]
    return FederatedDataset(train_clients, heldout_clients, input_dim, num_classes)


def split_for_personalization(client: ClientDataset, fraction: float) -> ClientDataset:
    """Re-split a held-out client's pooled examples for personalization.

    The pool is the client's examples in train, personalize, eval order.
    The first floor(fraction * n) examples become the personalize split and
    the last ceil(n / 2) the eval split, so the two never overlap for the
    supported fractions {0, 0.25, 0.5}.
    """
    if fraction not in PERSONALIZE_FRACTIONS:
        raise ValueError(f"fraction {fraction} not in supported set {PERSONALIZE_FRACTIONS}")
    if client.eval.n == 0:
        raise ValueError(f"client {client.client_id} has an empty eval split")
    parts = [b for b in (client.train, client.personalize, client.eval) if b.n > 0]
    pool = Batch(
        np.concatenate([b.inputs for b in parts], axis=0),
        np.concatenate([b.targets for b in parts], axis=0),
    )
    n = pool.n
    n_pers = int(np.floor(fraction * n))
    n_eval = int(np.ceil(n / 2))
    input_dim = pool.inputs.shape[1]
    target_dim = pool.targets.shape[1] if pool.targets.ndim == 2 else 1
    return ClientDataset(
        client.client_id,
        empty_batch(input_dim, target_dim),
        pool.take(np.arange(n_pers)) if n_pers > 0 else empty_batch(input_dim, target_dim),
        pool.take(np.arange(n - n_eval, n)),
    )


def _format_json(value, parts: list[str]) -> None:
    # Floats printed with 17 significant digits: exact f64 round-trip.
    if isinstance(value, dict):
        parts.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(k)))
            parts.append(":")
            _format_json(v, parts)
        parts.append("}")
    elif isinstance(value, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(value):
            if i:
                parts.append(",")
            _format_json(v, parts)
        parts.append("]")
    elif isinstance(value, bool):
        parts.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        parts.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        parts.append(format(float(value), ".17g"))
    elif isinstance(value, str):
        parts.append(json.dumps(value))
    elif value is None:
        parts.append("null")
    else:
        raise TypeError(f"cannot serialize {type(value)}")


def _batch_to_obj(batch: Batch) -> dict:
    return {"x": batch.inputs.tolist(), "y": np.atleast_2d(batch.targets).tolist()}


def _batch_from_obj(obj: dict, input_dim: int, output_dim: int) -> Batch:
    x = np.asarray(obj["x"], dtype=np.float64).reshape(-1, input_dim)
    y = np.asarray(obj["y"], dtype=np.float64).reshape(-1, output_dim)
    return Batch(x, y)


def dump_federated_dataset(dataset: FederatedDataset, path: str | Path) -> None:
    """Write a dataset to JSON with f64-exact decimal reals."""
    clients = []
    for client in dataset.train_clients + dataset.heldout_clients:
        clients.append({
            "id": client.client_id,
            "train": _batch_to_obj(client.train),
            "personalize": _batch_to_obj(client.personalize),
            "eval": _batch_to_obj(client.eval),
        })
    obj = {
        "clients": clients,
        "input_dim": dataset.input_dim,
        "output_dim": dataset.output_dim,
        "num_train_clients": len(dataset.train_clients),
    }
    parts: list[str] = []
    _format_json(obj, parts)
    Path(path).write_text("".join(parts), encoding="utf-8")


def load_federated_dataset(path: str | Path) -> FederatedDataset:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    d_in, d_out = int(obj["input_dim"]), int(obj["output_dim"])
    clients = [
        ClientDataset(
            int(c["id"]),
            _batch_from_obj(c["train"], d_in, d_out),
            _batch_from_obj(c["personalize"], d_in, d_out),
            _batch_from_obj(c["eval"], d_in, d_out),
        )
        for c in obj["clients"]
    ]
    n_train = int(obj.get("num_train_clients", len(clients)))
    return FederatedDataset(
        clients[:n_train], clients[n_train:], int(obj["input_dim"]), int(obj["output_dim"])
    )
