"""Dense feed-forward networks over a flat parameter vector.

Forward and backward passes are written out by hand so the whole model
lives in a single float64 vector, which is the currency every other
module (local training, aggregation, evaluation) trades in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu")
HEADS = ("regression_mse", "classification_softmax_ce")


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; the caller should reduce the lr."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense MLP: layer widths, hidden activation, loss head."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    head: str = "regression_mse"

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must have >= 2 entries, all >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.head == "classification_softmax_ce" and sizes[-1] < 2:
            raise ValueError("classification head needs at least 2 output classes")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class Batch:
    """A minibatch of inputs and targets.

    targets are a [B x d_out] float matrix for regression / one-hot
    classification, or a length-B integer vector of class indices.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        targets = np.asarray(self.targets)
        if not np.issubdtype(targets.dtype, np.integer):
            targets = np.atleast_2d(targets.astype(np.float64))
        self.targets = targets
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError(
                f"inputs have {self.inputs.shape[0]} rows but targets have {self.targets.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, indices: np.ndarray) -> "Batch":
        return Batch(self.inputs[indices], self.targets[indices])


def empty_batch(input_dim: int, target_dim: int) -> Batch:
    return Batch(np.zeros((0, input_dim)), np.zeros((0, target_dim)))


def concat_batches(batches: list[Batch]) -> Batch:
    nonempty = [b for b in batches if b.n > 0]
    if not nonempty:
        raise ValueError("cannot concatenate only empty batches")
    return Batch(
        np.concatenate([b.inputs for b in nonempty], axis=0),
        np.concatenate([b.targets for b in nonempty], axis=0),
    )


def param_count(spec: ModelSpec) -> int:
    """Number of parameters: sum of n_in*n_out + n_out over layer pairs."""
    sizes = spec.layer_sizes
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def _layer_views(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    # Layout per layer: weight matrix (n_in, n_out) row-major, then bias (n_out,).
    views = []
    offset = 0
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = params[offset: offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset: offset + n_out]
        offset += n_out
        views.append((w, b))
    return views


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases. Deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(spec), dtype=np.float64)
    for w, _ in _layer_views(spec, params):
        n_in, n_out = w.shape
        bound = np.sqrt(6.0 / (n_in + n_out))
        w[...] = rng.uniform(-bound, bound, size=(n_in, n_out))
    return params


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_count(spec),):
        raise ValueError(f"expected {param_count(spec)} parameters, got shape {params.shape}")
    if not np.isfinite(params).all():
        raise DivergenceError("parameter vector contains non-finite entries")
    return params


def _forward_cached(
    spec: ModelSpec, params: np.ndarray, inputs: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward pass keeping per-layer activations and pre-activations for backprop."""
    h = inputs
    activations = [h]
    pre_acts = []
    layers = _layer_views(spec, params)
    for li, (w, b) in enumerate(layers):
        z = h @ w + b
        pre_acts.append(z)
        if li < len(layers) - 1:
            h = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        else:
            h = z  # raw outputs; softmax only happens inside the loss
        activations.append(h)
    return h, activations, pre_acts


def forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Network outputs for a [B x d_in] input matrix (logits for classification)."""
    params = _check_params(spec, params)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != spec.input_dim:
        raise ValueError(f"input width {inputs.shape[1]} != expected {spec.input_dim}")
    out, _, _ = _forward_cached(spec, params, inputs)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def class_indices(targets: np.ndarray, num_classes: int) -> np.ndarray:
    """Normalize classification targets (one-hot rows or index vector) to indices."""
    targets = np.asarray(targets)
    if targets.ndim == 2 and targets.shape[1] == num_classes:
        return targets.argmax(axis=1)
    if targets.ndim == 2 and targets.shape[1] == 1:
        return targets[:, 0].astype(np.int64)
    if targets.ndim == 1:
        return targets.astype(np.int64)
    raise ValueError(f"cannot interpret targets of shape {targets.shape} as class labels")


def one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(indices), num_classes), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.n < 1:
        raise ValueError("batch is empty")
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(f"batch input width {batch.inputs.shape[1]} != {spec.input_dim}")
    if spec.head == "regression_mse" and batch.targets.shape[1] != spec.output_dim:
        raise ValueError(f"batch target width {batch.targets.shape[1]} != {spec.output_dim}")


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient as a flat vector of param_count entries.

    Regression: mean squared error over all B*d_out output coordinates.
    Classification: mean negative log softmax probability of the target class.
    """
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    out, activations, pre_acts = _forward_cached(spec, params, batch.inputs)
    b_size = batch.n

    if spec.head == "regression_mse":
        residual = out - batch.targets
        loss = float(np.mean(residual**2))
        d_out = 2.0 * residual / residual.size
    else:
        log_probs = _log_softmax(out)
        idx = class_indices(batch.targets, spec.output_dim)
        loss = float(-log_probs[np.arange(b_size), idx].mean())
        d_out = (np.exp(log_probs) - one_hot(idx, spec.output_dim)) / b_size

    grad = np.zeros_like(params)
    grad_views = _layer_views(spec, grad)
    layers = _layer_views(spec, params)
    upstream = d_out
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw, gb = grad_views[li]
        gw[...] = activations[li].T @ upstream
        gb[...] = upstream.sum(axis=0)
        if li > 0:
            upstream = upstream @ w.T
            z = pre_acts[li - 1]
            if spec.activation == "tanh":
                upstream = upstream * (1.0 - np.tanh(z) ** 2)
            else:
                upstream = upstream * (z > 0.0)

    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise DivergenceError("non-finite loss or gradient")
    return loss, grad


def predict_metric(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean squared error (regression) or accuracy in [0, 1] (classification).

    Classification argmax breaks ties in favor of the lowest class index.
    """
    if batch.n < 1:
        raise ValueError("cannot evaluate a metric on an empty batch")
    _check_batch(spec, batch)
    out = forward(spec, params, batch.inputs)
    if spec.head == "regression_mse":
        return float(np.mean((out - batch.targets) ** 2))
    predicted = out.argmax(axis=1)  # np.argmax keeps the first (lowest) max index
    actual = class_indices(batch.targets, spec.output_dim)
    return float(np.mean(predicted == actual))


def batch_loss(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean head loss without the gradient."""
    loss, _ = loss_and_grad(spec, params, batch)
    return loss
