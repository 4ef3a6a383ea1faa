"""Minimal dense-network engine: ReLU MLPs, backprop, MSE, Adam, and a
finite-difference gradient checker.

Parameters are stored and trained in float32; :func:`grad_check` runs a
float64 shadow of the same forward/backward code so central differences
are meaningful. Everything is seeded and single-threaded per training run,
so identical (seed, data order) reproduce bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fileio

MODEL_KIND = "mlp_checkpoint"

# Substream salt so epoch shuffling never aliases parameter initialization.
_SHUFFLE_STREAM = 0x5F17


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ReLU on every layer but the last."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("spec needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {sizes}")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list[np.ndarray]  # layer i: (out, in) float32
    biases: list[np.ndarray]  # layer i: (out,) float32
    rng_seed: int = 0

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class Tape:
    """Activations retained by a forward pass for the matching backward."""

    inputs: list[np.ndarray]  # a_0 = x, a_1 .. a_{L-1} post-activation
    pre_activations: list[np.ndarray]  # z_1 .. z_L
    squeezed: bool  # input arrived 1-D


@dataclass
class AdamState:
    """Adam accumulators aligned with a model's parameter lists."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, model: MlpModel, learning_rate: float = 0.001) -> "AdamState":
        return cls(
            m_weights=[np.zeros_like(w) for w in model.weights],
            m_biases=[np.zeros_like(b) for b in model.biases],
            v_weights=[np.zeros_like(w) for w in model.weights],
            v_biases=[np.zeros_like(b) for b in model.biases],
            learning_rate=float(learning_rate),
        )


def init_params(spec: MlpSpec, seed: int) -> MlpModel:
    """Deterministically initialize a model from *seed*.

    Weights are uniform in +-sqrt(6 / fan_in) per layer; biases start at
    zero.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(
            rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)
        )
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpModel(spec=spec, weights=weights, biases=biases, rng_seed=int(seed))


def _forward_arrays(
    weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Batched forward on raw parameter arrays; dtype follows the inputs."""
    inputs = [x]
    pre_activations = []
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        a = np.maximum(z, 0) if i < last else z
        if i < last:
            inputs.append(a)
    return a, (inputs, pre_activations)


def _backward_arrays(
    weights: Sequence[np.ndarray],
    tape: tuple[list[np.ndarray], list[np.ndarray]],
    grad_output: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Backprop on raw arrays; gradients sum over the batch dimension.

    The ReLU subgradient at exactly zero pre-activation is taken as zero.
    """
    inputs, pre_activations = tape
    n_layers = len(weights)
    grad_w: list[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * n_layers
    delta = grad_output
    for i in reversed(range(n_layers)):
        grad_w[i] = delta.T @ inputs[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * (pre_activations[i - 1] > 0)
    return grad_w, grad_b


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network on a single input vector or an ``(n, in)`` batch.

    Returns the output (matching the input's batchedness) and the tape
    needed by :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float32)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.input_size:
        raise ValueError(
            f"input has {x.shape[-1]} features, model expects "
            f"{model.spec.input_size}"
        )
    out, (inputs, pre_activations) = _forward_arrays(model.weights, model.biases, x)
    tape = Tape(inputs=inputs, pre_activations=pre_activations, squeezed=squeezed)
    return (out[0] if squeezed else out), tape


def backward(model: MlpModel, tape: Tape, grad_output: np.ndarray) -> Gradients:
    """Backpropagate d(loss)/d(output) through the taped forward pass."""
    if len(tape.pre_activations) != model.spec.n_layers:
        raise ValueError(
            f"tape has {len(tape.pre_activations)} layers, model has "
            f"{model.spec.n_layers}"
        )
    grad_output = np.asarray(grad_output, dtype=np.float32)
    if tape.squeezed:
        grad_output = grad_output[None, :]
    if grad_output.shape != tape.pre_activations[-1].shape:
        raise ValueError(
            f"grad_output shape {grad_output.shape} does not match output "
            f"shape {tape.pre_activations[-1].shape}"
        )
    grad_w, grad_b = _backward_arrays(model.weights, (tape.inputs, tape.pre_activations), grad_output)
    return Gradients(weights=grad_w, biases=grad_b)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over a vector and its gradient wrt predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 1 or target.ndim != 1:
        raise ValueError("mse_loss expects 1-D vectors")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss on empty vectors")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / pred.size
    return loss, grad


def adam_step(
    model: MlpModel, grads: Gradients, state: AdamState
) -> tuple[MlpModel, AdamState]:
    """Apply one bias-corrected Adam update in place; returns both objects.

    Raises:
        ValueError: a gradient array contains non-finite values (named by
            layer and parameter kind).
    """
    state.t += 1
    t = state.t
    lr = np.float32(state.learning_rate)
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    eps = np.float32(state.eps)
    corr1 = np.float32(1.0 - state.beta1**t)
    corr2 = np.float32(1.0 - state.beta2**t)

    for i in range(model.spec.n_layers):
        for kind, param, grad, m, v in (
            ("weights", model.weights[i], grads.weights[i], state.m_weights, state.v_weights),
            ("biases", model.biases[i], grads.biases[i], state.m_biases, state.v_biases),
        ):
            g = np.asarray(grad, dtype=np.float32)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient for layer {i} {kind}")
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * (g * g)
            m_hat = m[i] / corr1
            v_hat = v[i] / corr2
            param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return model, state


def grad_check(
    model: MlpModel,
    x: np.ndarray,
    target: np.ndarray,
    loss_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-3,
) -> float:
    """Compare analytic gradients against central finite differences.

    Runs a float64 shadow of the forward/backward path and returns the
    maximum over parameters of ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``.
    *loss_fn* maps (output vector, target) to (scalar loss, gradient wrt
    output). Intended for small models; cost grows with parameter count.
    """
    weights = [w.astype(np.float64) for w in model.weights]
    biases = [b.astype(np.float64) for b in model.biases]
    x64 = np.asarray(x, dtype=np.float64)[None, :]

    out, tape = _forward_arrays(weights, biases, x64)
    _, grad_out = loss_fn(out[0], target)
    grad_out = np.asarray(grad_out, dtype=np.float64)[None, :]
    analytic_w, analytic_b = _backward_arrays(weights, tape, grad_out)

    def loss_at() -> float:
        y, _ = _forward_arrays(weights, biases, x64)
        return float(loss_fn(y[0], target)[0])

    worst = 0.0
    for params, analytic in ((weights, analytic_w), (biases, analytic_b)):
        for param, grad in zip(params, analytic):
            flat_p = param.reshape(-1)
            flat_g = grad.reshape(-1)
            for j in range(flat_p.size):
                orig = flat_p[j]
                flat_p[j] = orig + step
                loss_plus = loss_at()
                flat_p[j] = orig - step
                loss_minus = loss_at()
                flat_p[j] = orig
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                error = abs(flat_g[j] - numeric)
                scale = max(abs(flat_g[j]), abs(numeric), 1e-12)
                worst = max(worst, error / scale)
    return worst


BatchLoss = Callable[[np.ndarray, np.ndarray], tuple[float, dict, np.ndarray]]


def fit(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_fn: BatchLoss,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 64,
    epochs: int = 10,
    seed: int = 0,
    shuffle: bool = True,
) -> list[dict]:
    """Mini-batch Adam training loop shared by all regressors.

    *loss_fn* maps a prediction batch and target batch to
    ``(loss, aux_components, gradient wrt predictions)``. Batches are
    reshuffled each epoch from a seeded stream; the last partial batch is
    kept. Returns one history entry per epoch with the sample-weighted
    mean loss and components.

    Raises:
        ValueError: empty training set, or a non-finite loss (reported
            with its epoch and batch index).
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    n = len(inputs)
    if n == 0:
        raise ValueError("empty training set")
    if len(targets) != n:
        raise ValueError(f"{n} inputs but {len(targets)} targets")

    state = AdamState.init(model, learning_rate)
    rng = np.random.default_rng([int(seed), _SHUFFLE_STREAM])
    history: list[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        loss_sum = 0.0
        aux_sums: dict[str, float] = {}
        for batch_index, start in enumerate(range(0, n, batch_size)):
            batch = order[start : start + batch_size]
            out, tape = forward(model, inputs[batch])
            loss, aux, grad_out = loss_fn(out, targets[batch])
            if not np.isfinite(loss):
                raise ValueError(
                    f"non-finite loss {loss} at epoch {epoch} batch {batch_index}"
                )
            grads = backward(model, tape, grad_out)
            adam_step(model, grads, state)
            loss_sum += loss * len(batch)
            for key, value in aux.items():
                aux_sums[key] = aux_sums.get(key, 0.0) + value * len(batch)
        entry = {"epoch": epoch, "loss": loss_sum / n}
        entry.update({key: value / n for key, value in aux_sums.items()})
        history.append(entry)
    return history


@dataclass
class LoadedModel:
    model: MlpModel
    adam_state: AdamState | None
    mode: str | None


def _param_arrays(model: MlpModel) -> list[np.ndarray]:
    arrays = []
    for w, b in zip(model.weights, model.biases):
        arrays.extend((w, b))
    return arrays


def save_model(
    model: MlpModel,
    base: str | Path,
    *,
    adam_state: AdamState | None = None,
    mode: str | None = None,
) -> None:
    """Write a checkpoint: manifest + flat float32 payload.

    Payload order is weights-then-bias per layer; when Adam state is
    included, its first and second moments follow in the same layout.
    """
    chunks = [a.reshape(-1) for a in _param_arrays(model)]
    if adam_state is not None:
        for w, b in zip(adam_state.m_weights, adam_state.m_biases):
            chunks.extend((w.reshape(-1), b.reshape(-1)))
        for w, b in zip(adam_state.v_weights, adam_state.v_biases):
            chunks.extend((w.reshape(-1), b.reshape(-1)))
    payload = np.concatenate(chunks).astype(np.float32)
    manifest = {
        "kind": MODEL_KIND,
        "version": fileio.FORMAT_VERSION,
        "dim": 1,
        "count": int(payload.size),
        "layer_sizes": list(model.spec.layer_sizes),
        "seed": int(model.rng_seed),
        "mode": mode,
        "has_adam_state": adam_state is not None,
    }
    if adam_state is not None:
        manifest["adam"] = {
            "t": adam_state.t,
            "learning_rate": adam_state.learning_rate,
            "beta1": adam_state.beta1,
            "beta2": adam_state.beta2,
            "eps": adam_state.eps,
        }
    fileio.write_pair(base, manifest, payload)


def load_model(base: str | Path) -> LoadedModel:
    """Load a checkpoint written by :func:`save_model`."""
    manifest, payload = fileio.read_pair(base, MODEL_KIND, 1)
    flat = payload.reshape(-1)
    spec = MlpSpec(tuple(manifest["layer_sizes"]))

    def take(shape: tuple[int, ...], cursor: list[int]) -> np.ndarray:
        size = int(np.prod(shape))
        start = cursor[0]
        if start + size > flat.size:
            raise fileio.PayloadTruncatedError(
                f"{base}: checkpoint payload too short for spec {spec.layer_sizes}"
            )
        cursor[0] += size
        return flat[start : start + size].reshape(shape).copy()

    cursor = [0]

    def read_param_set() -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws, bs = [], []
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            ws.append(take((fan_out, fan_in), cursor))
            bs.append(take((fan_out,), cursor))
        return ws, bs

    weights, biases = read_param_set()
    model = MlpModel(
        spec=spec, weights=weights, biases=biases, rng_seed=int(manifest["seed"])
    )
    adam_state = None
    if manifest.get("has_adam_state"):
        meta = manifest["adam"]
        m_w, m_b = read_param_set()
        v_w, v_b = read_param_set()
        adam_state = AdamState(
            m_weights=m_w,
            m_biases=m_b,
            v_weights=v_w,
            v_biases=v_b,
            t=int(meta["t"]),
            learning_rate=float(meta["learning_rate"]),
            beta1=float(meta["beta1"]),
            beta2=float(meta["beta2"]),
            eps=float(meta["eps"]),
        )
    if cursor[0] != flat.size:
        raise fileio.CountMismatchError(
            f"{base}: checkpoint payload has {flat.size} floats, expected {cursor[0]}"
        )
    return LoadedModel(model=model, adam_state=adam_state, mode=manifest.get("mode"))
