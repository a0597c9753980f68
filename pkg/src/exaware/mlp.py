"""Fully-connected ReLU networks: evaluation, backprop and Adam training.

All arithmetic is float64. Weight matrices are stored with one row per
neuron (shape ``(fan_out, fan_in)``), so ``W @ x + b`` is the layer's
pre-activation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .data import Dataset

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = "1"


class ArchitectureError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 3:
            raise ArchitectureError(
                f"need input, at least one hidden layer and output, got {list(sizes)}"
            )
        if any(s < 1 for s in sizes):
            raise ArchitectureError(f"layer sizes must be >= 1, got {list(sizes)}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def n_layers(self) -> int:
        """Number of weight matrices."""
        return len(self.layer_sizes) - 1

    def weight_shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]

    def __str__(self):
        return "<" + ",".join(map(str, self.layer_sizes)) + ">"


@dataclass
class MLPModel:
    architecture: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    training_seed: Optional[int] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        shapes = self.architecture.weight_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ArchitectureError("number of layers does not match architecture")
        for k, (w, b, shape) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != shape:
                raise ArchitectureError(f"layer {k}: weight shape {w.shape} != {shape}")
            if b.shape != (shape[0],):
                raise ArchitectureError(f"layer {k}: bias shape {b.shape} != {(shape[0],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    def copy(self) -> "MLPModel":
        return MLPModel(
            self.architecture,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.training_seed,
            json.loads(json.dumps(self.metadata)),
        )

    def n_weights(self) -> int:
        return int(sum(w.size for w in self.weights))

    def n_parameters(self) -> int:
        return self.n_weights() + int(sum(b.size for b in self.biases))

    def to_float32(self) -> "MLPModel":
        """Parameters rounded through float32 (for parity experiments)."""
        m = self.copy()
        m.weights = [w.astype(np.float32).astype(np.float64) for w in m.weights]
        m.biases = [b.astype(np.float32).astype(np.float64) for b in m.biases]
        m.metadata["float32_export"] = True
        return m

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "architecture": list(self.architecture.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "training_seed": self.training_seed,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPModel":
        if str(d.get("version")) != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model file version {d.get('version')!r}")
        arch = Architecture(tuple(d["architecture"]))
        return cls(
            arch,
            [np.array(w, dtype=np.float64).reshape(shape) for w, shape in zip(d["weights"], arch.weight_shapes())],
            [np.array(b, dtype=np.float64) for b in d["biases"]],
            d.get("training_seed"),
            dict(d.get("metadata") or {}),
        )

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MLPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(architecture: Architecture, seed: int) -> MLPModel:
    """He-uniform weights, zero biases; bit-identical for a given seed."""
    if not isinstance(architecture, Architecture):
        architecture = Architecture(tuple(architecture))
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_out, fan_in in architecture.weight_shapes():
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPModel(architecture, weights, biases, training_seed=seed,
                    metadata={"init": "he-uniform", "init_seed": seed})


def _check_input(model: MLPModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ArchitectureError(
            f"input dimension {x.shape[-1]} does not match model input {model.input_dim}"
        )
    return x


def forward(model: MLPModel, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch (rows)."""
    h = _check_input(model, x)
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def forward_hidden_states(model: MLPModel, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and active masks of every hidden layer for input ``x``."""
    h = _check_input(model, x)
    pre, active = [], []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        active.append(z > 0)
        h = np.maximum(z, 0.0)
    return pre, active


# ---------------------------------------------------------------------------
# loss and gradients


def mse_loss_and_grads(model: MLPModel, X: np.ndarray, Y: np.ndarray):
    """Mean squared error over batch and outputs, with backprop gradients.

    Returns ``(loss, grad_weights, grad_biases)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    acts = [X]
    pres = []
    h = X
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pres.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)

    diff = acts[-1] - Y
    with np.errstate(over="ignore"):  # divergence is reported by the trainer
        loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size

    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(last, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pres[k - 1] > 0)
    return loss, gw, gb


# Penalty hook: model -> (value, {layer: grad_w}, {layer: grad_b}); the defense
# module supplies one through ``similarity_penalty``.
Penalty = Callable[[MLPModel], tuple[float, dict, dict]]


def composite_loss_and_grads(model: MLPModel, X, Y, penalty: Optional[Penalty] = None,
                             weight: float = 0.0):
    loss, gw, gb = mse_loss_and_grads(model, X, Y)
    if penalty is not None and weight != 0.0:
        value, pw, pb = penalty(model)
        loss += weight * value
        for k, g in pw.items():
            gw[k] = gw[k] + weight * g
        for k, g in pb.items():
            gb[k] = gb[k] + weight * g
    return loss, gw, gb


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    # Geometric decay from learning_rate to lr_final, starting after a fraction
    # decay_start of all steps; lr_final=None keeps the rate constant.
    lr_final: Optional[float] = None
    decay_start: float = 0.0
    defense: Optional[Any] = None  # defense.DefenseConfig

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be > 0")
        if not 0 <= self.decay_start < 1:
            raise ValueError("decay_start must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defense"] = self.defense.to_dict() if self.defense is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        from .defense import DefenseConfig

        d = dict(d)
        if d.get("defense") is not None:
            d["defense"] = DefenseConfig.from_dict(d["defense"])
        return cls(**d)


class _Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1, beta2, eps):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(architecture: Architecture, dataset: Dataset, config: TrainingConfig,
          init: Optional[MLPModel] = None) -> MLPModel:
    """Mini-batch Adam on MSE plus the optional similarity penalty."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not isinstance(architecture, Architecture):
        architecture = Architecture(tuple(architecture))
    if dataset.input_dim != architecture.input_dim:
        raise ArchitectureError("dataset input dimension does not match architecture")
    targets = dataset.targets.reshape(len(dataset), -1)
    if targets.shape[1] != architecture.output_dim:
        raise ArchitectureError("dataset target dimension does not match architecture")

    model = init.copy() if init is not None else init_model(architecture, config.seed)

    penalty, weight = None, 0.0
    if config.defense is not None and config.defense.lambda_similarity > 0:
        from .defense import similarity_penalty

        penalty = similarity_penalty(model, config.defense)
        weight = config.defense.lambda_similarity

    params = model.weights + model.biases
    opt = _Adam(params, config.beta1, config.beta2, config.eps_adam)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    n = len(dataset)
    n_batches = math.ceil(n / config.batch_size)
    total_steps = n_batches * config.epochs
    first_decay_step = int(config.decay_start * total_steps)
    decay = 1.0
    if config.lr_final is not None and total_steps - first_decay_step > 1:
        decay = (config.lr_final / config.learning_rate) ** (1.0 / (total_steps - first_decay_step - 1))

    lr = config.learning_rate
    step = 0
    loss = float("nan")
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            loss, gw, gb = composite_loss_and_grads(
                model, dataset.inputs[idx], targets[idx], penalty, weight)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, bi, loss)
            opt.step(params, gw + gb, lr)
            step += 1
            if step > first_decay_step:
                lr *= decay
            epoch_loss += loss
        logger.debug("epoch %d: mean loss %.6g", epoch, epoch_loss / n_batches)

    model.training_seed = config.seed
    model.metadata.update({
        "dataset": dataset.name,
        "training": config.to_dict(),
        "lambda_similarity": weight,
        "final_batch_loss": loss,
    })
    return model


# ---------------------------------------------------------------------------
# evaluation


def predict_classes(model: MLPModel, dataset: Dataset) -> np.ndarray:
    out = forward(model, dataset.inputs).reshape(len(dataset), -1)
    if out.shape[1] > 1:
        return np.argmax(out, axis=1)
    return dataset.decode_scalar(out[:, 0])


def accuracy(model: MLPModel, dataset: Dataset) -> float:
    """Fraction of samples whose predicted class matches the label."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if dataset.labels is None:
        raise ValueError(f"dataset {dataset.name!r} has no class labels")
    return float(np.mean(predict_classes(model, dataset) == dataset.labels))
