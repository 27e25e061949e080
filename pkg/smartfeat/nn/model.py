"""The classifier: two 1-D convolutions, max pooling, a hidden dense layer and a softmax output, trained with
mini-batch gradient descent on cross entropy.

.. code::

    input C x T
      -> conv1d (N1 filters, width K1) -> relu
      -> conv1d (N2 filters, width K2) -> relu
      -> maxpool (width = stride = pool)
      -> flatten -> dense (M_FC) -> relu
      -> dense (N_class) -> softmax

Everything is computed in double precision. Training is deterministic given the seed: weights are initialized from
one seeded generator and the batch order of every epoch is drawn from another.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import logging

import numpy as np

from ..container import dump_container, load_container
from ..dataset import EventWindow, stack_arrays
from .layers import (
    conv1d_backward,
    conv1d_forward,
    cross_entropy,
    cross_entropy_grad,
    dense_backward,
    dense_forward,
    maxpool1d_backward,
    maxpool1d_forward,
    relu_backward,
    relu_forward,
    softmax,
)

l = logging.getLogger(__name__)

__all__ = (
    "PARAM_NAMES",
    "OPTIMIZERS",
    "TrainingDiverged",
    "ModelConfig",
    "TrainConfig",
    "Classifier",
    "as_arrays",
    "init_params",
    "forward",
    "loss",
    "train",
    "GradientCheck",
    "gradient_check",
    "predict",
    "predict_batch",
    "save",
    "load",
)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
OPTIMIZERS = ("sgd", "adam")

Batch = Union[Sequence[EventWindow], Tuple[np.ndarray, np.ndarray]]


class TrainingDiverged(FloatingPointError):
    """The training loss or the weights stopped being finite."""

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        self.estimator: Optional[int] = None
        super().__init__(message)

    def __str__(self):
        where = []
        if self.estimator is not None:
            where.append(f"estimator {self.estimator}")
        if self.epoch is not None:
            where.append(f"epoch {self.epoch}")
        if self.batch is not None:
            where.append(f"batch {self.batch}")
        msg = super().__str__()
        return f"{msg} ({', '.join(where)})" if where else msg


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes. ``in_channels`` and ``length`` are the input shape; zero means "take it from the data"."""

    n1: int = 32
    k1: int = 3
    n2: int = 32
    k2: int = 3
    pool: int = 2
    fc: int = 32
    n_class: int = 2
    in_channels: int = 0
    length: int = 0

    @classmethod
    def full(cls, **kwargs) -> "ModelConfig":
        """The full-scale sizes: 256 filters per convolution and a 160-wide dense layer."""
        return cls(**{"n1": 256, "n2": 256, "fc": 160, **kwargs})

    def for_input(self, in_channels: int, length: int) -> "ModelConfig":
        return replace(self, in_channels=in_channels, length=length)

    @property
    def conv_length(self) -> int:
        """Time steps left after both valid convolutions."""
        return self.length - self.k1 + 1 - self.k2 + 1

    @property
    def flat_size(self) -> int:
        """Width of the flattened pooled features."""
        return self.n2 * (self.conv_length // self.pool)

    def validate(self) -> None:
        """:raises ValueError: naming the first field that makes the network unbuildable."""
        for name in ("n1", "k1", "n2", "k2", "pool", "fc", "in_channels", "length"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.n_class < 2:
            raise ValueError(f"model.n_class must be at least 2, got {self.n_class}")
        if self.conv_length < self.pool:
            raise ValueError(
                f"model: input length {self.length} is too short for kernels {self.k1}, {self.k2} and pool {self.pool}"
            )

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. ``patience`` of 0 disables early stopping."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 5
    min_delta: float = 1e-4

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be at least 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"train.optimizer must be one of {', '.join(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.patience < 0 or self.min_delta < 0:
            raise ValueError("train.patience and train.min_delta must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Classifier:
    """A trained network. Treat it as immutable once `train` returns it.

    ``attachments`` holds whatever is needed to turn raw data into inputs for this network, normally
    `smartfeat.dataset.Preprocessing.to_dict` output.
    """

    config: ModelConfig
    params: Dict[str, np.ndarray]
    train_config: Optional[TrainConfig] = None
    loss_curve: List[float] = field(default_factory=list)
    attachments: Dict[str, Any] = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.loss_curve)


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    """Seeded uniform initialization in ``+-sqrt(6 / (fan_in + fan_out))`` with zero biases."""
    config.validate()
    rng = np.random.default_rng([seed, 0])
    c, k1, k2 = config.in_channels, config.k1, config.k2
    return {
        "conv1_w": _glorot(rng, (config.n1, c, k1), c * k1, config.n1 * k1),
        "conv1_b": np.zeros(config.n1),
        "conv2_w": _glorot(rng, (config.n2, config.n1, k2), config.n1 * k2, config.n2 * k2),
        "conv2_b": np.zeros(config.n2),
        "fc1_w": _glorot(rng, (config.flat_size, config.fc), config.flat_size, config.fc),
        "fc1_b": np.zeros(config.fc),
        "fc2_w": _glorot(rng, (config.fc, config.n_class), config.fc, config.n_class),
        "fc2_b": np.zeros(config.n_class),
    }


def _forward(params: Dict[str, np.ndarray], pool: int, x: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
    z1, c1 = conv1d_forward(x, params["conv1_w"], params["conv1_b"])
    a1, r1 = relu_forward(z1)
    z2, c2 = conv1d_forward(a1, params["conv2_w"], params["conv2_b"])
    a2, r2 = relu_forward(z2)
    pooled, p = maxpool1d_forward(a2, pool)
    flat = pooled.reshape(len(x), -1)
    z3, c3 = dense_forward(flat, params["fc1_w"], params["fc1_b"])
    a3, r3 = relu_forward(z3)
    logits, c4 = dense_forward(a3, params["fc2_w"], params["fc2_b"])
    return softmax(logits), [c1, r1, c2, r2, p, pooled.shape, c3, r3, c4]


def _backward(
    params: Dict[str, np.ndarray], caches: List[Any], probs: np.ndarray, labels: np.ndarray
) -> Dict[str, np.ndarray]:
    c1, r1, c2, r2, p, pooled_shape, c3, r3, c4 = caches
    grads = {}
    d = cross_entropy_grad(probs, labels)
    d, grads["fc2_w"], grads["fc2_b"] = dense_backward(d, c4, params["fc2_w"])
    d = relu_backward(d, r3)
    d, grads["fc1_w"], grads["fc1_b"] = dense_backward(d, c3, params["fc1_w"])
    d = maxpool1d_backward(d.reshape(pooled_shape), p)
    d = relu_backward(d, r2)
    d, grads["conv2_w"], grads["conv2_b"] = conv1d_backward(d, c2, params["conv2_w"])
    d = relu_backward(d, r1)
    _, grads["conv1_w"], grads["conv1_b"] = conv1d_backward(d, c1, params["conv1_w"])
    return grads


def _check_input(config: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (config.in_channels, config.length):
        raise ValueError(
            f"input: expected {config.in_channels} channels x {config.length} steps, got shape {x.shape}"
        )
    return x


def forward(classifier: Classifier, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one ``C x T`` input (a vector) or an ``N x C x T`` batch (one row per sample)."""
    x = _check_input(classifier.config, x)
    single = x.ndim == 2
    probs, _ = _forward(classifier.params, classifier.config.pool, x[None] if single else x)
    return probs[0] if single else probs


def loss(probs: np.ndarray, labels) -> float:
    """Cross entropy; see `smartfeat.nn.layers.cross_entropy`."""
    return cross_entropy(probs, labels)


def as_arrays(data: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """Accept featurized windows or an ``(inputs, labels)`` pair; return the pair."""
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.int64)
    return stack_arrays(data)  # type: ignore[arg-type]


class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.rate = rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.step += 1
        for name in PARAM_NAMES:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.step)
            v_hat = self.v[name] / (1 - self.beta2**self.step)
            params[name] -= self.rate * m_hat / (np.sqrt(v_hat) + self.eps)


class _SGD:
    def __init__(self, params: Dict[str, np.ndarray], rate: float):
        self.rate = rate

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name in PARAM_NAMES:
            params[name] -= self.rate * grads[name]


def train(model_config: ModelConfig, train_config: TrainConfig, data: Batch) -> Classifier:
    """Fit a classifier on featurized windows, or on an ``(inputs, labels)`` pair of arrays.

    A model config with zero ``in_channels`` / ``length`` is completed from the data. Training stops early once the
    epoch loss has failed to improve by ``min_delta`` for ``patience`` epochs.

    :raises TrainingDiverged: if a batch loss or a weight becomes non-finite.
    :raises ValueError: for an empty training set, bad labels or an input shape the config can't accept.
    """
    train_config.validate()
    x, y = as_arrays(data)
    if len(x) == 0:
        raise ValueError("Cannot train on an empty set of windows")
    if not model_config.in_channels or not model_config.length:
        model_config = model_config.for_input(x.shape[1], x.shape[2])
    model_config.validate()
    x = _check_input(model_config, x)
    if y.min() < 0 or y.max() >= model_config.n_class:
        raise ValueError(f"labels must lie in [0, {model_config.n_class}), got {sorted(set(y.tolist()))}")

    params = init_params(model_config, train_config.seed)
    if train_config.optimizer == "adam":
        optimizer: Union[_Adam, _SGD] = _Adam(params, train_config.learning_rate)
    else:
        optimizer = _SGD(params, train_config.learning_rate)
    shuffle = np.random.default_rng([train_config.seed, 1])

    curve: List[float] = []
    best = np.inf
    stale = 0
    for epoch in range(train_config.epochs):
        order = shuffle.permutation(len(x))
        total = 0.0
        for batch, start in enumerate(range(0, len(x), train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            probs, caches = _forward(params, model_config.pool, x[idx])
            batch_loss = cross_entropy(probs, y[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"loss became {batch_loss}", epoch, batch)
            optimizer.update(params, _backward(params, caches, probs, y[idx]))
            total += batch_loss * len(idx)
        if not all(np.all(np.isfinite(params[name])) for name in PARAM_NAMES):
            raise TrainingDiverged("weights became non-finite", epoch)
        epoch_loss = total / len(x)
        curve.append(epoch_loss)
        l.debug("epoch %d loss %.6f", epoch, epoch_loss)

        if best - epoch_loss > train_config.min_delta:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if train_config.patience and stale >= train_config.patience:
                l.info("Stopping after epoch %d: loss plateaued at %.6f", epoch, epoch_loss)
                break

    l.info("Trained on %d windows for %d epochs, final loss %.6f", len(x), len(curve), curve[-1])
    return Classifier(model_config, params, train_config, curve)


def _activation_pattern(caches: List[Any]) -> Tuple[bytes, ...]:
    _, r1, _, r2, p, _, _, r3, _ = caches
    return (
        np.packbits(r1 > 0).tobytes(),
        np.packbits(r2 > 0).tobytes(),
        p[0].tobytes(),
        np.packbits(r3 > 0).tobytes(),
    )


@dataclass(frozen=True)
class GradientCheck:
    """Outcome of `gradient_check`. ``max_error`` is 0.0 when ``checked`` is 0, which proves nothing."""

    max_error: float
    checked: int
    skipped: int

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_error < tolerance


def gradient_check(
    model_config: ModelConfig,
    seed: int,
    batch_size: int = 4,
    samples: int = 16,
    step: float = 1e-5,
    inputs: Optional[np.ndarray] = None,
    params: Optional[Dict[str, np.ndarray]] = None,
) -> GradientCheck:
    """Compare backpropagated gradients against central finite differences on a random small network and batch.

    Up to ``samples`` entries of each parameter are perturbed by ``+-step``. Entries whose perturbation flips a relu or
    moves a pooling maximum sit on a kink and are left out.

    :return: the maximum over checked entries of ``|g_a - g_f| / max(|g_a|, |g_f|, 1e-8)``, with how many entries
        were checked and how many skipped.
    """
    if not model_config.in_channels or not model_config.length:
        model_config = model_config.for_input(4, 12)
    model_config.validate()
    rng = np.random.default_rng([seed, 2])
    if params is None:
        params = init_params(model_config, seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if inputs is None:
        inputs = rng.standard_normal((batch_size, model_config.in_channels, model_config.length))
    x = _check_input(model_config, inputs)
    y = rng.integers(0, model_config.n_class, size=len(x))

    probs, caches = _forward(params, model_config.pool, x)
    analytic = _backward(params, caches, probs, y)
    pattern = _activation_pattern(caches)

    worst = 0.0
    checked = 0
    skipped = 0
    for name in PARAM_NAMES:
        flat = params[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in picks:
            original = flat[i]
            flat[i] = original + step
            p_plus, c_plus = _forward(params, model_config.pool, x)
            flat[i] = original - step
            p_minus, c_minus = _forward(params, model_config.pool, x)
            flat[i] = original
            if _activation_pattern(c_plus) != pattern or _activation_pattern(c_minus) != pattern:
                skipped += 1
                continue
            numeric = (cross_entropy(p_plus, y) - cross_entropy(p_minus, y)) / (2 * step)
            exact = analytic[name].reshape(-1)[i]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
            checked += 1
    if skipped:
        l.debug("gradient check skipped %d entries sitting on a kink", skipped)
    return GradientCheck(float(worst), checked, skipped)


def predict(classifier: Classifier, window: Union[EventWindow, np.ndarray]) -> Tuple[int, np.ndarray]:
    """The most probable class and the probability vector. Ties go to the highest class index, i.e. toward failure."""
    if isinstance(window, EventWindow):
        if window.stack is None:
            raise ValueError(f"Window of {window.serial} has not been featurized")
        window = window.stack.flatten()
    probs = forward(classifier, window)
    return int(len(probs) - 1 - np.argmax(probs[::-1])), probs


def predict_batch(classifier: Classifier, inputs: np.ndarray) -> np.ndarray:
    """`predict` classes for an ``N x C x T`` batch."""
    probs = forward(classifier, inputs)
    return probs.shape[1] - 1 - np.argmax(probs[:, ::-1], axis=1)


def save(classifier: Classifier, path: Union[str, Path]) -> None:
    """Write a model container: config, training metadata and attachments in the header, weights as float64 blobs."""
    meta = {
        "config": classifier.config.to_dict(),
        "train": None if classifier.train_config is None else classifier.train_config.to_dict(),
        "loss_curve": [float(x) for x in classifier.loss_curve],
        "attachments": classifier.attachments,
    }
    dump_container(path, b"MODL", meta, {name: classifier.params[name] for name in PARAM_NAMES})


def load(path: Union[str, Path]) -> Classifier:
    """Read a model written by `save`.

    :raises ValueError: for a file that isn't a complete model of this format version, or whose weights don't match
        its config.
    """
    meta, arrays = load_container(path, b"MODL")
    config = ModelConfig(**meta["config"])
    expected = init_params(config, 0)
    for name in PARAM_NAMES:
        if name not in arrays:
            raise ValueError(f"{path}: model has no {name} weights")
        if arrays[name].shape != expected[name].shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, config implies {expected[name].shape}")
    return Classifier(
        config=config,
        params={name: arrays[name].astype(np.float64) for name in PARAM_NAMES},
        train_config=None if meta["train"] is None else TrainConfig(**meta["train"]),
        loss_curve=list(meta["loss_curve"]),
        attachments=dict(meta.get("attachments") or {}),
    )
