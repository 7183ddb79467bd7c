"""
A shallow fully-connected softmax classifier over ELM features, trained
with mini-batch gradient descent.
"""
import logging
import pathlib
import time
from collections.abc import Sequence
from typing import TextIO

import numpy as np
import pandas as pd
from pydantic import validator

from .constants import Optimizer
from .elm import FeatureSet, ShapeFeature
from .errors import BasisMismatchError, DataError, TrainingDivergedError
from .schema import ConfigSchema, Schema
from .types import split_list

logger = logging.getLogger(__name__)

BASE_HIDDEN = (512, 256, 128)


class TrainConfig(ConfigSchema):
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: Optimizer = Optimizer.momentum
    momentum: float = 0.9
    lr_decay: float = 0.5
    patience: int = 10
    dropout_rate: float | None = None
    weight_decay: float = 0.0
    standardize: bool = True
    validation_split: float = 0.0
    hidden: list[int] = list(BASE_HIDDEN)
    seed: int = 0

    _lists = validator("hidden", pre=True, allow_reuse=True)(split_list)

    @validator("hidden", each_item=True)
    def positive_width(cls, value):
        if value < 1:
            raise ValueError("hidden layer sizes must be positive")
        return value

    @validator("epochs", "batch_size", "patience")
    def positive_count(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be positive")
        return value

    @validator("learning_rate")
    def positive_rate(cls, value):
        if not value > 0:
            raise ValueError("learning_rate must be positive")
        return value

    @validator("dropout_rate")
    def dropout_in_range(cls, value):
        if value is not None and not 0.0 <= value < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        return value

    @validator("validation_split")
    def split_in_range(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("validation_split must be in [0, 1)")
        return value


class EpochRecord(Schema):
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None = None
    learning_rate: float


class TrainReport(Schema):
    epochs: list[EpochRecord] = []
    test_accuracy: float | None = None
    wall_time: float = 0.0

    @validator("epochs", each_item=True)
    def finite_loss(cls, value):
        if not np.isfinite(value.loss):
            raise ValueError("epoch loss must be finite")
        return value

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "epoch": record.epoch,
                    "loss": record.loss,
                    "train_acc": record.train_acc,
                    "val_acc": record.val_acc,
                }
                for record in self.epochs
            ],
            columns=["epoch", "loss", "train_acc", "val_acc"],
        )

    def to_csv(self, path: pathlib.Path | str):
        self.to_frame().to_csv(path, index=False)


class MlpModel:
    """
    ReLU hidden layers, softmax output. Parameters are plain arrays, so
    copies are cheap and the model pickles for parallel sweeps.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        seed: int = 0,
        dropout_rate: float = 0.0,
        basis_id: str | None = None,
        class_names: list[str] | None = None,
        feature_mean: np.ndarray | None = None,
        feature_scale: np.ndarray | None = None,
    ):
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases
        self.seed = seed
        self.dropout_rate = dropout_rate
        self.basis_id = basis_id
        self.class_names = class_names or []
        self.feature_mean = feature_mean
        self.feature_scale = feature_scale
        if len(weights) != len(self.layer_sizes) - 1 or len(biases) != len(weights):
            raise ValueError("need one weight matrix and bias per layer transition")
        for i, (weight, bias) in enumerate(zip(weights, biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if weight.shape != expected or bias.shape != (expected[1],):
                raise ValueError(f"layer {i} has shape {weight.shape}, expected {expected}")

    @property
    def classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_sizes=self.layer_sizes,
            weights=[weight.copy() for weight in self.weights],
            biases=[bias.copy() for bias in self.biases],
            seed=self.seed,
            dropout_rate=self.dropout_rate,
            basis_id=self.basis_id,
            class_names=list(self.class_names),
            feature_mean=None if self.feature_mean is None else self.feature_mean.copy(),
            feature_scale=None if self.feature_scale is None else self.feature_scale.copy(),
        )

    def standardized(self, inputs: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return inputs
        return (inputs - self.feature_mean) / self.feature_scale

    def forward(self, inputs: np.ndarray, rng: np.random.Generator | None = None):
        """
        Returns (logits, cache). Dropout is applied between hidden layers
        only, and only when an rng is passed (training).
        """
        activations = [inputs]
        masks: list[np.ndarray | None] = []
        hidden_layers = len(self.weights) - 1
        values = inputs
        for i in range(hidden_layers):
            values = np.maximum(values @ self.weights[i] + self.biases[i], 0.0)
            mask = None
            if rng is not None and self.dropout_rate > 0 and i < hidden_layers - 1:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(values.shape) < keep) / keep
                values = values * mask
            masks.append(mask)
            activations.append(values)
        logits = values @ self.weights[-1] + self.biases[-1]
        return logits, (activations, masks)

    def backward(self, dlogits: np.ndarray, cache) -> tuple[list[np.ndarray], list[np.ndarray]]:
        activations, masks = cache
        grad_weights: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        grad_biases: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        delta = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            grad_weights[i] = activations[i].T @ delta
            grad_biases[i] = delta.sum(axis=0)
            if i == 0:
                break
            delta = delta @ self.weights[i].T
            if masks[i - 1] is not None:
                delta = delta * masks[i - 1]
            delta = delta * (activations[i] > 0)
        return grad_weights, grad_biases

    def loss_and_gradients(
        self,
        inputs: np.ndarray,
        labels: np.ndarray,
        rng: np.random.Generator | None = None,
        weight_decay: float = 0.0,
    ) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """
        Mean cross-entropy (plus optional L2 on weights) and its gradients.
        """
        logits, cache = self.forward(inputs, rng=rng)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        grad_weights, grad_biases = self.backward(dlogits, cache)
        if weight_decay:
            loss += 0.5 * weight_decay * sum(float(np.sum(w * w)) for w in self.weights)
            grad_weights = [g + weight_decay * w for g, w in zip(grad_weights, self.weights)]
        return loss, grad_weights, grad_biases

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(self.standardized(np.atleast_2d(inputs)))
        return softmax(logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exponentials = np.exp(shifted)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean cross-entropy and its gradient wrt the logits, (p - onehot) / N.
    """
    count = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_normalizer = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probabilities = shifted - log_normalizer
    loss = -float(log_probabilities[np.arange(count), labels].mean())
    dlogits = np.exp(log_probabilities)
    dlogits[np.arange(count), labels] -= 1.0
    return loss, dlogits / count


def init_mlp(
    k: int,
    hidden: Sequence[int] = BASE_HIDDEN,
    classes: int = 2,
    seed: int = 0,
    dropout_rate: float = 0.0,
    basis_id: str | None = None,
    class_names: list[str] | None = None,
) -> MlpModel:
    """
    He-initialized weights (variance 2 / fan_in), zero biases.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if k < 1 or any(size < 1 for size in hidden):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    sizes = [k, *hidden, classes]
    weights = [
        rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
    ]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    return MlpModel(
        sizes,
        weights,
        biases,
        seed=seed,
        dropout_rate=dropout_rate,
        basis_id=basis_id,
        class_names=class_names,
    )


def _check_basis(model: MlpModel, basis_id: str):
    if model.basis_id is not None and model.basis_id != basis_id:
        raise BasisMismatchError(model.basis_id, basis_id)


def accuracy(model: MlpModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    logits, _ = model.forward(inputs)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train(model: MlpModel, features: FeatureSet, config: TrainConfig | None = None) -> tuple[MlpModel, TrainReport]:
    """
    Trains a copy of the model; every feature is an independent sample.
    """
    config = config or TrainConfig()
    started = time.monotonic()
    _check_basis(model, features.basis_id)
    if len(features) == 0:
        raise DataError("no features to train on")
    inputs = features.matrix()
    labels = features.labels()
    if inputs.shape[1] != model.input_dim:
        raise DataError(f"features have {inputs.shape[1]} values, model expects {model.input_dim}")
    if labels.min() < 0 or labels.max() >= model.classes:
        raise DataError(f"labels must lie in [0, {model.classes})")
    model = model.copy()
    model.basis_id = features.basis_id
    if features.class_names and not model.class_names:
        model.class_names = list(features.class_names)
    if config.dropout_rate is not None:
        model.dropout_rate = config.dropout_rate
    rng = np.random.default_rng(config.seed)
    # Validation holds out whole instances so augmented copies never straddle the split
    validation_inputs = inputs[:0]
    validation_labels = labels[:0]
    if config.validation_split > 0:
        instances = sorted({feature.instance_id for feature in features.features})
        held = set(rng.permutation(instances)[: int(round(config.validation_split * len(instances)))].tolist())
        is_held = np.array([feature.instance_id in held for feature in features.features])
        validation_inputs, validation_labels = inputs[is_held], labels[is_held]
        inputs, labels = inputs[~is_held], labels[~is_held]
    if config.standardize:
        model.feature_mean = inputs.mean(axis=0)
        scale = inputs.std(axis=0)
        model.feature_scale = np.where(scale > 0, scale, 1.0)
    else:
        model.feature_mean = model.feature_scale = None
    inputs = model.standardized(inputs)
    validation_inputs = model.standardized(validation_inputs)

    learning_rate = config.learning_rate
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]
    momentum = config.momentum if config.optimizer == Optimizer.momentum else 0.0
    best_loss = np.inf
    stale = 0
    records = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grad_w, grad_b = model.loss_and_gradients(
                inputs[batch], labels[batch], rng=rng, weight_decay=config.weight_decay
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(batch)
            for i in range(len(model.weights)):
                velocity_w[i] = momentum * velocity_w[i] - learning_rate * grad_w[i]
                velocity_b[i] = momentum * velocity_b[i] - learning_rate * grad_b[i]
                model.weights[i] += velocity_w[i]
                model.biases[i] += velocity_b[i]
        epoch_loss = total / len(labels)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        records.append(
            EpochRecord(
                epoch=epoch,
                loss=epoch_loss,
                train_acc=accuracy(model, inputs, labels),
                val_acc=accuracy(model, validation_inputs, validation_labels) if len(validation_labels) else None,
                learning_rate=learning_rate,
            )
        )
        if epoch_loss < best_loss * (1.0 - 1e-4):
            best_loss = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                learning_rate *= config.lr_decay
                stale = 0
                logger.debug("Epoch %d: loss plateaued, learning rate now %g", epoch, learning_rate)
    _warn_if_not_decreasing(records)
    report = TrainReport(epochs=records, wall_time=time.monotonic() - started)
    logger.info(
        "Trained %s for %d epochs: loss %.4f, train accuracy %.3f",
        "-".join(str(size) for size in model.layer_sizes),
        config.epochs,
        records[-1].loss,
        records[-1].train_acc,
    )
    return model, report


def _warn_if_not_decreasing(records: list[EpochRecord]):
    window = max(1, len(records) // 10)
    if len(records) < 2 * window:
        return
    early = np.mean([record.loss for record in records[:window]])
    late = np.mean([record.loss for record in records[-window:]])
    if late > early:
        logger.warning("Training loss rose from %.4f to %.4f on average", early, late)


def predict(model: MlpModel, feature: ShapeFeature) -> np.ndarray:
    """
    Class probabilities for one feature.
    """
    _check_basis(model, feature.basis_id)
    if feature.k != model.input_dim:
        raise DataError(f"feature has {feature.k} values, model expects {model.input_dim}")
    return model.predict_proba(feature.beta)[0]


def fuse_probabilities(probabilities: Sequence[np.ndarray]) -> int:
    """
    Averages probability vectors; ties go to the lowest class index.
    """
    if len(probabilities) == 0:
        raise DataError("nothing to vote on")
    return int(np.argmax(np.mean(np.vstack(probabilities), axis=0)))


def vote_predict(model: MlpModel, features: Sequence[ShapeFeature]) -> int:
    if len(features) == 0:
        raise DataError("vote_predict needs at least one feature")
    basis_ids = {feature.basis_id for feature in features}
    if len(basis_ids) > 1:
        other = next(basis_id for basis_id in basis_ids if basis_id != features[0].basis_id)
        raise BasisMismatchError(features[0].basis_id, other)
    return fuse_probabilities([predict(model, feature) for feature in features])


def evaluate(model: MlpModel, features: FeatureSet) -> tuple[float, list[tuple[str, int, int]]]:
    """
    Instance-level accuracy: each instance's features vote together.
    Returns (accuracy, [(instance_id, label, predicted), ...]).
    """
    _check_basis(model, features.basis_id)
    predictions = []
    for instance_id, group in features.by_instance().items():
        label = group[0].label
        if label is None:
            raise DataError(f"instance {instance_id} has no label")
        predictions.append((instance_id, label, vote_predict(model, group)))
    if not predictions:
        raise DataError("no features to evaluate")
    correct = sum(1 for _, label, predicted in predictions if label == predicted)
    return correct / len(predictions), predictions


def _write_array(stream: TextIO, name: str, array: np.ndarray):
    array = np.atleast_2d(array)
    stream.write(f"{name} {array.shape[0]} {array.shape[1]}\n")
    for row in array.tolist():
        stream.write(" ".join(repr(value) for value in row) + "\n")


def save_model(model: MlpModel, path: pathlib.Path | str):
    """
    Text checkpoint: a key=value header followed by every array in full
    precision.
    """
    with open(path, "w") as stream:
        stream.write(f"layer_sizes={','.join(str(size) for size in model.layer_sizes)}\n")
        stream.write(f"basis_id={model.basis_id or '-'}\n")
        stream.write(f"classes={','.join(model.class_names)}\n")
        stream.write(f"seed={model.seed}\n")
        stream.write(f"dropout_rate={model.dropout_rate!r}\n")
        stream.write(f"standardized={int(model.feature_mean is not None)}\n")
        for i, (weight, bias) in enumerate(zip(model.weights, model.biases)):
            _write_array(stream, f"weight{i}", weight)
            _write_array(stream, f"bias{i}", bias)
        if model.feature_mean is not None:
            _write_array(stream, "feature_mean", model.feature_mean)
            _write_array(stream, "feature_scale", model.feature_scale)


def load_model(path: pathlib.Path | str) -> MlpModel:
    with open(path) as stream:
        lines = iter(stream.read().splitlines())
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines:
        if "=" in line:
            key, _, value = line.partition("=")
            header[key] = value
            continue
        name, rows, columns = line.split()
        values = [[float(token) for token in next(lines).split()] for _ in range(int(rows))]
        arrays[name] = np.array(values).reshape(int(rows), int(columns))
    try:
        sizes = [int(size) for size in split_list(header["layer_sizes"])]
    except KeyError:
        raise DataError(f"{path}: not a model checkpoint")
    layers = len(sizes) - 1
    standardized = header.get("standardized") == "1"
    return MlpModel(
        sizes,
        [arrays[f"weight{i}"] for i in range(layers)],
        [arrays[f"bias{i}"][0] for i in range(layers)],
        seed=int(header.get("seed", 0)),
        dropout_rate=float(header.get("dropout_rate", 0.0)),
        basis_id=None if header.get("basis_id", "-") == "-" else header["basis_id"],
        class_names=split_list(header.get("classes", "")),
        feature_mean=arrays["feature_mean"][0] if standardized else None,
        feature_scale=arrays["feature_scale"][0] if standardized else None,
    )
