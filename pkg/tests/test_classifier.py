import numpy as np
import pytest
from pydantic import ValidationError

from canonfield.classifier import (
    TrainConfig,
    evaluate,
    fuse_probabilities,
    init_mlp,
    load_model,
    predict,
    save_model,
    softmax,
    softmax_cross_entropy,
    train,
    vote_predict,
)
from canonfield.elm import FeatureSet, ShapeFeature
from canonfield.errors import BasisMismatchError, DataError, TrainingDivergedError


def make_features(count: int = 40, k: int = 6, seed: int = 0, augmentations: int = 1) -> FeatureSet:
    """
    Two well separated Gaussian blobs, one per class.
    """
    rng = np.random.default_rng(seed)
    features = []
    for index in range(count):
        label = index % 2
        centre = np.full(k, 2.0 if label else -2.0)
        for subset in range(augmentations):
            features.append(
                ShapeFeature(
                    beta=centre + rng.standard_normal(k) * 0.5,
                    basis_id="basis",
                    label=label,
                    instance_id=f"shape{index}",
                    subset=subset,
                )
            )
    return FeatureSet(basis_id="basis", k=k, features=features, class_names=["a", "b"])


def test_softmax_cross_entropy_gradient():
    """
    Tests the analytic logit gradient against finite differences
    """
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, gradient = softmax_cross_entropy(logits, labels)
    numeric = np.zeros_like(logits)
    for index in np.ndindex(logits.shape):
        step = np.zeros_like(logits)
        step[index] = 1e-6
        numeric[index] = (
            softmax_cross_entropy(logits + step, labels)[0] - softmax_cross_entropy(logits - step, labels)[0]
        ) / 2e-6
    assert np.allclose(gradient, numeric, atol=1e-7)
    assert loss > 0


def test_backprop_gradient():
    """
    Tests every weight and bias gradient against central finite differences
    """
    model = init_mlp(8, (5,), classes=3, seed=1)
    rng = np.random.default_rng(2)
    for bias in model.biases:
        bias += rng.normal(scale=0.1, size=bias.shape)
    inputs = rng.standard_normal((10, 8))
    labels = rng.integers(0, 3, size=10)
    _, grad_weights, grad_biases = model.loss_and_gradients(inputs, labels)
    step = 1e-5
    for parameters, gradients in ((model.weights, grad_weights), (model.biases, grad_biases)):
        for array, gradient in zip(parameters, gradients):
            assert gradient.shape == array.shape
            for index in np.ndindex(array.shape):
                original = array[index]
                array[index] = original + step
                upper = model.loss_and_gradients(inputs, labels)[0]
                array[index] = original - step
                lower = model.loss_and_gradients(inputs, labels)[0]
                array[index] = original
                numeric = (upper - lower) / (2 * step)
                scale = max(abs(numeric), abs(gradient[index]), 1e-5)
                assert abs(numeric - gradient[index]) <= 1e-4 * scale, (index, numeric, gradient[index])


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(3).normal(scale=50.0, size=(20, 6))
    logits[0] = 1e4
    probabilities = softmax(logits)
    assert np.all(probabilities >= 0)
    assert np.allclose(probabilities.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_zeroed_output_layer_is_uniform():
    """
    Tests that a model whose last layer is all zeros predicts 1/classes
    """
    model = init_mlp(6, (8,), classes=4, seed=0, basis_id="basis")
    model.weights[-1][:] = 0.0
    model.biases[-1][:] = 0.0
    feature = ShapeFeature(beta=np.arange(6.0), basis_id="basis")
    assert np.allclose(predict(model, feature), 0.25, rtol=0, atol=1e-12)


def test_no_hidden_layers():
    """
    Tests that softmax regression (no hidden layers) separates the blobs
    """
    features = make_features()
    model = init_mlp(6, (), classes=2, seed=0, basis_id="basis")
    trained, _ = train(model, features, TrainConfig(epochs=100))
    accuracy, _ = evaluate(trained, features)
    assert accuracy == 1.0


def test_memorizes_one_instance_per_class():
    features = make_features(count=2)
    model = init_mlp(6, (16, 8), classes=2, seed=0, basis_id="basis")
    trained, report = train(model, features, TrainConfig(epochs=100))
    assert report.epochs[-1].train_acc == 1.0


@pytest.mark.parametrize("rate", [0.0, 0.5])
def test_dropout_rates_train(rate):
    """
    Tests that training with and without dropout ends with a finite loss
    """
    model = init_mlp(6, (16, 16), classes=2, seed=0, basis_id="basis")
    _, report = train(model, make_features(), TrainConfig(epochs=10, dropout_rate=rate))
    assert np.isfinite(report.epochs[-1].loss)


def test_init_mlp_shapes():
    """
    Tests layer shapes and the He initialization scale
    """
    model = init_mlp(256, classes=10, seed=0)
    assert model.layer_sizes == [256, 512, 256, 128, 10]
    assert model.weights[0].std() == pytest.approx(np.sqrt(2 / 256), rel=0.05)
    assert all(not bias.any() for bias in model.biases)
    with pytest.raises(ValueError):
        init_mlp(8, classes=1)


def test_dropout_only_in_training():
    """
    Tests that inference is deterministic and training applies dropout
    """
    model = init_mlp(6, (16, 16, 8), classes=2, seed=0, dropout_rate=0.5)
    inputs = np.random.default_rng(1).standard_normal((4, 6))
    first, _ = model.forward(inputs)
    second, _ = model.forward(inputs)
    assert np.array_equal(first, second)
    dropped, (_, masks) = model.forward(inputs, rng=np.random.default_rng(0))
    assert masks[0] is not None and masks[1] is not None
    # Never between the last hidden layer and the output
    assert masks[-1] is None
    assert not np.array_equal(dropped, first)


def test_train_separable():
    """
    Tests that training reaches full accuracy on separable blobs, with a
    decreasing loss
    """
    features = make_features()
    model = init_mlp(features.k, (16, 8), classes=2, seed=0)
    trained, report = train(model, features, TrainConfig(epochs=30, batch_size=8, seed=0))
    assert report.epochs[-1].loss < report.epochs[0].loss
    assert report.epochs[-1].train_acc == 1.0
    assert trained.basis_id == "basis"
    assert trained.class_names == ["a", "b"]
    # The input model is untouched
    assert model.basis_id is None
    accuracy, predictions = evaluate(trained, make_features(seed=1))
    assert accuracy == 1.0
    assert len(predictions) == 40


def test_train_deterministic():
    """
    Tests that the same seed gives the same weights
    """
    features = make_features()
    model = init_mlp(features.k, (8,), classes=2, seed=0)
    config = TrainConfig(epochs=5, batch_size=8, seed=3)
    first, _ = train(model, features, config)
    second, _ = train(model, features, config)
    assert all(np.array_equal(a, b) for a, b in zip(first.weights, second.weights))


def test_train_validation_split():
    """
    Tests that holding out instances records validation accuracy
    """
    features = make_features(augmentations=3)
    model = init_mlp(features.k, (8,), classes=2, seed=0)
    _, report = train(model, features, TrainConfig(epochs=3, validation_split=0.25))
    assert all(record.val_acc is not None for record in report.epochs)
    frame = report.to_frame()
    assert list(frame.columns) == ["epoch", "loss", "train_acc", "val_acc"]
    assert len(frame) == 3


def test_train_diverges():
    """
    Tests that an absurd learning rate raises TrainingDivergedError
    """
    features = make_features()
    model = init_mlp(features.k, (8,), classes=2, seed=0)
    with pytest.raises(TrainingDivergedError):
        train(
            model,
            features,
            TrainConfig(epochs=50, learning_rate=1e200, standardize=False, momentum=0.0),
        )


def test_train_rejects_other_basis():
    features = make_features()
    model = init_mlp(features.k, (8,), classes=2, basis_id="elsewhere")
    with pytest.raises(BasisMismatchError):
        train(model, features)


def test_train_config_validation():
    """
    Tests config ranges and comma-separated hidden sizes
    """
    assert TrainConfig(hidden="64,32").hidden == [64, 32]
    with pytest.raises(ValidationError):
        TrainConfig(dropout_rate=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(unknown=1)


def test_fuse_probabilities():
    """
    Tests averaging, and that ties go to the lowest class
    """
    assert fuse_probabilities([np.array([0.6, 0.4]), np.array([0.1, 0.9])]) == 1
    assert fuse_probabilities([np.array([0.5, 0.5])]) == 0
    with pytest.raises(DataError):
        fuse_probabilities([])


def test_vote_predict():
    """
    Tests that a single feature vote equals plain prediction, and mixed
    bases are refused
    """
    features = make_features()
    model = init_mlp(features.k, (8,), classes=2, seed=0, basis_id="basis")
    feature = features.features[0]
    assert vote_predict(model, [feature]) == int(np.argmax(predict(model, feature)))
    other = ShapeFeature(beta=feature.beta, basis_id="other")
    with pytest.raises(BasisMismatchError):
        vote_predict(model, [feature, other])
    with pytest.raises(DataError):
        vote_predict(model, [])


def test_checkpoint(tmp_path):
    """
    Tests that a saved model predicts identically after loading
    """
    features = make_features()
    model, _ = train(init_mlp(features.k, (8, 4), classes=2, seed=0), features, TrainConfig(epochs=2))
    save_model(model, tmp_path / "model.txt")
    loaded = load_model(tmp_path / "model.txt")
    assert loaded.layer_sizes == model.layer_sizes
    assert loaded.basis_id == "basis"
    assert loaded.class_names == ["a", "b"]
    inputs = features.matrix()
    assert np.array_equal(loaded.predict_proba(inputs), model.predict_proba(inputs))
