import io

import numpy as np
import pytest
from pydantic import ValidationError

from canonfield.canonical import CanonicalInput, assemble_data_matrix, canonical_input, canonical_projection
from canonfield.constants import Activation, Split
from canonfield.distance_field import compute_distance_field, generate_sampling_points
from canonfield.elm import (
    ElmBasis,
    FeatureSet,
    ShapeFeature,
    activate,
    augment_input,
    embed,
    feature_set,
    hidden_layer,
    make_shared_basis,
    read_features,
    reconstruct,
    rms,
    solve_ridge,
    write_features,
)
from canonfield.errors import BasisMismatchError, DataError, DegenerateShapeError
from canonfield.geometry import normalize, sample_surface
from canonfield.shapes import reference_shape


@pytest.fixture(scope="module")
def fitted():
    cloud = normalize(sample_surface(reference_shape(), 1024, seed=0))
    sampling = generate_sampling_points(1024, seed=1)
    field = compute_distance_field(cloud, sampling)
    frame = canonical_projection(assemble_data_matrix(sampling, field))
    aug = augment_input(canonical_input(sampling, frame))
    return aug, field


def test_shared_basis():
    """
    Tests that the basis is orthonormal, seeded, and identified by content
    """
    basis = make_shared_basis(32, seed=7)
    assert basis.W.shape == (32, 5)
    assert np.allclose(basis.W.T @ basis.W, np.eye(5), atol=1e-12)
    again = make_shared_basis(32, seed=7)
    assert again.basis_id == basis.basis_id
    assert make_shared_basis(32, seed=8).basis_id != basis.basis_id
    with pytest.raises(ValueError):
        make_shared_basis(4, seed=0)


def test_basis_id_checked():
    """
    Tests that a basis cannot claim someone else's id
    """
    with pytest.raises(ValidationError):
        ElmBasis(W=np.ones((3, 5)), k=3, basis_id="not-the-hash")
    with pytest.raises(ValidationError):
        ElmBasis(W=np.ones((3, 5)), k=4)


def test_augment_input():
    """
    Tests that the bias column equals sigma of all Xbar elements
    """
    Xbar = CanonicalInput(Xbar=np.array([[1.0, -1.0], [2.0, 0.0], [0.0, -2.0]]))
    aug = augment_input(Xbar)
    assert aug.variance == pytest.approx(np.var(Xbar.Xbar))
    assert np.all(aug.Xtilde[:, -1] == aug.sigma)
    assert aug.sigma == pytest.approx(np.sqrt(aug.variance))
    with pytest.raises(DegenerateShapeError):
        augment_input(CanonicalInput(Xbar=np.zeros((4, 2))))
    reused = augment_input(CanonicalInput(Xbar=np.zeros((2, 2))), like=aug)
    assert reused.sigma == aug.sigma


def test_activate():
    values = np.array([-2.0, 0.0, 3.0])
    assert activate(values).tolist() == [0.0, 0.0, 3.0]
    assert activate(values, Activation.leaky_relu, 0.1).tolist() == [-0.2, 0.0, 3.0]


def test_solve_ridge_normal_equations():
    """
    Tests that beta satisfies the ridge normal equations
    """
    rng = np.random.default_rng(0)
    H = rng.standard_normal((60, 10))
    target = rng.standard_normal(60)
    beta = solve_ridge(H, target, 0.5)
    assert np.allclose((H.T @ H + 0.5 * np.eye(10)) @ beta, H.T @ target, atol=1e-10)


def test_k_equals_one():
    """
    Tests the smallest basis: beta = h.phi / (Var + h.h)
    """
    basis = ElmBasis(W=np.array([[0.3, -0.2, 0.5, 0.1, 0.7]]), k=1)
    Xbar = CanonicalInput(Xbar=np.random.default_rng(1).uniform(-1, 1, size=(50, 4)))
    aug = augment_input(Xbar)
    phi = np.random.default_rng(2).uniform(0, 1, size=50)
    feature = embed(aug, phi, basis)
    h = hidden_layer(aug, basis)[:, 0]
    assert feature.beta[0] == pytest.approx(h @ phi / (aug.variance + h @ h), rel=1e-12)


def test_embed_deterministic(fitted):
    """
    Tests that repeated embedding gives identical output
    """
    aug, field = fitted
    basis = make_shared_basis(64, seed=1)
    first = embed(aug, field, basis)
    second = embed(aug, field, basis)
    assert np.array_equal(first.beta, second.beta)
    assert first.basis_id == basis.basis_id
    assert first.k == 64


def test_scale_invariance(fitted):
    """
    Tests that scaling Xtilde and phi together leaves beta unchanged
    """
    aug, field = fitted
    basis = make_shared_basis(64, seed=1)
    scaled = augment_input(CanonicalInput(Xbar=2.5 * aug.Xbar))
    original = embed(aug, field, basis)
    result = embed(scaled, 2.5 * field.phi, basis)
    assert np.allclose(result.beta, original.beta, rtol=1e-8, atol=1e-10)


def test_reconstruction_improves_with_nodes(fitted):
    """
    Tests that more hidden nodes fit the field more closely
    """
    aug, field = fitted
    errors = []
    for k in (16, 64, 256):
        basis = make_shared_basis(k, seed=1)
        feature = embed(aug, field, basis)
        errors.append(rms(reconstruct(aug, basis, feature) - field.phi))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.1


def test_reconstruct_other_basis(fitted):
    """
    Tests that a feature cannot be decoded with a different basis
    """
    aug, field = fitted
    feature = embed(aug, field, make_shared_basis(16, seed=1))
    with pytest.raises(BasisMismatchError):
        reconstruct(aug, make_shared_basis(16, seed=2), feature)


def test_embed_length_mismatch(fitted):
    aug, _ = fitted
    with pytest.raises(DataError):
        embed(aug, np.ones(aug.m - 1), make_shared_basis(16, seed=1))


def test_feature_set_rejects_mixed_bases():
    """
    Tests that features from two bases cannot share a set
    """
    first = ShapeFeature(beta=[1.0, 2.0], basis_id="a")
    second = ShapeFeature(beta=[1.0, 2.0], basis_id="b")
    with pytest.raises(BasisMismatchError):
        FeatureSet(basis_id="a", k=2, features=[first, second])


def test_instance_id_whitespace():
    with pytest.raises(ValidationError):
        ShapeFeature(beta=[1.0], basis_id="a", instance_id="two words")


def test_feature_file_format():
    """
    Tests the header and line layout, and that repeated ids become subsets
    """
    basis = make_shared_basis(5, seed=0)
    features = feature_set(
        [
            ShapeFeature(beta=[0.1, 0.2, 0.3, 0.4, 0.5], basis_id=basis.basis_id, label=1, instance_id="chair/train/a"),
            ShapeFeature(beta=[1e-300, -2.5, 3.0, 0.0, 1 / 3], basis_id=basis.basis_id, label=1, instance_id="chair/train/a", subset=1),
            ShapeFeature(beta=[0.0] * 5, basis_id=basis.basis_id, instance_id="unlabelled"),
        ],
        basis,
        class_names=["bed", "chair"],
    )
    stream = io.StringIO()
    write_features(features, stream)
    lines = stream.getvalue().splitlines()
    assert lines[:4] == [f"basis_id={basis.basis_id}", "k=5", "count=3", "classes=bed,chair"]
    assert lines[6].startswith("unlabelled - ")
    stream.seek(0)
    loaded = read_features(stream, split=Split.train)
    assert loaded.basis_id == basis.basis_id
    assert loaded.class_names == ["bed", "chair"]
    assert [feature.subset for feature in loaded.features] == [0, 1, 0]
    assert loaded.features[2].label is None
    assert loaded.features[0].split == Split.train
    assert np.array_equal(loaded.matrix(), features.matrix())


@pytest.mark.parametrize(
    "text",
    [
        "0 1 2 3\n",
        "basis_id=x\nk=2\ncount=1\nid 0 1.0\n",
        "basis_id=x\nk=2\ncount=2\nid 0 1.0 2.0\n",
        "basis_id=x\nk=2\nid zero 1.0 2.0\n",
    ],
)
def test_feature_file_errors(text):
    """
    Tests that malformed feature files raise DataError
    """
    with pytest.raises(DataError):
        read_features(io.StringIO(text))


def test_feature_file_unknown_header():
    """
    Tests that unknown header keys are tolerated
    """
    loaded = read_features(io.StringIO("basis_id=x\nk=1\ncreated_by=someone\nid 0 1.5\n"))
    assert loaded.features[0].beta.tolist() == [1.5]


def test_feature_file_ids_with_equals():
    """
    Tests that an instance id containing '=' is read as a feature, not a header
    """
    basis = make_shared_basis(5, seed=0)
    features = feature_set(
        [ShapeFeature(beta=[0.5, 0.25, 0.0, -1.0, 2.0], basis_id=basis.basis_id, label=0, instance_id="vase/test/a=b")],
        basis,
        class_names=["vase"],
    )
    stream = io.StringIO()
    write_features(features, stream)
    stream.seek(0)
    loaded = read_features(stream)
    assert len(loaded) == 1
    assert loaded.features[0].instance_id == "vase/test/a=b"
    assert np.array_equal(loaded.matrix(), features.matrix())


def test_zero_field_gives_zero_feature(fitted):
    """
    Tests that phi = 0 embeds to beta = 0 exactly, and beta = 0 decodes to 0
    """
    aug, _ = fitted
    basis = make_shared_basis(32, seed=1)
    feature = embed(aug, np.zeros(aug.m), basis)
    assert np.array_equal(feature.beta, np.zeros(32))
    assert np.array_equal(reconstruct(aug, basis, feature), np.zeros(aug.m))


def test_leaky_relu_scale_invariance(fitted):
    """
    Tests that the leaky ReLU, being positively homogeneous, keeps beta
    unchanged under a common scale
    """
    aug, field = fitted
    basis = make_shared_basis(64, seed=1)
    scaled = augment_input(CanonicalInput(Xbar=0.4 * aug.Xbar))
    original = embed(aug, field, basis, Activation.leaky_relu, 0.05)
    result = embed(scaled, 0.4 * field.phi, basis, Activation.leaky_relu, 0.05)
    assert np.allclose(result.beta, original.beta, rtol=1e-8, atol=1e-10)


def test_reconstruction_beats_constant(fitted):
    """
    Tests that the fitted field is closer to phi than the best constant
    """
    aug, field = fitted
    basis = make_shared_basis(16, seed=3)
    feature = embed(aug, field, basis)
    assert rms(reconstruct(aug, basis, feature) - field.phi) <= rms(field.phi - field.phi.mean())


def test_variance_matches_two_pass():
    """
    Tests the bias statistics against a two-pass variance, on values far
    from zero where a one-pass sum of squares loses precision
    """
    values = 1e6 + np.random.default_rng(5).uniform(-1, 1, size=(200, 3))
    aug = augment_input(CanonicalInput(Xbar=values))
    mean = sum(values.ravel().tolist()) / values.size
    two_pass = sum((value - mean) ** 2 for value in values.ravel().tolist()) / values.size
    assert aug.variance == pytest.approx(two_pass, rel=1e-9)
    assert aug.sigma == pytest.approx(np.sqrt(two_pass), rel=1e-9)
