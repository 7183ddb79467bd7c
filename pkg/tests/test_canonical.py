import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import hadamard
from scipy.spatial.transform import Rotation

from canonfield.canonical import (
    DataMatrix,
    assemble_data_matrix,
    canonical_input,
    canonical_projection,
    canonicalize_surface,
    export_csv,
    fix_signs,
    pca_principal_axis,
    spectral_gap,
)
from canonfield.distance_field import compute_distance_field, generate_sampling_points
from canonfield.errors import DataError
from canonfield.geometry import normalize, sample_surface
from canonfield.shapes import reference_shape


@pytest.fixture(scope="module")
def shape():
    cloud = normalize(sample_surface(reference_shape(), 1024, seed=0))
    sampling = generate_sampling_points(1024, seed=1)
    return cloud, sampling


def test_frame_reconstructs_data(shape):
    """
    Tests that the sign-fixed frame still factors M, is orthogonal, and
    satisfies U^T phi >= 0
    """
    cloud, sampling = shape
    data = assemble_data_matrix(sampling, compute_distance_field(cloud, sampling))
    frame = canonical_projection(data)
    assert frame.Vbar.shape == (4, 4)
    assert np.allclose(frame.Vbar.T @ frame.Vbar, np.eye(4), atol=1e-12)
    U = data.M @ frame.Vbar / frame.singular_values[None, :]
    assert np.allclose(U * frame.singular_values @ frame.Vbar.T, data.M, atol=1e-10)
    assert np.all(U.T @ data.phi >= 0)
    assert not frame.gap_warning


def test_fix_signs_zero_is_positive():
    """
    Tests that a zero projection keeps a positive sign
    """
    U = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    phi = np.array([-2.0, 0.0, 1.0])
    assert fix_signs(U, phi).tolist() == [-1.0, 1.0]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rotation_invariance(seed):
    """
    Tests that Xbar does not change when the shape and the sampling points
    rotate together
    """
    rng = np.random.default_rng(seed)
    cloud = normalize(sample_surface(reference_shape(), 512, seed=2))
    sampling = generate_sampling_points(512, seed=3)
    rotation = Rotation.random(random_state=rng).as_matrix()
    frame = canonical_projection(assemble_data_matrix(sampling, compute_distance_field(cloud, sampling)))
    rotated_sampling = sampling.transformed(rotation)
    rotated_cloud = cloud.with_points(cloud.points @ rotation)
    rotated_frame = canonical_projection(
        assemble_data_matrix(rotated_sampling, compute_distance_field(rotated_cloud, rotated_sampling))
    )
    assert np.allclose(
        canonical_input(sampling, frame).Xbar,
        canonical_input(rotated_sampling, rotated_frame).Xbar,
        atol=1e-9,
    )


def test_scale_keeps_frame(shape):
    """
    Tests that a uniform scale leaves Vbar unchanged
    """
    cloud, sampling = shape
    frame = canonical_projection(assemble_data_matrix(sampling, compute_distance_field(cloud, sampling)))
    scaled_sampling = sampling.transformed(scale=3.0)
    scaled_cloud = cloud.with_points(3.0 * cloud.points)
    scaled = canonical_projection(
        assemble_data_matrix(scaled_sampling, compute_distance_field(scaled_cloud, scaled_sampling))
    )
    assert np.allclose(scaled.Vbar, frame.Vbar, atol=1e-10)
    assert np.allclose(scaled.singular_values, 3.0 * frame.singular_values)


def test_gap_warning(caplog):
    """
    Tests that a symmetric data matrix is flagged as ambiguous
    """
    M = np.array(
        [
            [1.0, 0.0, 0.0, 1.0],
            [-1.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, -1.0, 0.0, 1.0],
            [0.0, 0.0, 0.5, 1.0],
            [0.0, 0.0, -0.5, 1.0],
        ]
    )
    frame = canonical_projection(DataMatrix(M=M))
    assert frame.gap_warning
    assert spectral_gap(frame.singular_values) == pytest.approx(0.0, abs=1e-12)
    assert "ambiguous" in caplog.text


def test_mismatched_field(shape):
    """
    Tests that a field from another sampling set is refused
    """
    cloud, sampling = shape
    other = generate_sampling_points(1024, seed=99)
    with pytest.raises(DataError):
        assemble_data_matrix(other, compute_distance_field(cloud, sampling))


def test_canonicalize_surface_and_export(shape, tmp_path):
    """
    Tests that surface points map to canonical coordinates with the norm
    preserved, and export to CSV
    """
    cloud, sampling = shape
    frame = canonical_projection(assemble_data_matrix(sampling, compute_distance_field(cloud, sampling)))
    canonical = canonicalize_surface(cloud, frame)
    assert canonical.shape == (cloud.n, 4)
    assert np.allclose(np.linalg.norm(canonical, axis=1), np.linalg.norm(cloud.points, axis=1))
    export_csv(canonical, tmp_path / "surface.csv")
    frame = pd.read_csv(tmp_path / "surface.csv")
    assert list(frame.columns) == ["c1", "c2", "c3", "c4"]
    assert np.allclose(frame.to_numpy(), canonical)


def test_pca_principal_axis():
    """
    Tests the PCA baseline on an elongated cloud
    """
    rng = np.random.default_rng(0)
    points = rng.standard_normal((2000, 3)) * np.array([5.0, 1.0, 0.5])
    axis = pca_principal_axis(points)
    assert abs(axis[0]) == pytest.approx(1.0, abs=1e-2)


def test_orthogonal_columns_give_identity():
    """
    Tests that a data matrix with orthogonal columns of decreasing norm is
    already canonical: Vbar is the identity up to the sign of columns with
    no projection on phi, and the phi column keeps its sign
    """
    H = hadamard(8) / np.sqrt(8)
    M = np.column_stack([4.0 * H[:, 1], 3.0 * H[:, 2], 2.0 * H[:, 3], 1.0 * H[:, 0]])
    assert np.all(M[:, -1] > 0)
    frame = canonical_projection(DataMatrix(M=M))
    assert np.allclose(np.abs(frame.Vbar), np.eye(4), atol=1e-12)
    assert frame.Vbar[3, 3] == pytest.approx(1.0)
    assert np.allclose(frame.singular_values, [4.0, 3.0, 2.0, 1.0])


def test_frame_matches_eigendecomposition(shape):
    """
    Tests Vbar against an independent eigendecomposition of M^T M
    """
    cloud, sampling = shape
    data = assemble_data_matrix(sampling, compute_distance_field(cloud, sampling))
    frame = canonical_projection(data)
    gram = data.M.T @ data.M
    eigenvalues, eigenvectors = np.linalg.eigh(gram)
    assert np.allclose(eigenvalues[::-1], frame.singular_values**2, rtol=1e-10)
    # Same axes, each up to sign
    assert np.allclose(np.abs(eigenvectors[:, ::-1].T @ frame.Vbar), np.eye(4), atol=1e-8)
    assert np.allclose(gram @ frame.Vbar, frame.Vbar * frame.singular_values**2, rtol=0, atol=1e-8 * gram.max())
    projected = data.M @ frame.Vbar
    assert np.allclose(projected.T @ projected, np.diag(frame.singular_values**2), atol=1e-8 * gram.max())


def test_sampling_order_keeps_frame(shape):
    """
    Tests that reordering the sampling rows leaves Vbar, the singular
    values and the signs unchanged
    """
    cloud, sampling = shape
    data = assemble_data_matrix(sampling, compute_distance_field(cloud, sampling))
    order = np.random.default_rng(4).permutation(data.M.shape[0])
    frame = canonical_projection(data)
    shuffled = canonical_projection(DataMatrix(M=data.M[order]))
    assert np.allclose(shuffled.Vbar, frame.Vbar, rtol=0, atol=1e-10)
    assert np.allclose(shuffled.singular_values, frame.singular_values, rtol=0, atol=1e-10)
    assert np.array_equal(shuffled.sign_vector, frame.sign_vector)
