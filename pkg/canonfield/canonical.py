"""
Projection of a distance field into its canonical space.

M = [X phi] is decomposed as M = U S V^T. Each singular vector pair is
sign-fixed so that U^T phi >= 0, giving Vbar; the ELM input is then
Xbar = X Vbar[:d, :], which no longer depends on the pose of the shape.
"""
import logging
import pathlib

import numpy as np
import pandas as pd
from pydantic import root_validator, validator

from .distance_field import DistanceField, SamplingSet
from .errors import DataError, SolverError
from .geometry import PointCloud
from .schema import Schema
from .types import FloatArray

logger = logging.getLogger(__name__)

#: Relative singular value gap below which the frame is flagged ambiguous
GAP_TOLERANCE = 1e-3


class DataMatrix(Schema):
    M: FloatArray

    @validator("M")
    def well_formed(cls, value):
        if value.ndim != 2 or value.shape[0] < value.shape[1] or value.shape[1] < 2:
            raise ValueError(f"M must be tall with at least 2 columns, got {value.shape}")
        if np.any(value[:, -1] < 0):
            raise ValueError("distance column must be nonnegative")
        return value

    @property
    def X(self) -> np.ndarray:
        return self.M[:, :-1]

    @property
    def phi(self) -> np.ndarray:
        return self.M[:, -1]


class CanonicalFrame(Schema):
    Vbar: FloatArray
    singular_values: FloatArray
    sign_vector: FloatArray
    gap_warning: bool = False

    @root_validator(skip_on_failure=True)
    def consistent(cls, values):
        Vbar, sigma, signs = values["Vbar"], values["singular_values"], values["sign_vector"]
        size = Vbar.shape[0]
        if Vbar.shape != (size, size):
            raise ValueError("Vbar must be square")
        if sigma.shape != (size,) or signs.shape != (size,):
            raise ValueError("singular values and signs must match Vbar")
        if np.any(np.diff(sigma) > 0) or np.any(sigma < 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        if not np.all(np.abs(signs) == 1):
            raise ValueError("sign vector entries must be +1 or -1")
        return values

    @property
    def dim(self) -> int:
        """
        Dimension of the point space (one less than the canonical space)
        """
        return self.Vbar.shape[0] - 1


class CanonicalInput(Schema):
    Xbar: FloatArray

    @validator("Xbar")
    def finite(cls, value):
        if value.ndim != 2 or not np.all(np.isfinite(value)):
            raise ValueError("Xbar must be a finite matrix")
        return value

    @property
    def m(self) -> int:
        return self.Xbar.shape[0]


def assemble_data_matrix(sampling: SamplingSet, field: DistanceField) -> DataMatrix:
    if field.sampling_ref != sampling.ref:
        raise DataError("distance field was not computed on this sampling set")
    if field.m != sampling.m:
        raise DataError(f"field has {field.m} rows, sampling set has {sampling.m}")
    return DataMatrix(M=np.column_stack([sampling.X, field.phi]))


def spectral_gap(singular_values: np.ndarray) -> float:
    """
    Smallest gap between adjacent singular values, relative to the largest.
    """
    if singular_values[0] == 0:
        return 0.0
    return float(np.min(-np.diff(singular_values)) / singular_values[0])


def fix_signs(U: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """
    c = sign(U^T phi), with sign(0) taken as +1.
    """
    return np.where(U.T @ phi >= 0, 1.0, -1.0)


def canonical_projection(data: DataMatrix) -> CanonicalFrame:
    M = data.M
    if not np.all(np.isfinite(M)):
        raise SolverError("data matrix has non-finite entries")
    try:
        U, sigma, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as error:
        raise SolverError(f"SVD failed: {error}")
    signs = fix_signs(U, data.phi)
    # Flipping singular vector i on both sides leaves U S V^T unchanged
    Vbar = Vt.T * signs[None, :]
    gap = spectral_gap(sigma)
    gap_warning = gap < GAP_TOLERANCE
    if gap_warning:
        logger.warning(
            "Near-degenerate spectrum %s (relative gap %.2e); canonical frame is ambiguous",
            np.array2string(sigma, precision=6),
            gap,
        )
    return CanonicalFrame(
        Vbar=Vbar,
        singular_values=sigma,
        sign_vector=signs,
        gap_warning=gap_warning,
    )


def canonical_input(sampling: SamplingSet, frame: CanonicalFrame) -> CanonicalInput:
    """
    Xbar = X Vbar[:d, :]. The distance term is dropped so phi is never fed
    to the network that has to predict it.
    """
    if sampling.dim != frame.dim:
        raise DataError(f"frame is for {frame.dim}-D points, sampling set is {sampling.dim}-D")
    return CanonicalInput(Xbar=sampling.X @ frame.Vbar[: frame.dim, :])


def canonicalize_surface(cloud: PointCloud, frame: CanonicalFrame) -> np.ndarray:
    """
    The surface (the zero level set) carried into canonical space:
    [P 0] Vbar.
    """
    points = cloud.points
    if points.shape[1] != frame.dim:
        raise DataError(f"frame is for {frame.dim}-D points, cloud is {points.shape[1]}-D")
    padded = np.column_stack([points, np.zeros(len(points))])
    return padded @ frame.Vbar


def export_csv(canonical_points: np.ndarray, path: pathlib.Path | str):
    columns = [f"c{i + 1}" for i in range(canonical_points.shape[1])]
    pd.DataFrame(canonical_points, columns=columns).to_csv(path, index=False, float_format="%.17g")


def pca_principal_axis(points: np.ndarray) -> np.ndarray:
    """
    Eigenvector of the point covariance with the largest eigenvalue: the
    classic alignment baseline, sign-ambiguous by nature.
    """
    centered = points - points.mean(axis=0)
    _, eigenvectors = np.linalg.eigh(centered.T @ centered)
    return eigenvectors[:, -1]
