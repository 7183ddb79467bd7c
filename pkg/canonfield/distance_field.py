"""
Sampling points inside the unit ball and the unsigned distance field
phi(x) = min_p |x - p| evaluated at them through an exact k-d tree.
"""
import hashlib
import logging

import numpy as np
from pydantic import root_validator, validator
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import PointCloud
from .schema import Schema
from .types import FloatArray

logger = logging.getLogger(__name__)


def fingerprint(array: np.ndarray, *extra) -> str:
    """
    Content hash of an array (plus any extra identifying values).
    """
    digest = hashlib.sha1(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    digest.update(repr(array.shape).encode())
    for item in extra:
        digest.update(repr(item).encode())
    return digest.hexdigest()


def cloud_fingerprint(cloud: PointCloud) -> str:
    """
    Identifies a cloud by its point set, not its point order.
    """
    order = np.lexsort(cloud.points.T[::-1])
    return fingerprint(cloud.points[order])


class SamplingSet(Schema):
    X: FloatArray
    seed: int | None
    m: int

    @root_validator(skip_on_failure=True)
    def shape_matches(cls, values):
        X = values["X"]
        if X.ndim != 2 or X.shape[0] != values["m"]:
            raise ValueError(f"X must have m={values['m']} rows, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("sampling points must be finite")
        return values

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def ref(self) -> str:
        return fingerprint(self.X, self.seed)

    @classmethod
    def from_points(cls, X, seed: int | None = None) -> "SamplingSet":
        X = np.asarray(X, dtype=np.float64)
        return cls(X=X, seed=seed, m=len(X))

    def transformed(self, matrix: np.ndarray | None = None, scale: float = 1.0) -> "SamplingSet":
        """
        Co-transform the sampling points (rotation and/or uniform scale).
        """
        X = self.X if matrix is None else self.X @ matrix
        return SamplingSet(X=scale * X, seed=self.seed, m=self.m)

    def permuted(self, order: np.ndarray) -> "SamplingSet":
        return SamplingSet(X=self.X[order], seed=self.seed, m=self.m)


class DistanceField(Schema):
    phi: FloatArray
    sampling_ref: str
    cloud_ref: str

    @validator("phi")
    def nonnegative(cls, value):
        if value.ndim != 1:
            raise ValueError("phi must be a vector")
        if not np.all(np.isfinite(value)) or np.any(value < 0):
            raise ValueError("phi must be finite and nonnegative")
        return value

    @property
    def m(self) -> int:
        return len(self.phi)


def generate_sampling_points(m: int, seed: int, dim: int = 3) -> SamplingSet:
    """
    m points uniform in the closed unit ball: Gaussian directions with
    radii u^(1/dim).
    """
    if m < 8:
        raise ValueError(f"need at least 8 sampling points, got {m}")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((m, dim))
    norms = np.linalg.norm(directions, axis=1)
    # Zero-norm draws have probability zero but would divide by zero
    norms[norms == 0.0] = 1.0
    radii = rng.random(m) ** (1.0 / dim)
    X = directions * (radii / norms)[:, None]
    return SamplingSet(X=X, seed=seed, m=m)


class NNIndex:
    """
    An exact nearest-neighbour index over a point cloud. Immutable after
    construction; safe to share between threads.
    """

    def __init__(self, cloud: PointCloud):
        if cloud.n < 1:
            raise DataError("cannot index an empty cloud")
        self.cloud = cloud
        self.tree = cKDTree(cloud.points)

    def query(self, queries: np.ndarray, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """
        Returns (distances, indices) of each query's nearest cloud point.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.tree.m:
            raise DataError(
                f"queries are {queries.shape[1]}-dimensional, cloud is {self.tree.m}-dimensional"
            )
        distances, indices = self.tree.query(queries, k=1, eps=0.0, workers=workers)
        return np.asarray(distances, dtype=np.float64), np.asarray(indices)

    def distances(self, queries: np.ndarray, workers: int = 1) -> np.ndarray:
        return self.query(queries, workers=workers)[0]


def build_nn_index(cloud: PointCloud) -> NNIndex:
    return NNIndex(cloud)


def compute_distance_field(
    cloud: PointCloud,
    sampling: SamplingSet,
    index: NNIndex | None = None,
    workers: int = 1,
) -> DistanceField:
    """
    Evaluates phi at every sampling point. The cloud should already be
    normalized so the sampling ball encloses it.
    """
    if cloud.n < 1:
        raise DataError("cannot compute a distance field for an empty cloud")
    if not np.all(np.isfinite(cloud.points)):
        raise DataError("cloud has non-finite coordinates")
    if cloud.points.shape[1] != sampling.dim:
        raise DataError(
            f"cloud is {cloud.points.shape[1]}-dimensional, sampling set is {sampling.dim}-dimensional"
        )
    if index is None:
        index = build_nn_index(cloud)
    phi = index.distances(sampling.X, workers=workers)
    return DistanceField(
        phi=phi,
        sampling_ref=sampling.ref,
        cloud_ref=cloud_fingerprint(cloud),
    )
