"""
Per-instance Extreme Learning Machine embedding.

Every instance is fitted by its own ELM sharing one random basis W. The
input is augmented with a bias column equal to sigma(Xbar) and the ridge
constant is Var(Xbar); with a ReLU-type activation a uniform scale s of
(Xbar, phi) scales H by s and both sides of the normal equations by s^2,
so the solved output weights beta do not change.
"""
import hashlib
import logging
import pathlib
import re
from collections.abc import Iterable
from typing import TextIO

import numpy as np
import scipy.linalg
from pydantic import root_validator, validator

from .canonical import CanonicalInput
from .constants import Activation, Split
from .distance_field import DistanceField
from .errors import BasisMismatchError, DataError, DegenerateShapeError, SolverError
from .schema import Schema
from .types import FloatArray

logger = logging.getLogger(__name__)

#: Relative tolerance of the ridge residual check
RESIDUAL_TOLERANCE = 1e-8

#: A feature file header line is a single key=value token
HEADER_LINE = re.compile(r"(\w+)=(\S*)")


class ElmBasis(Schema):
    W: FloatArray
    k: int
    seed: int | None = None
    basis_id: str = ""

    @root_validator(skip_on_failure=True)
    def identified(cls, values):
        W = values["W"]
        if W.ndim != 2 or W.shape[0] != values["k"] or values["k"] < 1:
            raise ValueError(f"W must be (k, d) with k={values['k']}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("W must be finite")
        content_id = hashlib.sha1(np.ascontiguousarray(W).tobytes()).hexdigest()
        if values.get("basis_id") and values["basis_id"] != content_id:
            raise ValueError("basis_id does not match the content of W")
        values["basis_id"] = content_id
        return values

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]


class AugmentedInput(Schema):
    Xtilde: FloatArray
    sigma: float
    variance: float

    @root_validator(skip_on_failure=True)
    def bias_column(cls, values):
        Xtilde = values["Xtilde"]
        if Xtilde.ndim != 2 or Xtilde.shape[1] < 2:
            raise ValueError("Xtilde must be a matrix with a bias column")
        if not np.all(Xtilde[:, -1] == values["sigma"]):
            raise ValueError("the last column of Xtilde must equal sigma")
        return values

    @property
    def m(self) -> int:
        return self.Xtilde.shape[0]

    @property
    def Xbar(self) -> np.ndarray:
        return self.Xtilde[:, :-1]


class ShapeFeature(Schema):
    beta: FloatArray
    basis_id: str
    label: int | None = None
    instance_id: str = ""
    subset: int = 0
    split: Split | None = None

    @validator("beta")
    def finite_vector(cls, value):
        if value.ndim != 1 or not np.all(np.isfinite(value)):
            raise ValueError("beta must be a finite vector")
        return value

    @validator("instance_id")
    def no_whitespace(cls, value):
        if any(character.isspace() for character in value):
            raise ValueError("instance ids cannot contain whitespace")
        return value

    @property
    def k(self) -> int:
        return len(self.beta)


class FeatureSet(Schema):
    """
    Features that all live in the parameter space of one basis.
    """

    basis_id: str
    k: int
    features: list[ShapeFeature]
    class_names: list[str] = []

    @root_validator(skip_on_failure=True)
    def same_basis(cls, values):
        for feature in values["features"]:
            if feature.basis_id != values["basis_id"]:
                raise BasisMismatchError(values["basis_id"], feature.basis_id)
            if feature.k != values["k"]:
                raise ValueError(f"feature {feature.instance_id} has {feature.k} values, not {values['k']}")
        return values

    def __len__(self) -> int:
        return len(self.features)

    def matrix(self) -> np.ndarray:
        return np.vstack([feature.beta for feature in self.features])

    def labels(self) -> np.ndarray:
        if any(feature.label is None for feature in self.features):
            raise DataError("some features have no label")
        return np.array([feature.label for feature in self.features], dtype=np.int64)

    def by_instance(self) -> dict[str, list[ShapeFeature]]:
        grouped: dict[str, list[ShapeFeature]] = {}
        for feature in self.features:
            grouped.setdefault(feature.instance_id, []).append(feature)
        return grouped


def make_shared_basis(k: int, seed: int, input_dim: int = 5) -> ElmBasis:
    """
    Standard normal weights with orthonormalized columns (W^T W = I).
    """
    if k < input_dim:
        raise ValueError(f"need k >= {input_dim} nodes to orthogonalize the basis, got {k}")
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((k, input_dim))
    Q, R = np.linalg.qr(gaussian)
    # Fix the column signs so the factorization is unique
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)[None, :]
    return ElmBasis(W=Q, k=k, seed=seed)


def augment_input(Xbar: CanonicalInput, like: AugmentedInput | None = None) -> AugmentedInput:
    """
    Appends the bias column b = sigma(Xbar) * 1. Var and sigma are taken
    over all elements of Xbar (population form). Pass `like` to reuse the
    statistics of a fitted instance when evaluating at new points.
    """
    values = Xbar.Xbar
    if like is not None:
        variance, sigma = like.variance, like.sigma
    else:
        if values.size < 2:
            raise DegenerateShapeError("need at least two elements to take a variance")
        variance = float(np.var(values))
        sigma = float(np.sqrt(variance))
        if variance == 0.0:
            raise DegenerateShapeError("canonical input has zero variance")
    Xtilde = np.column_stack([values, np.full(len(values), sigma)])
    return AugmentedInput(Xtilde=Xtilde, sigma=sigma, variance=variance)


def activate(values: np.ndarray, activation: Activation = Activation.relu, slope: float = 0.01) -> np.ndarray:
    if activation == Activation.relu:
        return np.maximum(values, 0.0)
    elif activation == Activation.leaky_relu:
        return np.where(values > 0, values, slope * values)
    raise ValueError(f"Unknown activation {activation}")


def hidden_layer(
    aug: AugmentedInput,
    basis: ElmBasis,
    activation: Activation = Activation.relu,
    slope: float = 0.01,
) -> np.ndarray:
    """
    H = f(Xtilde W^T), one row per sampling point.
    """
    if aug.Xtilde.shape[1] != basis.input_dim:
        raise DataError(
            f"input has {aug.Xtilde.shape[1]} columns, basis expects {basis.input_dim}"
        )
    H = activate(aug.Xtilde @ basis.W.T, activation, slope)
    if not np.all(np.isfinite(H)):
        raise SolverError("hidden layer output is not finite")
    return H


def solve_ridge(H: np.ndarray, target: np.ndarray, ridge: float) -> np.ndarray:
    """
    beta = (ridge I + H^T H)^-1 H^T target, through a Cholesky factorization,
    with a residual check on the result.
    """
    system = H.T @ H
    system[np.diag_indices_from(system)] += ridge
    rhs = H.T @ target
    try:
        factor = scipy.linalg.cho_factor(system, lower=False, check_finite=True)
        beta = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as error:
        raise SolverError(f"ridge system could not be solved: {error}")
    residual = np.linalg.norm(system @ beta - rhs)
    scale = np.linalg.norm(rhs)
    if residual > RESIDUAL_TOLERANCE * scale:
        raise SolverError(f"ridge residual {residual:.3e} exceeds tolerance (|rhs| = {scale:.3e})")
    return beta


def embed(
    aug: AugmentedInput,
    phi: DistanceField | np.ndarray,
    basis: ElmBasis,
    activation: Activation = Activation.relu,
    slope: float = 0.01,
    label: int | None = None,
    instance_id: str = "",
    subset: int = 0,
    split: Split | None = None,
) -> ShapeFeature:
    target = phi.phi if isinstance(phi, DistanceField) else np.asarray(phi, dtype=np.float64)
    if len(target) != aug.m:
        raise DataError(f"{len(target)} distances for {aug.m} sampling points")
    H = hidden_layer(aug, basis, activation, slope)
    beta = solve_ridge(H, target, aug.variance)
    return ShapeFeature(
        beta=beta,
        basis_id=basis.basis_id,
        label=label,
        instance_id=instance_id,
        subset=subset,
        split=split,
    )


def reconstruct(
    aug: AugmentedInput,
    basis: ElmBasis,
    beta: ShapeFeature,
    activation: Activation = Activation.relu,
    slope: float = 0.01,
) -> np.ndarray:
    """
    The distance values the fitted ELM predicts at the rows of aug: H beta.
    """
    if beta.basis_id != basis.basis_id:
        raise BasisMismatchError(basis.basis_id, beta.basis_id)
    return hidden_layer(aug, basis, activation, slope) @ beta.beta


def rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def write_features(features: FeatureSet, stream: TextIO):
    """
    Header lines (basis_id, k, count, classes) then one line per feature:
    "<instance_id> <label|-> <beta_1> ... <beta_k>".
    """
    stream.write(f"basis_id={features.basis_id}\n")
    stream.write(f"k={features.k}\n")
    stream.write(f"count={len(features)}\n")
    if features.class_names:
        stream.write(f"classes={','.join(features.class_names)}\n")
    for feature in features.features:
        label = "-" if feature.label is None else str(feature.label)
        values = " ".join(repr(value) for value in feature.beta.tolist())
        stream.write(f"{feature.instance_id} {label} {values}\n")


def read_features(stream: TextIO, split: Split | None = None) -> FeatureSet:
    header: dict[str, str] = {}
    rows: list[ShapeFeature] = []
    seen: dict[str, int] = {}
    for number, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        header_line = None if rows else HEADER_LINE.fullmatch(line)
        if header_line:
            header[header_line[1]] = header_line[2]
            continue
        if "basis_id" not in header or "k" not in header:
            raise DataError(f"line {number}: feature line before basis_id/k header")
        tokens = line.split()
        k = int(header["k"])
        if len(tokens) != k + 2:
            raise DataError(f"line {number}: expected {k} values, got {len(tokens) - 2}")
        instance_id, label = tokens[0], tokens[1]
        try:
            beta = np.array([float(token) for token in tokens[2:]])
            parsed_label = None if label == "-" else int(label)
        except ValueError as error:
            raise DataError(f"line {number}: {error}")
        subset = seen.get(instance_id, 0)
        seen[instance_id] = subset + 1
        rows.append(
            ShapeFeature(
                beta=beta,
                basis_id=header["basis_id"],
                label=parsed_label,
                instance_id=instance_id,
                subset=subset,
                split=split,
            )
        )
    if "basis_id" not in header or "k" not in header:
        raise DataError("feature file has no basis_id/k header")
    if "count" in header and int(header["count"]) != len(rows):
        raise DataError(f"header declares {header['count']} features, found {len(rows)}")
    classes = header.get("classes", "")
    return FeatureSet(
        basis_id=header["basis_id"],
        k=int(header["k"]),
        features=rows,
        class_names=[name for name in classes.split(",") if name],
    )


def save_features(features: FeatureSet, path: pathlib.Path | str):
    with open(path, "w") as stream:
        write_features(features, stream)


def load_features(path: pathlib.Path | str, split: Split | None = None) -> FeatureSet:
    with open(path) as stream:
        return read_features(stream, split=split)


def feature_set(features: Iterable[ShapeFeature], basis: ElmBasis, class_names: list[str] | None = None) -> FeatureSet:
    return FeatureSet(
        basis_id=basis.basis_id,
        k=basis.k,
        features=list(features),
        class_names=class_names or [],
    )
