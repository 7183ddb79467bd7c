"""
Experiment runners: invariance suite, axis stability against PCA, the 2D
reconstruction check and the node/sampling/depth sweep.
"""
import itertools
import logging
import pathlib
import time

import numpy as np
from joblib import Parallel, delayed
from pydantic import root_validator, validator

from .canonical import (
    CanonicalInput,
    assemble_data_matrix,
    canonical_input,
    canonical_projection,
    pca_principal_axis,
)
from .classifier import TrainConfig, evaluate, init_mlp, train
from .constants import Activation, Split
from .distance_field import SamplingSet, compute_distance_field, generate_sampling_points
from .elm import ElmBasis, FeatureSet, augment_input, embed, make_shared_basis, reconstruct, rms
from .errors import DataError
from .geometry import Mesh, PointCloud, load_shape, normalize, sample_surface, subsample
from .pipeline import (
    ELM,
    FIELD_SVD,
    MLP,
    DatasetManifest,
    ExperimentReport,
    ExtractionConfig,
    add_timings,
    derived_seed,
    extract_features,
    timed,
)
from .schema import ConfigSchema
from .shapes import (
    balanced_reference_shape,
    random_rotation,
    reference_contour,
    reference_shape,
    sample_polyline,
)
from .types import split_list

logger = logging.getLogger(__name__)


def relative_deviation(value: np.ndarray, reference: np.ndarray) -> float:
    norm = np.linalg.norm(reference)
    difference = np.linalg.norm(value - reference)
    return float(difference / norm) if norm > 0 else float(difference)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def pairwise_cosines(vectors: list[np.ndarray], absolute: bool = False) -> np.ndarray:
    values = np.array(
        [cosine_similarity(a, b) for a, b in itertools.combinations(vectors, 2)]
    )
    return np.abs(values) if absolute else values


def shape_beta(
    cloud: PointCloud,
    sampling: SamplingSet,
    basis: ElmBasis,
    activation: Activation = Activation.relu,
    slope: float = 0.01,
    timings: dict[str, float] | None = None,
) -> tuple[np.ndarray, bool]:
    """
    (beta, gap_warning) for a cloud that is used as given.
    """
    with timed(timings, FIELD_SVD):
        field = compute_distance_field(cloud, sampling)
        frame = canonical_projection(assemble_data_matrix(sampling, field))
    with timed(timings, ELM):
        aug = augment_input(canonical_input(sampling, frame))
        beta = embed(aug, field, basis, activation, slope).beta
    return beta, frame.gap_warning


class InvarianceConfig(ConfigSchema):
    n_surface: int = 2048
    m_sampling: int = 2048
    k_nodes: int = 64
    rotations: int = 100
    scales: list[float] = [0.1, 0.5, 2.0, 10.0]
    permutations: int = 10
    translations: int = 10
    activation: Activation = Activation.relu
    leaky_slope: float = 0.01
    seed: int = 0
    rotation_tolerance: float = 1e-6
    scale_tolerance: float = 1e-9
    permutation_tolerance: float = 1e-10
    origin_tolerance: float = 1e-6

    _lists = validator("scales", pre=True, allow_reuse=True)(split_list)


def run_invariance_suite(config: InvarianceConfig | None = None, mesh: Mesh | None = None) -> ExperimentReport:
    """
    Measures how far beta moves under rotation (with co-rotated sampling),
    scale, surface and sampling permutation, and translation of the origin.
    """
    config = config or InvarianceConfig()
    started = time.monotonic()
    timings = {FIELD_SVD: 0.0, ELM: 0.0}
    rng = np.random.default_rng(config.seed)
    mesh = mesh or reference_shape()
    raw = sample_surface(mesh, config.n_surface, derived_seed(config.seed, "surface"))
    cloud = normalize(raw)
    sampling = generate_sampling_points(config.m_sampling, derived_seed(config.seed, "sampling"))
    basis = make_shared_basis(config.k_nodes, derived_seed(config.seed, "basis"))

    def beta_of(cloud: PointCloud, sampling: SamplingSet) -> tuple[np.ndarray, bool]:
        return shape_beta(cloud, sampling, basis, config.activation, config.leaky_slope, timings)

    reference, reference_gap = beta_of(cloud, sampling)
    if reference_gap:
        logger.warning("Reference shape has a near-degenerate spectrum; rotation results are void")
    rows = []

    def record(prop: str, trial: int, parameter: str, beta: np.ndarray, gap: bool, tolerance: float):
        deviation = relative_deviation(beta, reference)
        rows.append(
            {
                "property": prop,
                "trial": trial,
                "parameter": parameter,
                "deviation": deviation,
                "tolerance": tolerance,
                "gap_warning": gap,
                "passed": deviation <= tolerance,
            }
        )

    for trial in range(config.rotations):
        rotation = random_rotation(rng)
        beta, gap = beta_of(cloud.with_points(cloud.points @ rotation), sampling.transformed(rotation))
        record("rotation", trial, "random", beta, gap, config.rotation_tolerance)
    for trial, scale in enumerate(config.scales):
        beta, gap = beta_of(cloud.with_points(scale * cloud.points), sampling.transformed(scale=scale))
        record("scale", trial, repr(scale), beta, gap, config.scale_tolerance)
    for trial in range(config.permutations):
        order = rng.permutation(cloud.n)
        beta, gap = beta_of(cloud.with_points(cloud.points[order]), sampling)
        record("surface_permutation", trial, "shuffle", beta, gap, 0.0)
        order = rng.permutation(sampling.m)
        beta, gap = beta_of(cloud, sampling.permuted(order))
        record("sampling_permutation", trial, "shuffle", beta, gap, config.permutation_tolerance)
    for trial in range(config.translations):
        offset = rng.uniform(-10.0, 10.0, size=3)
        scale = float(rng.uniform(0.5, 2.0))
        moved = raw.with_points(scale * raw.points + offset)
        beta, gap = beta_of(normalize(moved), sampling)
        record("origin", trial, f"scale={scale!r} offset={offset.tolist()!r}", beta, gap, config.origin_tolerance)

    summary = []
    properties = sorted({row["property"] for row in rows})
    for prop in properties:
        deviations = [row["deviation"] for row in rows if row["property"] == prop]
        failed = sum(1 for row in rows if row["property"] == prop and not row["passed"])
        summary.append(
            f"{prop}: {len(deviations)} trials, max deviation {max(deviations):.3e}, {failed} failed"
        )
    timings["total"] = time.monotonic() - started
    return ExperimentReport(
        name="invariance",
        config=config.recorded(),
        seeds={"seed": config.seed},
        tables={"trials": rows},
        summary=summary,
        timings=timings,
        passed=all(row["passed"] for row in rows),
    )


class AxisStabilityConfig(ConfigSchema):
    shape: pathlib.Path | None = None
    pool_size: int = 30000
    surface_counts: list[int] = [10000, 5000, 1000]
    sampling_counts: list[int] = [50000, 10000, 5000]
    draws: int = 10
    # Draw a fresh sampling set per subset instead of one per sampling count
    redraw_sampling: bool = False
    sparse_count: int = 1000
    dense_count: int = 10000
    min_canonical_sparse: float = 0.99
    min_canonical_dense: float = 0.999
    max_pca_sparse: float = 0.95
    seed: int = 0

    _lists = validator("surface_counts", "sampling_counts", pre=True, allow_reuse=True)(split_list)


def _axis_pool(config: AxisStabilityConfig) -> PointCloud:
    if config.shape is None:
        shape = balanced_reference_shape()
    else:
        shape = load_shape(config.shape)
    if isinstance(shape, Mesh):
        shape = sample_surface(shape, config.pool_size, derived_seed(config.seed, "pool"))
    return normalize(shape)


def _axis_checks(rows: list[dict], config: AxisStabilityConfig) -> list[tuple[str, bool]]:
    """
    (description, ok) for every threshold whose condition was run.
    """
    checks = []
    for row in rows:
        if row["method"] == "canonical" and row["surface_points"] == config.sparse_count:
            label = f"canonical {row['sampling_points']} smp. @ {config.sparse_count} pts >= {config.min_canonical_sparse}"
            checks.append((label, row["mean"] >= config.min_canonical_sparse))
        elif row["method"] == "canonical" and row["surface_points"] == config.dense_count:
            label = f"canonical {row['sampling_points']} smp. @ {config.dense_count} pts >= {config.min_canonical_dense}"
            checks.append((label, row["mean"] >= config.min_canonical_dense))
        elif row["method"] == "pca" and row["surface_points"] == config.sparse_count:
            label = f"pca @ {config.sparse_count} pts <= {config.max_pca_sparse}"
            checks.append((label, row["mean"] <= config.max_pca_sparse))
    return checks


def run_axis_stability(config: AxisStabilityConfig | None = None) -> ExperimentReport:
    """
    Compares how stable the leading axis is across random surface subsets:
    PCA on the points against the first column of the canonical frame.

    Every subset of one condition is measured against the same sampling
    set unless redraw_sampling is set, so only the surface varies.
    """
    config = config or AxisStabilityConfig()
    started = time.monotonic()
    timings = {"pca": 0.0, FIELD_SVD: 0.0}
    pool = _axis_pool(config)
    rows = []
    summary = []
    for count in config.surface_counts:
        if count > pool.n:
            logger.warning("Shape has %d points; skipping the %d-point condition", pool.n, count)
            summary.append(f"skipped {count} surface points (shape has {pool.n})")
            continue
        rng = np.random.default_rng(derived_seed(config.seed, "subsets", count))
        subsets = [subsample(pool, count, rng) for _ in range(config.draws)]
        with timed(timings, "pca"):
            pca = pairwise_cosines([pca_principal_axis(part.points) for part in subsets], absolute=True)
        rows.append(
            {
                "method": "pca",
                "surface_points": count,
                "sampling_points": None,
                "mean": float(pca.mean()),
                "std": float(pca.std()),
                "gap_warnings": 0,
            }
        )
        for sampling_count in config.sampling_counts:
            shared = generate_sampling_points(sampling_count, derived_seed(config.seed, "sampling", sampling_count))
            axes = []
            gap_warnings = 0
            for draw, part in enumerate(subsets):
                sampling = shared
                if config.redraw_sampling:
                    sampling = generate_sampling_points(
                        sampling_count, derived_seed(config.seed, "sampling", sampling_count, draw)
                    )
                with timed(timings, FIELD_SVD):
                    field = compute_distance_field(part, sampling)
                    frame = canonical_projection(assemble_data_matrix(sampling, field))
                axes.append(frame.Vbar[:, 0])
                gap_warnings += frame.gap_warning
            ours = pairwise_cosines(axes)
            rows.append(
                {
                    "method": "canonical",
                    "surface_points": count,
                    "sampling_points": sampling_count,
                    "mean": float(ours.mean()),
                    "std": float(ours.std()),
                    "gap_warnings": gap_warnings,
                }
            )
    for row in rows:
        sampling = "" if row["sampling_points"] is None else f" {row['sampling_points']} smp."
        summary.append(
            f"{row['method']}{sampling} @ {row['surface_points']} pts: mean {row['mean']:.4f}, std {row['std']:.2e}"
            + (f", {row['gap_warnings']} near-degenerate frames" if row["gap_warnings"] else "")
        )
    checks = _axis_checks(rows, config)
    summary.extend(f"{label}: {'ok' if ok else 'FAILED'}" for label, ok in checks)
    timings["total"] = time.monotonic() - started
    return ExperimentReport(
        name="axis-stability",
        config=config.recorded(),
        seeds={"seed": config.seed},
        tables={"cosines": rows},
        summary=summary,
        timings=timings,
        passed=all(ok for _, ok in checks) if checks else None,
    )


class Reconstruct2dConfig(ConfigSchema):
    grid_size: int = 48
    contour_points: int = 2000
    nodes: list[int] = [300, 1000]
    include_square: bool = True
    basis_seed: int = 1
    seed: int = 0

    _lists = validator("nodes", pre=True, allow_reuse=True)(split_list)


def reconstruct2d(config: Reconstruct2dConfig | None = None) -> ExperimentReport:
    """
    The 2D analogue of the pipeline on the bundled contour: a grid distance
    field, a 3x3 canonical frame, and ELM reconstructions at several node
    counts.
    """
    config = config or Reconstruct2dConfig()
    started = time.monotonic()
    contour = normalize(PointCloud.from_points(sample_polyline(reference_contour(), config.contour_points)))
    axis = np.linspace(-1.0, 1.0, config.grid_size)
    grid_x, grid_y = np.meshgrid(axis, axis, indexing="xy")
    sampling = SamplingSet.from_points(np.column_stack([grid_x.ravel(), grid_y.ravel()]), seed=config.seed)
    timings: dict[str, float] = {}
    with timed(timings, FIELD_SVD):
        field = compute_distance_field(contour, sampling)
        frame = canonical_projection(assemble_data_matrix(sampling, field))
    elm_started = time.monotonic()
    aug = augment_input(canonical_input(sampling, frame))
    contour_aug = augment_input(
        CanonicalInput(Xbar=contour.points @ frame.Vbar[: frame.dim, :]),
        like=aug,
    )
    node_counts = list(config.nodes)
    if config.include_square and sampling.m not in node_counts:
        node_counts.append(sampling.m)
    grid_rows = [
        {"x": x, "y": y, "phi": phi}
        for x, y, phi in zip(sampling.X[:, 0].tolist(), sampling.X[:, 1].tolist(), field.phi.tolist())
    ]
    errors = []
    for k in node_counts:
        basis = make_shared_basis(k, config.basis_seed, input_dim=aug.Xtilde.shape[1])
        feature = embed(aug, field, basis)
        predicted = reconstruct(aug, basis, feature)
        on_contour = np.abs(reconstruct(contour_aug, basis, feature))
        error = rms(predicted - field.phi)
        errors.append(
            {
                "k": k,
                "rms": error,
                "contour_mean_abs": float(on_contour.mean()),
                "contour_median_abs": float(np.median(on_contour)),
                "contour_max_abs": float(on_contour.max()),
                # A typical contour point reconstructs near zero; the kinks may not
                "level_set_ok": bool(np.median(on_contour) <= 3 * error),
            }
        )
        for row, value in zip(grid_rows, predicted.tolist()):
            row[f"recon_k{k}"] = value
    timings[ELM] = time.monotonic() - elm_started
    ordered = [row["rms"] for row in errors]
    monotone = all(later < earlier for earlier, later in zip(ordered, ordered[1:]))
    summary = [f"k={row['k']}: rms {row['rms']:.5f}, max |phi| on contour {row['contour_max_abs']:.5f}" for row in errors]
    level_set = all(row["level_set_ok"] for row in errors)
    summary.append(f"rms decreases with k: {monotone}")
    summary.append(f"contour reconstructs near zero: {level_set}")
    timings["total"] = time.monotonic() - started
    return ExperimentReport(
        name="reconstruct2d",
        config=config.recorded(),
        seeds={"seed": config.seed, "basis_seed": config.basis_seed},
        tables={"grid": grid_rows, "errors": errors},
        summary=summary,
        timings=timings,
        passed=monotone and level_set,
    )


BASE_NETWORKS = ["512-256-128", "512-512-256-128", "512-512-512-256-128"]


class SweepConfig(ConfigSchema):
    sampling_counts: list[int] = [2048, 4096, 8192]
    node_counts: list[int] = [16, 32, 64, 128, 256, 512, 1024]
    networks: list[str] = BASE_NETWORKS
    n_surface: int = 2048
    augmentations: int = 1
    n_sub: int = 512
    # Robustness runs: rescale and/or rotate the test instances only
    test_scale: float = 1.0
    rotate_test: bool = False
    seed: int = 0
    epochs: int = 200
    dropout_rate: float = 0.0

    _lists = validator("sampling_counts", "node_counts", "networks", pre=True, allow_reuse=True)(split_list)

    @validator("networks", each_item=True)
    def network_spec(cls, value):
        if not all(part.isdigit() for part in value.split("-")):
            raise ValueError(f"network {value!r} must look like 512-256-128")
        return value

    @root_validator(skip_on_failure=True)
    def subset_fits(cls, values):
        if values["n_sub"] > values["n_surface"]:
            raise ValueError("n_sub cannot exceed n_surface")
        return values


def _train_and_score(train_set: FeatureSet, test_set: FeatureSet, hidden: list[int], config: SweepConfig) -> tuple[float, float]:
    started = time.monotonic()
    model = init_mlp(
        train_set.k,
        hidden,
        len(train_set.class_names),
        seed=config.seed,
        dropout_rate=config.dropout_rate,
        basis_id=train_set.basis_id,
    )
    model, _ = train(model, train_set, TrainConfig(epochs=config.epochs, seed=config.seed))
    accuracy, _ = evaluate(model, test_set)
    return accuracy, time.monotonic() - started


def run_sweep(manifest: DatasetManifest, config: SweepConfig | None = None, jobs: int = 1) -> ExperimentReport:
    """
    Accuracy over sampling density x node count x classifier depth. Models
    for one feature set are trained in parallel.
    """
    config = config or SweepConfig()
    manifest.require_both_splits()
    if len(manifest.class_names) < 2:
        raise DataError("a sweep needs at least two classes")
    started = time.monotonic()
    rows = []
    timings = {FIELD_SVD: 0.0, ELM: 0.0, MLP: 0.0, "extraction": 0.0}
    for m, k in itertools.product(config.sampling_counts, config.node_counts):
        extraction = ExtractionConfig(
            n_surface=config.n_surface,
            m_sampling=m,
            k_nodes=k,
            seed=config.seed,
            augmentations=config.augmentations,
            n_sub=config.n_sub,
            test_scale=config.test_scale,
            rotate_test=config.rotate_test,
        )
        result = extract_features(manifest, extraction, jobs=jobs)
        timings["extraction"] += result.seconds
        add_timings(timings, result.timings)
        hidden_layers = [[int(size) for size in network.split("-")] for network in config.networks]
        scores = Parallel(n_jobs=jobs)(
            delayed(_train_and_score)(result.features[Split.train], result.features[Split.test], hidden, config)
            for hidden in hidden_layers
        )
        for network, (accuracy, seconds) in zip(config.networks, scores):
            timings[MLP] += seconds
            rows.append({"m_sampling": m, "k_nodes": k, "network": network, "accuracy": accuracy})
            logger.info("m=%d k=%d %s: accuracy %.4f", m, k, network, accuracy)
    best = max(rows, key=lambda row: row["accuracy"])
    return ExperimentReport(
        name="sweep",
        config=config.recorded(),
        seeds={"seed": config.seed},
        tables={"accuracy": rows},
        summary=[f"best: m={best['m_sampling']} k={best['k_nodes']} {best['network']} accuracy {best['accuracy']:.4f}"],
        timings={**timings, "total": time.monotonic() - started},
    )
