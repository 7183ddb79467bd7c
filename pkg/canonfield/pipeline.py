"""
Dataset ingestion and end-to-end feature extraction.
"""
import contextlib
import hashlib
import logging
import os
import pathlib
import time
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import root_validator, validator

from .canonical import assemble_data_matrix, canonical_input, canonical_projection
from .constants import Activation, Split
from .distance_field import SamplingSet, compute_distance_field, generate_sampling_points
from .elm import ElmBasis, FeatureSet, ShapeFeature, augment_input, embed, make_shared_basis
from .errors import CanonError, ExtractionError, ManifestError, UsageError
from .geometry import Mesh, PointCloud, load_shape, normalize, sample_surface, subsample
from .schema import ConfigSchema, Schema
from .shapes import random_rotation

logger = logging.getLogger(__name__)

DATA_DIR_VARIABLE = "CANON_DATA_DIR"

#: Timed stages: distance field with canonical projection, ELM embedding and classifier training
FIELD_SVD = "field_svd"
ELM = "elm"
MLP = "mlp"

#: Smallest accepted value of the extraction counts
MINIMUM_COUNTS = {"n_surface": 4, "m_sampling": 8, "k_nodes": 5, "augmentations": 1, "n_sub": 1}


class ManifestEntry(Schema):
    instance_id: str
    path: pathlib.Path
    label: int
    split: Split


class DatasetManifest(Schema):
    entries: list[ManifestEntry]
    class_names: list[str]

    @root_validator(skip_on_failure=True)
    def consistent(cls, values):
        seen = set()
        for entry in values["entries"]:
            if entry.instance_id in seen:
                raise ValueError(f"duplicate instance id {entry.instance_id}")
            seen.add(entry.instance_id)
            if not 0 <= entry.label < len(values["class_names"]):
                raise ValueError(f"instance {entry.instance_id} has unknown label {entry.label}")
        return values

    def split(self, split: Split) -> list[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def require_both_splits(self):
        for split in Split:
            if not self.split(split):
                raise ManifestError(f"manifest has no {split.value} instances")

    def save(self, path: pathlib.Path | str):
        pathlib.Path(path).write_text(self.json(indent=2))

    @classmethod
    def load(cls, path: pathlib.Path | str) -> "DatasetManifest":
        return cls.parse_file(path)


def scan_modelnet(root: pathlib.Path | str | None = None) -> DatasetManifest:
    """
    Builds a manifest from a class/{train,test}/*.off tree, in lexicographic
    order. Every class must have both splits.
    """
    if root is None:
        root = os.environ.get(DATA_DIR_VARIABLE)
        if not root:
            raise UsageError(f"no dataset root given and {DATA_DIR_VARIABLE} is not set")
    root = pathlib.Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    class_dirs = sorted(path for path in root.iterdir() if path.is_dir())
    entries = []
    class_names = []
    for class_dir in class_dirs:
        split_files = {
            split: sorted((class_dir / split.value).glob("*.off")) for split in Split
        }
        if not any(split_files.values()):
            continue
        for split, files in split_files.items():
            if not files:
                raise ManifestError(f"class {class_dir.name} has no {split.value} split")
        label = len(class_names)
        class_names.append(class_dir.name)
        for split, files in split_files.items():
            for path in files:
                if not os.access(path, os.R_OK):
                    raise ManifestError(f"cannot read {path}")
                instance_id = "/".join([class_dir.name, split.value, path.stem])
                entries.append(
                    ManifestEntry(
                        instance_id="_".join(instance_id.split()),
                        path=path,
                        label=label,
                        split=split,
                    )
                )
    if not entries:
        raise ManifestError(f"no OFF files found under {root}")
    logger.info("Scanned %d instances in %d classes under %s", len(entries), len(class_names), root)
    return DatasetManifest(entries=entries, class_names=class_names)


class ExtractionConfig(ConfigSchema):
    n_surface: int = 2048
    m_sampling: int = 4096
    k_nodes: int = 256
    seed: int = 0
    # Unset stage seeds are derived from seed
    sampling_seed: int | None = None
    basis_seed: int | None = None
    subsample_seed: int | None = None
    augmentations: int = 16
    n_sub: int = 512
    per_instance_resample: bool = False
    test_scale: float = 1.0
    rotate_test: bool = False
    activation: Activation = Activation.relu
    leaky_slope: float = 0.01

    @validator("n_surface", "m_sampling", "k_nodes", "augmentations", "n_sub")
    def large_enough(cls, value, field):
        if value < MINIMUM_COUNTS[field.name]:
            raise ValueError(f"{field.name} must be at least {MINIMUM_COUNTS[field.name]}")
        return value

    @validator("test_scale")
    def positive_scale(cls, value):
        if not value > 0:
            raise ValueError("test_scale must be positive")
        return value

    @root_validator(skip_on_failure=True)
    def subset_fits(cls, values):
        if values["n_sub"] > values["n_surface"]:
            raise ValueError("n_sub cannot exceed n_surface")
        return values

    @root_validator(skip_on_failure=True)
    def stage_seeds(cls, values):
        for stage in ("sampling", "basis", "subsample"):
            if values[f"{stage}_seed"] is None:
                values[f"{stage}_seed"] = derived_seed(values["seed"], stage)
        return values


def derived_seed(master: int, *keys: Any) -> int:
    """
    A per-item seed that depends only on the master seed and the keys, so
    parallel and serial runs draw the same numbers.
    """
    digest = hashlib.sha256(repr((master, *keys)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@contextlib.contextmanager
def timed(timings: dict[str, float] | None, stage: str):
    """
    Adds the wall time of the block to timings[stage]. A None dict is
    accepted and ignored.
    """
    started = time.perf_counter()
    try:
        yield
    finally:
        if timings is not None:
            timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - started


def add_timings(total: dict[str, float], timings: dict[str, float]):
    for stage, seconds in timings.items():
        total[stage] = total.get(stage, 0.0) + seconds


def embed_cloud(
    cloud: PointCloud,
    sampling: SamplingSet,
    basis: ElmBasis,
    config: ExtractionConfig,
    timings: dict[str, float] | None = None,
    **feature_fields: Any,
) -> ShapeFeature:
    """
    Distance field, canonical projection and ELM embedding of one
    (normalized) cloud.
    """
    with timed(timings, FIELD_SVD):
        field = compute_distance_field(cloud, sampling)
        frame = canonical_projection(assemble_data_matrix(sampling, field))
    with timed(timings, ELM):
        aug = augment_input(canonical_input(sampling, frame))
        return embed(aug, field, basis, config.activation, config.leaky_slope, **feature_fields)


def extract_instance(
    entry: ManifestEntry,
    config: ExtractionConfig,
    sampling: SamplingSet,
    basis: ElmBasis,
    mesh: Mesh | PointCloud | None = None,
    timings: dict[str, float] | None = None,
) -> list[ShapeFeature]:
    """
    All features for one instance: one, or one per random subset when
    augmenting.

    Test instances are rotated (cloud only) and rescaled (cloud and
    sampling set together) when the config asks for it.
    """
    shape = mesh if mesh is not None else load_shape(entry.path)
    surface_seed = derived_seed(config.seed, entry.instance_id, "surface")
    if isinstance(shape, Mesh):
        cloud = sample_surface(shape, config.n_surface, surface_seed, source=str(entry.path))
    else:
        rng = np.random.default_rng(surface_seed)
        cloud = shape if shape.n <= config.n_surface else subsample(shape, config.n_surface, rng)
    cloud = normalize(cloud)
    scale = 1.0
    if entry.split == Split.test:
        if config.rotate_test:
            rotation = random_rotation(np.random.default_rng(derived_seed(config.seed, entry.instance_id, "rotate")))
            cloud = cloud.with_points(cloud.points @ rotation)
        scale = config.test_scale
        if scale != 1.0:
            cloud = cloud.with_points(scale * cloud.points)

    def instance_sampling(*keys: Any) -> SamplingSet:
        chosen = sampling
        if config.per_instance_resample:
            chosen = generate_sampling_points(config.m_sampling, derived_seed(config.sampling_seed, entry.instance_id, *keys))
        return chosen if scale == 1.0 else chosen.transformed(scale=scale)

    fields = dict(label=entry.label, instance_id=entry.instance_id, split=entry.split)
    if config.augmentations == 1:
        return [embed_cloud(cloud, instance_sampling(), basis, config, timings, **fields)]
    rng = np.random.default_rng(derived_seed(config.subsample_seed, entry.instance_id))
    features = []
    for subset in range(config.augmentations):
        part = subsample(cloud, config.n_sub, rng)
        features.append(
            embed_cloud(part, instance_sampling(subset), basis, config, timings, subset=subset, **fields)
        )
    return features


class ExtractionFailure(Schema):
    instance_id: str
    error: str


class ExtractionResult(Schema):
    features: dict[Split, FeatureSet]
    failures: list[ExtractionFailure] = []
    basis_id: str
    seconds: float = 0.0
    #: Per-stage seconds summed over instances (and so over workers)
    timings: dict[str, float] = {}


def _extract_safely(entry, config, sampling, basis) -> tuple[list[ShapeFeature], dict[str, float]] | ExtractionFailure:
    timings: dict[str, float] = {}
    try:
        return extract_instance(entry, config, sampling, basis, timings=timings), timings
    except (CanonError, ValueError, OSError) as error:
        return ExtractionFailure(instance_id=entry.instance_id, error=str(error))


def extract_features(
    manifest: DatasetManifest,
    config: ExtractionConfig | None = None,
    jobs: int = 1,
) -> ExtractionResult:
    """
    Extracts features for every manifest entry with one shared sampling set
    and basis. Failures are recorded per instance; results come back in
    manifest order regardless of jobs.
    """
    config = config or ExtractionConfig()
    started = time.monotonic()
    sampling = generate_sampling_points(config.m_sampling, config.sampling_seed)
    basis = make_shared_basis(config.k_nodes, config.basis_seed)
    outcomes = Parallel(n_jobs=jobs)(
        delayed(_extract_safely)(entry, config, sampling, basis) for entry in manifest.entries
    )
    by_split: dict[Split, list[ShapeFeature]] = {split: [] for split in Split}
    failures = []
    timings = {FIELD_SVD: 0.0, ELM: 0.0}
    for entry, outcome in zip(manifest.entries, outcomes):
        if isinstance(outcome, ExtractionFailure):
            logger.warning("Extraction failed for %s: %s", outcome.instance_id, outcome.error)
            failures.append(outcome)
        else:
            features, instance_timings = outcome
            by_split[entry.split].extend(features)
            add_timings(timings, instance_timings)
    extracted = sum(len(features) for features in by_split.values())
    if extracted == 0:
        raise ExtractionError(f"no instances extracted ({len(failures)} failures)")
    seconds = time.monotonic() - started
    logger.info(
        "Extracted %d features from %d instances (%d failed) in %.1fs (field+SVD %.1fs, ELM %.1fs)",
        extracted,
        len(manifest.entries) - len(failures),
        len(failures),
        seconds,
        timings[FIELD_SVD],
        timings[ELM],
    )
    return ExtractionResult(
        features={
            split: FeatureSet(
                basis_id=basis.basis_id,
                k=basis.k,
                features=features,
                class_names=manifest.class_names,
            )
            for split, features in by_split.items()
        },
        failures=failures,
        basis_id=basis.basis_id,
        seconds=seconds,
        timings=timings,
    )


class ExperimentReport(Schema):
    """
    Results of one run: named tables, a summary, and the config and seeds
    that produced them.
    """

    name: str
    config: dict[str, str]
    seeds: dict[str, int]
    tables: dict[str, list[dict[str, Any]]] = {}
    summary: list[str] = []
    timings: dict[str, float] = {}
    passed: bool | None = None

    def table(self, name: str) -> pd.DataFrame:
        return pd.DataFrame(self.tables[name])

    def render(self) -> str:
        lines = [f"# {self.name}"]
        if self.passed is not None:
            lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        lines.extend(self.summary)
        lines.append("")
        lines.append("## config")
        lines.extend(f"{key}={value}" for key, value in sorted(self.config.items()))
        lines.append("## seeds")
        lines.extend(f"{key}={value}" for key, value in sorted(self.seeds.items()))
        if self.timings:
            lines.append("## timings (s)")
            lines.extend(f"{key}={value:.3f}" for key, value in self.timings.items())
        return "\n".join(lines) + "\n"

    def write(self, directory: pathlib.Path | str) -> pathlib.Path:
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, rows in self.tables.items():
            frame = pd.DataFrame(rows)
            for key, value in self.config.items():
                frame[f"config.{key}"] = value
            for key, value in self.seeds.items():
                frame[f"seed.{key}"] = value
            frame.to_csv(directory / f"{self.name}-{name}.csv", index=False)
        summary = directory / f"{self.name}-summary.txt"
        summary.write_text(self.render())
        return summary


def read_config(path: pathlib.Path | str) -> dict[str, str]:
    """
    Reads a flat key=value file. '#' starts a comment.
    """
    values: dict[str, str] = {}
    for number, line in enumerate(pathlib.Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        key = key.strip()
        if not separator or not key:
            raise UsageError(f"{path}:{number}: expected key=value")
        if key in values:
            raise UsageError(f"{path}:{number}: duplicate key {key}")
        values[key] = value.strip()
    return values
