"""
Meshes and point clouds: OFF/XYZ reading and writing, area-uniform surface
sampling, and normalization into the unit sphere.
"""
import logging
import pathlib
from collections.abc import Iterator
from typing import TextIO

import numpy as np
from pydantic import root_validator, validator

from .errors import DegenerateShapeError, MeshFormatError
from .schema import Schema
from .types import FloatArray, IndexArray

logger = logging.getLogger(__name__)


class Mesh(Schema):
    """
    A triangle mesh. Polygons are fan-triangulated when loaded.
    """

    vertices: FloatArray
    faces: IndexArray

    @validator("vertices")
    def vertices_are_3d(cls, value):
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("vertices must be finite")
        return value

    @validator("faces")
    def faces_are_triangles(cls, value):
        if value.size == 0:
            return value.reshape(0, 3)
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError(f"faces must be (f, 3), got {value.shape}")
        return value

    @root_validator(skip_on_failure=True)
    def faces_in_range(cls, values):
        faces, vertices = values["faces"], values["vertices"]
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face index out of range")
        return values

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Centroid and covariance of a point drawn uniformly from the surface.
        """
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        areas = self.triangle_areas()
        total = areas.sum()
        corners = a + b + c
        centroid = areas @ corners / (3 * total)
        second = sum(np.einsum("f,fi,fj->ij", areas, v, v) for v in (a, b, c, corners)) / (12 * total)
        return centroid, second - np.outer(centroid, centroid)

    def transformed(self, matrix: np.ndarray | None = None, scale: float = 1.0, offset=None) -> "Mesh":
        """
        Returns the mesh with vertices mapped to scale * v @ matrix + offset.
        """
        vertices = self.vertices if matrix is None else self.vertices @ matrix
        vertices = scale * vertices
        if offset is not None:
            vertices = vertices + np.asarray(offset, dtype=np.float64)
        return Mesh(vertices=vertices, faces=self.faces)


class Provenance(Schema):
    source: str = "memory"
    seed: int | None = None
    n: int


class PointCloud(Schema):
    """
    n surface points. Clouds fed to the canonical pipeline are sampled
    with n >= 4; smaller clouds are accepted for distance queries.
    """

    points: FloatArray
    provenance: Provenance

    @validator("points")
    def points_are_finite(cls, value):
        if value.ndim != 2 or value.shape[0] < 1:
            raise ValueError(f"points must be a non-empty (n, d) matrix, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("points must be finite")
        return value

    @classmethod
    def from_points(cls, points, source: str = "memory", seed: int | None = None) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(1, -1)
        return cls(
            points=points,
            provenance=Provenance(source=source, seed=seed, n=len(points)),
        )

    @property
    def n(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(
            points=points,
            provenance=self.provenance.replace(n=len(points)),
        )


def _content_lines(stream: TextIO) -> Iterator[tuple[int, list[str]]]:
    """
    Yields (line number, tokens) for every line holding data.
    """
    for number, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield number, line.split()


def _next_line(lines: Iterator[tuple[int, list[str]]], last: int, what: str):
    try:
        return next(lines)
    except StopIteration:
        raise MeshFormatError(f"truncated stream, expected {what}", line=last + 1)


def load_off(stream: TextIO) -> Mesh:
    """
    Parses an ASCII OFF file. Accepts the header and the count line fused
    together ("OFF3 1 0"), as found in ModelNet.
    """
    lines = _content_lines(stream)
    number, tokens = _next_line(lines, 0, "OFF header")
    head = tokens[0]
    if not head.startswith("OFF"):
        raise MeshFormatError(f"expected OFF header, got {head!r}", line=number)
    remainder = head[3:]
    counts = ([remainder] if remainder else []) + tokens[1:]
    if not counts:
        number, counts = _next_line(lines, number, "vertex/face counts")
    if len(counts) < 2:
        raise MeshFormatError("expected vertex and face counts", line=number)
    try:
        vertex_count, face_count = int(counts[0]), int(counts[1])
    except ValueError:
        raise MeshFormatError(f"bad counts {counts!r}", line=number)
    if vertex_count < 0 or face_count < 0:
        raise MeshFormatError("negative counts", line=number)
    vertices = np.empty((vertex_count, 3), dtype=np.float64)
    for index in range(vertex_count):
        number, tokens = _next_line(lines, number, f"vertex {index}")
        if len(tokens) < 3:
            raise MeshFormatError(f"vertex needs 3 coordinates, got {len(tokens)}", line=number)
        try:
            vertices[index] = [float(token) for token in tokens[:3]]
        except ValueError:
            raise MeshFormatError(f"bad vertex {tokens!r}", line=number)
    triangles: list[tuple[int, int, int]] = []
    for index in range(face_count):
        number, tokens = _next_line(lines, number, f"face {index}")
        try:
            size = int(tokens[0])
            corners = [int(token) for token in tokens[1 : size + 1]]
        except ValueError:
            raise MeshFormatError(f"bad face {tokens!r}", line=number)
        if size < 3 or len(corners) != size:
            raise MeshFormatError(f"face declares {size} corners, has {len(corners)}", line=number)
        for corner in corners:
            if corner < 0 or corner >= vertex_count:
                raise MeshFormatError(f"vertex index {corner} out of range", line=number)
        for i in range(1, size - 1):
            triangles.append((corners[0], corners[i], corners[i + 1]))
    return Mesh(vertices=vertices, faces=np.array(triangles, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: Mesh, stream: TextIO):
    stream.write("OFF\n")
    stream.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for vertex in mesh.vertices.tolist():
        stream.write(" ".join(repr(value) for value in vertex) + "\n")
    for face in mesh.faces.tolist():
        stream.write("3 " + " ".join(str(index) for index in face) + "\n")


def load_xyz(stream: TextIO, source: str = "memory") -> PointCloud:
    """
    One "x y z" per line; extra columns (normals, colours) are ignored.
    """
    rows = []
    for number, tokens in _content_lines(stream):
        if len(tokens) < 3:
            raise MeshFormatError("point needs 3 coordinates", line=number)
        try:
            rows.append([float(token) for token in tokens[:3]])
        except ValueError:
            raise MeshFormatError(f"bad point {tokens!r}", line=number)
    if not rows:
        raise MeshFormatError("no points in stream")
    return PointCloud.from_points(rows, source=source)


def write_xyz(cloud: PointCloud, stream: TextIO):
    for point in cloud.points.tolist():
        stream.write(" ".join(repr(value) for value in point) + "\n")


def load_shape(path: pathlib.Path | str) -> Mesh | PointCloud:
    """
    Loads an .off mesh or an .xyz point cloud, by suffix.
    """
    path = pathlib.Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".off", ".xyz", ".txt"):
        raise MeshFormatError(f"{path}: unsupported shape format {suffix!r}")
    with path.open() as stream:
        if suffix == ".off":
            try:
                return load_off(stream)
            except MeshFormatError as error:
                raise MeshFormatError(f"{path}: {error.error}")
        return load_xyz(stream, source=str(path))


def sample_surface(mesh: Mesh, n: int, seed: int, source: str = "memory") -> PointCloud:
    """
    Draws n points uniformly by area: a triangle is picked with probability
    proportional to its area, then a uniform barycentric point inside it.
    """
    if n < 4:
        raise ValueError(f"need at least 4 surface points, got {n}")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if not total > 0:
        raise DegenerateShapeError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[picked, i]] for i in range(3))
    points = (
        (1.0 - r1)[:, None] * a
        + (r1 * (1.0 - r2))[:, None] * b
        + (r1 * r2)[:, None] * c
    )
    return PointCloud(
        points=points,
        provenance=Provenance(source=source, seed=seed, n=n),
    )


def normalize(cloud: PointCloud) -> PointCloud:
    """
    Moves the centroid to the origin and scales the farthest point onto
    the unit sphere. A cloud of coincident points maps to all zeros.
    """
    points = cloud.points
    centered = points - points.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius == 0.0:
        return cloud.with_points(np.zeros_like(points))
    return cloud.with_points(centered / radius)


def subsample(cloud: PointCloud, size: int, rng: np.random.Generator) -> PointCloud:
    """
    A random subset of size points, without replacement.
    """
    if size > cloud.n:
        raise ValueError(f"cannot take {size} points from a cloud of {cloud.n}")
    chosen = np.sort(rng.choice(cloud.n, size=size, replace=False))
    return cloud.with_points(cloud.points[chosen])
