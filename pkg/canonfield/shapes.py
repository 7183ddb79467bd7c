"""
Procedural shapes: the bundled reference shape and 2D contour used by the
experiments, and the four-class synthetic dataset.
"""
import logging
import pathlib
from collections.abc import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from .constants import Split
from .geometry import Mesh, write_off

logger = logging.getLogger(__name__)


def merge_meshes(*meshes: Mesh) -> Mesh:
    vertices, faces, offset = [], [], 0
    for mesh in meshes:
        vertices.append(mesh.vertices)
        faces.append(mesh.faces + offset)
        offset += len(mesh.vertices)
    return Mesh(vertices=np.vstack(vertices), faces=np.vstack(faces))


def uv_sphere(radius: float = 1.0, segments: int = 24, rings: int = 16) -> Mesh:
    polar = np.linspace(0.0, np.pi, rings + 1)[1:-1]
    azimuth = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring_points = np.stack(
        [
            np.outer(np.sin(polar), np.cos(azimuth)),
            np.outer(np.sin(polar), np.sin(azimuth)),
            np.outer(np.cos(polar), np.ones_like(azimuth)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    vertices = np.vstack([[0.0, 0.0, 1.0], ring_points, [0.0, 0.0, -1.0]]) * radius
    bottom = len(vertices) - 1
    faces = []

    def ring(r: int, s: int) -> int:
        return 1 + r * segments + (s % segments)

    for s in range(segments):
        faces.append((0, ring(0, s), ring(0, s + 1)))
        faces.append((bottom, ring(rings - 2, s + 1), ring(rings - 2, s)))
    for r in range(rings - 2):
        for s in range(segments):
            faces.append((ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)))
            faces.append((ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)))
    return Mesh(vertices=vertices, faces=faces)


def ellipsoid(axes=(1.0, 0.7, 0.5), segments: int = 24, rings: int = 16) -> Mesh:
    sphere = uv_sphere(1.0, segments, rings)
    return Mesh(vertices=sphere.vertices * np.asarray(axes, dtype=np.float64), faces=sphere.faces)


def box(size=(1.0, 1.0, 1.0)) -> Mesh:
    corners = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    ) * np.asarray(size, dtype=np.float64)
    quads = [
        (0, 1, 3, 2),
        (4, 6, 7, 5),
        (0, 4, 5, 1),
        (2, 3, 7, 6),
        (0, 2, 6, 4),
        (1, 5, 7, 3),
    ]
    faces = [tri for a, b, c, d in quads for tri in ((a, b, c), (a, c, d))]
    return Mesh(vertices=corners, faces=faces)


def cylinder(radius: float = 0.5, height: float = 1.0, segments: int = 32) -> Mesh:
    """
    Capped cylinder along z, centred on the origin.
    """
    angles = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    circle = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    top = np.column_stack([circle, np.full(segments, height / 2)])
    bottom = np.column_stack([circle, np.full(segments, -height / 2)])
    vertices = np.vstack([top, bottom, [[0, 0, height / 2], [0, 0, -height / 2]]])
    top_centre, bottom_centre = 2 * segments, 2 * segments + 1
    faces = []
    for s in range(segments):
        n = (s + 1) % segments
        faces.append((s, segments + s, segments + n))
        faces.append((s, segments + n, n))
        faces.append((top_centre, s, n))
        faces.append((bottom_centre, segments + n, segments + s))
    return Mesh(vertices=vertices, faces=faces)


def dumbbell(
    left_radius: float = 0.4,
    right_radius: float = 0.4,
    separation: float = 1.5,
    bar_radius: float = 0.08,
) -> Mesh:
    """
    Two spheres on the x axis joined by a thin bar.
    """
    turn = Rotation.from_euler("y", 90, degrees=True).as_matrix()
    bar = cylinder(bar_radius, separation, segments=16).transformed(turn.T)
    left = uv_sphere(left_radius).transformed(offset=(-separation / 2, 0, 0))
    right = uv_sphere(right_radius).transformed(offset=(separation / 2, 0, 0))
    return merge_meshes(left, bar, right)


def reference_shape() -> Mesh:
    """
    The bundled asymmetric test shape: a body with a head, a tail and a
    fin, with no symmetry plane, so its canonical frame is well defined.
    """
    body = ellipsoid((1.0, 0.55, 0.4))
    head = uv_sphere(0.32).transformed(offset=(0.95, 0.3, 0.12))
    tail = box((0.6, 0.18, 0.3)).transformed(
        Rotation.from_euler("z", 25, degrees=True).as_matrix().T,
        offset=(-1.05, -0.2, 0.05),
    )
    fin = cylinder(0.12, 0.5, segments=16).transformed(
        Rotation.from_euler("x", -30, degrees=True).as_matrix().T,
        offset=(0.1, -0.15, 0.5),
    )
    return merge_meshes(body, head, tail, fin)


def balanced_reference_shape(ratio: float = 1.02, iterations: int = 100) -> Mesh:
    """
    The reference shape stretched along its second principal axis until its
    two leading surface covariance eigenvalues are only ratio apart. A
    sparse sample then pins down its leading principal axis poorly, while
    its distance field keeps the asymmetry of the reference shape.
    """
    mesh = reference_shape()
    for _ in range(iterations):
        centroid, covariance = mesh.surface_moments()
        values, vectors = np.linalg.eigh(covariance)
        current = values[2] / values[1]
        if abs(current - ratio) < 1e-4 * ratio:
            return mesh
        axis = vectors[:, 1]
        # Area grows with the stretch too, so only take a quarter step in log space
        stretch = (current / ratio) ** 0.25
        matrix = np.eye(3) + (stretch - 1.0) * np.outer(axis, axis)
        mesh = mesh.transformed(matrix, offset=centroid - centroid @ matrix)
    logger.warning("Balanced shape stopped at eigenvalue ratio %.5f (wanted %.5f)", current, ratio)
    return mesh


def reference_contour(vertex_count: int = 400) -> np.ndarray:
    """
    The bundled closed 2D contour, as polygon vertices (the last vertex
    connects back to the first). Irregular and without symmetry.
    """
    angles = np.linspace(0.0, 2 * np.pi, vertex_count, endpoint=False)
    radius = (
        0.62
        + 0.18 * np.sin(3 * angles + 0.4)
        + 0.09 * np.cos(5 * angles)
        + 0.05 * np.sin(angles + 1.1)
    )
    return np.column_stack([radius * np.cos(angles), 0.8 * radius * np.sin(angles) + 0.1])


def sample_polyline(vertices: np.ndarray, count: int) -> np.ndarray:
    """
    count points evenly spaced by arc length along a closed polyline.
    """
    closed = np.vstack([vertices, vertices[:1]])
    lengths = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    positions = np.linspace(0.0, cumulative[-1], count, endpoint=False)
    segment = np.clip(np.searchsorted(cumulative, positions, side="right") - 1, 0, len(lengths) - 1)
    fraction = (positions - cumulative[segment]) / lengths[segment]
    return closed[segment] + fraction[:, None] * (closed[segment + 1] - closed[segment])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def _random_ellipsoid(rng: np.random.Generator) -> Mesh:
    return ellipsoid(rng.uniform(0.45, 1.0, size=3))


def _random_box(rng: np.random.Generator) -> Mesh:
    return box(rng.uniform(0.5, 1.0, size=3))


def _random_cylinder(rng: np.random.Generator) -> Mesh:
    return cylinder(rng.uniform(0.25, 0.45), rng.uniform(0.9, 1.6))


def _random_dumbbell(rng: np.random.Generator) -> Mesh:
    return dumbbell(rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.45), rng.uniform(1.2, 1.8))


SYNTHETIC_CLASSES: dict[str, Callable[[np.random.Generator], Mesh]] = {
    "box": _random_box,
    "cylinder": _random_cylinder,
    "dumbbell": _random_dumbbell,
    "ellipsoid": _random_ellipsoid,
}


def write_synthetic_dataset(
    root: pathlib.Path | str,
    train_per_class: int = 100,
    test_per_class: int = 30,
    seed: int = 0,
    scale_range: tuple[float, float] = (0.5, 2.0),
) -> pathlib.Path:
    """
    Writes a class/{train,test}/*.off tree of randomly posed, scaled and
    translated procedural shapes.
    """
    root = pathlib.Path(root)
    rng = np.random.default_rng(seed)
    for class_name, make in SYNTHETIC_CLASSES.items():
        for split, count in ((Split.train, train_per_class), (Split.test, test_per_class)):
            directory = root / class_name / split.value
            directory.mkdir(parents=True, exist_ok=True)
            for index in range(count):
                mesh = make(rng).transformed(
                    random_rotation(rng),
                    scale=rng.uniform(*scale_range),
                    offset=rng.uniform(-1.0, 1.0, size=3),
                )
                with open(directory / f"{class_name}_{index:04d}.off", "w") as stream:
                    write_off(mesh, stream)
    logger.info(
        "Wrote %d synthetic shapes under %s",
        len(SYNTHETIC_CLASSES) * (train_per_class + test_per_class),
        root,
    )
    return root
