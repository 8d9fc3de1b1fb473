"""Triangle-mesh object models and parametric primitives.

Meshes are plain (vertices, faces) arrays with one flat color per face.
Primitives (cuboid, cylinder, sphere) cover everything the reference
rasterizer needs; arbitrary meshes can be wrapped in :class:`ObjectModel`
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ObjectModel:
    """A renderable object: triangle mesh, per-face colors, physical size."""

    object_id: str
    vertices: np.ndarray  # (V, 3) meters, object frame centered at origin
    faces: np.ndarray  # (F, 3) int vertex indices
    face_colors: np.ndarray  # (F, 3) RGB in [0, 1]
    physical_diameter: float = field(default=0.0)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_colors = np.asarray(self.face_colors, dtype=np.float64)
        if self.vertices.size == 0 or self.faces.size == 0:
            raise ValueError("object model needs non-empty geometry")
        if self.face_colors.shape != (len(self.faces), 3):
            raise ValueError("need one RGB color per face")
        if self.physical_diameter <= 0.0:
            self.physical_diameter = float(max_pairwise_extent(self.vertices))
        if self.physical_diameter <= 0.0:
            raise ValueError("degenerate model with zero extent")


def max_pairwise_extent(vertices: np.ndarray) -> float:
    """Diameter of the vertex set (largest pairwise distance)."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) > 600:
        # bounding-box diagonal, an upper bound; framing refines iteratively anyway
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
    d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces so normals point away from the mesh centroid."""
    centroid = vertices.mean(axis=0)
    out = faces.copy()
    for k, (a, b, c) in enumerate(faces):
        n = np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a])
        if np.dot(n, vertices[[a, b, c]].mean(axis=0) - centroid) < 0:
            out[k] = [a, c, b]
    return out


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit icosahedron with two vertices at the poles.

    Vertices: north pole, 5-ring at elevation atan(1/2), 5-ring mirrored
    below (azimuths offset by 36 degrees), south pole.
    """
    verts = [np.array([0.0, 0.0, 1.0])]
    upper_z, ring_r = 1.0 / math.sqrt(5.0), 2.0 / math.sqrt(5.0)
    for i in range(5):
        a = math.radians(72.0 * i)
        verts.append(np.array([ring_r * math.cos(a), ring_r * math.sin(a), upper_z]))
    for i in range(5):
        a = math.radians(72.0 * i + 36.0)
        verts.append(np.array([ring_r * math.cos(a), ring_r * math.sin(a), -upper_z]))
    verts.append(np.array([0.0, 0.0, -1.0]))
    vertices = np.stack(verts)

    faces = []
    up = lambda i: 1 + i % 5
    lo = lambda i: 6 + i % 5
    for i in range(5):
        faces.append([0, up(i), up(i + 1)])
        faces.append([up(i), lo(i), up(i + 1)])
        faces.append([lo(i), lo(i + 1), up(i + 1)])
        faces.append([11, lo(i), lo(i + 1)])
    faces = _orient_outward(vertices, np.array(faces, dtype=np.int64))
    return vertices, faces


def subdivide(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One step of loop subdivision with reprojection to the unit sphere."""
    verts = [v for v in vertices]
    midpoint_cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in midpoint_cache:
            m = 0.5 * (verts[i] + verts[j])
            verts.append(m / np.linalg.norm(m))
            midpoint_cache[key] = len(verts) - 1
        return midpoint_cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]])
    return np.stack(verts), np.array(new_faces, dtype=np.int64)


def icosphere(subdivisions: int = 1) -> tuple[np.ndarray, np.ndarray]:
    vertices, faces = icosahedron()
    for _ in range(subdivisions):
        vertices, faces = subdivide(vertices, faces)
    return vertices, faces


def make_cuboid(object_id: str, size, colors=None) -> ObjectModel:
    """Axis-aligned cuboid centered at the origin.

    ``size`` is (sx, sy, sz) in meters; ``colors`` optionally gives one RGB
    per side in -x, +x, -y, +y, -z, +z order.
    """
    sx, sy, sz = (0.5 * float(s) for s in size)
    corners = np.array(
        [[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]
    )
    # two triangles per side, vertex indices into the corner table above
    sides = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    if colors is None:
        colors = [
            (0.85, 0.2, 0.2), (0.2, 0.85, 0.2), (0.2, 0.2, 0.85),
            (0.85, 0.85, 0.2), (0.85, 0.2, 0.85), (0.2, 0.85, 0.85),
        ]
    faces, face_colors = [], []
    for quad, color in zip(sides, colors):
        a, b, c, d = quad
        faces.extend([[a, b, c], [a, c, d]])
        face_colors.extend([color, color])
    faces = _orient_outward(corners, np.array(faces, dtype=np.int64))
    return ObjectModel(object_id, corners, faces, np.array(face_colors))


def make_cylinder(object_id: str, radius: float, height: float, n_segments: int = 24,
                  side_color=(0.8, 0.5, 0.2), cap_color=(0.9, 0.85, 0.3)) -> ObjectModel:
    """Cylinder along z, centered at the origin."""
    h = 0.5 * float(height)
    angles = 2.0 * np.pi * np.arange(n_segments) / n_segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    bottom = np.concatenate([ring, np.full((n_segments, 1), -h)], axis=1)
    top = np.concatenate([ring, np.full((n_segments, 1), h)], axis=1)
    vertices = np.concatenate([bottom, top, [[0, 0, -h]], [[0, 0, h]]])
    cb, ct = 2 * n_segments, 2 * n_segments + 1

    faces, colors = [], []
    for i in range(n_segments):
        j = (i + 1) % n_segments
        faces.extend([[i, j, n_segments + j], [i, n_segments + j, n_segments + i]])
        colors.extend([side_color, side_color])
        faces.append([cb, j, i])
        faces.append([ct, n_segments + i, n_segments + j])
        colors.extend([cap_color, cap_color])
    faces = _orient_outward(vertices, np.array(faces, dtype=np.int64))
    return ObjectModel(object_id, vertices, faces, np.array(colors))


def make_sphere(object_id: str, radius: float, subdivisions: int = 2,
                color=(0.3, 0.5, 0.9)) -> ObjectModel:
    vertices, faces = icosphere(subdivisions)
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(faces), 1))
    model = ObjectModel(object_id, radius * vertices, faces, colors)
    model.physical_diameter = 2.0 * radius
    return model
