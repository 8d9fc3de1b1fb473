"""Template pose sampling: sphere viewpoints, in-plane grids, random perturbations.

A viewpoint is a unit vector in the object frame pointing from the object
center toward the camera. Rotations are object-to-camera, for a camera with
x right, y down, z forward and the object centered on the optical axis.
All constructions are deterministic; randomness only enters through an
injected generator, so everything is parallel-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from temdet.meshes import icosahedron, subdivide

_ORTHO_TOL = 1e-6


@dataclass
class Pose:
    """Object-to-camera rotation plus the depth the template is rendered at."""

    rotation: np.ndarray  # (3, 3)
    render_depth: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        if self.render_depth <= 0.0:
            raise ValueError(f"render depth must be positive, got {self.render_depth}")

    @property
    def viewpoint(self) -> np.ndarray:
        """Unit direction from object center to camera, in the object frame."""
        return -self.rotation[2]


@dataclass(frozen=True)
class PerturbationSpec:
    max_angle: float  # degrees

    def __post_init__(self):
        if not 0.0 <= self.max_angle <= 180.0:
            raise ValueError(f"max_angle must lie in [0, 180], got {self.max_angle}")


def _sorted_directions(dirs: np.ndarray) -> np.ndarray:
    """Stable deterministic ordering: top to bottom, then by azimuth."""
    key = np.stack([-np.round(d[2], 9) for d in dirs]), np.stack(
        [round(math.atan2(d[1], d[0]), 9) for d in dirs]
    )
    order = np.lexsort((key[1], key[0]))
    return dirs[order]


def _icosphere_vertices() -> np.ndarray:
    vertices, faces = icosahedron()
    vertices, _ = subdivide(vertices, faces)
    return vertices


def global_viewpoints() -> np.ndarray:
    """40 quasi-uniform unit view directions covering the full sphere.

    The 42 vertices of a once-subdivided icosahedron minus its two polar
    vertices.
    """
    vertices = _icosphere_vertices()
    keep = np.abs(vertices[:, 2]) < 1.0 - 1e-9
    return _sorted_directions(vertices[keep])


def viewpoint_rotation(viewpoint, inplane_deg: float = 0.0) -> np.ndarray:
    """Object-to-camera rotation looking at the object from ``viewpoint``.

    The object's +z axis maps toward image-up where possible; ``inplane_deg``
    then rotates about the optical axis.
    """
    v = np.asarray(viewpoint, dtype=np.float64)
    v = v / np.linalg.norm(v)
    r3 = -v  # optical axis: camera-to-object direction in the object frame
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, r3)) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    r2 = -(up - np.dot(up, r3) * r3)  # image y points down
    r2 /= np.linalg.norm(r2)
    r1 = np.cross(r2, r3)
    base = np.stack([r1, r2, r3])

    a = math.radians(inplane_deg)
    ca, sa = math.cos(a), math.sin(a)
    inplane = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    return inplane @ base


def global_template_poses(depth: float = 1.0) -> list[Pose]:
    """The 240-pose global bank: 40 viewpoints x 6 in-plane rotations."""
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    poses = []
    for v in global_viewpoints():
        for k in range(6):
            poses.append(Pose(viewpoint_rotation(v, 60.0 * k), depth))
    return poses


def _half_sphere_viewpoints() -> np.ndarray:
    """16 pre-defined viewpoints spanning the upper half-sphere.

    Targets on 4 elevation rings x 4 azimuths, each snapped to the nearest
    unused icosphere vertex with non-negative elevation.
    """
    vertices = _icosphere_vertices()
    candidates = vertices[vertices[:, 2] >= -1e-12]

    targets = []
    for ring, elev in enumerate((80.0, 55.0, 30.0, 5.0)):
        offset = 45.0 if ring % 2 else 0.0
        for j in range(4):
            az = math.radians(90.0 * j + offset)
            el = math.radians(elev)
            targets.append(
                [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
            )

    chosen: list[int] = []
    for t in targets:
        dots = candidates @ np.asarray(t)
        for idx in np.argsort(-dots):
            if idx not in chosen:
                chosen.append(int(idx))
                break
    return _sorted_directions(candidates[np.array(chosen)])


def local_template_poses_test(n_inplane: int, depth: float = 1.0) -> list[Pose]:
    """Test-time local template stack: 16 half-sphere viewpoints x n in-plane."""
    if n_inplane not in (5, 10, 20):
        raise ValueError(f"n_inplane must be one of 5, 10, 20, got {n_inplane}")
    step = 360.0 / n_inplane
    poses = []
    for v in _half_sphere_viewpoints():
        for k in range(n_inplane):
            poses.append(Pose(viewpoint_rotation(v, step * k), depth))
    return poses


def rotation_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * K + (1.0 - math.cos(angle_rad)) * (K @ K)


def perturb_rotation(pose: Pose, spec: PerturbationSpec, rng: np.random.Generator) -> Pose:
    """Compose a random rotation onto a pose.

    The perturbation axis is uniform on the sphere and the magnitude uniform
    in [0, max_angle], so the geodesic distance to the input never exceeds
    max_angle.
    """
    if spec.max_angle == 0.0:
        return Pose(pose.rotation.copy(), pose.render_depth)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0.0, spec.max_angle))
    delta = rotation_from_axis_angle(axis, angle)
    return Pose(delta @ pose.rotation, pose.render_depth)


def geodesic_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices."""
    rel = r1 @ r2.T
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(c))


def write_poses(path, poses: list[Pose]) -> None:
    """Plain-text export: 9 rotation entries then the depth, per row."""
    with open(path, "w") as f:
        for p in poses:
            row = list(p.rotation.reshape(-1)) + [p.render_depth]
            f.write(" ".join(f"{v:.9f}" for v in row) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 10:
                raise ValueError(f"expected 10 values per row, got {len(vals)}")
            poses.append(Pose(np.array(vals[:9]).reshape(3, 3), vals[9]))
    return poses
