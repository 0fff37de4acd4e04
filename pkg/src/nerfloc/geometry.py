"""Pinhole cameras, rigid poses, ray generation and corner-set boxes.

Camera frame convention: +z forward, +x right, +y down. Boxes are stored as
8 corners; overlap measures operate on the axis-aligned hull of the corners.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

# sign pattern of the canonical corner order: (-,-,-), (-,-,+), ..., (+,+,+)
CORNER_SIGNS = np.array(list(product((-1.0, 1.0), repeat=3)))


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("pose rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map points from this pose's local frame into the world."""
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    principal: tuple[float, float]
    grid: tuple[int, int]  # (W, H)

    def __post_init__(self):
        w, h = self.grid
        px, py = self.principal
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not (0 < px < w and 0 < py < h):
            raise ValueError(f"principal point {self.principal} outside grid {self.grid}")

    @classmethod
    def centered(cls, focal: float, grid: tuple[int, int]) -> "Intrinsics":
        w, h = grid
        return cls(float(focal), (w / 2.0, h / 2.0), (int(w), int(h)))

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.focal * factor, self.principal, self.grid)


def ray_direction(x, y, intr: Intrinsics) -> np.ndarray:
    """Unit camera-frame direction through image point (x, y).

    Accepts scalars or broadcastable arrays; the trailing axis of the result
    holds the 3 components.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    px, py = intr.principal
    dx, dy = np.broadcast_arrays(x - px, y - py)
    d = np.stack([dx, dy, np.full(dx.shape, float(intr.focal))], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def coarse_intrinsics(fine: Intrinsics, delta: float) -> Intrinsics:
    if not delta > 1:
        raise ValueError(f"delta must exceed 1, got {delta}")
    return Intrinsics(fine.focal / delta, fine.principal, fine.grid)


def pixel_centers(intr: Intrinsics, image_size: tuple[float, float] | None = None):
    """Pixel-center coordinates (x, y), each shaped (H, W)."""
    w, h = intr.grid
    img_w, img_h = image_size if image_size is not None else (w, h)
    xs = (np.arange(w) + 0.5) * img_w / w
    ys = (np.arange(h) + 0.5) * img_h / h
    return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise ValueError("ray bounds must satisfy 0 < t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def camera_ray(pose: Pose, dir_cam, t_near: float, t_far: float) -> Ray:
    d = pose.rotation @ np.asarray(dir_cam, dtype=np.float64)
    return Ray(pose.translation.copy(), d, float(t_near), float(t_far))


def camera_directions(pose: Pose, intr: Intrinsics) -> np.ndarray:
    """World-frame unit directions for every pixel of the ray grid, (H, W, 3)."""
    xs, ys = pixel_centers(intr)
    return ray_direction(xs, ys, intr) @ pose.rotation.T


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def orbit_pose(azimuth: float, elevation: float, radius: float, target=(0.0, 0.0, 0.0)) -> Pose:
    """Camera on a sphere around ``target`` looking at it; angles in radians."""
    ce = np.cos(elevation)
    eye = np.asarray(target) + radius * np.array(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])
    return look_at(eye, target)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box3D:
    corners: np.ndarray  # (8, 3)

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape != (8, 3):
            raise ValueError(f"box needs 8x3 corners, got {c.shape}")
        object.__setattr__(self, "corners", c)

    def is_parallelepiped(self, tol: float = 1e-9) -> bool:
        c = self.corners
        s = [c[i] + c[7 - i] for i in range(4)]
        return all(np.allclose(s[0], si, atol=tol) for si in s[1:])


@dataclass(frozen=True)
class LabeledBox:
    box: Box3D
    class_id: int


def box_from_pose(center, size, rot=None) -> Box3D:
    """Rigid box with full edge lengths ``size`` rotated by ``rot`` about ``center``."""
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise ValueError(f"box size must be positive, got {size}")
    rot = np.eye(3) if rot is None else np.asarray(rot, dtype=np.float64)
    local = CORNER_SIGNS * (size / 2.0)
    return Box3D(local @ rot.T + np.asarray(center, dtype=np.float64))


def aabb(box) -> tuple[np.ndarray, np.ndarray]:
    c = box.corners if isinstance(box, Box3D) else np.asarray(box)
    return c.min(axis=-2), c.max(axis=-2)


def _volume(lo, hi):
    return np.prod(np.clip(hi - lo, 0.0, None), axis=-1)


def _overlap_terms(a, b):
    alo, ahi = aabb(a)
    blo, bhi = aabb(b)
    inter = _volume(np.maximum(alo, blo), np.minimum(ahi, bhi))
    union = _volume(alo, ahi) + _volume(blo, bhi) - inter
    hull = _volume(np.minimum(alo, blo), np.maximum(ahi, bhi))
    return inter, union, hull


def iou3d(a, b) -> float:
    """IoU of the axis-aligned hulls of two corner sets; 0 when the union is empty."""
    inter, union, _ = _overlap_terms(a, b)
    return float(inter / union) if union > 0 else 0.0


def giou3d(a, b) -> float:
    inter, union, hull = _overlap_terms(a, b)
    iou = inter / union if union > 0 else 0.0
    excess = (hull - union) / hull if hull > 0 else 0.0
    return float(iou - excess)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise hull IoU between (A, 8, 3) and (B, 8, 3) corner arrays."""
    alo, ahi = boxes_a.min(axis=1)[:, None], boxes_a.max(axis=1)[:, None]
    blo, bhi = boxes_b.min(axis=1)[None], boxes_b.max(axis=1)[None]
    inter = _volume(np.maximum(alo, blo), np.minimum(ahi, bhi))
    union = _volume(alo, ahi) + _volume(blo, bhi) - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise hull GIoU between (A, 8, 3) and (B, 8, 3) corner arrays."""
    alo, ahi = boxes_a.min(axis=1)[:, None], boxes_a.max(axis=1)[:, None]
    blo, bhi = boxes_b.min(axis=1)[None], boxes_b.max(axis=1)[None]
    inter = _volume(np.maximum(alo, blo), np.minimum(ahi, bhi))
    union = _volume(alo, ahi) + _volume(blo, bhi) - inter
    hull = _volume(np.minimum(alo, blo), np.maximum(ahi, bhi))
    iou = np.zeros_like(union)
    np.divide(inter, union, out=iou, where=union > 0)
    excess = np.zeros_like(hull)
    np.divide(hull - union, hull, out=excess, where=hull > 0)
    return iou - excess
