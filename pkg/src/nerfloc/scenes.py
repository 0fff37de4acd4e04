"""Procedural scene corpus and camera pose sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import CLASS_TABLE, DEFAULT_BOUNDS, Primitive, SyntheticScene, load_scene, save_scene
from .geometry import Pose, aabb, orbit_pose, rotation_z
from .model import derive_seed

PLACEMENT_HALF_EXTENT = np.array([1.1, 1.1, 0.6])
GAP = 0.1


def _shape_for_class(rng: np.random.Generator, class_id: int):
    """(kind, local size) for one of the synthetic classes."""
    name = CLASS_TABLE[class_id]
    if name == "cube":
        s = rng.uniform(0.25, 0.4)
        return "box", np.array([s, s, s])
    if name == "slab":
        return "box", np.array([rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5), rng.uniform(0.08, 0.12)])
    if name == "tall-box":
        return "box", np.array([rng.uniform(0.15, 0.22), rng.uniform(0.15, 0.22), rng.uniform(0.4, 0.6)])
    return "sphere", np.full(3, rng.uniform(0.25, 0.4))


def generate_scene(rng: np.random.Generator, class_ids, max_tries: int = 500) -> SyntheticScene:
    """Scene with one primitive per class id; GT hulls never overlap."""
    prims: list[Primitive] = []
    hulls: list[tuple[np.ndarray, np.ndarray]] = []
    for cid in class_ids:
        kind, size = _shape_for_class(rng, cid)
        color = rng.uniform(0.2, 1.0, size=3)
        amp = float(rng.uniform(10.0, 30.0))
        for _ in range(max_tries):
            center = rng.uniform(-PLACEMENT_HALF_EXTENT, PLACEMENT_HALF_EXTENT)
            rot = rotation_z(rng.uniform(0, np.pi)) if kind == "box" else np.eye(3)
            prim = Primitive(kind, Pose(rot, center), size, color, amp, int(cid))
            lo, hi = aabb(prim.bounding_box())
            clash = any(np.all(lo < h + GAP) and np.all(l - GAP < hi) for l, h in hulls)
            if not clash:
                prims.append(prim)
                hulls.append((lo, hi))
                break
        else:
            raise RuntimeError("could not place a non-overlapping primitive")
    return SyntheticScene(tuple(prims), DEFAULT_BOUNDS, CLASS_TABLE)


def generate_corpus(seed: int, count: int, min_objects: int = 1, max_objects: int = 3) -> list[SyntheticScene]:
    """``count`` scenes; classes are dealt round-robin so the corpus stays balanced."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 1 <= min_objects <= max_objects:
        raise ValueError("need 1 <= min_objects <= max_objects")
    rng = np.random.default_rng(derive_seed(seed, "scenes"))
    scenes = []
    dealt = 0
    for _ in range(count):
        n = int(rng.integers(min_objects, max_objects + 1))
        ids = [(dealt + k) % len(CLASS_TABLE) for k in range(n)]
        dealt += n
        scenes.append(generate_scene(rng, ids))
    return scenes


def scene_name(index: int) -> str:
    return f"scene_{index:04d}"


def write_corpus(scenes, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(scenes):
        p = out / f"{scene_name(i)}.json"
        save_scene(s, p)
        paths.append(p)
    return paths


def read_corpus(scene_dir) -> dict[str, SyntheticScene]:
    files = sorted(Path(scene_dir).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no scene files in {scene_dir}")
    return {f.stem: load_scene(f) for f in files}


def sphere_poses(seed: int, name: str, count: int, radius: float = 3.5,
                 elevation=(0.35, 0.7), purpose: str = "poses") -> list[Pose]:
    """Fixed cameras on a sphere around the origin, looking at it."""
    rng = np.random.default_rng(derive_seed(seed, f"{purpose}:{name}"))
    az = rng.uniform(0, 2 * np.pi, size=count)
    el = rng.uniform(elevation[0], elevation[1], size=count)
    return [orbit_pose(a, e, radius) for a, e in zip(az, el)]


def orbit(count: int, radius: float = 3.5, elevation: float = 0.5, start: float = 0.0,
          sweep: float = 2 * np.pi) -> list[Pose]:
    """Evenly spaced cameras along a horizontal circle."""
    return [orbit_pose(start + sweep * k / count, elevation, radius) for k in range(count)]


def in_train_split(seed: int, name: str, fraction: float = 0.8) -> bool:
    return derive_seed(seed, f"split:{name}") % 1000 < int(round(fraction * 1000))


@dataclass(frozen=True)
class View:
    scene_id: str
    scene: SyntheticScene
    pose: Pose
    pose_index: int


def make_views(scenes: dict[str, SyntheticScene], poses_per_scene: int, seed: int,
               radius: float = 3.5, purpose: str = "poses") -> list[View]:
    views = []
    for name in sorted(scenes):
        for k, pose in enumerate(sphere_poses(seed, name, poses_per_scene, radius, purpose=purpose)):
            views.append(View(name, scenes[name], pose, k))
    return views
