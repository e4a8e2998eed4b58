"""Procedural voxel shapes, silhouette renders and the on-disk dataset.

Shapes are unions of 1-4 primitives described in unit-cube coordinates by a
recipe string such as ``box(0.5,0.5,0.5,0.25,0.25,0.25)+sphere(0.4,0.5,0.6,0.2)``.
A voxel (i, j, k) is occupied when its center ((i+.5)/S, (j+.5)/S, (k+.5)/S)
lies inside some primitive.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.tensor import ContractError
from .formats import read_imgf, read_voxg, write_imgf, write_voxg

SIDES = (8, 16, 32)
MIN_OCCUPANCY = 0.01
MAX_OCCUPANCY = 0.90
MAX_ATTEMPTS = 16
SEED_STRIDE = 100_000


@dataclass
class SyntheticShape:
    voxel: np.ndarray
    recipe: str
    seed: int

    @property
    def occupancy(self) -> float:
        return float(self.voxel.mean())


@dataclass
class ViewRender:
    direction: np.ndarray
    image: np.ndarray


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".") or "0"


def voxelize(recipe: str, side: int) -> np.ndarray:
    """Binary (side, side, side) grid for a recipe string."""
    c = (np.arange(side) + 0.5) / side
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    pts = (x, y, z)
    grid = np.zeros((side, side, side), dtype=bool)
    for term in recipe.split("+"):
        m = re.fullmatch(r"(box|sphere|cyl)\(([^)]*)\)", term)
        if not m:
            raise ContractError(f"bad recipe term {term!r}")
        kind, args = m.group(1), m.group(2).split(",")
        if kind == "box":
            cx, cy, cz, hx, hy, hz = map(float, args)
            grid |= (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy) & (np.abs(z - cz) <= hz)
        elif kind == "sphere":
            cx, cy, cz, r = map(float, args)
            grid |= (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r
        else:
            axis = "xyz".index(args[0])
            cx, cy, cz, r, h = map(float, args[1:])
            center = (cx, cy, cz)
            a, b = [i for i in range(3) if i != axis]
            radial = (pts[a] - center[a]) ** 2 + (pts[b] - center[b]) ** 2
            grid |= (radial <= r * r) & (np.abs(pts[axis] - center[axis]) <= h)
    return grid.astype(np.uint8)


def random_recipe(rng: np.random.Generator) -> str:
    terms = []
    for _ in range(int(rng.integers(1, 5))):
        kind = ("box", "sphere", "cyl")[int(rng.integers(0, 3))]
        center = [_fmt(v) for v in rng.uniform(0.35, 0.65, size=3)]
        if kind == "box":
            half = [_fmt(v) for v in rng.uniform(0.1, 0.3, size=3)]
            terms.append(f"box({','.join(center + half)})")
        elif kind == "sphere":
            terms.append(f"sphere({','.join(center + [_fmt(rng.uniform(0.15, 0.3))])})")
        else:
            axis = "xyz"[int(rng.integers(0, 3))]
            params = center + [_fmt(rng.uniform(0.1, 0.25)), _fmt(rng.uniform(0.15, 0.35))]
            terms.append(f"cyl({axis},{','.join(params)})")
    return "+".join(terms)


def gen_shape(seed: int, side: int) -> SyntheticShape:
    """Deterministic shape for ``seed``; resamples until occupancy is in [1%, 90%]."""
    if side not in SIDES:
        raise ContractError(f"side must be one of {SIDES}, got {side}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        recipe = random_recipe(rng)
        voxel = voxelize(recipe, side)
        if MIN_OCCUPANCY <= voxel.mean() <= MAX_OCCUPANCY:
            return SyntheticShape(voxel=voxel, recipe=recipe, seed=seed)
    raise ContractError(f"seed {seed}: no recipe with occupancy in bounds after {MAX_ATTEMPTS} attempts")


def view_directions() -> np.ndarray:
    """24 unit directions: 12 icosahedron vertices, 6 axes, 6 face diagonals.

    The set is closed under negation.
    """
    phi = (1 + math.sqrt(5)) / 2
    ico = []
    for a in (-1, 1):
        for b in (-phi, phi):
            ico += [(0, a, b), (a, b, 0), (b, 0, a)]
    axes = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    diag = [(1, 1, 0), (-1, -1, 0), (0, 1, 1), (0, -1, -1), (1, 0, 1), (-1, 0, -1)]
    dirs = np.array(ico + axes + diag, dtype=np.float64)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def camera_frame(direction: Sequence[float]) -> np.ndarray:
    """Rotation with columns (right, up, direction); it maps +z onto ``direction``."""
    f = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(f)
    if abs(norm - 1.0) > 1e-9:
        raise ContractError(f"view direction must be unit length, got norm {norm}")
    ref = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(ref, f)
    right /= np.linalg.norm(right)
    up = np.cross(f, right)
    return np.column_stack([right, up, f])


def render_view(voxel: np.ndarray, direction: Sequence[float], size: int) -> np.ndarray:
    """Orthographic max-projection along ``direction``, resized to size x size.

    The grid is resampled (nearest voxel) in the camera frame; pixel (u, v)
    looks along the frame's third axis at offset u along ``right`` and v along
    ``up`` from the grid center.
    """
    s = voxel.shape[0]
    rot = camera_frame(direction)
    c = np.arange(s) + 0.5 - s / 2
    a, b, d = np.meshgrid(c, c, c, indexing="ij")
    local = np.stack([a, b, d], axis=-1)
    world = local @ rot.T + s / 2
    idx = np.floor(world).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < s), axis=-1)
    idx = np.clip(idx, 0, s - 1)
    sampled = voxel[idx[..., 0], idx[..., 1], idx[..., 2]] * inside
    image = sampled.max(axis=2).astype(np.float32)
    pick = (np.arange(size) * s) // size
    return image[np.ix_(pick, pick)]


def render_views(shape, directions: Sequence[Sequence[float]], size: int) -> list[ViewRender]:
    voxel = shape.voxel if isinstance(shape, SyntheticShape) else np.asarray(shape)
    return [ViewRender(direction=np.asarray(d, dtype=np.float64), image=render_view(voxel, d, size)) for d in directions]


@dataclass
class Sample:
    seed: int
    recipe: str
    voxel_path: str
    view_paths: list[str]


def shape_seed(master_seed: int, i: int) -> int:
    return master_seed * SEED_STRIDE + i


def generate_dataset(root, n_shapes: int, side: int, image_size: int, master_seed: int = 0) -> list[Sample]:
    """Write voxels, views and ``manifest.txt`` under ``root``; returns the samples."""
    if side not in SIDES:
        raise ContractError(f"side must be one of {SIDES}, got {side}")
    root = Path(root)
    (root / "voxels").mkdir(parents=True, exist_ok=True)
    (root / "views").mkdir(parents=True, exist_ok=True)
    dirs = view_directions()
    samples = []
    for i in range(n_shapes):
        seed = shape_seed(master_seed, i)
        shape = gen_shape(seed, side)
        vox_rel = f"voxels/{seed}.voxg"
        write_voxg(root / vox_rel, shape.voxel)
        view_rels = []
        for j, view in enumerate(render_views(shape, dirs, image_size)):
            rel = f"views/{seed}_{j:02d}.imgf"
            write_imgf(root / rel, view.image)
            view_rels.append(rel)
        samples.append(Sample(seed, shape.recipe, vox_rel, view_rels))
    lines = [" ".join([str(s.seed), s.recipe, s.voxel_path] + s.view_paths) for s in samples]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return samples


def read_manifest(root) -> list[Sample]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    samples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        samples.append(Sample(int(parts[0]), parts[1], parts[2], parts[3:]))
    return samples


@dataclass
class VoxelDataset:
    seeds: np.ndarray
    voxels: np.ndarray
    views: np.ndarray

    def __len__(self) -> int:
        return len(self.seeds)

    def subset(self, mask: np.ndarray) -> "VoxelDataset":
        return VoxelDataset(self.seeds[mask], self.voxels[mask], self.views[mask])

    def split(self) -> tuple["VoxelDataset", "VoxelDataset"]:
        """(train, held-out): even shape seeds train, odd seeds are held out."""
        even = self.seeds % 2 == 0
        return self.subset(even), self.subset(~even)


def load_dataset(root) -> VoxelDataset:
    root = Path(root)
    samples = read_manifest(root)
    voxels = np.stack([read_voxg(root / s.voxel_path) for s in samples]).astype(np.uint8)
    views = np.stack([np.stack([read_imgf(root / p) for p in s.view_paths]) for s in samples])
    return VoxelDataset(np.array([s.seed for s in samples], dtype=np.int64), voxels, views.astype(np.float32))
