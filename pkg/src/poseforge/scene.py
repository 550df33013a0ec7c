"""Procedural voxel scenes and an exact ray-marcher to render them.

The marcher is the ground truth for everything downstream: it produces the
images and label maps the networks train on, and it is entirely independent of
the neural field, so renders from the two can be cross-checked.

Scenes are axis-aligned voxel grids of class ids (0 = empty).  Colours are
flat per class, modulated by a deterministic per-voxel brightness so images
carry view-independent texture (a pure function of position, hence learnable
by a coordinate MLP, but still informative for pose regression).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .geometry import Camera, Pose, look_at_pose, pixel_directions, quaternion_to_matrix

VIEW_HIT_FRACTION = 0.5
VIEW_RETRIES = 100


@dataclass
class SyntheticScene:
    grid: np.ndarray  # (n, n, n) uint8 class ids, 0 = empty
    class_colors: np.ndarray  # (C, 3) floats in [0, 1]; row 0 is background
    lo: np.ndarray  # (3,) world-space minimum corner of the grid
    voxel_size: float
    cameras: list[Camera]
    near: float
    far: float
    seed: int

    @property
    def n_classes(self) -> int:
        return self.class_colors.shape[0]


def _voxel_texture(iv: np.ndarray) -> np.ndarray:
    """Deterministic per-voxel brightness in [0.75, 1.0] from hashed indices."""
    h = (iv[..., 0] * 73856093) ^ (iv[..., 1] * 19349663) ^ (iv[..., 2] * 83492791)
    return 0.75 + 0.25 * ((h & 1023) / 1023.0)


def march_rays(
    grid: np.ndarray,
    lo: np.ndarray,
    voxel_size: float,
    origins: np.ndarray,
    dirs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Amanatides-Woo traversal for a batch of rays.

    Returns (hit, class_id, t_hit, voxel_index): ``hit`` marks rays that reach
    an occupied voxel, ``t_hit`` is the distance where they enter it.
    """
    n = np.asarray(grid.shape)
    hi = lo + n * voxel_size
    r = origins.shape[0]

    # Slab test against the grid bounding box.
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.inf)
    t0 = (lo[None, :] - origins) * inv
    t1 = (hi[None, :] - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # Axes the ray is parallel to: inside the slab iff origin within bounds.
    parallel = np.abs(dirs) <= 1e-12
    inside = (origins >= lo[None, :]) & (origins <= hi[None, :])
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    active = t_enter < t_exit

    hit = np.zeros(r, dtype=bool)
    cls = np.zeros(r, dtype=np.int64)
    t_hit = np.full(r, np.inf)
    voxel = np.zeros((r, 3), dtype=np.int64)

    if not active.any():
        return hit, cls, t_hit, voxel

    eps = 1e-9 * max(1.0, float(voxel_size))
    p = origins + (t_enter[:, None] + eps) * dirs
    iv = np.clip(np.floor((p - lo[None, :]) / voxel_size).astype(np.int64), 0, n[None, :] - 1)

    step = np.where(dirs > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(np.abs(dirs) > 1e-12, voxel_size / np.abs(dirs), np.inf)
    next_boundary = lo[None, :] + (iv + (step > 0)) * voxel_size
    with np.errstate(invalid="ignore"):
        t_next = np.where(np.abs(dirs) > 1e-12, (next_boundary - origins) * inv, np.inf)

    t_cur = t_enter.copy()
    max_steps = int(n.sum()) + 3
    idx = np.where(active)[0]
    for _ in range(max_steps):
        if idx.size == 0:
            break
        cells = grid[iv[idx, 0], iv[idx, 1], iv[idx, 2]]
        found = cells > 0
        hit_idx = idx[found]
        hit[hit_idx] = True
        cls[hit_idx] = cells[found]
        t_hit[hit_idx] = t_cur[hit_idx]
        voxel[hit_idx] = iv[hit_idx]
        idx = idx[~found]
        if idx.size == 0:
            break
        axis = np.argmin(t_next[idx], axis=1)
        rows = idx
        t_cur[rows] = t_next[rows, axis]
        iv[rows, axis] += step[rows, axis]
        t_next[rows, axis] += t_delta[rows, axis]
        oob = (iv[rows] < 0).any(axis=1) | (iv[rows] >= n[None, :]).any(axis=1)
        idx = rows[~oob]

    return hit, cls, t_hit, voxel


def render_view(scene: SyntheticScene, camera: Camera, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Exact image (3, H', W') in [0,1] and label map (H', W') for one camera."""
    us = np.arange(0, camera.width, stride)
    vs = np.arange(0, camera.height, stride)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = pixel_directions(camera, uu.reshape(-1), vv.reshape(-1))
    rot = quaternion_to_matrix(camera.pose.q)
    dirs = dirs_cam @ rot.T
    origins = np.broadcast_to(camera.pose.x, dirs.shape)
    hit, cls, _, voxel = march_rays(scene.grid, scene.lo, scene.voxel_size, origins, dirs)

    h, w = len(vs), len(us)
    labels = cls.reshape(h, w).astype(np.uint8)
    colors = scene.class_colors[cls]
    colors = colors * np.where(hit, _voxel_texture(voxel), 1.0)[:, None]
    image = colors.reshape(h, w, 3).transpose(2, 0, 1)
    return image, labels


def _place_boxes(grid: np.ndarray, n_classes: int, rng: np.random.Generator) -> None:
    n = grid.shape[0]
    # A chunky central box guarantees every orbit view sees occupancy.
    half = n // 2
    ext = (3 * n) // 8
    grid[half - ext : half + ext, half - ext : half + ext, half - ext : half + ext] = 1
    for c in range(2, n_classes):
        for _ in range(50):
            trial = grid.copy()
            size = rng.integers(n // 5, n // 2, size=3)
            corner = rng.integers(0, n - size.max(), size=3)
            sl = tuple(slice(int(a), int(a + s)) for a, s in zip(corner, size))
            trial[sl] = c
            if all((trial == k).any() for k in range(1, c + 1)):
                grid[:] = trial
                break
        else:
            raise GenerationError(f"could not place a visible box for class {c}")


def _orbit_camera(
    rng: np.random.Generator,
    index: int,
    n_views: int,
    radius: float,
    width: int,
    height: int,
    fx: float,
) -> Camera:
    azimuth = 2 * np.pi * index / n_views + rng.uniform(-0.15, 0.15)
    elevation = rng.uniform(0.25, 0.55)
    r = radius * rng.uniform(0.95, 1.1)
    position = r * np.array(
        [np.cos(azimuth) * np.cos(elevation), np.sin(azimuth) * np.cos(elevation), np.sin(elevation)]
    )
    target = rng.uniform(-0.08, 0.08, size=3)
    pose = look_at_pose(position, target)
    return Camera(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height, pose=pose)


def generate_scene(
    seed: int,
    n_classes: int,
    n_views: int,
    resolution: tuple[int, int] = (64, 96),
    grid_n: int = 32,
    extent: float = 2.0,
) -> tuple[SyntheticScene, list]:
    """Seeded procedural scene plus rendered samples for every view.

    ``resolution`` is (H, W), both divisible by 32.  Each view is re-jittered
    until at least half its pixels hit occupied voxels; a view that fails 100
    times raises a generation error.
    """
    from .data import Sample  # local import to avoid a cycle

    h, w = resolution
    if h % 32 or w % 32:
        raise ConfigError(f"resolution {resolution} must be divisible by 32")
    if n_classes < 2:
        raise ConfigError(f"need n_classes >= 2 (including empty), got {n_classes}")

    rng = np.random.default_rng(seed)
    grid = np.zeros((grid_n, grid_n, grid_n), dtype=np.uint8)
    _place_boxes(grid, n_classes, rng)

    colors = np.zeros((n_classes, 3))
    for c in range(1, n_classes):
        colors[c] = rng.uniform(0.35, 1.0, size=3)

    lo = np.full(3, -extent / 2.0)
    voxel_size = extent / grid_n
    radius = 0.95 * extent
    fx = 0.75 * w
    half_diag = np.sqrt(3.0) * extent / 2.0
    near = max(0.1, radius * 0.9 - half_diag)
    far = radius * 1.15 + half_diag

    scene = SyntheticScene(
        grid=grid, class_colors=colors, lo=lo, voxel_size=voxel_size, cameras=[], near=near, far=far, seed=seed
    )

    samples = []
    for i in range(n_views):
        for attempt in range(VIEW_RETRIES):
            camera = _orbit_camera(rng, i, n_views, radius, w, h, fx)
            image, labels = render_view(scene, camera)
            if (labels > 0).mean() >= VIEW_HIT_FRACTION:
                break
        else:
            raise GenerationError(
                f"view {i}: could not reach {VIEW_HIT_FRACTION:.0%} ray-hit fraction in {VIEW_RETRIES} retries"
            )
        scene.cameras.append(camera)
        samples.append(Sample(image=image, pose=camera.pose, labels=labels))
    return scene, samples
