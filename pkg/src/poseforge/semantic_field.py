"""Coordinate MLP for semantics/density/colour plus volumetric ray rendering.

The field maps a 3-D position to a non-negative density, per-class semantic
logits and an RGB colour.  There is deliberately no view-direction input
anywhere: semantics and appearance depend on position only, which is what lets
rendered label maps supervise camera pose.

Rendering integrates along stratified ray samples with the usual
transmittance weighting:

    w_i = T_i * (1 - exp(-sigma_i * delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)

so the weights plus the terminal transmittance telescope to one exactly.
Sample jitter is on during training and replaced by bin midpoints in eval
mode, keeping evaluation renders reproducible.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .geometry import Camera, camera_pixel_grid, pixel_directions, quaternion_to_matrix, rotate_directions
from .nn import Linear, Module

THREADS_ENV = "POSEFORGE_THREADS"
RENDER_CHUNK = 2048  # rays per chunk; fixed so chunking never alters results


@dataclass
class SemanticFieldConfig:
    n_classes: int
    l_pe: int = 6
    width: int = 128
    depth: int = 4
    near: float = 0.1
    far: float = 10.0
    n_samples: int = 64

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.depth < 1 or self.width < 1 or self.l_pe < 0:
            raise ConfigError("field depth/width must be positive and l_pe non-negative")


def frequency_encoding(x: Tensor, l_pe: int) -> Tensor:
    """[sin(2^k pi x), cos(2^k pi x)] for k < l_pe, with raw x appended."""
    feats = []
    for k in range(l_pe):
        scaled = x * float(2.0**k * np.pi)
        feats.append(ad.sin(scaled))
        feats.append(ad.cos(scaled))
    feats.append(x)
    return ad.concat(feats, axis=1)


class SemanticField(Module):
    def __init__(self, cfg: SemanticFieldConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        in_dim = 6 * cfg.l_pe + 3
        self.trunk = []
        dims = [in_dim] + [cfg.width] * cfg.depth
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layer = Linear(a, b, rng)
            setattr(self, f"trunk{i}", layer)
            self.trunk.append(layer)
        self.head_sigma = Linear(cfg.width, 1, rng)
        self.head_sem = Linear(cfg.width, cfg.n_classes, rng)
        self.head_rgb = Linear(cfg.width, 3, rng)

    def query(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Field outputs for positions (N, 3): sigma (N,), logits (N, C), rgb (N, 3)."""
        h = frequency_encoding(x, self.cfg.l_pe)
        for layer in self.trunk:
            h = ad.relu(layer(h))
        sigma = ad.softplus(self.head_sigma(h)).reshape((-1,))
        logits = self.head_sem(h)
        rgb = ad.sigmoid(self.head_rgb(h))
        return sigma, logits, rgb


def field_eval(field: SemanticField, x) -> tuple[Tensor, Tensor, Tensor]:
    """Single-position convenience wrapper around :meth:`SemanticField.query`."""
    x = x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float64).reshape(1, 3))
    sigma, logits, rgb = field.query(x)
    return sigma[0:1], logits[0, :], rgb[0, :]


@dataclass
class RayBatch:
    origins: Tensor  # (R, 3)
    directions: Tensor  # (R, 3), unit
    t_near: float
    t_far: float
    n_samples: int

    def __post_init__(self):
        if not isinstance(self.origins, Tensor):
            self.origins = ad.constant(np.asarray(self.origins, dtype=np.float64))
        if not isinstance(self.directions, Tensor):
            self.directions = ad.constant(np.asarray(self.directions, dtype=np.float64))
        if self.origins.ndim != 2 or self.origins.shape[1] != 3 or self.origins.shape != self.directions.shape:
            raise DataError(f"ray batch shapes {self.origins.shape} / {self.directions.shape} must both be (R, 3)")
        norms = np.linalg.norm(self.directions.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            worst = float(np.abs(norms - 1.0).max())
            raise DataError(f"ray directions must be unit length within 1e-9 (worst deviation {worst:.3e})")
        if not (self.t_far > self.t_near > 0):
            raise DataError(f"require t_far > t_near > 0, got near={self.t_near}, far={self.t_far}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class RenderResult:
    semantics: Tensor  # (R, C)
    rgb: Tensor  # (R, 3)
    weights: Tensor  # (R, N)
    t_end: Tensor  # (R,)


def sample_depths(
    t_near: float, t_far: float, n: int, n_rays: int, rng: np.random.Generator | None
) -> np.ndarray:
    """Stratified depths: one sample per equal bin, jittered when rng is given."""
    edges = t_near + (t_far - t_near) * np.arange(n, dtype=np.float64) / n
    width = (t_far - t_near) / n
    if rng is None:
        return edges + 0.5 * width
    return edges[None, :] + width * rng.uniform(size=(n_rays, n))


def render_rays(
    rays: RayBatch,
    field,
    rng: np.random.Generator | None = None,
    t_vals: np.ndarray | None = None,
) -> RenderResult:
    """Integrate the field along each ray of the batch.

    ``rng`` enables per-ray stratified jitter (training); without it the
    deterministic bin midpoints are used.  ``t_vals`` overrides sampling
    entirely (shape (N,) or (R, N)), which the oracle tests rely on.
    """
    r = len(rays)
    n = rays.n_samples
    if t_vals is None:
        t_vals = sample_depths(rays.t_near, rays.t_far, n, r, rng)
    t_vals = np.asarray(t_vals, dtype=np.float64)
    if t_vals.shape not in ((n,), (r, n)):
        raise ConfigError(f"t_vals shape {t_vals.shape} must be ({n},) or ({r}, {n})")

    last = np.full(t_vals.shape[:-1] + (1,), (rays.t_far - rays.t_near) / n)
    deltas = np.concatenate([np.diff(t_vals, axis=-1), last], axis=-1)  # (N,) or (R, N)

    t3 = t_vals.reshape((1, n, 1)) if t_vals.ndim == 1 else t_vals.reshape((r, n, 1))
    origins = rays.origins.reshape((r, 1, 3))
    dirs = rays.directions.reshape((r, 1, 3))
    positions = (origins + dirs * ad.constant(t3)).reshape((r * n, 3))

    sigma, logits, rgb = field.query(positions)
    c = logits.shape[1]
    sigma = sigma.reshape((r, n))

    sd = sigma * ad.constant(np.broadcast_to(deltas, (r, n)).copy() if deltas.ndim == 1 else deltas)
    inclusive = ad.cumsum(sd, axis=1)
    transmittance = ad.exp(-(inclusive - sd))
    alpha = 1.0 - ad.exp(-sd)
    weights = transmittance * alpha  # (R, N)

    w3 = weights.reshape((r, n, 1))
    semantics = (w3 * logits.reshape((r, n, c))).sum(axis=1)
    rgb_out = (w3 * rgb.reshape((r, n, 3))).sum(axis=1)
    t_end = ad.exp(-inclusive[:, -1])
    return RenderResult(semantics=semantics, rgb=rgb_out, weights=weights, t_end=t_end)


def generate_rays(camera: Camera, stride: int = 1, n_samples: int = 64, near: float = 0.1, far: float = 10.0) -> RayBatch:
    """Pinhole rays through the (optionally strided) pixel grid, in world frame."""
    us, vs = camera_pixel_grid(camera.width, camera.height, stride)
    dirs_cam = pixel_directions(camera, us, vs)
    rot = quaternion_to_matrix(camera.pose.q)
    dirs_world = dirs_cam @ rot.T
    origins = np.broadcast_to(camera.pose.x, dirs_world.shape).copy()
    return RayBatch(origins=origins, directions=dirs_world, t_near=near, t_far=far, n_samples=n_samples)


def rays_for_pixels(
    camera: Camera, us: np.ndarray, vs: np.ndarray, n_samples: int, near: float, far: float
) -> RayBatch:
    """World-frame rays through an arbitrary list of pixel coordinates."""
    dirs_cam = pixel_directions(camera, np.asarray(us, dtype=np.float64), np.asarray(vs, dtype=np.float64))
    rot = quaternion_to_matrix(camera.pose.q)
    dirs_world = dirs_cam @ rot.T
    origins = np.broadcast_to(camera.pose.x, dirs_world.shape).copy()
    return RayBatch(origins=origins, directions=dirs_world, t_near=near, t_far=far, n_samples=n_samples)


def rays_for_pose_tensor(
    x: Tensor,
    q_unit: Tensor,
    camera: Camera,
    stride: int,
    n_samples: int,
    near: float,
    far: float,
) -> RayBatch:
    """Rays whose origins/directions carry gradients back into a pose tensor."""
    us, vs = camera_pixel_grid(camera.width, camera.height, stride)
    dirs_cam = pixel_directions(camera, us, vs)
    dirs_world = rotate_directions(q_unit, dirs_cam)
    origins = ad.constant(np.zeros((len(us), 3))) + x.reshape((1, 3))
    return RayBatch(origins=origins, directions=dirs_world, t_near=near, t_far=far, n_samples=n_samples)


def _render_grid_shape(camera: Camera, stride: int) -> tuple[int, int]:
    return len(range(0, camera.height, stride)), len(range(0, camera.width, stride))


def render_image(
    camera: Camera,
    field: SemanticField,
    stride: int = 1,
    n_samples: int | None = None,
    near: float | None = None,
    far: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic whole-image render: (C, H', W') logits and (3, H', W') rgb.

    Ray chunks may be evaluated by a small thread pool (POSEFORGE_THREADS caps
    it); parameters are read-only here so the chunks are independent, and the
    fixed chunk size keeps results identical regardless of thread count.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    cfg = field.cfg
    n_samples = cfg.n_samples if n_samples is None else n_samples
    near = cfg.near if near is None else near
    far = cfg.far if far is None else far
    rays = generate_rays(camera, stride, n_samples, near, far)
    h, w = _render_grid_shape(camera, stride)
    c = cfg.n_classes

    o = rays.origins.data
    d = rays.directions.data
    total = o.shape[0]
    chunks = [(i, min(i + RENDER_CHUNK, total)) for i in range(0, total, RENDER_CHUNK)]

    logits = np.empty((total, c))
    rgb = np.empty((total, 3))

    def work(span):
        lo, hi = span
        batch = RayBatch(o[lo:hi], d[lo:hi], near, far, n_samples)
        with ad.no_grad():
            res = render_rays(batch, field, rng=None)
        logits[lo:hi] = res.semantics.data
        rgb[lo:hi] = res.rgb.data

    n_threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if n_threads == 1 or len(chunks) == 1:
        for span in chunks:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, chunks))

    return logits.reshape(h, w, c).transpose(2, 0, 1), rgb.reshape(h, w, 3).transpose(2, 0, 1)
