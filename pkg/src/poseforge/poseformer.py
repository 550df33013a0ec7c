"""Multi-scale fusion transformer regressing camera pose from backbone features.

Processing runs coarse to fine.  At each scale the projected feature map is
flattened to tokens and attended over; the pre-softmax attention logits of the
previous (coarser) scale are bilinearly resized on both their query and key
grids and blended in with two learned scalars before the softmax:

    fused = w_own * logits + w_prev * resize(prev_logits)

The blend weights start at (1, 0) so an untrained model reduces exactly to
independent single-scale attention.  The raw (un-blended) logits are what a
scale passes on, and they are also returned for export.

Alongside the attention path, each scale's output map is upsampled
(bilinear x2 -> 3x3 conv -> batchnorm -> relu), offset by a learned multiple
of a fixed sinusoidal 2-D position table, and added to the next scale's
output.  After the finest scale, global average pooling and a linear expansion
to a 1280-wide shared vector feed two small MLP heads: translation (3) and
raw quaternion (4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MultiScaleFeatures
from .errors import ConfigError
from .nn import BatchNorm2d, Conv3x3, Linear, Module


@dataclass
class PoseFormerConfig:
    d_model: int = 256
    heads: int = 1
    shared_dim: int = 1280
    head_widths: tuple[int, int] = (512, 128)
    ffn_hidden: int = 0  # 0 disables the optional pre-norm FFN sublayer

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for the split position encoding, got {self.d_model}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")


@dataclass
class PoseEstimate:
    x: Tensor  # (3,) translation
    q_raw: Tensor  # (4,) unnormalised quaternion, scalar-first


@dataclass
class AttentionMaps:
    """Raw pre-softmax logits per scale (deepest first), one tensor per head."""

    scales: list[list[Tensor]] = field(default_factory=list)
    grids: list[tuple[int, int]] = field(default_factory=list)

    def export(self) -> list[np.ndarray]:
        """Head-averaged maps as plain arrays, deepest scale first."""
        return [np.mean([h.data for h in heads], axis=0) for heads in self.scales]


_PE_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def position_encoding_table(d: int, h: int, w: int) -> np.ndarray:
    """Fixed sinusoidal table of shape (d, h, w) for a 2-D grid.

    The first d/2 channels encode the row index, the rest the column index.
    Within each half, channel c uses sin for even c and cos for odd c, with
    wavelength 10000^(2c/d).
    """
    if d % 2 != 0:
        raise ConfigError(f"position encoding needs an even channel count, got {d}")
    key = (d, h, w)
    if key not in _PE_CACHE:
        half = d // 2
        c = np.arange(half, dtype=np.float64)
        denom = np.power(10000.0, 2.0 * c / d)  # (half,)
        rows = np.arange(h, dtype=np.float64)[None, :, None] / denom[:, None, None]
        cols = np.arange(w, dtype=np.float64)[None, None, :] / denom[:, None, None]
        table = np.empty((d, h, w), dtype=np.float64)
        even = (np.arange(half) % 2 == 0)[:, None, None]
        table[:half] = np.where(even, np.sin(rows), np.cos(rows))
        table[half:] = np.where(even, np.sin(cols), np.cos(cols))
        _PE_CACHE[key] = table
    return _PE_CACHE[key]


def to_tokens(fmap: Tensor) -> Tensor:
    d, h, w = fmap.shape
    return fmap.reshape((d, h * w)).transpose()


def to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    h, w = grid
    return tokens.transpose().reshape((tokens.shape[1], h, w))


def resize_attention_logits(a: Tensor, grid_from: tuple[int, int], grid_to: tuple[int, int]) -> Tensor:
    """Resize an (N_p, N_p) attention-logit map between token grids.

    The map is viewed as a 4-D grid (H_p, W_p, H_p, W_p) and bilinearly
    interpolated on the key grid and then the query grid; separability of the
    interpolation makes the two-pass form equal to the full 4-D resize.
    """
    hp, wp = grid_from
    h, w = grid_to
    n_prev, n_new = hp * wp, h * w
    keys = ad.bilinear_resize(a.reshape((n_prev, hp, wp)), h, w).reshape((n_prev, n_new))
    queries = ad.bilinear_resize(keys.transpose().reshape((n_new, hp, wp)), h, w).reshape((n_new, n_new))
    return queries.transpose()


class FeedForward(Module):
    """Optional pre-norm residual FFN applied to the token matrix."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.gain = ad.param(np.ones(d))
        self.shift = ad.param(np.zeros(d))
        self.lin1 = Linear(d, hidden, rng)
        self.lin2 = Linear(hidden, d, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        mu = tokens.mean(axis=1, keepdims=True)
        centred = tokens - mu
        var = (centred * centred).mean(axis=1, keepdims=True)
        normed = centred / ad.sqrt(var + 1e-5)
        normed = normed * self.gain.reshape((1, -1)) + self.shift.reshape((1, -1))
        return tokens + self.lin2(ad.relu(self.lin1(normed)))


class CrossScaleAttention(Module):
    """Single-scale self-attention with blending of the coarser scale's logits."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = ad.param(he_init_linear(rng, d, d))
        self.bq = ad.param(np.zeros(d))
        self.wk = ad.param(he_init_linear(rng, d, d))
        self.bk = ad.param(np.zeros(d))
        self.wv = ad.param(he_init_linear(rng, d, d))
        self.bv = ad.param(np.zeros(d))
        # (own, previous) logit blend; identity at init.
        self.w_own = ad.param(np.asarray(1.0))
        self.w_prev = ad.param(np.asarray(0.0))

    def __call__(
        self,
        tokens: Tensor,
        prev_logits: list[Tensor] | None,
        grid_from: tuple[int, int] | None,
        grid: tuple[int, int],
    ) -> tuple[Tensor, list[Tensor]]:
        q = ad.matmul(tokens, self.wq) + self.bq.reshape((1, -1))
        k = ad.matmul(tokens, self.wk) + self.bk.reshape((1, -1))
        v = ad.matmul(tokens, self.wv) + self.bv.reshape((1, -1))
        scale = float(np.sqrt(self.dh))
        outs, raws = [], []
        for h in range(self.heads):
            sl = slice(h * self.dh, (h + 1) * self.dh)
            raw = ad.matmul(q[:, sl], k[:, sl].transpose()) / scale
            fused = self.w_own * raw
            if prev_logits is not None:
                fused = fused + self.w_prev * resize_attention_logits(prev_logits[h], grid_from, grid)
            outs.append(ad.matmul(ad.softmax_rows(fused), v[:, sl]))
            raws.append(raw)
        out = outs[0] if self.heads == 1 else ad.concat(outs, axis=1)
        return out, raws


def he_init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class UpsampleBlock(Module):
    """bilinear x2 -> 3x3 conv -> batchnorm -> relu."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv3x3(d, d, stride=1, rng=rng, bias=False)
        self.bn = BatchNorm2d(d)

    def __call__(self, fmap: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(ad.bilinear_upsample2x(fmap))))


class MLPHead(Module):
    def __init__(self, dims: tuple[int, ...], rng: np.random.Generator):
        super().__init__()
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layer = Linear(a, b, rng)
            setattr(self, f"lin{i}", layer)
            self.layers.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class PoseFormer(Module):
    def __init__(self, cfg: PoseFormerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.attn3 = CrossScaleAttention(d, cfg.heads, rng)
        self.attn2 = CrossScaleAttention(d, cfg.heads, rng)
        self.attn1 = CrossScaleAttention(d, cfg.heads, rng)
        self.up2 = UpsampleBlock(d, rng)
        self.up1 = UpsampleBlock(d, rng)
        # Learned scale on the position table of each upsampled map.
        self.alpha2 = ad.param(np.asarray(1.0))
        self.alpha1 = ad.param(np.asarray(1.0))
        if cfg.ffn_hidden > 0:
            self.ffn3 = FeedForward(d, cfg.ffn_hidden, rng)
            self.ffn2 = FeedForward(d, cfg.ffn_hidden, rng)
            self.ffn1 = FeedForward(d, cfg.ffn_hidden, rng)
        self.expand = Linear(d, cfg.shared_dim, rng)
        w1, w2 = cfg.head_widths
        self.head_x = MLPHead((cfg.shared_dim, w1, w2, 3), rng)
        self.head_q = MLPHead((cfg.shared_dim, w1, w2, 4), rng)

    def _maybe_ffn(self, scale: int, tokens: Tensor) -> Tensor:
        if self.cfg.ffn_hidden > 0:
            return getattr(self, f"ffn{scale}")(tokens)
        return tokens

    def __call__(self, features: MultiScaleFeatures) -> tuple[PoseEstimate, AttentionMaps]:
        d = self.cfg.d_model
        if features.f1.shape[0] != d:
            raise ConfigError(f"feature width {features.f1.shape[0]} does not match d_model {d}")
        grid3 = features.f3.shape[1:]
        grid2 = features.f2.shape[1:]
        grid1 = features.f1.shape[1:]

        t3 = to_tokens(features.f3)
        out3, maps3 = self.attn3(t3, None, None, grid3)
        out3 = self._maybe_ffn(3, out3)
        s3 = to_map(out3, grid3)

        carried2 = self.up2(s3) + self.alpha2 * ad.constant(position_encoding_table(d, *grid2))
        t2 = to_tokens(features.f2)
        out2, maps2 = self.attn2(t2, maps3, grid3, grid2)
        out2 = self._maybe_ffn(2, out2)
        s2 = to_map(out2, grid2) + carried2

        carried1 = self.up1(s2) + self.alpha1 * ad.constant(position_encoding_table(d, *grid1))
        t1 = to_tokens(features.f1)
        out1, maps1 = self.attn1(t1, maps2, grid2, grid1)
        out1 = self._maybe_ffn(1, out1)
        s1 = to_map(out1, grid1) + carried1

        pooled = s1.mean(axis=(1, 2)).reshape((1, d))
        shared = ad.relu(self.expand(pooled))
        x = self.head_x(shared).reshape((3,))
        q_raw = self.head_q(shared).reshape((4,))
        maps = AttentionMaps(scales=[maps3, maps2, maps1], grids=[grid3, grid2, grid1])
        return PoseEstimate(x=x, q_raw=q_raw), maps


class PoseRegressor(Module):
    """Backbone + fusion transformer glued into a single trainable model."""

    def __init__(self, backbone, former: PoseFormer):
        super().__init__()
        self.backbone = backbone
        self.former = former

    def __call__(self, image: Tensor) -> tuple[PoseEstimate, AttentionMaps]:
        return self.former(self.backbone.extract(image))

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": p for k, p in self.backbone.trainable_parameters().items()}
        out.update({f"former.{k}": p for k, p in self.former.parameters().items()})
        return out
