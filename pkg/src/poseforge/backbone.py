"""Three-scale convolutional feature extractor.

Produces feature maps at 1/8, 1/16 and 1/32 of the input resolution with
32, 96 and 1280 channels respectively, each projected by a 1x1 convolution to
a shared width so the fusion stages see a uniform interface.

The stack is deliberately plain: stride-2 3x3 conv + batchnorm + relu6 blocks,
with the 1280-wide stage produced by a final 1x1 expansion so the widest
convolutions stay cheap.  Only the stride/width contract matters downstream;
no pretrained weights are involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import BatchNorm2d, Conv1x1, Conv3x3, Module

FREEZE_POLICIES = ("full_train", "freeze_all_but_bn")


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (32, 96, 1280)
    proj_dim: int = 256
    blocks_per_stage: int = 2


def nearest_multiple_of_32(n: int) -> tuple[int, int]:
    lower = max(32, (n // 32) * 32)
    upper = lower if n % 32 == 0 else lower + 32
    return lower, upper


def validate_input_size(h: int, w: int) -> None:
    for name, n in (("height", h), ("width", w)):
        if n < 32 or n % 32 != 0:
            lo, hi = nearest_multiple_of_32(n)
            choices = f"{lo}" if lo == hi else f"{lo} or {hi}"
            raise ConfigError(f"input {name} {n} must be a multiple of 32 and >= 32 (nearest valid: {choices})")


class ConvBlock(Module):
    """conv3x3 -> batchnorm -> relu6 (conv bias omitted, BN provides the shift)."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv3x3(cin, cout, stride, rng, bias=False)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu6(self.bn(self.conv(x)))


class ExpandBlock(Module):
    """1x1 expansion -> batchnorm -> relu6 used to reach the widest stage."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv1x1(cin, cout, rng, bias=False)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu6(self.bn(self.conv(x)))


class Stage(Module):
    """One stride-2 block followed by stride-1 blocks (blocks_per_stage total)."""

    def __init__(self, cin: int, cout: int, blocks: int, rng: np.random.Generator):
        super().__init__()
        self.block0 = ConvBlock(cin, cout, stride=2, rng=rng)
        self.extra = []
        for i in range(blocks - 1):
            block = ConvBlock(cout, cout, stride=1, rng=rng)
            setattr(self, f"block{i + 1}", block)
            self.extra.append(block)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.block0(x)
        for block in self.extra:
            x = block(x)
        return x


@dataclass
class MultiScaleFeatures:
    f1: Tensor  # (proj_dim, H/8,  W/8)
    f2: Tensor  # (proj_dim, H/16, W/16)
    f3: Tensor  # (proj_dim, H/32, W/32)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.stage_channels
        # Two fixed stride-2 blocks bring the input to 1/4 before the stages.
        self.stem0 = ConvBlock(cfg.in_channels, c1, stride=2, rng=rng)
        self.stem1 = ConvBlock(c1, c1, stride=2, rng=rng)
        self.stage1 = Stage(c1, c1, cfg.blocks_per_stage, rng)
        self.stage2 = Stage(c1, c2, cfg.blocks_per_stage, rng)
        # The widest stage runs its spatial convolutions at the second stage's
        # width and expands to c3 with a 1x1 at the end.
        self.stage3 = Stage(c2, c2, cfg.blocks_per_stage, rng)
        self.expand3 = ExpandBlock(c2, c3, rng)
        self.proj1 = Conv1x1(c1, cfg.proj_dim, rng, bias=True)
        self.proj2 = Conv1x1(c2, cfg.proj_dim, rng, bias=True)
        self.proj3 = Conv1x1(c3, cfg.proj_dim, rng, bias=True)
        self.freeze_policy = "full_train"

    def set_frozen(self, policy: str) -> None:
        if policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")
        object.__setattr__(self, "freeze_policy", policy)

    def _bn_param_ids(self) -> set[int]:
        ids: set[int] = set()

        def walk(module: Module):
            if isinstance(module, BatchNorm2d):
                ids.add(id(module.gamma))
                ids.add(id(module.beta))
            for child in module._children.values():
                walk(child)

        walk(self)
        return ids

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = self.parameters()
        if self.freeze_policy == "full_train":
            return params
        bn_ids = self._bn_param_ids()
        return {name: p for name, p in params.items() if id(p) in bn_ids}

    def extract(self, image: Tensor) -> MultiScaleFeatures:
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise ConfigError(f"expected ({self.cfg.in_channels}, H, W) image, got shape {image.shape}")
        validate_input_size(image.shape[1], image.shape[2])
        x = self.stem1(self.stem0(image))
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.expand3(self.stage3(s2))
        return MultiScaleFeatures(f1=self.proj1(s1), f2=self.proj2(s2), f3=self.proj3(s3))
