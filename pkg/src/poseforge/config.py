"""Flat key=value run configuration.

One schema drives everything: parsing, typing, defaults, and the --help
listing, so the documentation cannot drift from the code.  Unknown keys are
rejected instead of silently ignored, which turns typos into immediate
configuration errors.

Intrinsics (fx, fy, cx, cy) are the only keys without defaults.  Generated
datasets carry intrinsics in their manifest; the config keys exist so real
captures without a manifest can still be described.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ConfigKey:
    name: str
    type: type
    default: object  # None marks "no default; required where used"
    help: str


SCHEMA: list[ConfigKey] = [
    # data and synthetic scene
    ConfigKey("seed", int, 0, "master seed for generation, init, and training"),
    ConfigKey("data_dir", str, "", "dataset directory (manifest.txt, poses.txt, images/, labels/)"),
    ConfigKey("classes", int, 3, "semantic class count including background"),
    ConfigKey("views", int, 20, "views to generate per synthetic scene"),
    ConfigKey("height", int, 64, "input image height (multiple of 32)"),
    ConfigKey("width", int, 96, "input image width (multiple of 32)"),
    ConfigKey("grid_n", int, 32, "voxel grid resolution per axis for synthetic scenes"),
    ConfigKey("extent", float, 2.0, "synthetic scene cube edge length in metres"),
    ConfigKey("split_ratio", float, 0.1, "fraction of views held out for validation"),
    ConfigKey("split_seed", int, 0, "seed for the train/validation permutation"),
    ConfigKey("near", float, 0.1, "near bound fallback when the manifest has none (scene units)"),
    ConfigKey("far", float, 10.0, "far bound fallback when the manifest has none (scene units)"),
    ConfigKey("fx", float, None, "focal length x; required only for datasets without manifest intrinsics"),
    ConfigKey("fy", float, None, "focal length y; required only for datasets without manifest intrinsics"),
    ConfigKey("cx", float, None, "principal point x; required only for datasets without manifest intrinsics"),
    ConfigKey("cy", float, None, "principal point y; required only for datasets without manifest intrinsics"),
    # pose regressor
    ConfigKey("d_model", int, 256, "shared channel width the three scales project to"),
    ConfigKey("heads", int, 1, "attention heads per scale"),
    ConfigKey("ffn_hidden", int, 0, "pre-norm feed-forward hidden width after attention; 0 disables"),
    # semantic field
    ConfigKey("field_pe", int, 6, "frequency bands in the positional encoding"),
    ConfigKey("field_hidden", int, 128, "field MLP hidden width"),
    ConfigKey("field_layers", int, 4, "field MLP hidden layer count"),
    # rendering
    ConfigKey("n_samples", int, 32, "depth samples per ray"),
    ConfigKey("ray_batch", int, 1024, "rays per field-training step"),
    ConfigKey("render_stride", int, 4, "pixel stride for strided semantic renders"),
    # stage 1: pose supervision
    ConfigKey("stage1_epochs", int, 2000, "stage-1 epoch budget"),
    ConfigKey("stage1_lr", float, 1e-4, "stage-1 initial learning rate"),
    ConfigKey("stage1_wd", float, 1e-4, "stage-1 weight decay"),
    ConfigKey("stage1_batch", int, 8, "stage-1 batch size"),
    ConfigKey("early_stop", int, 200, "epochs of validation stagnation before stopping"),
    # stage 2: field fitting
    ConfigKey("stage2_steps", int, 4000, "stage-2 ray-batch steps (one step per epoch)"),
    ConfigKey("stage2_lr", float, 1e-3, "stage-2 initial learning rate"),
    ConfigKey("stage2_ce_weight", float, 0.04, "semantic cross-entropy weight against RGB loss"),
    ConfigKey("stage2_decay", float, 0.1, "total lr multiplier spread exponentially over stage 2"),
    # stage 3: semantic refinement
    ConfigKey("stage3_steps", int, 1000, "stage-3 refinement steps"),
    ConfigKey("stage3_lr", float, 1e-5, "stage-3 learning rate"),
    ConfigKey("stage3_w_ce", float, 0.7, "cross-entropy weight in the semantic consistency loss"),
    ConfigKey("stage3_w_sam", float, 0.3, "spectral-angle weight in the semantic consistency loss"),
]

_BY_NAME = {key.name: key for key in SCHEMA}

PLATEAU_FACTOR = 0.95
PLATEAU_PATIENCE = 50


class RunConfig:
    """Typed view over the flat key=value settings."""

    def __init__(self, overrides: dict[str, object] | None = None):
        self._values = {key.name: key.default for key in SCHEMA}
        if overrides:
            for name, value in overrides.items():
                if name not in _BY_NAME:
                    raise ConfigError(f"unknown config key {name!r} (see --help for the key list)")
                self._values[name] = value

    def __getattr__(self, name: str):
        values = object.__getattribute__(self, "_values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def set(self, name: str, raw: str) -> None:
        key = _BY_NAME.get(name)
        if key is None:
            raise ConfigError(f"unknown config key {name!r} (see --help for the key list)")
        try:
            self._values[name] = key.type(raw)
        except ValueError:
            raise ConfigError(f"config key {name!r} expects {key.type.__name__}, got {raw!r}") from None

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def require(self, *names: str) -> None:
        missing = [n for n in names if self._values.get(n) is None]
        if missing:
            raise ConfigError(f"config keys {missing} are required here and have no default")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected key=value, got {line!r}")
        name, _, value = line.partition("=")
        try:
            cfg.set(name.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source} line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), source=str(path))


def describe_keys() -> str:
    """One line per key for --help output, generated from the schema."""
    lines = []
    for key in SCHEMA:
        default = "(required for real data)" if key.default is None else repr(key.default)
        lines.append(f"  {key.name:<16} {key.type.__name__:<6} default {default}: {key.help}")
    return "\n".join(lines)
