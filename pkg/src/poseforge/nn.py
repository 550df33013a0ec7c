"""Minimal layer/module abstractions over the autodiff tensors.

``Module`` keeps named parameters and child modules in insertion order, which
makes parameter traversal (and therefore optimisation and checkpointing)
deterministic.  Assigning a trainable ``Tensor`` or another ``Module`` as an
attribute registers it automatically; non-trainable state (e.g. batch-norm
running statistics) goes through :meth:`Module.register_buffer`.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, StateError


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        object.__setattr__(self, name, self._buffers[name])

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise StateError(f"unknown buffer {name!r}")
        self.register_buffer(name, value)

    # -- traversal ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[name] = p
        for cname, child in self._children.items():
            for name, p in child.parameters().items():
                out[f"{cname}.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, b in self._buffers.items():
            out[name] = b
        for cname, child in self._children.items():
            for name, b in child.buffers().items():
                out[f"{cname}.{name}"] = b
        return out

    def state(self) -> dict[str, np.ndarray]:
        blocks = {f"param.{k}": v.data for k, v in self.parameters().items()}
        blocks.update({f"buffer.{k}": v for k, v in self.buffers().items()})
        return blocks

    def load_state(self, blocks: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        loaded: set[str] = set()
        for key, value in blocks.items():
            kind, _, name = key.partition(".")
            if kind == "param":
                if name not in params:
                    raise StateError(f"checkpoint contains unknown parameter {name!r}")
                if params[name].data.shape != value.shape:
                    raise DimensionError(
                        f"parameter {name!r}: checkpoint shape {value.shape} vs model shape {params[name].data.shape}"
                    )
                params[name].data = np.array(value, dtype=np.float64)
                loaded.add(name)
            elif kind == "buffer":
                self._set_buffer_by_path(name, value)
        missing = sorted(set(params) - loaded)
        if missing:
            raise StateError(f"checkpoint is missing parameters: {', '.join(missing[:5])}")

    def _set_buffer_by_path(self, path: str, value: np.ndarray) -> None:
        mod: Module = self
        parts = path.split(".")
        for part in parts[:-1]:
            mod = mod._children[part]
        mod.set_buffer(parts[-1], value)

    # -- mode switches -------------------------------------------------------

    def train_mode(self) -> None:
        object.__setattr__(self, "training", True)
        for child in self._children.values():
            child.train_mode()

    def eval_mode(self) -> None:
        object.__setattr__(self, "training", False)
        for child in self._children.values():
            child.eval_mode()


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, init_scale: float | None = None):
        super().__init__()
        if init_scale is None:
            w = he_normal(rng, (in_features, out_features), in_features)
        else:
            w = rng.normal(0.0, init_scale, size=(in_features, out_features))
        self.w = ad.param(w)
        self.b = ad.param(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b.reshape((1, -1))


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.w = ad.param(he_normal(rng, (cout, cin, 3, 3), cin * 9))
        self.b = ad.param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3x3(x, self.w, self.b, stride=self.stride)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = ad.param(he_normal(rng, (cout, cin), cin))
        self.b = ad.param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1x1(x, self.w, self.b)


class BatchNorm2d(Module):
    """Batch normalisation over the spatial axes of a (C, H, W) tensor.

    Running statistics follow an exponential moving average with the given
    momentum and update on every training-mode forward pass, independently of
    whether the affine parameters are being optimised.  Eval mode before the
    first training pass raises a state error because no statistics exist yet.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = ad.param(np.ones(channels))
        self.beta = ad.param(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("tracked", np.asarray(0.0))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            out, mean, var = ad.batchnorm(x, self.gamma, self.beta, None, None, training=True, eps=self.eps)
            m = self.momentum
            self.register_buffer("running_mean", (1.0 - m) * self.running_mean + m * mean)
            self.register_buffer("running_var", (1.0 - m) * self.running_var + m * var)
            self.register_buffer("tracked", np.asarray(1.0))
            return out
        if not bool(self.tracked):
            raise StateError("batchnorm: eval mode requested before any statistics were accumulated")
        out, _, _ = ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training=False, eps=self.eps
        )
        return out
