"""Finite-difference verification of analytic gradients.

The harness perturbs one input component at a time with a central difference
(step 1e-5, all in float64) and compares against the gradient produced by the
tape.  Relative error uses max(1, |analytic|, |numeric|) as denominator so
near-zero gradients are judged on absolute error.

``run_suites`` drives the registered checks; the CLI ``gradcheck`` command and
the test-suite both call it, so there is a single source of truth for what
"the gradients are right" means.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError

FD_STEP = 1e-5


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, indices: Iterable[tuple], eps: float = FD_STEP) -> dict:
    """Central-difference gradient of ``fn()`` w.r.t. selected entries of ``t``.

    ``fn`` must rebuild its graph from the tensors' current ``.data`` on every
    call; the tensor is restored after probing.
    """
    grads = {}
    flat = t.data.reshape(-1)
    for idx in indices:
        original = flat[idx]
        flat[idx] = original + eps
        hi = float(fn().data)
        flat[idx] = original - eps
        lo = float(fn().data)
        flat[idx] = original
        grads[idx] = (hi - lo) / (2.0 * eps)
    return grads


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def check_function(
    fn: Callable[[], Tensor],
    wrt: dict[str, Tensor],
    eps: float = FD_STEP,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    Checks every component unless ``max_components`` caps the per-tensor count,
    in which case a seeded random subset is probed (used for the end-to-end
    graphs where exhaustive probing would be wasteful).
    """
    ad.zero_grads(wrt.values())
    out = fn()
    if out.size != 1:
        raise NumericError(f"gradient check target must be scalar, got shape {out.shape}")
    ad.backward(out)
    analytic = {}
    for name, t in wrt.items():
        if t.grad is None:
            analytic[name] = np.zeros_like(t.data)
        else:
            analytic[name] = np.array(t.grad, copy=True)

    worst = 0.0
    for name, t in wrt.items():
        n = t.data.size
        if max_components is not None and n > max_components:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(n, size=max_components, replace=False)
        else:
            indices = range(n)
        numeric = numeric_gradient(fn, t, indices, eps)
        aflat = analytic[name].reshape(-1)
        for idx, num in numeric.items():
            worst = max(worst, relative_error(float(aflat[idx]), num))
    return worst


@dataclass
class CheckResult:
    name: str
    module: str
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


_REGISTRY: list[tuple[str, str, float, Callable[[], float]]] = []


def register(name: str, module: str, tolerance: float):
    def deco(fn: Callable[[], float]):
        _REGISTRY.append((name, module, tolerance, fn))
        return fn

    return deco


def run_suites(module: str | None = None) -> list[CheckResult]:
    from . import gradcheck_suites  # noqa: F401  (registers on import)

    results = []
    for name, mod, tol, fn in _REGISTRY:
        if module is not None and mod != module:
            continue
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, mod, err, tol, time.perf_counter() - t0))
    return results


def registered_modules() -> list[str]:
    from . import gradcheck_suites  # noqa: F401

    seen = []
    for _, mod, _, _ in _REGISTRY:
        if mod not in seen:
            seen.append(mod)
    return seen
