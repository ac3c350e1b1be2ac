"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor, grad

DEFAULT_STEP = 1e-5
# Denominator floor: gradients smaller than this are compared absolutely.
REL_FLOOR = 1e-6
# One-sided slopes of a smooth function differ by about step * |f''|.
KINK_TOLERANCE = 1e-3
# A retry step must keep the rounding error of (f(x+h) - f(x-h)) / 2h below
# this fraction of the slope it measures.
ROUNDOFF_BUDGET = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _central(fn: Callable[[], Tensor], flat: np.ndarray, i: int, step: float) -> tuple[float, float]:
    old = flat[i]
    flat[i] = old + step
    hi = fn().item()
    flat[i] = old - step
    lo = fn().item()
    flat[i] = old
    return hi, lo


def numeric_gradient(
    fn: Callable[[], Tensor],
    param: Tensor,
    step: float = DEFAULT_STEP,
    indices: Optional[np.ndarray] = None,
    kink_retries: int = 0,
) -> np.ndarray:
    """d fn() / d param by central differences, in place on ``param.data``.

    ``indices`` (flat positions) restricts the probe to a subset; the other
    entries of the result are NaN. With ``kink_retries`` > 0, a probe whose
    left and right slopes disagree (the interval straddles a ReLU or max-pool
    switch, where the function is not differentiable at that scale) is
    repeated with the step divided by 100, up to that many times. A retry is
    skipped when rounding error at the smaller step would swamp the slope.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    center = fn().item() if kink_retries else 0.0
    for i in probe:
        h = step
        hi, lo = _central(fn, flat, i, h)
        for _ in range(kink_retries):
            right, left = (hi - center) / h, (center - lo) / h
            slope = max(abs(right), abs(left))
            if abs(right - left) <= KINK_TOLERANCE * max(slope, REL_FLOOR):
                break
            if np.finfo(np.float64).eps * max(abs(center), 1.0) / (h / 100.0) > ROUNDOFF_BUDGET * slope:
                break
            h /= 100.0
            hi, lo = _central(fn, flat, i, h)
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(param.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    max_probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    kink_retries: int = 0,
) -> dict[str, float]:
    """Relative error of backprop against finite differences for every parameter.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    Parameters should hold float64 data. With ``max_probes`` only that many
    randomly chosen entries per parameter are probed. ``kink_retries`` is
    passed to :func:`numeric_gradient`.
    """
    analytic = grad(fn(), params)
    errors = {}
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64 data, got {p.data.dtype}")
        idx = None
        if max_probes is not None and p.size > max_probes:
            idx = (rng or np.random.default_rng(0)).choice(p.size, size=max_probes, replace=False)
        num = numeric_gradient(fn, p, step, idx, kink_retries)
        sel = ~np.isnan(num)
        errors[name] = relative_error(analytic[name][sel], num[sel])
    return errors
