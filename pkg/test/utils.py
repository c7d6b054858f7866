from os import environ
from typing import Callable
from typing import Optional

import numpy as np

FD_STEP = 1e-6


def debug(f: Optional[Callable] = None):
    if "DEBUG" in environ:
        if f:
            f()
        input()


def slow() -> bool:
    return "SLOW" in environ


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, same shape as x"""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        g[i] = (fn(up) - fn(down)) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
