"""Shared array helpers: seeded counter-based streams, reparameterized sampling,
and finite-difference gradient verification.

Dense arrays are plain ``numpy.ndarray`` objects throughout the package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "RngStream",
    "GradReport",
    "seeded_rng",
    "stream_id",
    "reparam_sample",
    "finite_diff_grad",
    "grad_check",
    "check_finite",
    "resolve_dtype",
]

_MASK64 = (1 << 64) - 1


def stream_id(*parts) -> int:
    """Stable 64-bit id for a tuple of labels (str/int), e.g. ``("finetune", "t0")``."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the output depends only on the key and the call
    sequence, never on how many other streams were created before it.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream) & _MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, *parts) -> "RngStream":
        """Independent stream sharing the seed, keyed by ``parts``."""
        return RngStream(self.seed, stream_id(self.stream_id, *parts))

    def normal(self, size=None, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)


def seeded_rng(seed: int, stream: int = 0) -> RngStream:
    return RngStream(seed, stream)


def resolve_dtype(precision) -> np.dtype:
    if precision in ("f64", "float64", np.float64):
        return np.dtype(np.float64)
    if precision in ("f32", "float32", np.float32):
        return np.dtype(np.float32)
    raise ValueError(f"unknown precision {precision!r}; expected 'f32' or 'f64'")


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def reparam_sample(rng: RngStream | None, mu, log_var, eps=None) -> np.ndarray:
    """Draw ``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)``.

    ``eps`` may be injected directly; ``rng`` is then unused.
    """
    mu = np.asarray(mu)
    log_var = np.asarray(log_var)
    if mu.shape != log_var.shape:
        raise ValueError(f"mu shape {mu.shape} does not match log_var shape {log_var.shape}")
    if eps is None:
        eps = rng.normal(mu.shape, dtype=mu.dtype if mu.dtype == np.float32 else np.float64)
    eps = np.asarray(eps)
    if eps.shape != mu.shape:
        raise ValueError(f"eps shape {eps.shape} does not match mu shape {mu.shape}")
    return mu + np.exp(0.5 * log_var) * eps


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        old = flat_x[i]
        flat_x[i] = old + h
        fp = float(f(x))
        flat_x[i] = old - h
        fm = float(f(x))
        flat_x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(analytic, numeric, tol: float = 1e-4) -> GradReport:
    """Compare two gradients with ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if np.shape(analytic) != np.shape(numeric):
        raise ValueError(f"shape mismatch {np.shape(analytic)} vs {np.shape(numeric)}")
    if a.size == 0:
        return GradReport(0.0, -1, 0.0, 0.0, tol)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    i = int(np.argmax(rel))
    return GradReport(float(rel[i]), i, float(a[i]), float(n[i]), tol)
