"""Dense numeric substrate: layer primitives, losses, seeded streams, FD oracle.

Tensors are plain float64 numpy arrays. Randomness is drawn from Philox
(counter-based) generators keyed by a master seed plus an integer path, so
any (round, client, purpose) coordinate maps to one fixed stream no matter
which thread or in which order it is requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


def affine(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b``.

    ``x`` may be a single vector of length ``W.shape[1]`` or a batch of
    shape ``(batch, W.shape[1])``; in the batched case each row is mapped.
    """
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
        raise DimensionError(f"affine expects W 2-D, b 1-D, x 1-D/2-D; got W{W.shape}, b{b.shape}, x{x.shape}")
    if W.shape[1] != x.shape[-1] or W.shape[0] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: W{W.shape}, b{b.shape}, x{x.shape}")
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilised by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(logits)`` against one class index.

    Returns ``(loss, d loss / d logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"softmax_xent expects a 1-D logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`softmax_xent`: per-row losses and per-row logit gradients."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"labels must lie in [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


def softplus(x):
    """``log(1 + exp(x))``, overflow-safe; returns ``x`` itself above 30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return float(out) if out.ndim == 0 else out


def softplus_deriv(x):
    """Derivative of :func:`softplus`, i.e. the logistic function."""
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def softplus_inv(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inv is defined for positive values only")
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return float(out) if out.ndim == 0 else out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value while probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


@dataclass(frozen=True)
class SeedPath:
    """A master seed plus an integer path naming one random stream.

    ``SeedPath(7, (3, 1))`` might be "round 3, client 1" and
    ``.child(PURPOSE)`` narrows it further. Paths are spawn keys of a numpy
    ``SeedSequence``, so distinct paths give independent Philox keys.
    """

    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if any(p < 0 for p in self.path):
            raise ValueError("path components must be non-negative")

    def child(self, *parts: int) -> "SeedPath":
        return SeedPath(self.master_seed, self.path + tuple(int(p) for p in parts))


class RngStream:
    """Thin wrapper around a Philox generator with the draws this repo uses."""

    def __init__(self, seed_path: SeedPath):
        ss = np.random.SeedSequence(entropy=seed_path.master_seed, spawn_key=seed_path.path)
        self.seed_path = seed_path
        self.gen = np.random.Generator(np.random.Philox(ss))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def dirichlet(self, alpha: Sequence[float]) -> np.ndarray:
        q = self.gen.dirichlet(np.asarray(alpha, dtype=np.float64))
        # tiny alpha can underflow every component to 0
        s = q.sum()
        if not s > 0:
            q = np.zeros(len(alpha))
            q[self.gen.integers(len(alpha))] = 1.0
            return q
        return q / s

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)


def derive_rng(seed_path: SeedPath) -> RngStream:
    return RngStream(seed_path)
