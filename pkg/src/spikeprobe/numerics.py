"""Array helpers, counter-based random streams and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DistributionError(ValueError):
    pass


class OracleError(ArithmeticError):
    pass


class NumericError(ArithmeticError):
    pass


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")
    return x


def as_seq(x, dtype=DEFAULT_DTYPE, checked: bool = True) -> np.ndarray:
    """Coerce ``x`` to a (batch, time, channel) array of ``dtype``.

    A 2-D input is read as a single sample of shape (time, channel).
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected (batch, time, channel) array, got shape {arr.shape}")
    if checked:
        check_finite(arr, "sequence tensor")
    return arr


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Return ``x @ W.T (+ b)``; leading axes of ``x`` are treated as batch."""
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"inner dimensions disagree: x{x.shape} vs W{W.shape}")
    y = x @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match W{W.shape}")
        y = y + b
    return y


def init_uniform(rng: "RngStream", shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE):
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights; returns (array, next stream)."""
    bound = np.sqrt(1.0 / fan_in)
    n = int(np.prod(shape))
    u, rng = rng.uniform(n)
    return ((2.0 * u - 1.0) * bound).reshape(shape).astype(dtype), rng


@dataclass(frozen=True)
class RngStream:
    """Stateless random stream addressed by ``(seed, stream, counter)``.

    Draw ``i`` of a stream is the ``i``-th 64-bit word of a Philox generator
    keyed by ``(seed, stream)``, so any slice of the stream can be produced
    without generating the draws before it. Calls return fresh streams with
    the counter advanced; instances are never mutated.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def _key(self) -> np.ndarray:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return ss.generate_state(2, np.uint64)

    def raw(self, n: int) -> np.ndarray:
        """The next ``n`` 64-bit words, without advancing."""
        block, lane = divmod(self.counter, 4)
        bg = np.random.Philox(key=self._key(), counter=np.array([block, 0, 0, 0], dtype=np.uint64))
        words = bg.random_raw(lane + n)
        return np.asarray(words, dtype=np.uint64)[lane:]

    def uniform(self, n: int) -> tuple[np.ndarray, "RngStream"]:
        """``n`` float64 draws in [0, 1) and the advanced stream."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u, self.advance(n)

    def advance(self, n: int) -> "RngStream":
        return replace(self, counter=self.counter + n)

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream, 0)

    def permutation(self, n: int) -> tuple[np.ndarray, "RngStream"]:
        u, rng = self.uniform(n)
        return np.argsort(u, kind="stable"), rng


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DistributionError("probabilities must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DistributionError(f"probabilities must be finite and non-negative: {p}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DistributionError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def categorical_from_uniform(u: np.ndarray, p) -> np.ndarray:
    """Inverse-CDF mapping of uniforms to category indices."""
    p = _check_probs(p)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, u, side="right")
    # zero-probability trailing categories can never be chosen
    last = np.flatnonzero(p > 0)[-1]
    return np.minimum(idx, last)


def sample_categorical(rng: RngStream, p) -> tuple[int, RngStream]:
    """Draw one index with probability ``p[i]``; consumes exactly one draw."""
    u, rng = rng.uniform(1)
    return int(categorical_from_uniform(u, p)[0]), rng


def sample_categorical_many(rng: RngStream, p, n: int) -> tuple[np.ndarray, RngStream]:
    """Vectorized form of ``n`` successive :func:`sample_categorical` calls."""
    u, rng = rng.uniform(n)
    return categorical_from_uniform(u, p), rng


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` in float64."""
    if h <= 0:
        raise OracleError("step h must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = float(f(theta.copy()))
        theta[i] = orig - h
        fm = float(f(theta.copy()))
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"objective not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
