"""Parameter vectors, replayable random streams, optimizers and a gradient checker.

A parameter vector is a 1-D float64 numpy array. Reductions over several
vectors always run in list order so results do not depend on scheduling.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, StructuralError

_MASK64 = (1 << 64) - 1


def as_params(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise StructuralError(f"parameter vector must be 1-D and non-empty, got shape {arr.shape}")
    return arr


def _check_same_length(*vectors: np.ndarray) -> None:
    n = vectors[0].shape[0]
    for v in vectors[1:]:
        if v.shape[0] != n:
            raise StructuralError(f"length mismatch: {n} vs {v.shape[0]}")


def axpy(alpha: float, x, y) -> np.ndarray:
    x, y = as_params(x), as_params(y)
    _check_same_length(x, y)
    return alpha * x + y


def weighted_mean(vectors: Sequence, weights: Sequence[float]) -> np.ndarray:
    if len(vectors) == 0 or len(vectors) != len(weights):
        raise StructuralError(f"{len(vectors)} vectors for {len(weights)} weights")
    w = [float(v) for v in weights]
    if any(v < 0 or not np.isfinite(v) for v in w):
        raise ConfigError(f"weights must be finite and non-negative: {w}")
    if abs(sum(w) - 1.0) > 1e-12:
        raise ConfigError(f"weights must sum to 1 (got {sum(w)!r})")
    vecs = [as_params(v) for v in vectors]
    _check_same_length(*vecs)
    acc = w[0] * vecs[0]
    for wi, vi in zip(w[1:], vecs[1:]):
        acc = acc + wi * vi
    return acc


def checksum(params: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(params, dtype=np.float64).tobytes())


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Every call to :meth:`generator` restarts the stream from its first draw,
    so a stream can be replayed anywhere. Independent sub-streams come from
    :meth:`child`, which hashes labels into a new stream id.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise ConfigError("seed and stream must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "Rng":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream.to_bytes(8, "little"))
        for label in labels:
            h.update(b"\x00" + repr(label).encode())
        return Rng(self.seed, int.from_bytes(h.digest(), "little"))


@dataclass(frozen=True)
class OptimizerState:
    kind: str = "adamw"  # "sgd" or "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01  # adamw only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, compare=False)
    v: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")


def sgd(lr: float) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr, weight_decay=0.0)


def adamw(lr: float = 1e-3, weight_decay: float = 0.01, beta1: float = 0.9,
          beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adamw", lr=lr, weight_decay=weight_decay,
                          beta1=beta1, beta2=beta2, eps=eps)


def _check_finite(grad: np.ndarray, what: str = "gradient") -> None:
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericError(f"non-finite {what} entry at index {int(bad[0])}")


def optimizer_step(state: OptimizerState, params, grad) -> tuple[OptimizerState, np.ndarray]:
    params, grad = as_params(params), as_params(grad)
    _check_same_length(params, grad)
    _check_finite(grad)
    if state.kind == "sgd":
        new = params - state.lr * grad
        return replace(state, step=state.step + 1), new

    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    _check_same_length(params, m, v)
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    # decay acts on the weights directly, not through the moments
    new = params * (1.0 - state.lr * state.weight_decay)
    new = new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new


def finite_diff_grad(f: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    if not h > 0:
        raise ConfigError("finite-difference step must be > 0")
    params = as_params(params)
    grad = np.empty_like(params)
    probe = params.copy()
    for i in range(params.size):
        orig = probe[i]
        probe[i] = orig + h
        fp = float(f(probe))
        probe[i] = orig - h
        fm = float(f(probe))
        probe[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing index {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
