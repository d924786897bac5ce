"""One-shot local training and inference-time label fusion (MV, STAPLE, UBE)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, StructuralError
from .federation import model_nbytes
from .numcore import Rng
from .segmodel import SegModel, check_mask, forward
from .training import run_steps

STAPLE_CLAMP = 1e-10


def _stack_masks(masks: Sequence) -> np.ndarray:
    if len(masks) == 0:
        raise StructuralError("need at least one mask")
    arrs = [check_mask(m) for m in masks]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise StructuralError(f"mask shapes differ: {shape} vs {a.shape}")
    return np.stack(arrs)


def majority_vote(masks: Sequence) -> np.ndarray:
    """Voxel is foreground iff strictly more than half the raters say so (ties go to background)."""
    stack = _stack_masks(masks)
    votes = stack.sum(axis=0, dtype=np.int64)
    return (2 * votes > stack.shape[0]).astype(np.uint8)


@dataclass
class StapleState:
    sensitivity: np.ndarray
    specificity: np.ndarray
    weights: np.ndarray
    prior: float
    iterations: int
    history: list = field(default_factory=list, repr=False)


def _clamp(x):
    return np.clip(x, STAPLE_CLAMP, 1.0 - STAPLE_CLAMP)


def staple_e_step(D: np.ndarray, p: np.ndarray, q: np.ndarray, gamma: float) -> np.ndarray:
    """D is (raters, voxels) in {0,1}; returns the foreground posterior per voxel."""
    a = np.where(D == 1, p[:, None], 1.0 - p[:, None]).prod(axis=0)
    b = np.where(D == 1, 1.0 - q[:, None], q[:, None]).prod(axis=0)
    fg = gamma * a
    return fg / (fg + (1.0 - gamma) * b)


def staple_m_step(D: np.ndarray, W: np.ndarray, p: np.ndarray, q: np.ndarray):
    sw, sn = W.sum(), (1.0 - W).sum()
    # an empty class leaves the corresponding rates where they were
    p_new = (D @ W) / sw if sw > 0 else p.copy()
    q_new = ((1 - D) @ (1.0 - W)) / sn if sn > 0 else q.copy()
    return _clamp(p_new), _clamp(q_new)


def staple_log_likelihood(D: np.ndarray, p: np.ndarray, q: np.ndarray, gamma: float) -> float:
    a = np.where(D == 1, p[:, None], 1.0 - p[:, None]).prod(axis=0)
    b = np.where(D == 1, 1.0 - q[:, None], q[:, None]).prod(axis=0)
    return float(np.log(gamma * a + (1.0 - gamma) * b).sum())


def staple(masks: Sequence, tol: float = 1e-6, max_iter: int = 100, init: float = 0.99,
           record: bool = False) -> tuple[np.ndarray, StapleState]:
    """Binary STAPLE by expectation-maximization.

    The prior foreground probability is the mean foreground fraction of the
    inputs and stays fixed. Each iteration runs an E-step, stops if the
    posterior moved less than ``tol`` everywhere, and otherwise runs an
    M-step. The consensus is the posterior thresholded at 0.5.
    """
    stack = _stack_masks(masks)
    M = stack.shape[0]
    if M < 2:
        raise ConfigError("STAPLE needs at least two raters")
    if not tol > 0:
        raise ConfigError("tol must be > 0")
    shape = stack.shape[1:]
    D = stack.reshape(M, -1).astype(np.float64)
    p = np.full(M, init)
    q = np.full(M, init)
    if (stack == stack[0]).all():
        W = stack[0].astype(np.float64)
        return stack[0].copy(), StapleState(_clamp(p), _clamp(q), W, float(_clamp(W.mean())), 0)

    gamma = float(_clamp(D.mean()))
    history = []
    W_prev = None
    it = 0
    for it in range(1, max_iter + 1):
        W = staple_e_step(D, p, q, gamma)
        if record:
            history.append((W.copy(), p.copy(), q.copy()))
        if W_prev is not None and np.max(np.abs(W - W_prev)) < tol:
            break
        p, q = staple_m_step(D, W, p, q)
        W_prev = W
    weights = W.reshape(shape)
    state = StapleState(p, q, weights, gamma, it, history)
    return (weights >= 0.5).astype(np.uint8), state


def write_staple_state(state: StapleState, path, rater_ids: Sequence[str] | None = None) -> None:
    ids = rater_ids or [str(i) for i in range(len(state.sensitivity))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater", "sensitivity", "specificity", "iterations"])
        for rid, p, q in zip(ids, state.sensitivity, state.specificity):
            w.writerow([rid, repr(float(p)), repr(float(q)), state.iterations])


def ube_weights(variances: Sequence, eps: float = 1e-9, direction: str = "inverse") -> np.ndarray:
    """Fusion weights from each model's total voxelwise variance.

    ``inverse`` gives confident (low-variance) models more weight;
    ``direct`` weights proportionally to the variance instead.
    """
    if len(variances) == 0:
        raise StructuralError("need at least one variance map")
    u = np.array([float(np.sum(v)) for v in variances])
    if (u < 0).any():
        raise ConfigError("variances must be non-negative")
    if direction == "inverse":
        with np.errstate(divide="ignore"):
            raw = 1.0 / (u + eps)
    elif direction == "direct":
        raw = u + eps
    else:
        raise ConfigError(f"unknown UBE direction {direction!r}")
    if not np.isfinite(raw).all() or raw.sum() == 0:
        # zero total variance with eps=0: split evenly among the zero-variance models
        raw = (u == u.min()).astype(np.float64)
    return raw / raw.sum()


def mc_dropout(model: SegModel, image, S: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased variance of S dropout-on forward passes; pass s uses ``rng.child(s)``."""
    if S < 2:
        raise ConfigError("UBE needs at least two stochastic passes")
    draws = np.stack([forward(model, image, rng.child(s)) for s in range(S)])
    return draws.mean(axis=0), draws.var(axis=0, ddof=1)


def ube_fuse(models: Sequence[SegModel], image, S: int = 20, rng: Rng = Rng(0), eps: float = 1e-9,
             direction: str = "inverse", threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Uncertainty-weighted average of MC-dropout mean predictions.

    Every model sees the same per-pass dropout streams. Returns the fused mask
    and the per-model weights.
    """
    if not models:
        raise StructuralError("need at least one model")
    stats = [mc_dropout(m, image, S, rng) for m in models]
    w = ube_weights([v for _, v in stats], eps, direction)
    fused = np.zeros_like(stats[0][0])
    for wi, (mean, _) in zip(w, stats):
        fused = fused + wi * mean
    return (fused >= threshold).astype(np.uint8), w


def train_local_once(clients, init: SegModel, epochs: int, batch_size: int, optimizer,
                     train_dropout: bool = True) -> tuple[list[SegModel], int]:
    """Train one model per client with no communication.

    Returns the models and the bytes exchanged (each model is shared once).
    """
    if not clients:
        raise StructuralError("need at least one training client")
    models = []
    for c in clients:
        per_epoch = -(-c.n_samples // min(batch_size, c.n_samples))
        model, _ = run_steps(init, c.data, optimizer.fresh(), epochs * per_epoch, batch_size,
                             c.rng, dropout=train_dropout)
        models.append(model)
    return models, len(models) * model_nbytes(init)
