"""Patchwise two-layer segmentation scorer with dropout and Dice loss.

Each voxel is classified from the intensities in a (2r+1)-wide window
around it (zero padded at the borders):

    hidden = tanh(W1 @ patch + b1)
    prob   = sigmoid(w2 . dropout(hidden) + b2)

Parameters are stored flat in the order W1 (row-major), b1, w2, b2.
Volumes are numpy arrays shaped (depth, height, width); depth 1 is a 2-D image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, StructuralError
from .numcore import Rng, as_params

DICE_SMOOTH = 1e-5


def param_count(radius: int, hidden: int, ndim: int = 2) -> int:
    p = (2 * radius + 1) ** ndim
    return hidden * p + 2 * hidden + 1


@dataclass(frozen=True)
class SegModel:
    params: np.ndarray
    radius: int = 2
    hidden: int = 16
    dropout: float = 0.3
    ndim: int = 2

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ConfigError("ndim must be 2 or 3")
        if self.radius < 0 or self.hidden < 1:
            raise ConfigError("radius must be >= 0 and hidden >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        params = as_params(self.params)
        expected = param_count(self.radius, self.hidden, self.ndim)
        if params.size != expected:
            raise StructuralError(f"model expects {expected} parameters, got {params.size}")
        object.__setattr__(self, "params", params)

    @property
    def n_features(self) -> int:
        return (2 * self.radius + 1) ** self.ndim

    def with_params(self, params) -> "SegModel":
        return SegModel(params, self.radius, self.hidden, self.dropout, self.ndim)

    def unpack(self):
        h, p = self.hidden, self.n_features
        w = self.params
        W1 = w[: h * p].reshape(h, p)
        b1 = w[h * p: h * p + h]
        w2 = w[h * p + h: h * p + 2 * h]
        b2 = w[-1]
        return W1, b1, w2, b2


def init_model(rng: Rng, radius: int = 2, hidden: int = 16, dropout: float = 0.3,
               ndim: int = 2) -> SegModel:
    p = (2 * radius + 1) ** ndim
    g = rng.generator()
    W1 = g.normal(0.0, 1.0 / np.sqrt(p), size=(hidden, p))
    w2 = g.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden)
    params = np.concatenate([W1.ravel(), np.zeros(hidden), w2, [0.0]])
    return SegModel(params, radius, hidden, dropout, ndim)


def zero_model(radius: int = 2, hidden: int = 16, dropout: float = 0.3, ndim: int = 2) -> SegModel:
    return SegModel(np.zeros(param_count(radius, hidden, ndim)), radius, hidden, dropout, ndim)


def check_volume(vol, name: str = "volume") -> np.ndarray:
    arr = np.asarray(vol)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise StructuralError(f"{name} must be shaped (depth, height, width), got {arr.shape}")
    return arr


def check_mask(mask, name: str = "mask") -> np.ndarray:
    arr = check_volume(mask, name)
    if not np.isin(arr, (0, 1)).all():
        raise StructuralError(f"{name} must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


def patches(image, radius: int, ndim: int = 2) -> np.ndarray:
    """Return the (n_voxels, n_features) matrix of zero-padded windows."""
    img = np.asarray(check_volume(image, "image"), dtype=np.float64)
    k = 2 * radius + 1
    if ndim == 2:
        padded = np.pad(img, ((0, 0), (radius, radius), (radius, radius)))
        win = sliding_window_view(padded, (k, k), axis=(1, 2))
    else:
        padded = np.pad(img, radius)
        win = sliding_window_view(padded, (k, k, k))
    return win.reshape(img.size, k ** ndim)


def _dropout_mask(rng: Rng | None, shape, rate: float) -> np.ndarray | None:
    if rng is None:
        return None
    keep = rng.generator().random(shape, dtype=np.float32) >= np.float32(rate)
    return keep / (1.0 - rate)


def _forward_patches(model: SegModel, X: np.ndarray, mask: np.ndarray | None):
    W1, b1, w2, b2 = model.unpack()
    a = np.tanh(X @ W1.T + b1)
    h = a if mask is None else a * mask
    z = h @ w2 + b2
    with np.errstate(over="ignore"):  # exp overflow saturates to 0 correctly
        y = 1.0 / (1.0 + np.exp(-z))
    return a, h, y


def forward(model: SegModel, image, dropout: Rng | None = None) -> np.ndarray:
    """Voxelwise foreground probability; ``dropout`` is an Rng to sample masks, or None."""
    img = check_volume(image, "image")
    X = patches(img, model.radius, model.ndim)
    mask = _dropout_mask(dropout, (X.shape[0], model.hidden), model.dropout)
    _, _, y = _forward_patches(model, X, mask)
    return y.reshape(img.shape)


def dice_loss(pred, truth, smooth: float = DICE_SMOOTH) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise StructuralError(f"shape mismatch {pred.shape} vs {truth.shape}")
    num = 2.0 * float(np.sum(pred * truth)) + smooth
    den = float(np.sum(pred)) + float(np.sum(truth)) + smooth
    return 1.0 - num / den


@dataclass(frozen=True)
class Prepared:
    """A training sample with its patch matrix cached."""

    X: np.ndarray
    t: np.ndarray
    shape: tuple


def prepare(samples: Sequence, radius: int, ndim: int = 2) -> list[Prepared]:
    out = []
    for image, mask in samples:
        img = check_volume(image, "image")
        m = check_mask(mask)
        if m.shape != img.shape:
            raise StructuralError(f"image {img.shape} and mask {m.shape} differ in shape")
        out.append(Prepared(patches(img, radius, ndim), m.ravel().astype(np.float64), img.shape))
    return out


def sample_loss_grad(model: SegModel, sample: Prepared, dropout: Rng | None = None):
    """Dice loss of one prepared sample and its gradient w.r.t. the flat parameters."""
    X, t = sample.X, sample.t
    mask = _dropout_mask(dropout, (X.shape[0], model.hidden), model.dropout)
    a, h, y = _forward_patches(model, X, mask)

    num = 2.0 * np.dot(y, t) + DICE_SMOOTH
    den = y.sum() + t.sum() + DICE_SMOOTH
    loss = 1.0 - num / den
    if not np.isfinite(loss):
        raise NumericError("non-finite Dice loss")

    dy = -(2.0 * t * den - num) / (den * den)
    dz = dy * y * (1.0 - y)
    _, _, w2, _ = model.unpack()
    g_w2 = h.T @ dz
    g_b2 = dz.sum()
    dh = np.outer(dz, w2)
    if mask is not None:
        dh = dh * mask
    dpre = dh * (1.0 - a * a)
    g_W1 = dpre.T @ X
    g_b1 = dpre.sum(axis=0)
    grad = np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]])
    return float(loss), grad


def prepared_loss_grad(model: SegModel, batch: Sequence[Prepared], dropout: Rng | None = None):
    if len(batch) == 0:
        raise StructuralError("empty batch")
    total = 0.0
    grad = np.zeros_like(model.params)
    for k, sample in enumerate(batch):
        rng = None if dropout is None else dropout.child(k)
        loss, g = sample_loss_grad(model, sample, rng)
        total += loss
        grad += g
    return total / len(batch), grad / len(batch)


def prepared_loss(model: SegModel, batch: Sequence[Prepared], dropout: Rng | None = None) -> float:
    """Mean Dice loss only, with the same dropout draws as ``prepared_loss_grad``."""
    if len(batch) == 0:
        raise StructuralError("empty batch")
    total = 0.0
    for k, sample in enumerate(batch):
        rng = None if dropout is None else dropout.child(k)
        mask = _dropout_mask(rng, (sample.X.shape[0], model.hidden), model.dropout)
        _, _, y = _forward_patches(model, sample.X, mask)
        num = 2.0 * np.dot(y, sample.t) + DICE_SMOOTH
        total += 1.0 - num / (y.sum() + sample.t.sum() + DICE_SMOOTH)
    return float(total / len(batch))


def loss_and_grad(model: SegModel, batch: Sequence, dropout: Rng | None = None):
    """Mean Dice loss over ``(image, mask)`` pairs and its analytic gradient.

    With dropout on, sample ``k`` draws its mask from ``dropout.child(k)``;
    the same mask is used for the forward and backward pass.
    """
    return prepared_loss_grad(model, prepare(batch, model.radius, model.ndim), dropout)


def mean_loss(model: SegModel, batch: Sequence[Prepared]) -> float:
    losses = []
    for s in batch:
        _, _, y = _forward_patches(model, s.X, None)
        losses.append(dice_loss(y, s.t))
    return float(np.mean(losses))


def predict_mask(model: SegModel, image, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie strictly between 0 and 1")
    return (forward(model, image) >= threshold).astype(np.uint8)
