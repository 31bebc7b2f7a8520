"""Per-pixel patch MLP segmenter with soft-Dice + cross-entropy loss.

Every pixel is classified from the zero-padded square patch around it by a
one-hidden-layer network (tanh hidden units, softmax output).  The flat
parameter vector is laid out as ``W1 (A x H), b1 (H), W2 (H x C), b2 (C)``
with ``A`` the patch area, all row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .param_math import UsageError, sq_distance

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    patch_radius: int = 2
    hidden_units: int = 16
    num_classes: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise UsageError("num_classes must be >= 2")
        if self.patch_radius < 0 or self.hidden_units < 1:
            raise UsageError("patch_radius must be >= 0 and hidden_units >= 1")

    @property
    def patch_diameter(self) -> int:
        return 2 * self.patch_radius + 1

    @property
    def patch_area(self) -> int:
        return self.patch_diameter ** 2

    @property
    def n_params(self) -> int:
        a, h, c = self.patch_area, self.hidden_units, self.num_classes
        return (a * h + h) + (h * c + c)

    def unpack(self, params):
        """Views ``(W1, b1, W2, b2)`` into a flat vector."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise UsageError(f"expected {self.n_params} parameters, got shape {params.shape}")
        a, h, c = self.patch_area, self.hidden_units, self.num_classes
        o1 = a * h
        o2 = o1 + h
        o3 = o2 + h * c
        return (
            params[:o1].reshape(a, h),
            params[o1:o2],
            params[o2:o3].reshape(h, c),
            params[o3:],
        )


@dataclass
class Batch:
    """Images ``(B, H, W)`` in [-1, 1], integer labels of the same shape."""

    images: np.ndarray
    labels: np.ndarray
    label_space: tuple = (0, 1, 2)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 2:
            self.images = self.images[None]
            self.labels = self.labels[None]
        if self.images.ndim != 3 or self.images.shape != self.labels.shape:
            raise UsageError("images and labels must both have shape (B, H, W)")
        self.label_space = tuple(sorted({0, *(int(c) for c in self.label_space)}))


@dataclass
class LossTerms:
    """Unscaled data loss of one batch and its gradient."""

    ce: float
    dice_loss: float
    dice_per_class: np.ndarray
    grad: np.ndarray
    label_space: tuple

    @property
    def base_loss(self) -> float:
        return self.ce + self.dice_loss

    @property
    def soft_dice(self) -> float:
        """Mean soft Dice coefficient over the supervised classes."""
        return 1.0 - self.dice_loss


def init_params(spec: ModelSpec, seed=0, scale: float = 1.0) -> np.ndarray:
    """Gaussian fan-in scaled weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    w1, _, w2, _ = spec.unpack(params)
    w1[:] = rng.normal(0.0, scale / np.sqrt(spec.patch_area), w1.shape)
    w2[:] = rng.normal(0.0, scale / np.sqrt(spec.hidden_units), w2.shape)
    return params


def _hidden_and_logits(params, spec, images):
    w1, b1, w2, b2 = spec.unpack(params)
    if images.shape[1] < spec.patch_diameter or images.shape[2] < spec.patch_diameter:
        raise UsageError("image smaller than the patch diameter")
    x = _kernels.extract_patches(images, spec.patch_radius)
    hidden = np.tanh(x @ w1 + b1)
    return x, hidden, hidden @ w2 + b2


def forward(params, spec: ModelSpec, batch) -> np.ndarray:
    """Per-pixel class probabilities, shape ``(B, H, W, C)``."""
    images = batch.images if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    _, _, logits = _hidden_and_logits(params, spec, images)
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs.reshape(*images.shape, spec.num_classes)


def predict(params, spec: ModelSpec, images, classes=None) -> np.ndarray:
    """Hard (argmax) label map, optionally restricted to the given classes."""
    probs = forward(params, spec, images)
    if classes is not None:
        keep = np.zeros(spec.num_classes, dtype=bool)
        keep[list(classes)] = True
        probs = np.where(keep, probs, -1.0)
    return probs.argmax(axis=-1)


def loss_terms(params, spec: ModelSpec, batch: Batch) -> LossTerms:
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.num_classes):
        raise UsageError("label outside [0, num_classes)")
    if not set(np.unique(batch.labels).tolist()) <= set(batch.label_space):
        raise UsageError("batch contains labels outside its label_space")
    x, hidden, logits = _hidden_and_logits(params, spec, batch.images)
    mask = np.zeros(spec.num_classes, dtype=bool)
    mask[list(batch.label_space)] = True
    _, ce, dice_loss, dice, dlogits = _kernels.softmax_head(
        logits, batch.labels.ravel(), mask, DICE_SMOOTH
    )

    _, _, w2, _ = spec.unpack(params)
    grad = np.empty(spec.n_params)
    gw1, gb1, gw2, gb2 = spec.unpack(grad)
    gw2[:] = hidden.T @ dlogits
    gb2[:] = dlogits.sum(axis=0)
    dz1 = (dlogits @ w2.T) * (1.0 - hidden * hidden)
    gw1[:] = x.T @ dz1
    gb1[:] = dz1.sum(axis=0)
    return LossTerms(float(ce), float(dice_loss), dice, grad, batch.label_space)


def combine(terms: LossTerms, params, loss_scale=1.0, prox_mu=0.0, anchor=None):
    """Scale the data term and add the proximal pull toward ``anchor``."""
    if not loss_scale > 0:
        raise UsageError(f"loss_scale must be > 0, got {loss_scale}")
    if prox_mu < 0:
        raise UsageError(f"prox_mu must be >= 0, got {prox_mu}")
    loss = loss_scale * terms.base_loss
    grad = loss_scale * terms.grad
    if prox_mu > 0:
        if anchor is None:
            raise UsageError("prox_mu > 0 requires an anchor parameter vector")
        loss += 0.5 * prox_mu * sq_distance(params, anchor)
        grad += prox_mu * (np.asarray(params) - np.asarray(anchor))
    return float(loss), grad


def loss_and_grad(params, spec: ModelSpec, batch: Batch, loss_scale=1.0, prox_mu=0.0, anchor=None):
    """Scaled Dice+CE loss plus ``prox_mu/2 * |params - anchor|^2`` and its gradient."""
    if prox_mu > 0 and anchor is None:
        raise UsageError("prox_mu > 0 requires an anchor parameter vector")
    return combine(loss_terms(params, spec, batch), params, loss_scale, prox_mu, anchor)


def dice_score(pred_labels, true_labels, class_id: int) -> float:
    """Hard Dice of one class; 1.0 when both masks are empty."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise UsageError(f"shape mismatch: {pred_labels.shape} vs {true_labels.shape}")
    a = pred_labels == class_id
    b = true_labels == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
