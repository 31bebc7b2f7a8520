"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``FEDSIM_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``numpy_impl`` / ``numba_impl`` so they can be compared.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------


def _np_extract_patches(images, radius):
    b, h, w = images.shape
    d = 2 * radius + 1
    padded = np.zeros((b, h + 2 * radius, w + 2 * radius), dtype=np.float64)
    padded[:, radius:radius + h, radius:radius + w] = images
    out = np.empty((b, h, w, d * d), dtype=np.float64)
    for dy in range(d):
        for dx in range(d):
            out[:, :, :, dy * d + dx] = padded[:, dy:dy + h, dx:dx + w]
    return out.reshape(b * h * w, d * d)


def _np_softmax_head(logits, labels, class_mask, eps):
    n, c = logits.shape
    # softmax restricted to the supervised classes; others get probability 0
    masked = np.where(class_mask, logits, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    norm = expz.sum(axis=1, keepdims=True)
    probs = expz / norm

    rows = np.arange(n)
    ce = -(shifted[rows, labels] - np.log(norm[:, 0])).sum() / n

    onehot = np.zeros((n, c), dtype=np.float64)
    onehot[rows, labels] = 1.0
    inter = (probs * onehot).sum(axis=0)
    psum = probs.sum(axis=0)
    gsum = onehot.sum(axis=0)
    denom = psum + gsum + eps
    dice = (2.0 * inter + eps) / denom

    n_active = int(class_mask.sum())
    # dL/dp for the mean soft-Dice loss over supervised classes
    dp = -(2.0 * onehot * denom - (2.0 * inter + eps)) / (denom * denom) / n_active
    dp[:, ~class_mask] = 0.0
    inner = (probs * dp).sum(axis=1, keepdims=True)
    dlogits = probs * (dp - inner) + (probs - onehot) / n
    dice_loss = (1.0 - dice[class_mask]).sum() / n_active
    return probs, ce, dice_loss, dice, dlogits


def _np_adam_step(params, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    params -= lr * mhat / (np.sqrt(vhat) + eps)


numpy_impl = SimpleNamespace(
    extract_patches=_np_extract_patches,
    softmax_head=_np_softmax_head,
    adam_step=_np_adam_step,
    name="numpy",
)

# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

numba_impl = None
try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_extract_patches(images, radius):
        b, h, w = images.shape
        d = 2 * radius + 1
        out = np.zeros((b * h * w, d * d), dtype=np.float64)
        row = 0
        for k in range(b):
            for y in range(h):
                for x in range(w):
                    col = 0
                    for dy in range(-radius, radius + 1):
                        yy = y + dy
                        for dx in range(-radius, radius + 1):
                            xx = x + dx
                            if 0 <= yy < h and 0 <= xx < w:
                                out[row, col] = images[k, yy, xx]
                            col += 1
                    row += 1
        return out

    @njit(cache=True)
    def _nb_softmax_head(logits, labels, class_mask, eps):
        n, c = logits.shape
        probs = np.zeros((n, c), dtype=np.float64)
        inter = np.zeros(c)
        psum = np.zeros(c)
        gsum = np.zeros(c)
        ce = 0.0
        for i in range(n):
            zmax = -np.inf
            for j in range(c):
                if class_mask[j] and logits[i, j] > zmax:
                    zmax = logits[i, j]
            norm = 0.0
            for j in range(c):
                if class_mask[j]:
                    e = np.exp(logits[i, j] - zmax)
                    probs[i, j] = e
                    norm += e
            for j in range(c):
                probs[i, j] /= norm
                psum[j] += probs[i, j]
            y = labels[i]
            ce -= logits[i, y] - zmax - np.log(norm)
            inter[y] += probs[i, y]
            gsum[y] += 1.0
        ce /= n

        n_active = 0
        for j in range(c):
            if class_mask[j]:
                n_active += 1
        denom = psum + gsum + eps
        dice = (2.0 * inter + eps) / denom
        dice_loss = 0.0
        for j in range(c):
            if class_mask[j]:
                dice_loss += 1.0 - dice[j]
        dice_loss /= n_active

        # per-class pieces of dL/dp: base + (label == j) * extra
        base = np.zeros(c)
        extra = np.zeros(c)
        for j in range(c):
            if class_mask[j]:
                base[j] = (2.0 * inter[j] + eps) / (denom[j] * denom[j]) / n_active
                extra[j] = -2.0 / denom[j] / n_active

        dlogits = np.zeros((n, c), dtype=np.float64)
        dp = np.empty(c)
        for i in range(n):
            y = labels[i]
            inner = 0.0
            for j in range(c):
                dp[j] = base[j]
                if j == y:
                    dp[j] += extra[j]
                inner += probs[i, j] * dp[j]
            for j in range(c):
                if not class_mask[j]:
                    continue
                g = probs[i, j]
                if j == y:
                    g -= 1.0
                dlogits[i, j] = probs[i, j] * (dp[j] - inner) + g / n
        return probs, ce, dice_loss, dice, dlogits

    @njit(cache=True)
    def _nb_adam_step(params, grad, m, v, lr, beta1, beta2, eps, t):
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for i in range(params.shape[0]):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    numba_impl = SimpleNamespace(
        extract_patches=_nb_extract_patches,
        softmax_head=_nb_softmax_head,
        adam_step=_nb_adam_step,
        name="numba",
    )


def numba_disabled():
    return os.environ.get("FEDSIM_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")


active = numpy_impl if (numba_impl is None or numba_disabled()) else numba_impl
BACKEND = active.name


def extract_patches(images: np.ndarray, radius: int) -> np.ndarray:
    """Zero-padded ``(2r+1)^2`` patch around every pixel, one row per pixel."""
    return active.extract_patches(np.ascontiguousarray(images, dtype=np.float64), radius)


def softmax_head(logits, labels, class_mask, eps):
    """Label-space softmax with cross-entropy and soft-Dice loss, plus d/dlogits.

    The softmax runs over the classes in ``class_mask`` only, so unsupervised
    classes get zero probability and zero gradient.

    Returns ``(probs, ce, dice_loss, dice_per_class, dlogits)`` where the
    gradient is that of ``ce + dice_loss``.
    """
    return active.softmax_head(
        np.ascontiguousarray(logits, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int64),
        np.ascontiguousarray(class_mask, dtype=np.bool_),
        float(eps),
    )


def adam_step(params, grad, m, v, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam update of ``params``, ``m`` and ``v``."""
    active.adam_step(params, grad, m, v, float(lr), float(beta1), float(beta2), float(eps), int(t))
