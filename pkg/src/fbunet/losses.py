"""Class-weighted cross-entropy on probability maps and the two-round loss."""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor, make_node
from .errors import DataError, ShapeError

LOG_EPS = 1e-8


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label values must lie in [0, {num_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp, copy=False)


def weighted_cross_entropy(probs: Tensor, labels, weights=None) -> Tensor:
    """Mean over pixels of ``-w[y] * ln(p_y + 1e-8)``.

    Args:
        probs: ``(n, C, h, w)`` probabilities (already softmaxed).
        labels: ``(n, h, w)`` integer class indices.
        weights: length-``C`` positive class weights; ``None`` means all ones.

    Returns:
        ``(1, 1, 1, 1)`` loss tensor.
    """
    n, C, h, w = probs.shape
    labels = _check_labels(labels, C)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    dtype = probs.dtype
    wvec = np.ones(C, dtype=dtype) if weights is None else np.asarray(weights, dtype=dtype)
    if wvec.shape != (C,):
        raise ShapeError(f"weights must have length {C}")
    N = n * h * w
    p_true = np.take_along_axis(probs.data, labels[:, None], axis=1)[:, 0]
    wl = wvec[labels]
    loss = -(wl * np.log(p_true + dtype.type(LOG_EPS))).sum() / dtype.type(N)
    out = np.asarray(loss, dtype=dtype).reshape(1, 1, 1, 1)

    def backward(g):
        gp = np.zeros_like(probs.data)
        vals = -g.reshape(()) * wl / (N * (p_true + dtype.type(LOG_EPS)))
        np.put_along_axis(gp, labels[:, None], vals[:, None].astype(dtype), axis=1)
        return (gp,)

    return make_node(out, (probs,), backward)


def feedback_loss(l_first: Tensor, l_second: Tensor, lam=0.5) -> Tensor:
    """``lam * l_first + l_second``."""
    return ops.add(ops.scale(l_first, lam), l_second)


def compute_class_weights(labels, num_classes) -> np.ndarray:
    """Inverse-frequency weights ``T / (C * n_c)``; balanced data gives all ones.

    ``labels`` is an iterable of integer label maps.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        lab = _check_labels(lab, num_classes)
        counts += np.bincount(lab.ravel(), minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(f"class {int(missing[0])} never appears in the training labels")
    total = counts.sum()
    return total / (num_classes * counts.astype(np.float64))
