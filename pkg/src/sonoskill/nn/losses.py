import numpy as np

from .layers import ShapeMismatch, softmax


def mse_loss(pred, target):
    """Mean of squared differences over every component; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def cross_entropy(logits, labels, class_weights=None):
    """Softmax + NLL, averaged over the batch (weighted mean when weights are given).

    ``logits`` may be a single length-2 vector with an integer label.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch("one label per row of logits required")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    nll = -logp[rows, labels]
    w = np.ones(len(labels)) if class_weights is None else np.asarray(class_weights)[labels]
    total = w.sum()
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad *= (w / total)[:, None]
    loss = float(np.dot(w, nll) / total)
    return loss, (grad[0] if single else grad)
