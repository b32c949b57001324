"""Pure numpy implementations of the hot loss kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
"""

import numpy as np

NORM_FLOOR = 1e-12


def softmax_xent_forward(logits, targets):
    """Per-row cross entropy via log-sum-exp.

    Returns ``(loss, probs)`` where ``loss`` has one entry per row.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    sumexp = np.exp(shifted).sum(axis=1)
    log_z = np.log(sumexp)
    rows = np.arange(logits.shape[0])
    loss = log_z - shifted[rows, targets]
    probs = np.exp(shifted - log_z[:, None])
    return loss, probs


def softmax_xent_backward(probs, targets, grad_out):
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), targets] -= 1.0
    grad *= grad_out[:, None]
    return grad


def triplet_forward(emb, anchor, positive, negative, margin):
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over the triplets.

    Returns ``(loss, active)``; ``active`` flags triplets strictly inside the
    hinge. The mean is accumulated incrementally so equal hinge values average
    to exactly that value.
    """
    a = emb[anchor]
    d_ap = ((a - emb[positive]) ** 2).sum(axis=1)
    d_an = ((a - emb[negative]) ** 2).sum(axis=1)
    raw = d_ap - d_an + margin
    active = raw > 0.0
    loss = 0.0
    for k, h in enumerate(np.where(active, raw, 0.0).tolist(), start=1):
        loss += (h - loss) / k
    return loss, active.astype(np.uint8)


def triplet_backward(emb, anchor, positive, negative, active, grad_out):
    scale = 2.0 * grad_out / len(anchor)
    mask = active.astype(bool)
    a_idx, p_idx, n_idx = anchor[mask], positive[mask], negative[mask]
    a = emb[a_idx]
    p = emb[p_idx]
    n = emb[n_idx]
    grad = np.zeros_like(emb)
    np.add.at(grad, a_idx, scale * (n - p))
    np.add.at(grad, p_idx, -scale * (a - p))
    np.add.at(grad, n_idx, scale * (a - n))
    return grad


def normalize_rows_forward(x):
    """Unit-L2 rows. Returns ``(y, norms)``.

    Norms are floored at ``NORM_FLOOR`` so an all-zero row maps to zero
    instead of NaN.
    """
    norms = np.maximum(np.sqrt((x * x).sum(axis=1)), NORM_FLOOR)
    return x / norms[:, None], norms


def normalize_rows_backward(y, norms, grad_out):
    dot = (grad_out * y).sum(axis=1)
    return (grad_out - y * dot[:, None]) / norms[:, None]
