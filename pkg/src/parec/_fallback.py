"""Pure numpy versions of the hot kernels.

Signatures mirror ``parec._kernels`` exactly: every function writes into
caller-provided output buffers and all arrays are C-contiguous float64
(int64 for indices).
"""
import numpy as np

BACKEND = "numpy"


def masked_softmax_fwd(x, causal, out):
    """Row softmax over the last axis of an (m, r, c) stack.

    With ``causal`` set, row ``i`` only sees columns ``j <= i``; the other
    entries come out exactly 0.
    """
    m, r, c = x.shape
    if causal:
        allowed = np.tri(r, c, dtype=bool)
        z = np.where(allowed, x, -np.inf)
    else:
        z = x
    mx = z.max(axis=-1, keepdims=True)
    np.subtract(z, mx, out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def masked_softmax_bwd(y, dy, dx):
    np.multiply(y, dy, out=dx)
    s = dx.sum(axis=-1, keepdims=True)
    np.subtract(dy, s, out=dx)
    dx *= y
    return dx


def layer_norm_fwd(x, gamma, beta, eps, y, xhat, rstd):
    mean = x.mean(axis=1, keepdims=True)
    np.subtract(x, mean, out=xhat)
    var = np.mean(xhat * xhat, axis=1)
    rstd[:] = 1.0 / np.sqrt(var + eps)
    xhat *= rstd[:, None]
    np.multiply(xhat, gamma, out=y)
    y += beta
    return y


def layer_norm_bwd(dy, xhat, rstd, gamma, dx, dgamma, dbeta):
    dgamma += np.sum(dy * xhat, axis=0)
    dbeta += dy.sum(axis=0)
    dxhat = dy * gamma
    c1 = dxhat.mean(axis=1, keepdims=True)
    c2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    np.subtract(dxhat, c1, out=dx)
    dx -= xhat * c2
    dx *= rstd[:, None]
    return dx


def softmax_xent(logits, targets, grad, scale):
    """Summed cross-entropy over rows whose target is non-zero.

    Column 0 (padding) is excluded from the softmax. ``grad`` receives
    ``scale * (softmax - onehot)`` on scored rows and 0 elsewhere.
    """
    grad[:] = 0.0
    rows = np.flatnonzero(targets > 0)
    if rows.size == 0:
        return 0.0
    z = logits[rows, 1:]
    mx = z.max(axis=1, keepdims=True)
    e = np.exp(z - mx)
    s = e.sum(axis=1, keepdims=True)
    t = targets[rows]
    lse = np.log(s[:, 0]) + mx[:, 0]
    loss = float(np.sum(lse - logits[rows, t]))
    g = e * (scale / s)
    g[np.arange(rows.size), t - 1] -= scale
    grad[rows, 1:] = g
    return loss


def count_greater(scores, targets, ranks):
    """1-based rank of each row's target among columns 1..c-1, ties optimistic."""
    t = scores[np.arange(scores.shape[0]), targets][:, None]
    ranks[:] = 1 + np.count_nonzero(scores[:, 1:] > t, axis=1)
    return ranks
