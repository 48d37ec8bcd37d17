"""Dense float64 primitives with paired forward/backward passes.

Every differentiable piece of the model is composed from the ops in this
module. Each op computes its output eagerly and, when the tape is recording,
appends a closure that pushes the output gradient back into its inputs.
``Tape.backward`` replays those closures in reverse, exactly once.
"""
from __future__ import annotations

import numpy as np

from . import kernels

LN_EPS = 1e-8


class TapeError(RuntimeError):
    pass


class Var:
    """A value on the tape, optionally accumulating a gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g, fresh=False):
        """Add ``g`` into the gradient. ``fresh`` hands over ownership of ``g``
        (a buffer nobody else references), skipping the defensive copy."""
        if self.grad is None:
            self.grad = g if fresh else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of executed ops. ``record=False`` gives a forward-only tape."""

    def __init__(self, record=True):
        self.record = record
        self._ops = []
        self._consumed = False

    def __len__(self):
        return len(self._ops)

    def leaf(self, value, name=None, requires_grad=True):
        return Var(np.asarray(value, dtype=np.float64), requires_grad and self.record, name)

    def constant(self, value):
        return Var(value, False)

    def push(self, value, parents, backward):
        out = Var(value, self.record and any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._ops.append((out, backward))
        return out

    def backward(self, loss):
        if not self.record:
            raise TapeError("tape was created with record=False")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.value.size != 1:
            raise TapeError("backward needs a scalar output")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self._ops.clear()


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(tape, a, b, transpose_b=False):
    """``a @ b`` (or ``a @ b.T``) with numpy broadcasting over leading axes.

    A 2-D right operand is applied to every row of a stacked left operand;
    its gradient is then formed as one flat product rather than per batch.
    """
    bv = b.value.T if transpose_b and b.value.ndim == 2 else (
        np.swapaxes(b.value, -1, -2) if transpose_b else b.value)
    av = a.value
    out = np.matmul(av, bv)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            a.accumulate(_unbroadcast(ga, av.shape), fresh=True)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                a2 = av.reshape(-1, av.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = g2.T @ a2 if transpose_b else a2.T @ g2
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
                gb = _unbroadcast(gb, bv.shape)
                if transpose_b:
                    gb = np.swapaxes(gb, -1, -2)
            b.accumulate(gb, fresh=gb.flags.c_contiguous)

    return tape.push(out, (a, b), backward)


def add(tape, a, b):
    out = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.value.shape))

    return tape.push(out, (a, b), backward)


def scale(tape, a, c):
    out = a.value * c

    def backward(g):
        a.accumulate(g * c, fresh=True)

    return tape.push(out, (a,), backward)


def relu(tape, a):
    mask = a.value > 0
    out = np.where(mask, a.value, 0.0)

    def backward(g):
        a.accumulate(g * mask, fresh=True)

    return tape.push(out, (a,), backward)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(tape, a, rate, rng, training):
    """Inverted dropout. ``rng`` is a ``numpy.random.Generator`` or an int seed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    m = dropout_mask(a.value.shape, rate, rng)
    out = a.value * m

    def backward(g):
        a.accumulate(g * m, fresh=True)

    return tape.push(out, (a,), backward)


def reshape(tape, a, shape):
    old = a.value.shape
    out = a.value.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(old))

    return tape.push(out, (a,), backward)


def swapaxes(tape, a, i, j):
    out = np.swapaxes(a.value, i, j)

    def backward(g):
        a.accumulate(np.swapaxes(g, i, j))

    return tape.push(out, (a,), backward)


def embedding(tape, table, idx):
    """Row lookup ``table[idx]``; the backward pass scatter-adds into the table."""
    out = table.value[idx]

    def backward(g):
        d = table.value.shape[1]
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        table.accumulate(gt, fresh=True)

    return tape.push(out, (table,), backward)


def layer_norm(tape, x, gamma, beta, eps=LN_EPS):
    """Normalize over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta."""
    shape = x.value.shape
    d = shape[-1]
    x2 = np.ascontiguousarray(x.value.reshape(-1, d))
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0])
    kernels.layer_norm_fwd(x2, gamma.value, beta.value, eps, y, xhat, rstd)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx = np.empty_like(g2)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        kernels.layer_norm_bwd(g2, xhat, rstd, gamma.value, dx, dgamma, dbeta)
        if x.requires_grad:
            x.accumulate(dx.reshape(shape), fresh=True)
        if gamma.requires_grad:
            gamma.accumulate(dgamma)
        if beta.requires_grad:
            beta.accumulate(dbeta)

    return tape.push(y.reshape(shape), (x, gamma, beta), backward)


def masked_softmax(tape, logits, causal=True, mask_after=False):
    """Softmax over the last axis of ``(..., r, c)`` logits.

    With ``causal``, entries ``j > i`` get -inf before exponentiation, so every
    row is a distribution over its allowed positions. ``mask_after`` instead
    takes the softmax over the whole row and zeroes the future entries
    afterwards; those rows no longer sum to 1.
    """
    shape = logits.value.shape
    r, c = shape[-2], shape[-1]
    x3 = np.ascontiguousarray(logits.value.reshape(-1, r, c))
    s = np.empty_like(x3)
    kernels.masked_softmax_fwd(x3, causal and not mask_after, s)
    if causal and mask_after:
        keep = np.tri(r, c)
        y = s * keep
    else:
        keep = None
        y = s

    def backward(g):
        g3 = np.ascontiguousarray(g.reshape(-1, r, c))
        if keep is not None:
            g3 = g3 * keep
        dx = np.empty_like(g3)
        kernels.masked_softmax_bwd(s, g3, dx)
        logits.accumulate(dx.reshape(shape), fresh=True)

    return tape.push(y.reshape(shape), (logits,), backward)


def softmax_cross_entropy(tape, logits, targets):
    """Mean negative log-likelihood over positions with a non-zero target.

    ``logits`` is ``(..., |V|+1)``; column 0 is the padding item and never
    enters the softmax denominator.
    """
    c = logits.value.shape[-1]
    l2 = np.ascontiguousarray(logits.value.reshape(-1, c))
    t = np.ascontiguousarray(targets.reshape(-1), dtype=np.int64)
    count = int(np.count_nonzero(t))
    if count == 0:
        raise ValueError("no valid target position in batch")
    if t.max() >= c or t.min() < 0:
        raise IndexError("target index out of range")
    grad = np.empty_like(l2)
    total = kernels.softmax_xent(l2, t, grad, 1.0 / count)
    out = np.array(total / count)

    def backward(g):
        out_grad = grad if g == 1.0 else grad * g
        logits.accumulate(out_grad.reshape(logits.value.shape), fresh=True)

    return tape.push(out, (logits,), backward)


def relative_error(a, b, floor=1e-6):
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(f, params, grads, epsilon=1e-4, num_coords=300, seed=0,
                      frozen=None, floor=1e-6):
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must be deterministic and return a float. ``params`` and
    ``grads`` are name -> array mappings; coordinates are sampled uniformly
    over the concatenation of all tensors (every coordinate when there are
    fewer than ``num_coords``). ``frozen`` maps names to boolean masks of
    coordinates that must not move; their finite difference is reported as 0.
    Returns ``(max_rel_err, details)`` where details lists
    ``(name, index, analytic, numeric)``.
    """
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    if total <= num_coords:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=num_coords, replace=False))
    frozen = frozen or {}
    details = []
    worst = 0.0
    for pos in flat:
        ti = int(np.searchsorted(offsets, pos, side="right") - 1)
        name = names[ti]
        idx = np.unravel_index(int(pos - offsets[ti]), params[name].shape)
        arr = params[name]
        if name in frozen and frozen[name][idx]:
            numeric = 0.0
        else:
            old = arr[idx]
            arr[idx] = old + epsilon
            fp = f(params)
            arr[idx] = old - epsilon
            fm = f(params)
            arr[idx] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}{idx}")
            numeric = (fp - fm) / (2.0 * epsilon)
        analytic = float(grads[name][idx])
        err = float(relative_error(analytic, numeric, floor))
        worst = max(worst, err)
        details.append((name, idx, analytic, numeric))
    return worst, details
