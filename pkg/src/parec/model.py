"""Sequential recommender with learnable positional attention.

One architecture, four attention mechanisms:

* ``positional``  - learnable n x n logit matrix per block (PARec)
* ``factorized``  - logits R1 @ R2.T with R1, R2 of shape n x k (FPARec)
* ``dot_product`` - scaled dot-product self-attention plus a learned
  positional embedding table (SASRec baseline)
* ``fixed``       - a hand-specified row-stochastic pattern (average,
  linear or exponential annealing); only W_V, FFN and norms are learned

Blocks are pre-norm residual: ``F~ = F + drop(attn(LN(F)))`` then
``F' = F~ + drop(FFN(LN(F~)))``. Scores are ``LN(F_L) @ M.T`` with the item
embedding table ``M`` shared between input and output.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

KINDS = ("positional", "factorized", "dot_product", "fixed")
PATTERNS = ("average", "linear", "exponential")
VARIANTS = {
    "parec": ("positional", None),
    "fparec": ("factorized", None),
    "sasrec": ("dot_product", None),
    "fixed-average": ("fixed", "average"),
    "fixed-linear": ("fixed", "linear"),
    "fixed-exponential": ("fixed", "exponential"),
}
INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionSpec:
    kind: str
    k: int | None = None
    pattern: str | None = None
    num_heads: int = 1
    mask_after_softmax: bool = False

    @classmethod
    def from_variant(cls, variant, k=None, num_heads=1, mask_after_softmax=False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        kind, pattern = VARIANTS[variant]
        return cls(kind, k if kind == "factorized" else None, pattern,
                   num_heads if kind == "dot_product" else 1, mask_after_softmax)

    @property
    def variant(self):
        if self.kind == "fixed":
            return f"fixed-{self.pattern}"
        return {"positional": "parec", "factorized": "fparec", "dot_product": "sasrec"}[self.kind]


@dataclass(frozen=True)
class ModelDims:
    d: int
    n: int
    num_blocks: int
    num_items: int


def validate(spec, dims):
    """Every inconsistency between ``spec`` and ``dims`` (empty list when valid)."""
    errs = []
    if spec.kind not in KINDS:
        errs.append(f"attention kind must be one of {KINDS}, got {spec.kind!r}")
    for name in ("d", "n", "num_blocks", "num_items"):
        if getattr(dims, name) < 1:
            errs.append(f"{name} must be positive, got {getattr(dims, name)}")
    if spec.kind == "factorized":
        if spec.k is None:
            errs.append("factorized attention needs a rank k")
        elif not 1 <= spec.k <= dims.n:
            errs.append(f"rank k must satisfy 1 <= k <= n={dims.n}, got {spec.k}")
    elif spec.k is not None:
        errs.append(f"rank k only applies to factorized attention (got k={spec.k} for {spec.kind})")
    if spec.kind == "fixed" and spec.pattern not in PATTERNS:
        errs.append(f"fixed attention needs pattern in {PATTERNS}, got {spec.pattern!r}")
    if spec.num_heads < 1 or (dims.d >= 1 and dims.d % spec.num_heads):
        errs.append(f"num_heads={spec.num_heads} must divide d={dims.d}")
    if spec.kind != "dot_product" and spec.num_heads != 1:
        errs.append("num_heads only applies to dot_product attention")
    return errs


def default_rank(n):
    return 40 if n >= 200 else 20


# --------------------------------------------------------------------------
# parameters


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(spec, dims):
    """Ordered name -> shape map of every learnable tensor."""
    d, n = dims.d, dims.n
    shapes = {"item_emb": (dims.num_items + 1, d)}
    if spec.kind == "dot_product":
        shapes["pos_emb"] = (n, d)
    for l in range(1, dims.num_blocks + 1):
        p = f"block{l}."
        shapes[p + "attn_ln.gamma"] = (d,)
        shapes[p + "attn_ln.beta"] = (d,)
        if spec.kind == "positional":
            shapes[p + "R"] = (n, n)
        elif spec.kind == "factorized":
            shapes[p + "R1"] = (n, spec.k)
            shapes[p + "R2"] = (n, spec.k)
        elif spec.kind == "dot_product":
            shapes[p + "W_Q"] = (d, d)
            shapes[p + "W_K"] = (d, d)
        shapes[p + "W_V"] = (d, d)
        shapes[p + "ffn_ln.gamma"] = (d,)
        shapes[p + "ffn_ln.beta"] = (d,)
        shapes[p + "W1"] = (d, d)
        shapes[p + "b1"] = (d,)
        shapes[p + "W2"] = (d, d)
        shapes[p + "b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


def init_params(spec, dims, seed=0):
    """Fresh parameters, deterministic in ``seed``.

    Weights and the item table draw from a 2-sigma truncated normal with
    std 0.02; R1, R2 and the positional table from a plain normal(0, 0.02);
    R starts at zero so attention begins causal-uniform. Biases and betas are
    zero, gammas one, and item row 0 (padding) is all zeros.
    """
    errs = validate(spec, dims)
    if errs:
        raise ValueError("; ".join(errs))
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec, dims).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = np.ones(shape)
        elif leaf in ("beta", "b1", "b2", "R"):
            params[name] = np.zeros(shape)
        elif leaf in ("R1", "R2") or name == "pos_emb":
            params[name] = rng.normal(0.0, INIT_STD, shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    params["item_emb"][0] = 0.0
    return params


def infer_dims(params, spec):
    d = params["item_emb"].shape[1]
    blocks = sum(1 for k in params if k.endswith(".W_V"))
    if spec.kind == "positional":
        n = params["block1.R"].shape[0]
    elif spec.kind == "factorized":
        n = params["block1.R1"].shape[0]
    elif spec.kind == "dot_product":
        n = params["pos_emb"].shape[0]
    else:
        n = None
    return ModelDims(d, n, blocks, params["item_emb"].shape[0] - 1)


def parameter_count(spec, dims):
    """Attention-layer parameter count: W_V plus the mechanism's own tensors."""
    d, n = dims.d, dims.n
    if spec.kind == "dot_product":
        return 3 * d * d
    if spec.kind == "positional":
        return d * d + n * n
    if spec.kind == "factorized":
        return d * d + 2 * spec.k * n
    if spec.kind == "fixed":
        return d * d
    raise ValueError(f"unknown attention kind {spec.kind!r}")


def total_parameter_count(params):
    return int(sum(v.size for v in params.values())) - params["item_emb"].shape[1]


# --------------------------------------------------------------------------
# attention mechanisms


def fixed_pattern_matrix(pattern, n):
    """Row-normalized causal attention pattern.

    Unnormalized scores for query i attending to key j <= i (1-based):
    average 1, linear j, exponential e^(j - i); zero above the diagonal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(1, n + 1)[:, None].astype(np.float64)
    j = np.arange(1, n + 1)[None, :].astype(np.float64)
    lower = j <= i
    if pattern == "average":
        a = np.ones((n, n))
    elif pattern == "linear":
        a = np.broadcast_to(j, (n, n)).copy()
    elif pattern == "exponential":
        a = np.exp(np.minimum(j - i, 0.0))
    else:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    a = np.where(lower, a, 0.0)
    return a / a.sum(axis=1, keepdims=True)


def _values(tape, F, W_V, gamma, beta):
    return nx.matmul(tape, nx.layer_norm(tape, F, gamma, beta), W_V)


def positional_attention(tape, F, R, W_V, gamma, beta, mask_after=False):
    """``softmax(R / sqrt(d))`` (causal) applied to ``LN(F) @ W_V``.

    The same n x n attention serves every row of the batch. Returns
    ``(output, attention)``; the residual is added by the caller.
    """
    d = F.shape[-1]
    V = _values(tape, F, W_V, gamma, beta)
    A = nx.masked_softmax(tape, nx.scale(tape, R, 1.0 / math.sqrt(d)), True, mask_after)
    return nx.matmul(tape, A, V), A


def factorized_attention(tape, F, R1, R2, W_V, gamma, beta, mask_after=False):
    """Positional attention whose logits are the rank-k product ``R1 @ R2.T``."""
    if R1.shape != R2.shape:
        raise ValueError(f"R1 {R1.shape} and R2 {R2.shape} must have equal shapes")
    d = F.shape[-1]
    V = _values(tape, F, W_V, gamma, beta)
    logits = nx.matmul(tape, R1, R2, transpose_b=True)
    A = nx.masked_softmax(tape, nx.scale(tape, logits, 1.0 / math.sqrt(d)), True, mask_after)
    return nx.matmul(tape, A, V), A


def dot_product_attention(tape, F, W_Q, W_K, W_V, gamma, beta, num_heads=1, mask_after=False):
    """Causal multi-head scaled dot-product attention on ``LN(F)``.

    Heads split the d channels evenly; per-head logits are scaled by
    ``1/sqrt(d/h)``. There is no output projection. Returns
    ``(output, attention)`` with attention shaped ``(B, h, n, n)``.
    """
    B, n, d = F.shape
    if d % num_heads:
        raise ValueError(f"num_heads={num_heads} must divide d={d}")
    dh = d // num_heads
    X = nx.layer_norm(tape, F, gamma, beta)

    def heads(W):
        Y = nx.reshape(tape, nx.matmul(tape, X, W), (B, n, num_heads, dh))
        return nx.swapaxes(tape, Y, 1, 2)

    Q, K, V = heads(W_Q), heads(W_K), heads(W_V)
    logits = nx.scale(tape, nx.matmul(tape, Q, K, transpose_b=True), 1.0 / math.sqrt(dh))
    A = nx.masked_softmax(tape, logits, True, mask_after)
    out = nx.swapaxes(tape, nx.matmul(tape, A, V), 1, 2)
    return nx.reshape(tape, out, (B, n, d)), A


def fixed_attention(tape, F, pattern, W_V, gamma, beta):
    n = F.shape[-2]
    A = tape.constant(fixed_pattern_matrix(pattern, n))
    V = _values(tape, F, W_V, gamma, beta)
    return nx.matmul(tape, A, V), A


def ffn(tape, x, W1, b1, W2, b2, gamma, beta, return_hidden=False):
    """Position-wise ``ReLU(LN(x) @ W1 + b1) @ W2 + b2``."""
    h = nx.add(tape, nx.matmul(tape, nx.layer_norm(tape, x, gamma, beta), W1), b1)
    out = nx.add(tape, nx.matmul(tape, nx.relu(tape, h), W2), b2)
    return (out, h) if return_hidden else out


# --------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardTrace:
    blocks: list  # F_0 .. F_L, each (B, n, d)
    attention: list  # per-block attention matrices
    pre_relu: list  # per-block FFN pre-activations (B, n, d)
    hidden: np.ndarray  # LN(F_L), (B, n, d)
    logits: np.ndarray | None  # (B, n, |V|+1)
    loss: float | None
    tape: nx.Tape = field(repr=False, default=None)
    leaves: dict = field(repr=False, default=None)
    loss_var: nx.Var = field(repr=False, default=None)


def _block_attention(tape, leaves, spec, l, F):
    p = f"block{l}."
    g, b, W_V = leaves[p + "attn_ln.gamma"], leaves[p + "attn_ln.beta"], leaves[p + "W_V"]
    if spec.kind == "positional":
        return positional_attention(tape, F, leaves[p + "R"], W_V, g, b, spec.mask_after_softmax)
    if spec.kind == "factorized":
        return factorized_attention(tape, F, leaves[p + "R1"], leaves[p + "R2"], W_V, g, b,
                                    spec.mask_after_softmax)
    if spec.kind == "dot_product":
        return dot_product_attention(tape, F, leaves[p + "W_Q"], leaves[p + "W_K"], W_V, g, b,
                                     spec.num_heads, spec.mask_after_softmax)
    return fixed_attention(tape, F, spec.pattern, W_V, g, b)


def forward(params, spec, batch, training=False, seed=0, dropout=0.0, record=False,
            with_logits=True):
    """Run the model on a ``SequenceBatch`` (or a bare (B, n) input array).

    ``record=True`` keeps the tape so ``training.backward`` can differentiate
    the loss. The loss is computed whenever targets are available.
    """
    inputs = batch if isinstance(batch, np.ndarray) else batch.inputs
    targets = None if isinstance(batch, np.ndarray) else batch.targets
    inputs = np.asarray(inputs, dtype=np.int64)
    num_rows = params["item_emb"].shape[0]
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be (B, n), got shape {inputs.shape}")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= num_rows):
        raise IndexError(f"item index out of range [0, {num_rows - 1}]")
    n = inputs.shape[1]
    dims = infer_dims(params, spec)
    if dims.n is not None and dims.n != n:
        raise ValueError(f"batch width {n} does not match model length n={dims.n}")

    tape = nx.Tape(record=record)
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    rng = np.random.default_rng(seed)

    F = nx.embedding(tape, leaves["item_emb"], inputs)
    if spec.kind == "dot_product":
        F = nx.add(tape, F, leaves["pos_emb"])
    blocks, attention, pre_relu = [F.value], [], []
    for l in range(1, dims.num_blocks + 1):
        p = f"block{l}."
        out, A = _block_attention(tape, leaves, spec, l, F)
        attention.append(A.value)
        F = nx.add(tape, F, nx.dropout(tape, out, dropout, rng, training))
        out, h = ffn(tape, F, leaves[p + "W1"], leaves[p + "b1"], leaves[p + "W2"],
                     leaves[p + "b2"], leaves[p + "ffn_ln.gamma"], leaves[p + "ffn_ln.beta"],
                     return_hidden=True)
        pre_relu.append(h.value)
        F = nx.add(tape, F, nx.dropout(tape, out, dropout, rng, training))
        blocks.append(F.value)
    H = nx.layer_norm(tape, F, leaves["final_ln.gamma"], leaves["final_ln.beta"])

    logits = loss_var = None
    if with_logits or targets is not None:
        logits = nx.matmul(tape, H, leaves["item_emb"], transpose_b=True)
        if targets is not None:
            loss_var = nx.softmax_cross_entropy(tape, logits, targets)
    return ForwardTrace(
        blocks=blocks,
        attention=attention,
        pre_relu=pre_relu,
        hidden=H.value,
        logits=None if logits is None else logits.value,
        loss=None if loss_var is None else float(loss_var.value),
        tape=tape,
        leaves=leaves,
        loss_var=loss_var,
    )


def loss(logits, targets, valid_mask=None):
    """Mean cross-entropy over valid positions; padding column excluded."""
    targets = np.asarray(targets, dtype=np.int64)
    if valid_mask is not None:
        targets = np.where(valid_mask, targets, 0)
    tape = nx.Tape(record=False)
    return float(nx.softmax_cross_entropy(tape, tape.constant(np.asarray(logits, np.float64)),
                                          targets).value)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PARECT1\n"


def save_checkpoint(directory, params, spec, dims, **meta):
    """Write ``model.bin`` (named float64 tensors) and ``model.json`` (manifest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(params)
    buf = bytearray(_MAGIC)
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    (directory / "model.bin").write_bytes(bytes(buf))
    manifest = {
        "spec": asdict(spec),
        "variant": spec.variant,
        "dims": asdict(dims),
        "tensors": names,
        "sha256": hashlib.sha256(bytes(buf)).hexdigest(),
        **meta,
    }
    with open(directory / "model.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory):
    """Returns ``(params, spec, dims, manifest)``."""
    directory = Path(directory)
    with open(directory / "model.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    data = (directory / "model.bin").read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{directory}/model.bin does not match its manifest checksum")
    if not data.startswith(_MAGIC):
        raise ValueError(f"{directory}/model.bin is not a checkpoint file")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    spec = AttentionSpec(**manifest["spec"])
    dims = ModelDims(**manifest["dims"])
    return params, spec, dims, manifest
