"""Heat maps of positional structure: embedding correlations and learned attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx


@dataclass
class HeatGrid:
    values: np.ndarray  # (n, n), zero above the diagonal
    row_normalized: bool

    @property
    def n(self):
        return self.values.shape[0]


def row_max_normalize(a):
    """Divide each row by its maximum; all-zero rows stay zero."""
    mx = a.max(axis=1, keepdims=True)
    return np.divide(a, mx, out=np.zeros_like(a), where=mx > 0)


def positional_correlation(P, normalize=True, broadcast="row"):
    """``exp(P P^T / sqrt(d))`` with future positions zeroed.

    With ``normalize`` each row is divided by its own maximum.
    ``broadcast="literal"`` instead divides by ``max(axis=-1)`` without
    keeping dims, so numpy broadcasts the row maxima across columns
    (entry (i, j) is divided by the maximum of row j).
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] == 0:
        raise ValueError(f"positional embeddings must be (n, d) with d > 0, got {P.shape}")
    c = np.tril(np.exp(P @ P.T / math.sqrt(P.shape[1])))
    if not normalize:
        return HeatGrid(c, False)
    if broadcast == "row":
        return HeatGrid(row_max_normalize(c), True)
    if broadcast == "literal":
        return HeatGrid(c / np.max(c, axis=-1), True)
    raise ValueError(f"broadcast must be 'row' or 'literal', got {broadcast!r}")


def attention_logits(params, spec, block):
    p = f"block{block}."
    if spec.kind == "positional":
        return params[p + "R"]
    if spec.kind == "factorized":
        return params[p + "R1"] @ params[p + "R2"].T
    raise ValueError(f"attention maps are input-independent only for positional/factorized "
                     f"attention, not {spec.kind!r}")


def attention_matrix(params, spec, block):
    """Row-stochastic causal attention of one block (input-independent variants)."""
    num_blocks = sum(1 for k in params if k.endswith(".W_V"))
    if not 1 <= block <= num_blocks:
        raise ValueError(f"block must be in 1..{num_blocks}, got {block}")
    logits = attention_logits(params, spec, block)
    d = params["item_emb"].shape[1]
    tape = nx.Tape(record=False)
    return nx.masked_softmax(tape, tape.constant(logits / math.sqrt(d)), True,
                             spec.mask_after_softmax).value


def attention_map(params, spec, block, normalize=True):
    a = attention_matrix(params, spec, block)
    return HeatGrid(row_max_normalize(a) if normalize else a, normalize)


def band_concentration(a, band=5):
    """Mean over rows of the attention mass within ``|i - j| <= band``."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    i, j = np.indices((n, n))
    inside = np.abs(i - j) <= band
    return float(np.mean(np.sum(np.where(inside, a, 0.0), axis=1) / a.sum(axis=1)))


def export_grid(grid, path, fmt=None):
    """Write a grid as CSV (17 significant digits) or 8-bit ASCII PGM (P2).

    PGM pixels are ``round(255 * value)`` with halves rounded up; values must
    lie in [0, 1].
    """
    if not path:
        raise ValueError("empty output path")
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    values = grid.values if isinstance(grid, HeatGrid) else np.asarray(grid, dtype=np.float64)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in values:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    elif fmt == "pgm":
        if values.min() < 0 or values.max() > 1:
            raise ValueError("PGM export needs values in [0, 1]; normalize the grid first")
        pix = np.floor(values * 255.0 + 0.5).astype(int)
        rows, cols = pix.shape
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(f"P2\n{cols} {rows}\n255\n")
            for row in pix:
                fh.write(" ".join(str(v) for v in row) + "\n")
    else:
        raise ValueError(f"unknown grid format {fmt!r}; expected 'csv' or 'pgm'")
    return path


def read_csv_grid(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_pgm(path):
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM file")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array(tokens[4:4 + rows * cols], dtype=int).reshape(rows, cols)
    return pix, maxval


def grid_filename(kind, variant, n, block=None, ext="csv"):
    stem = f"{kind}_{variant}" + (f"_block{block}" if block is not None else "") + f"_n{n}"
    return f"{stem}.{ext}"
