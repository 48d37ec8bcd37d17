"""Full-ranking HR@K / NDCG@K: the held-out item is ranked against every item."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import make_batch
from .model import forward, infer_dims


@dataclass
class RankingReport:
    k: int
    hr: float
    ndcg: float
    per_user_rank: np.ndarray
    num_users_evaluated: int

    def to_json(self):
        return {"k": self.k, "hr": self.hr, "ndcg": self.ndcg, "n_users": self.num_users_evaluated}


def rank_of_target(scores, target):
    """1-based rank of ``target`` in a score vector indexed by item (index 0 = padding).

    Only strictly higher-scored items rank above the target, so ties go to
    the target.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= target < scores.shape[0]:
        raise IndexError(f"target {target} outside items 1..{scores.shape[0] - 1}")
    return int(1 + np.count_nonzero(scores[1:] > scores[target]))


def ranks_of_targets(scores, targets):
    """Vectorized ``rank_of_target`` over rows of a (B, |V|+1) score matrix."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if targets.min() < 1 or targets.max() >= scores.shape[1]:
        raise IndexError("target outside the item range")
    ranks = np.empty(len(targets), dtype=np.int64)
    kernels.count_greater(scores, targets, ranks)
    return ranks


def metrics_at_k(ranks, k=10):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    hit = ranks <= k
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return RankingReport(k, float(hit.mean()), float(gains.mean()), ranks, int(ranks.size))


def score_users(params, spec, ds, phase, batch_size=256, exclude_seen=False, n=None):
    """Yield ``(users, scores, targets)`` for every user, scoring the final position."""
    n = model_length(params, spec, n)
    for start in range(0, ds.num_users, batch_size):
        users = np.arange(start, min(start + batch_size, ds.num_users))
        batch = make_batch(ds, users, n, phase)
        trace = forward(params, spec, batch.inputs, training=False, with_logits=False)
        scores = trace.hidden[:, -1, :] @ params["item_emb"].T
        targets = batch.targets[:, -1]
        if exclude_seen:
            for r, u in enumerate(users):
                seen = ds.phase_sequence(u, phase)[:-1]
                seen = seen[seen != targets[r]]
                scores[r, seen] = -np.inf
        yield users, scores, targets


def model_length(params, spec, n=None):
    inferred = infer_dims(params, spec).n
    if inferred is not None:
        if n is not None and n != inferred:
            raise ValueError(f"n={n} conflicts with the model's length {inferred}")
        return inferred
    if n is None:
        raise ValueError("fixed-pattern models carry no length; pass n explicitly")
    return int(n)


def evaluate(params, spec, ds, phase="test", batch_size=256, k=10, exclude_seen=False, n=None):
    """Rank each user's held-out ``phase`` item against all items (dropout off).

    Previously seen items stay candidates unless ``exclude_seen`` is set.
    """
    if phase not in ("valid", "test"):
        raise ValueError(f"phase must be 'valid' or 'test', got {phase!r}")
    ranks = np.concatenate([ranks_of_targets(s, t) for _, s, t in
                            score_users(params, spec, ds, phase, batch_size, exclude_seen, n)])
    return metrics_at_k(ranks, k)


def binomial_band(p, num_users, sigmas=3.0):
    """(low, high) band of ``sigmas`` binomial standard deviations around ``p``."""
    sd = math.sqrt(p * (1 - p) / num_users)
    return p - sigmas * sd, p + sigmas * sd


def write_report(report, path, ranks_path=None, extra=None):
    out = report.to_json()
    if extra:
        out.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if ranks_path is not None:
        with open(ranks_path, "w", encoding="utf-8") as fh:
            fh.write("user_idx\trank\n")
            for u, r in enumerate(report.per_user_rank):
                fh.write(f"{u}\t{int(r)}\n")
