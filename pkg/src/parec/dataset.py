"""Interaction-log ingestion, k-core filtering, leave-one-out splitting and
fixed-length sequence batching."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

FORMATS = ("movielens_dat", "tsv")
PHASES = ("train", "valid", "test")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno, line, reason):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")


class EmptyInputError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences with dense item indices 1..num_items.

    ``sequences[u]`` is the full ordered sequence of user ``u``; the last item
    is the test target, the one before it the validation target and the rest
    form the training prefix.
    """

    sequences: list
    user_ids: list
    item_ids: list  # item_ids[i - 1] is the raw id of dense item i

    num_users: int = field(init=False)
    num_items: int = field(init=False)

    def __post_init__(self):
        self.num_users = len(self.sequences)
        self.num_items = len(self.item_ids)

    def split(self, u):
        seq = self.sequences[u]
        return seq[:-2], int(seq[-2]), int(seq[-1])

    def phase_sequence(self, u, phase):
        """Items visible in ``phase``: the last element is the final target."""
        seq = self.sequences[u]
        if phase == "train":
            return seq[:-2]
        if phase == "valid":
            return seq[:-1]
        if phase == "test":
            return seq
        raise ValueError(f"unknown phase {phase!r}")

    @property
    def num_interactions(self):
        return int(sum(len(s) for s in self.sequences))

    def fingerprint(self):
        """sha256 over the dense sequences (stable across save/load)."""
        h = hashlib.sha256()
        h.update(f"{self.num_users} {self.num_items}\n".encode())
        for seq in self.sequences:
            h.update(np.asarray(seq, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # (B, n) int64, left-padded with 0
    targets: np.ndarray  # (B, n) int64, next item or 0
    valid_mask: np.ndarray  # (B, n) bool, targets != 0
    users: np.ndarray  # (B,) dataset user indices


def load_interactions(path, format="movielens_dat"):
    """Read a raw log. movielens_dat is ``user::item::rating::timestamp``,
    tsv is ``user<TAB>item<TAB>timestamp``. Ratings are discarded."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    sep, width = ("::", 4) if format == "movielens_dat" else ("\t", 3)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != width:
                raise ParseError(path, lineno, line, f"expected {width} fields")
            user, item, ts = parts[0].strip(), parts[1].strip(), parts[-1].strip()
            if not user or not item:
                raise ParseError(path, lineno, line, "empty user or item id")
            try:
                ts = int(ts)
            except ValueError:
                raise ParseError(path, lineno, line, "timestamp is not an integer") from None
            if ts < 0:
                raise ParseError(path, lineno, line, "negative timestamp")
            out.append(RawInteraction(user, item, ts))
    if not out:
        raise EmptyInputError(f"{path}: no interactions")
    return out


def _natural_key(s):
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


def kcore_filter(raw, min_count=5, iterative=True):
    """Indices into ``raw`` surviving the user/item count filter (count >= min_count).

    With ``iterative`` the filter repeats until no user or item falls below
    the threshold; otherwise both counts are taken once on the raw log.
    """
    alive = list(range(len(raw)))
    while True:
        users = Counter(raw[i].user_id for i in alive)
        items = Counter(raw[i].item_id for i in alive)
        kept = [i for i in alive
                if users[raw[i].user_id] >= min_count and items[raw[i].item_id] >= min_count]
        if len(kept) == len(alive) or not iterative:
            return kept
        alive = kept


def preprocess(raw, min_count=5, iterative=True):
    """Filter, order chronologically and densely re-index a raw log.

    Ties in timestamp keep input order. Users with fewer than 3 surviving
    interactions are dropped (they cannot be split into train/valid/test).
    Users and items are indexed in natural order of their raw ids; item
    indices start at 1 (0 is padding).
    """
    if not raw:
        raise EmptyInputError("no interactions to preprocess")
    kept = kcore_filter(raw, min_count, iterative)
    by_user = {}
    for i in kept:
        by_user.setdefault(raw[i].user_id, []).append(i)
    by_user = {u: ix for u, ix in by_user.items() if len(ix) >= 3}
    if not by_user:
        raise EmptyDatasetError(f"filtering with min_count={min_count} removed every interaction")
    user_ids = sorted(by_user, key=_natural_key)
    item_ids = sorted({raw[i].item_id for ix in by_user.values() for i in ix}, key=_natural_key)
    item_index = {it: k + 1 for k, it in enumerate(item_ids)}
    sequences = []
    for u in user_ids:
        ix = sorted(by_user[u], key=lambda i: (raw[i].timestamp, i))
        sequences.append(np.array([item_index[raw[i].item_id] for i in ix], dtype=np.int64))
    return InteractionDataset(sequences, user_ids, item_ids)


def dataset_stats(ds):
    n = ds.num_interactions
    return ds.num_users, ds.num_items, n, n / ds.num_users


def to_raw(ds):
    """Re-expand a dataset into raw interactions (timestamps = positions)."""
    return [RawInteraction(ds.user_ids[u], ds.item_ids[i - 1], t)
            for u, seq in enumerate(ds.sequences) for t, i in enumerate(seq)]


def pad_row(seq, n):
    """Left-pad (or truncate to the most recent ``n``) a 1-D item sequence."""
    row = np.zeros(n, dtype=np.int64)
    tail = np.asarray(seq[-n:], dtype=np.int64) if len(seq) else np.zeros(0, dtype=np.int64)
    if len(tail):
        row[n - len(tail):] = tail
    return row


def make_batch(ds, users, n, phase):
    users = np.asarray(users, dtype=np.int64)
    inputs = np.zeros((len(users), n), dtype=np.int64)
    targets = np.zeros((len(users), n), dtype=np.int64)
    for r, u in enumerate(users):
        seq = ds.phase_sequence(u, phase)
        inputs[r] = pad_row(seq[:-1], n)
        targets[r] = pad_row(seq[1:], n)
    return SequenceBatch(inputs, targets, targets != 0, users)


def build_sequences(ds, n, phase="train", batch_size=128, users=None) -> Iterator[SequenceBatch]:
    """Stream padded batches for ``phase``.

    ``users`` fixes the user order (e.g. a shuffled permutation); by default
    every user in index order. Each row holds the most recent ``n`` inputs of
    the phase sequence and next-item targets aligned to them.
    """
    if n < 2:
        raise ValueError("max length n must be >= 2")
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if users is None:
        users = np.arange(ds.num_users)
    for start in range(0, len(users), batch_size):
        yield make_batch(ds, users[start:start + batch_size], n, phase)


def save_dataset(ds, directory, extra=None):
    """Write ``dataset.tsv`` (user_idx, item_idx, position) and ``dataset.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "dataset.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, seq in enumerate(ds.sequences):
            for pos, item in enumerate(seq):
                fh.write(f"{u}\t{int(item)}\t{pos}\n")
    users, items, inter, avg = dataset_stats(ds)
    header = {
        "num_users": users,
        "num_items": items,
        "num_interactions": inter,
        "avg_length": avg,
        "user_ids": list(ds.user_ids),
        "item_ids": list(ds.item_ids),
        "sha256": ds.fingerprint(),
    }
    if extra:
        header.update(extra)
    with open(directory / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    directory = Path(directory)
    with open(directory / "dataset.json", encoding="utf-8") as fh:
        header = json.load(fh)
    rows = np.loadtxt(directory / "dataset.tsv", dtype=np.int64, delimiter="\t", ndmin=2)
    num_users = header["num_users"]
    sequences = [[] for _ in range(num_users)]
    order = np.lexsort((rows[:, 2], rows[:, 0]))
    for u, item, _ in rows[order]:
        sequences[u].append(item)
    ds = InteractionDataset([np.array(s, dtype=np.int64) for s in sequences],
                            header["user_ids"], header["item_ids"])
    if ds.fingerprint() != header["sha256"]:
        raise DataError(f"{directory}: dataset.tsv does not match the header checksum")
    return ds
