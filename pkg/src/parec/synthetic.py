"""Synthetic interaction logs with known structure."""
import numpy as np

from .dataset import RawInteraction


def cyclic_interactions(num_users=500, length=30, num_items=50, seed=0):
    """Every user walks the item cycle: item i is always followed by (i + 1) mod num_items.

    Start items are drawn uniformly; the next item is therefore a
    deterministic function of the current one.
    """
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, num_items, size=num_users)
    out = []
    for u, s in enumerate(starts):
        for t in range(length):
            out.append(RawInteraction(f"u{u}", str((s + t) % num_items), 1000 * u + t))
    return out


def uniform_interactions(num_users, length, num_items, seed=0):
    """Items drawn i.i.d. uniformly: nothing to learn, every ranking is chance."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(num_users):
        for t, it in enumerate(rng.integers(0, num_items, size=length)):
            out.append(RawInteraction(f"u{u}", str(it), t))
    return out
