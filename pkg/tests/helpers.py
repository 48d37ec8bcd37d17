"""Shared builders for the test suite."""
import numpy as np

from parec.dataset import SequenceBatch, preprocess
from parec.model import AttentionSpec, ModelDims, forward, init_params
from parec.synthetic import cyclic_interactions

GRAD_DIMS = ModelDims(d=8, n=6, num_blocks=2, num_items=10)


def small_batch(seed=0, n=6, num_items=10, pad=(2, 0)):
    """Two users, left padding of ``pad[b]`` positions, next-item targets."""
    rng = np.random.default_rng(seed)
    rows_in, rows_t = [], []
    for p in pad:
        seq = rng.integers(1, num_items + 1, size=n + 1)
        seq[:p] = 0
        rows_in.append(seq[:-1])
        rows_t.append(np.where(seq[:-1] == 0, 0, seq[1:]))
    inputs, targets = np.array(rows_in), np.array(rows_t)
    # a pad input never predicts; the first real input does
    return SequenceBatch(inputs, targets, targets != 0, np.arange(len(pad)))


def gradcheck_instance(variant, seed=0, margin=2e-3, noise=0.3, k=3, num_heads=2):
    """Randomized parameters for a gradient check, away from ReLU kinks.

    Central differences are only meaningful where the loss is smooth, so
    draws whose FFN pre-activations come within ``margin`` of zero are
    rejected and redrawn.
    """
    spec = AttentionSpec.from_variant(variant, k=k, num_heads=num_heads)
    batch = small_batch(seed)
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        params = init_params(spec, GRAD_DIMS, seed)
        for name in params:
            params[name] = params[name] + rng.normal(0.0, noise, params[name].shape)
        params["item_emb"][0] = 0.0
        trace = forward(params, spec, batch)
        if min(np.abs(h).min() for h in trace.pre_relu) > margin:
            return params, spec, batch
    raise RuntimeError("no kink-free draw found")


def frozen_padding(params):
    mask = np.zeros_like(params["item_emb"], dtype=bool)
    mask[0] = True
    return {"item_emb": mask}


def cyclic_dataset(**kw):
    return preprocess(cyclic_interactions(**kw))
