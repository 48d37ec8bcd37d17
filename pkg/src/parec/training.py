"""Backpropagation, Adam, and the epoch loop with validation-based selection."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import build_sequences
from .evaluation import evaluate
from .model import forward, init_params

log = logging.getLogger(__name__)

FROZEN_ROWS = {"item_emb": 0}


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    dropout_rate: float = 0.2
    seed: int = 0
    eval_batch_size: int = 256

    def errors(self):
        errs = []
        if not self.learning_rate > 0:
            errs.append(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                errs.append(f"{name} must be in [0, 1), got {v}")
        if not self.adam_eps > 0:
            errs.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.patience < 1:
            errs.append(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            errs.append(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0 <= self.dropout_rate < 1:
            errs.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return errs


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def backward(trace, params=None):
    """Reverse-mode gradients of ``trace.loss`` for every parameter tensor.

    The padding row of the item table is frozen and always gets zero.
    """
    if trace.loss_var is None:
        raise ValueError("trace has no loss; run forward with targets and record=True")
    trace.tape.backward(trace.loss_var)
    names = params if params is not None else trace.leaves
    grads = {}
    for name in names:
        g = trace.leaves[name].grad
        grads[name] = np.zeros_like(trace.leaves[name].value) if g is None else g
    for name, row in FROZEN_ROWS.items():
        if name in grads:
            grads[name][row] = 0.0
    return grads


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient in {name!r} ({bad} entries) "
                                  f"at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        params[name] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid: dict | None = None


def trainable_users(ds):
    """Users whose training prefix yields at least one next-item target."""
    return np.array([u for u in range(ds.num_users) if len(ds.phase_sequence(u, "train")) >= 2],
                    dtype=np.int64)


def _step_seed(seed, epoch, step):
    return np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0]


def train(ds, spec, dims, cfg, params=None, on_epoch=None):
    """Train with Adam; keep the parameters with the best validation HR@10.

    Users are reshuffled every epoch from a seeded generator. Training stops
    after ``cfg.patience`` epochs without strict improvement or at
    ``cfg.max_epochs``. ``on_epoch(record)`` is called after each epoch.
    """
    errs = cfg.errors()
    if errs:
        raise ValueError("; ".join(errs))
    if ds.num_users == 0:
        raise ValueError("empty dataset")
    if params is None:
        params = init_params(spec, dims, cfg.seed)
    users = trainable_users(ds)
    if users.size == 0:
        raise ValueError("no user has a training prefix of length >= 2")
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult({k: v.copy() for k, v in params.items()})
    best_hr = -1.0
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(users)
        total, count = 0.0, 0
        for step, batch in enumerate(build_sequences(ds, dims.n, "train", cfg.batch_size, order)):
            trace = forward(params, spec, batch, training=True, seed=_step_seed(cfg.seed, epoch, step),
                            dropout=cfg.dropout_rate, record=True)
            if not np.isfinite(trace.loss):
                raise DivergenceError(f"loss became {trace.loss} in epoch {epoch}, step {step}")
            grads = backward(trace, params)
            adam_step(params, grads, state, cfg)
            valid = int(batch.valid_mask.sum())
            total += trace.loss * valid
            count += valid
        rep = evaluate(params, spec, ds, "valid", cfg.eval_batch_size, n=dims.n)
        record = {
            "epoch": epoch,
            "train_loss": total / count,
            "val_hr10": rep.hr,
            "val_ndcg10": rep.ndcg,
            "seconds": time.perf_counter() - t0,
        }
        result.log.append(record)
        log.info("epoch %d loss %.4f val HR@10 %.4f NDCG@10 %.4f (%.1fs)", epoch,
                 record["train_loss"], rep.hr, rep.ndcg, record["seconds"])
        if on_epoch is not None:
            on_epoch(record)
        if rep.hr > best_hr:
            best_hr = rep.hr
            stale = 0
            result.params = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
            result.best_valid = {"hr": rep.hr, "ndcg": rep.ndcg}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return result


def write_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_experiment(ds, spec, dims, cfg, repeats=3, on_run=None):
    """Train ``repeats`` models (seeds ``cfg.seed + i``) and report median test metrics.

    Returns ``{"median": {...}, "runs": [...]}``; every raw run is kept.
    """
    if repeats < 1 or repeats % 2 == 0:
        raise ValueError(f"repeats must be a positive odd number, got {repeats}")
    runs = []
    for i in range(repeats):
        run_cfg = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        res = train(ds, spec, dims, run_cfg)
        rep = evaluate(res.params, spec, ds, "test", cfg.eval_batch_size, n=dims.n)
        run = {"seed": run_cfg.seed, "best_epoch": res.best_epoch, "epochs": len(res.log),
               "test_hr10": rep.hr, "test_ndcg10": rep.ndcg}
        runs.append(run)
        if on_run is not None:
            on_run(run, res)
    return summarize_runs(runs)


def summarize_runs(runs):
    """Per-metric median across runs, with the raw runs kept alongside."""
    return {
        "median": {
            m: float(np.median([r[m] for r in runs])) for m in ("test_hr10", "test_ndcg10")
        },
        "runs": runs,
    }
