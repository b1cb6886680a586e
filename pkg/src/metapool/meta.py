"""The meta-learning loop: per-task inner adaptation, outer total-derivative
updates of the pooling meta-parameters, MAML-style weight initialization, and
the adapt-then-evaluate protocol for new tasks.

Task minibatches run vectorized on one computation record: every parameter is
broadcast along a leading task axis, per-task inner gradients come from one
backward pass, and the outer gradient of the summed validation loss equals the
task-id-ordered sum of per-task total derivatives.  Chunking bounds memory
without changing the summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from metapool import nn as N
from metapool import pooling as P
from metapool import tensor as T
from metapool.data import Task, TaskSet
from metapool.tensor import Record, Tensor, broadcast_to, grad

INNER_META_PARAMS = "meta-params"
INNER_OTHER_LAYERS = "other-layers"

DIVERGENCE_LIMIT = 1e6


class MetaError(Exception):
    pass


class DivergenceError(MetaError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss {loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class MetaConfig:
    inner_lr: float = 0.1
    outer_lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    inner_steps: int = 1
    temperature: float = 0.2
    inner_target: str = INNER_OTHER_LAYERS
    order: str = "second"
    outer_optimizer: str = "adam"
    seed: int = 0
    chunk_size: int = 8

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise MetaError("learning rates must be positive")
        if self.batch_size < 1:
            raise MetaError("task minibatch size must be >= 1")
        if self.inner_target not in (INNER_META_PARAMS, INNER_OTHER_LAYERS):
            raise MetaError(f"unknown inner target {self.inner_target!r}")
        if self.order not in ("second", "first"):
            raise MetaError(f"unknown order {self.order!r}")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise MetaError(f"unknown outer optimizer {self.outer_optimizer!r}")


def make_outer_optimizer(cfg: MetaConfig):
    if cfg.outer_optimizer == "adam":
        return N.Adam(lr=cfg.outer_lr)
    return N.SGD(lr=cfg.outer_lr)


# ---------------------------------------------------------------------------
# the bilevel computation
# ---------------------------------------------------------------------------

def _stack_chunk(model, tasks: list[Task]):
    x_tr = np.stack([model.prepare_inputs(t.x_tr) for t in tasks])
    y_tr = np.stack([model.prepare_targets(t.y_tr) for t in tasks])
    x_val = np.stack([model.prepare_inputs(t.x_val) for t in tasks])
    y_val = np.stack([model.prepare_targets(t.y_val) for t in tasks])
    return x_tr, y_tr, x_val, y_val


def _forward(model, x, theta, meta, mode):
    out = model.forward(x, theta, meta, mode)
    return out[0] if isinstance(out, tuple) else out


def _broadcast_per_task(rec: Record, arrays: dict[str, np.ndarray],
                        n: int) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    leaves = {k: rec.leaf(v) for k, v in arrays.items()}
    per_task = {k: broadcast_to(v, (n,) + v.shape) for k, v in leaves.items()}
    return leaves, per_task


def _traced_inner(model, x_tr, y_tr, theta_b, meta_b, cfg: MetaConfig,
                  rec: Record, pool_mode: str):
    """Inner adaptation on the training split; returns the adapted copy of the
    inner-target parameters and the pre-adaptation per-task losses."""
    targets = meta_b if cfg.inner_target == INNER_META_PARAMS else theta_b
    others_theta = theta_b
    others_meta = meta_b
    first_losses = None
    adapted = dict(targets)
    for _ in range(cfg.inner_steps):
        if cfg.inner_target == INNER_META_PARAMS:
            pred = _forward(model, x_tr, others_theta, adapted, pool_mode)
        else:
            pred = _forward(model, x_tr, adapted, others_meta, pool_mode)
        losses = model.loss_per_task(pred, y_tr)
        if first_losses is None:
            first_losses = losses
        keys = list(adapted.keys())
        gs = grad(losses.sum(), [adapted[k] for k in keys])
        if cfg.order == "first":
            gs = [rec.leaf(g.numpy()) for g in gs]
        adapted = {k: adapted[k] - cfg.inner_lr * g for k, g in zip(keys, gs)}
    return adapted, first_losses


def inner_step(model, meta_arrays: dict, theta_arrays: dict, task: Task,
               cfg: MetaConfig, pool_mode: str = P.MODE_META) -> dict[str, np.ndarray]:
    """One-task view of the inner loop; returns the adapted parameter arrays."""
    with Record() as rec:
        x_tr, y_tr, _, _ = _stack_chunk(model, [task])
        _, meta_b = _broadcast_per_task(rec, meta_arrays, 1)
        _, theta_b = _broadcast_per_task(rec, theta_arrays, 1)
        adapted, _ = _traced_inner(model, rec.leaf(x_tr), rec.leaf(y_tr),
                                   theta_b, meta_b, cfg, rec, pool_mode)
    return {k: v.numpy()[0] for k, v in adapted.items()}


def _bilevel_chunk(model, meta_arrays, theta_arrays, tasks: list[Task],
                   cfg: MetaConfig, outer_wrt: str, pool_mode: str):
    """Outer gradients for one task chunk.

    Returns (grads dict over the outer_wrt arrays, train losses (n,),
    val losses (n,)).
    """
    n = len(tasks)
    x_tr, y_tr, x_val, y_val = _stack_chunk(model, tasks)
    with Record() as rec:
        meta_leaves, meta_b = _broadcast_per_task(rec, meta_arrays, n)
        theta_leaves, theta_b = _broadcast_per_task(rec, theta_arrays, n)
        adapted, tr_losses = _traced_inner(model, rec.leaf(x_tr), rec.leaf(y_tr),
                                           theta_b, meta_b, cfg, rec, pool_mode)
        if cfg.inner_target == INNER_META_PARAMS:
            val_meta, val_theta = adapted, theta_b
        else:
            val_meta, val_theta = meta_b, adapted
        pred = _forward(model, rec.leaf(x_val), val_theta, val_meta, pool_mode)
        val_losses = model.loss_per_task(pred, y_val)
        wrt = meta_leaves if outer_wrt == "meta" else theta_leaves
        keys = list(wrt.keys())
        gs = grad(val_losses.sum(), [wrt[k] for k in keys])
        return ({k: g.numpy() for k, g in zip(keys, gs)},
                tr_losses.numpy().copy(), val_losses.numpy().copy())


def outer_gradients(model, meta_arrays, theta_arrays, tasks: list[Task],
                    cfg: MetaConfig, outer_wrt: str = "meta",
                    pool_mode: str = P.MODE_META):
    """Summed per-task total derivatives of the validation loss, accumulated
    in task-id order, plus per-task loss diagnostics."""
    if not tasks:
        raise MetaError("task minibatch is empty")
    tasks = sorted(tasks, key=lambda t: t.task_id)
    source = meta_arrays if outer_wrt == "meta" else theta_arrays
    total = {k: np.zeros_like(v) for k, v in source.items()}
    tr_all, val_all = [], []
    for start in range(0, len(tasks), cfg.chunk_size):
        chunk = tasks[start:start + cfg.chunk_size]
        gs, tr, val = _bilevel_chunk(model, meta_arrays, theta_arrays, chunk,
                                     cfg, outer_wrt, pool_mode)
        for k in total:
            total[k] += gs[k]
        tr_all.append(tr)
        val_all.append(val)
    stats = {
        "train_losses": np.concatenate(tr_all),
        "val_losses": np.concatenate(val_all),
    }
    return total, stats


def outer_step(model, meta_arrays, theta_arrays, tasks: list[Task],
               cfg: MetaConfig, optimizer=None,
               pool_mode: str = P.MODE_META):
    """One outer update of the meta-parameters; returns (new meta, stats)."""
    optimizer = optimizer or make_outer_optimizer(cfg)
    grads, stats = outer_gradients(model, meta_arrays, theta_arrays, tasks,
                                   cfg, outer_wrt="meta", pool_mode=pool_mode)
    return optimizer.update(meta_arrays, grads), stats


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------

def _pooling_log_stats(meta_arrays, temperature: float) -> dict:
    with np.errstate(over="ignore"):
        p = np.exp(meta_arrays["p_tilde"])
    w = P.transform_shape(meta_arrays["w_tilde"], temperature, P.MODE_META)
    saturated = np.mean((w < 0.05) | (w > 0.95))
    return {"p_min": float(p.min()), "p_max": float(p.max()),
            "w_saturation_fraction": float(saturated)}


def meta_train(model, task_set: TaskSet, cfg: MetaConfig,
               meta_arrays: Optional[dict] = None,
               theta_arrays: Optional[dict] = None,
               log_callback: Optional[Callable[[dict], None]] = None):
    """Run Algorithm 1 for ``cfg.epochs`` outer epochs.

    The non-pooling weights stay at their initial values throughout; inner
    updates are used only to form the outer gradients.  Returns the final
    meta-parameter arrays and the per-epoch log.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if meta_arrays is None:
        meta_arrays = model.init_meta(int(seeds[0].generate_state(1)[0] % 2 ** 31))
    meta_arrays = {k: np.array(v) for k, v in meta_arrays.items()}
    if theta_arrays is None:
        theta_arrays = model.init_theta(int(seeds[1].generate_state(1)[0] % 2 ** 31))
    sampler = np.random.default_rng(seeds[2])
    optimizer = make_outer_optimizer(cfg)

    log: list[dict] = []
    for epoch in range(cfg.epochs):
        batch = task_set.sample_minibatch(cfg.batch_size, sampler)
        try:
            meta_arrays, stats = outer_step(model, meta_arrays, theta_arrays,
                                            batch, cfg, optimizer)
        except T.DomainError as exc:
            raise DivergenceError(epoch, float("inf")) from exc
        mean_val = float(np.mean(stats["val_losses"]))
        pool_stats = _pooling_log_stats(meta_arrays, cfg.temperature)
        if (not np.isfinite(mean_val) or mean_val > DIVERGENCE_LIMIT
                or not np.isfinite(pool_stats["p_max"])):
            raise DivergenceError(epoch, mean_val)
        record = {"epoch": epoch,
                  "mean_train_loss": float(np.mean(stats["train_losses"])),
                  "mean_val_loss": mean_val,
                  **pool_stats}
        log.append(record)
        if log_callback is not None:
            log_callback(record)
    return meta_arrays, log


def maml_init(model, task_set: TaskSet, cfg: MetaConfig,
              meta_arrays: Optional[dict],
              theta_arrays: Optional[dict] = None,
              pool_mode: str = P.MODE_EVAL):
    """Meta-learn initial weights for the non-pooling layers (MAML): the same
    inner/outer structure with theta as the meta-parameter and the pooling
    layer held fixed (binary form, matching how it is later deployed)."""
    cfg = replace(cfg, inner_target=INNER_OTHER_LAYERS)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if theta_arrays is None:
        theta_arrays = model.init_theta(int(seeds[1].generate_state(1)[0] % 2 ** 31))
    theta_arrays = {k: np.array(v) for k, v in theta_arrays.items()}
    meta_arrays = meta_arrays or {}
    sampler = np.random.default_rng(seeds[2])
    optimizer = make_outer_optimizer(cfg)

    log: list[dict] = []
    for epoch in range(cfg.epochs):
        batch = task_set.sample_minibatch(cfg.batch_size, sampler)
        try:
            grads, stats = outer_gradients(model, meta_arrays, theta_arrays, batch,
                                           cfg, outer_wrt="theta", pool_mode=pool_mode)
        except T.DomainError as exc:
            raise DivergenceError(epoch, float("inf")) from exc
        theta_arrays = optimizer.update(theta_arrays, grads)
        mean_val = float(np.mean(stats["val_losses"]))
        if not np.isfinite(mean_val) or mean_val > DIVERGENCE_LIMIT:
            raise DivergenceError(epoch, mean_val)
        log.append({"epoch": epoch, "mean_val_loss": mean_val})
    return theta_arrays, log


# ---------------------------------------------------------------------------
# adaptation / evaluation on new tasks
# ---------------------------------------------------------------------------

def adapt_theta(model, meta_arrays: Optional[dict], theta_init: dict,
                task: Task, steps: int, lr: float,
                pool_mode: str = P.MODE_EVAL):
    """Train the non-pooling weights on the task's training split with SGD.

    Pooling meta-parameters are frozen.  Returns (theta, bn running stats).
    """
    theta = {k: np.array(v) for k, v in theta_init.items()}
    bn_stats = model.fresh_bn_stats() if hasattr(model, "fresh_bn_stats") else None
    momentum = getattr(model, "bn_momentum", 0.1)
    adapt_batch_stats = getattr(model, "bn_adapt_stats", True)
    x_tr = model.prepare_inputs(task.x_tr)[None]
    y_tr = model.prepare_targets(task.y_tr)[None]
    for _ in range(steps):
        with Record() as rec:
            theta_leaves = {k: rec.leaf(v[None]) for k, v in theta.items()}
            meta_leaves = ({k: rec.leaf(v[None]) for k, v in meta_arrays.items()}
                           if meta_arrays else None)
            if bn_stats is not None and not adapt_batch_stats:
                out = model.forward(rec.leaf(x_tr), theta_leaves, meta_leaves,
                                    pool_mode, bn_mode="running", bn_stats=bn_stats)
            else:
                out = model.forward(rec.leaf(x_tr), theta_leaves, meta_leaves,
                                    pool_mode)
            pred, aux = out if isinstance(out, tuple) else (out, None)
            loss = model.loss_per_task(pred, rec.leaf(y_tr)).sum()
            keys = list(theta_leaves.keys())
            gs = grad(loss, [theta_leaves[k] for k in keys])
            for k, g in zip(keys, gs):
                theta[k] = theta[k] - lr * g.numpy()[0]
            if aux is not None and bn_stats is not None and adapt_batch_stats:
                bm, bv = aux
                c = bm.shape[-1]
                bn_stats = {
                    "mean": (1 - momentum) * bn_stats["mean"] + momentum * bm.reshape(c),
                    "var": (1 - momentum) * bn_stats["var"] + momentum * bv.reshape(c),
                }
    return theta, bn_stats


def evaluate_accuracy(model, meta_arrays: Optional[dict], theta: dict,
                      bn_stats: Optional[dict], x_val: np.ndarray,
                      labels: np.ndarray, pool_mode: str = P.MODE_EVAL) -> float:
    x = model.prepare_inputs(x_val)[None]
    with Record() as rec:
        theta_leaves = {k: rec.leaf(v[None]) for k, v in theta.items()}
        meta_leaves = ({k: rec.leaf(v[None]) for k, v in meta_arrays.items()}
                       if meta_arrays else None)
        out = model.forward(rec.leaf(x), theta_leaves, meta_leaves, pool_mode,
                            bn_mode="running", bn_stats=bn_stats)
        logits = out[0] if isinstance(out, tuple) else out
        predicted = np.argmax(logits.numpy()[0], axis=-1)
    return float(np.mean(predicted == labels))


def adapt_and_eval(model, meta_arrays: Optional[dict], theta_init: dict,
                   task: Task, steps: int, lr: float) -> float:
    """Adapt on D_tr, report the fraction of D_val classified correctly.

    Pooling parameters are used in evaluation (binary) mode and never change.
    """
    if task.x_tr.size == 0 or task.x_val.size == 0:
        raise MetaError("task has an empty split")
    frozen = ({k: v.copy() for k, v in meta_arrays.items()}
              if meta_arrays else None)
    theta, bn_stats = adapt_theta(model, meta_arrays, theta_init, task, steps, lr)
    acc = evaluate_accuracy(model, meta_arrays, theta, bn_stats,
                            task.x_val, task.y_val)
    if frozen is not None:
        for k in frozen:  # freezing contract: bitwise identical
            if not np.array_equal(frozen[k], meta_arrays[k]):
                raise MetaError("pooling meta-parameters changed during adaptation")
    return acc


def evaluate_reconstruction(model, meta_arrays: dict, tasks: list[Task],
                            pool_mode: str = P.MODE_EVAL,
                            chunk_size: int = 16) -> float:
    """Mean squared reconstruction error of the (binary-mode) pooling layer on
    held-out tasks' validation splits; no adaptation."""
    losses = []
    for start in range(0, len(tasks), chunk_size):
        chunk = tasks[start:start + chunk_size]
        n = len(chunk)
        x = np.stack([model.prepare_inputs(t.x_val) for t in chunk])
        y = np.stack([model.prepare_targets(t.y_val) for t in chunk])
        with Record() as rec:
            _, meta_b = _broadcast_per_task(rec, meta_arrays, n)
            pred = _forward(model, rec.leaf(x), {}, meta_b, pool_mode)
            losses.append(model.loss_per_task(pred, rec.leaf(y)).numpy())
    return float(np.mean(np.concatenate(losses)))
