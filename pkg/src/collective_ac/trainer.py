"""Actor-critic training on sampled count trajectories.

Each iteration samples ``K`` count trajectories, takes one critic step and
then one actor step. The critic is trained either against individual values
entry by entry (``fC``) or against the per-step fleet return (``C``); the
actor uses either the factored score-times-critic estimator (``fA``) or the
product of the summed score and the summed critic (``A``).

Critic outputs are in normalised units: a per-agent value ``v`` is stored as
``(v - mean) / std`` using a running :class:`~collective_ac.nets.TargetScaler`.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .countsim import evaluate_policy, returns_to_go, sample_batch
from .model import CountBatch, ObservationModel, features
from .nets import (
    AdamState, CriticNet, NumericalError, PolicyNet, TargetScaler, adam_step,
    clip_by_norm, hidden_for, save_checkpoint, score_weighted_grad,
)
from .values import batch_values

log = logging.getLogger(__name__)

VARIANTS = ("fAfC", "AC", "AfC", "fAC")


@dataclass
class TrainConfig:
    variant: str = "fAfC"
    batch_size: int = 100
    iterations: int = 1000
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    eval_interval: int = 10
    eval_samples: int = 100
    seed: int = 0
    clip_norm: Optional[float] = 10.0
    observation: str = "o1"
    scaler_decay: float = 0.01
    early_stop: bool = False
    workers: int = 1
    block_size: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.eval_interval < 1 or self.eval_samples < 1 or self.workers < 1:
            raise ValueError("eval_interval, eval_samples and workers must be >= 1")
        if self.observation not in ("o0", "o1", "oN"):
            raise ValueError(f"unknown observation kind {self.observation!r}")

    @property
    def factored_actor(self):
        return self.variant.startswith("fA")

    @property
    def factored_critic(self):
        return self.variant.endswith("fC")


@dataclass
class TrainMetrics:
    records: list = field(default_factory=list)

    def final_return(self):
        return self.records[-1]["return_mean"] if self.records else float("nan")

    def column(self, name):
        return np.array([r[name] for r in self.records])


@dataclass
class Rows:
    """Occupied ``(k, t, i)`` cells of a batch with their features and action counts."""

    k: np.ndarray
    t: np.ndarray
    i: np.ndarray
    seg: np.ndarray  # k * H + t
    X: np.ndarray
    n: np.ndarray  # (N, A) action counts
    K: int
    H: int


def batch_rows(batch: CountBatch, model, obs: ObservationModel) -> Rows:
    K, H, S = batch.n_s.shape
    k, t, i = np.nonzero(batch.n_s)
    seg = k * H + t
    X = features(model, obs, t, batch.n_s.reshape(K * H, S), seg, i)
    return Rows(k, t, i, seg, X, batch.n_sa[k, t, i].astype(np.float64), K, H)


def _segment_sum(rows: Rows, per_row):
    return np.bincount(rows.seg, weights=per_row, minlength=rows.K * rows.H)


def factored_critic_loss(critic: CriticNet, rows: Rows, targets):
    """``(1/K) sum n (f - target)^2`` over occupied cells, and its gradient."""
    f, acts = critic.values(rows.X)
    d = f - targets
    loss = float((rows.n * d * d).sum() / rows.K)
    grad = critic.mlp.backward(acts, 2.0 * rows.n * d / rows.K)
    return loss, grad


def global_critic_loss(critic: CriticNet, rows: Rows, seg_targets):
    """``(1/K) sum_{k,t} (sum n f - target_{k,t})^2``, and its gradient."""
    f, acts = critic.values(rows.X)
    pred = _segment_sum(rows, (rows.n * f).sum(axis=1))
    resid = pred - seg_targets
    loss = float((resid * resid).sum() / rows.K)
    grad = critic.mlp.backward(acts, 2.0 * resid[rows.seg, None] * rows.n / rows.K)
    return loss, grad


def _value_rows(values, rows: Rows):
    return values[rows.k, rows.t, rows.i]


def critic_targets(batch, model, rows, values=None, scaler=None, factored=True):
    """Regression targets for one critic step, normalised when ``scaler`` is given.

    Factored targets are per-cell individual values; global targets are the
    per-step returns ``R[k, t]``.
    """
    M = model.population
    if factored:
        if values is None:
            values = batch_values(batch, model)
        T = _value_rows(values, rows)
        if scaler is not None:
            scaler.update(T, rows.n)
            T = scaler.normalize(T)
        return T
    R = returns_to_go(batch, model).ravel()
    if scaler is not None:
        scaler.update(R / M)
        R = (R - M * scaler.mean) / scaler.std
    return R


def _critic_step(critic, adam, lr, loss_fn, rows, targets, clip_norm):
    loss, grad = loss_fn(critic, rows, targets)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite critic loss {loss}")
    new = critic.copy()
    new.mlp.params = adam_step(critic.mlp.params, adam, clip_by_norm(grad, clip_norm), lr)
    post, _ = loss_fn(new, rows, targets)
    return new, post


def critic_update_factored(batch, critic, values, lr, adam, model, obs, scaler=None,
                           clip_norm=None, rows=None):
    """One Adam step on the count-weighted per-cell loss; returns ``(critic, loss)``."""
    rows = rows or batch_rows(batch, model, obs)
    T = critic_targets(batch, model, rows, values, scaler, factored=True)
    return _critic_step(critic, adam, lr, factored_critic_loss, rows, T, clip_norm)


def critic_update_global(batch, critic, values, lr, adam, model, obs, scaler=None,
                         clip_norm=None, rows=None):
    """One Adam step on the per-step fleet-return loss; returns ``(critic, loss)``.

    ``values`` is accepted for symmetry with the factored update; the fleet
    return is recomputed from the rewards.
    """
    rows = rows or batch_rows(batch, model, obs)
    T = critic_targets(batch, model, rows, values, scaler, factored=False)
    return _critic_step(critic, adam, lr, global_critic_loss, rows, T, clip_norm)


def _finish(grad, clip_norm):
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite actor gradient")
    return clip_by_norm(grad, clip_norm)


def actor_grad_factored(batch, policy, critic, model, obs, clip_norm=None, rows=None, f=None):
    """``(1/K) sum n(i,j) grad log pi(j|i,o) f(i,j,o)`` over the batch."""
    rows = rows or batch_rows(batch, model, obs)
    if f is None:
        f, _ = critic.values(rows.X)
    return _finish(score_weighted_grad(policy, rows.X, rows.n * f) / rows.K, clip_norm)


def actor_grad_global(batch, policy, critic, model, obs, clip_norm=None, rows=None, f=None):
    """``(1/K) sum_t [sum n grad log pi] [sum n f]`` over the batch."""
    rows = rows or batch_rows(batch, model, obs)
    if f is None:
        f, _ = critic.values(rows.X)
    G = _segment_sum(rows, (rows.n * f).sum(axis=1))
    C = rows.n * G[rows.seg, None]
    return _finish(score_weighted_grad(policy, rows.X, C) / rows.K, clip_norm)


def init_networks(model, obs, seed):
    rng = np.random.default_rng([seed, 0])
    d, A, h = obs.input_dim(model), model.num_actions, hidden_for(obs.kind)
    return PolicyNet.create(d, A, h, rng), CriticNet.create(d, A, h, rng)


def sample_training_batch(model, policy, obs, config: TrainConfig, it, pool=None):
    """Batch for iteration ``it``; each block of trajectories has its own derived seed."""
    K = config.batch_size
    bs = config.block_size or K
    sizes = [min(bs, K - s) for s in range(0, K, bs)]

    def block(b):
        rng = np.random.default_rng([config.seed, 1, it, b])
        return sample_batch(model, policy, obs, sizes[b], rng)

    if pool is None:
        parts = [block(b) for b in range(len(sizes))]
    else:
        parts = list(pool.map(block, range(len(sizes))))
    return parts[0] if len(parts) == 1 else CountBatch.concat(parts)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


def _plateau(records, window=20, tol=1e-3):
    if len(records) < 2 * window:
        return False
    vals = [r["return_mean"] for r in records]
    before, recent = max(vals[:-window]), max(vals[-window:])
    return recent - before < tol * max(abs(before), 1e-12)


def train(model, obs: ObservationModel, config: TrainConfig,
          on_record: Optional[Callable[[dict], None]] = None,
          checkpoint_dir=None, policy=None, critic=None):
    """Run the actor-critic loop; returns ``(policy, critic, metrics)``.

    Deterministic for a given config. When ``checkpoint_dir`` is set a
    checkpoint is written at every evaluation, and on a numerical failure the
    last good parameters are saved before :class:`TrainingAborted` is raised.
    """
    if obs.kind != config.observation:
        raise ValueError("observation model does not match config.observation")
    if policy is None or critic is None:
        policy, critic = init_networks(model, obs, config.seed)
    scaler = TargetScaler(decay=config.scaler_decay)
    adam_pi = AdamState.like(policy.mlp.params)
    adam_c = AdamState.like(critic.mlp.params)
    metrics = TrainMetrics()
    ckpt = Path(checkpoint_dir) / "checkpoint.npz" if checkpoint_dir else None
    loss_fn = factored_critic_loss if config.factored_critic else global_critic_loss
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    t0 = time.perf_counter()
    try:
        for it in range(config.iterations):
            good = (policy.copy(), critic.copy())
            try:
                batch = sample_training_batch(model, policy, obs, config, it, pool)
                rows = batch_rows(batch, model, obs)
                T = critic_targets(batch, model, rows, scaler=scaler,
                                   factored=config.factored_critic)
                critic, closs = _critic_step(critic, adam_c, config.critic_lr, loss_fn,
                                             rows, T, config.clip_norm)
                f, _ = critic.values(rows.X)
                est = actor_grad_factored if config.factored_actor else actor_grad_global
                g = est(batch, policy, critic, model, obs, config.clip_norm, rows, f)
                gnorm = float(np.linalg.norm(g))
                policy = policy.copy()
                policy.mlp.params = adam_step(policy.mlp.params, adam_pi, -g, config.actor_lr)
            except NumericalError as exc:
                if ckpt is not None:
                    save_checkpoint(ckpt, *good, scaler, {"iteration": it})
                raise TrainingAborted(f"iteration {it}: {exc}", ckpt) from exc

            done = it + 1
            if done % config.eval_interval == 0 or done == config.iterations:
                rng = np.random.default_rng([config.seed, 2, done])
                mean, se = evaluate_policy(model, policy, obs, config.eval_samples, rng)
                rec = {
                    "iteration": done,
                    "return_mean": mean,
                    "return_stderr": se,
                    "critic_loss": closs,
                    "actor_grad_norm": gnorm,
                    "elapsed_ms": (time.perf_counter() - t0) * 1e3,
                }
                metrics.records.append(rec)
                log.debug("iter %d return %.4f +- %.4f", done, mean, se)
                if on_record is not None:
                    on_record(rec)
                if ckpt is not None:
                    save_checkpoint(ckpt, policy, critic, scaler,
                                    {"iteration": done, "config": asdict(config)})
                if config.early_stop and _plateau(metrics.records):
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    return policy, critic, metrics
