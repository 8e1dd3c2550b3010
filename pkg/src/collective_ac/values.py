"""Individual value functions of a sampled count trajectory.

Given one count sample, ``V[t, i, j]`` is the expected remaining reward of an
agent in state ``i`` taking action ``j`` at step ``t``, where the expectation
runs over the empirical transition and action frequencies of that sample.
Entries with ``n_sa[t, i, j] == 0`` are undefined and stored as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .countsim import reward_tables
from .model import CountBatch, CountTrajectory, validate_trajectory


@dataclass
class EmpiricalFlow:
    phi_hat: np.ndarray  # (H-1, S, A, S)
    phi_defined: np.ndarray  # (H-1, S, A)
    pi_hat: np.ndarray  # (H, S, A)
    pi_defined: np.ndarray  # (H, S)


@dataclass
class IndividualValueTable:
    v: np.ndarray  # (H, S, A)
    defined_mask: np.ndarray  # (H, S, A)


def empirical_flow(traj: CountTrajectory) -> EmpiricalFlow:
    H, S, A = traj.n_sa.shape
    pi_def = traj.n_s > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        pi_hat = np.where(pi_def[..., None], traj.n_sa / traj.n_s[..., None], 0.0)
    nsas = np.stack([traj.dense_n_sas(t) for t in range(H - 1)]) if H > 1 \
        else np.zeros((0, S, A, S), dtype=np.int64)
    phi_def = traj.n_sa[: H - 1] > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        phi_hat = np.where(phi_def[..., None], nsas / traj.n_sa[: H - 1, ..., None], 0.0)
    if np.any(nsas.sum(axis=3) != traj.n_sa[: H - 1]) or np.any(traj.n_sa.sum(axis=2) != traj.n_s):
        raise ValueError("inconsistent count trajectory")
    return EmpiricalFlow(phi_hat, phi_def, pi_hat, pi_def)


def batch_values(batch: CountBatch, model):
    """Backward dynamic programme for every trajectory of a batch: ``(K, H, S, A)``."""
    K, H, S = batch.n_s.shape
    A = model.num_actions
    r = reward_tables(batch, model)
    n_sa = batch.n_sa
    V = np.zeros((K, H, S, A))
    V[:, H - 1] = r[:, H - 1]
    for t in range(H - 2, -1, -1):
        # agent-weighted value of each successor state
        tot = (n_sa[:, t + 1] * V[:, t + 1]).sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            W = np.where(batch.n_s[:, t + 1] > 0, tot / batch.n_s[:, t + 1], 0.0)
        lo, hi = batch.flow_offsets[t], batch.flow_offsets[t + 1]
        fk, fi, fj = batch.flow_k[lo:hi], batch.flow_i[lo:hi], batch.flow_j[lo:hi]
        contrib = batch.flow_count[lo:hi] * W[fk, batch.flow_next[lo:hi]]
        acc = np.bincount((fk * S + fi) * A + fj, weights=contrib, minlength=K * S * A)
        nsa = n_sa[:, t]
        with np.errstate(invalid="ignore", divide="ignore"):
            cont = np.where(nsa > 0, acc.reshape(K, S, A) / nsa, 0.0)
        V[:, t] = r[:, t] + cont
    V[n_sa == 0] = 0.0
    return V


def individual_values(traj: CountTrajectory, model) -> IndividualValueTable:
    bad = validate_trajectory(traj, model)
    if bad:
        raise ValueError(f"inconsistent count trajectory: {bad[0]}")
    V = batch_values(CountBatch.stack([traj]), model)[0]
    return IndividualValueTable(V, traj.n_sa > 0)
