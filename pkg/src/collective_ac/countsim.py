"""Sampling and scoring count trajectories.

The count sampler never represents individual agents: initial counts,
action counts and successor counts are drawn as multinomials by sequential
binomial conditioning, so a step costs the same for 20 agents or 8000.
:func:`sample_agents_oracle` simulates every agent explicitly and is kept as
an independent reference for the count-level sampler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import gammaln, xlogy

from .model import CountBatch, CountTrajectory, features, validate_trajectory

ORACLE_MAX_AGENTS = 10_000


SMALL_ROW = 8


def multinomial_sparse(rng, n, p, small=SMALL_ROW):
    """Draw ``Multinomial(n[r], p[r])`` for every row ``r`` of ``p``.

    Rows with at most ``small`` trials are expanded into individual
    categorical draws. Larger rows use sequential binomial conditioning over
    their positive-probability outcomes: each outcome takes a binomial share
    of the trials still unassigned, conditioned on the probability mass not
    yet visited, and the last outcome takes the remainder.

    Returns ``(rows, cols, counts)`` for the non-zero cells, sorted by
    ``(row, col)``.
    """
    n = np.asarray(n, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    N, C = p.shape
    parts = []

    few = np.flatnonzero((n > 0) & (n <= small))
    if few.size:
        er = np.repeat(few, n[few])
        draws = categorical_rows(rng, p, er)
        cells, cnt = np.unique(er * C + draws, return_counts=True)
        parts.append((cells, cnt))

    many = np.flatnonzero(n > small)
    if many.size:
        r, c = np.nonzero(p[many])
        pv = p[many][r, c]
        per = np.bincount(r, minlength=many.size)
        start = np.cumsum(per) - per
        rank = np.arange(r.size) - start[r]
        cs = np.cumsum(pv)
        seen = cs - pv - (cs[start[r]] - pv[start[r]])
        tail = np.bincount(r, weights=pv, minlength=many.size)[r] - seen
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.clip(pv / tail, 0.0, 1.0)
        q[rank == per[r] - 1] = 1.0
        order = np.argsort(rank, kind="stable")
        bounds = np.searchsorted(rank[order], np.arange(per.max() + 1))
        vals = np.zeros(r.size, dtype=np.int64)
        rem = n[many].copy()
        for lvl in range(per.max()):
            idx = order[bounds[lvl] : bounds[lvl + 1]]
            rows = r[idx]
            x = rng.binomial(rem[rows], q[idx])
            vals[idx] = x
            rem[rows] -= x
        keep = vals > 0
        parts.append((many[r[keep]] * C + c[keep], vals[keep]))

    if not parts:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    cells = np.concatenate([pc[0] for pc in parts])
    counts = np.concatenate([pc[1] for pc in parts]).astype(np.int64)
    if len(parts) > 1:
        order = np.argsort(cells, kind="stable")
        cells, counts = cells[order], counts[order]
    return cells // C, cells % C, counts


def multinomial_rows(rng, n, p, small=SMALL_ROW):
    """Dense ``(N, C)`` multinomial draws; see :func:`multinomial_sparse`."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape, dtype=np.int64)
    r, c, v = multinomial_sparse(rng, n, p, small)
    out[r, c] = v
    return out


def categorical_rows(rng, p, rows=None):
    """One categorical draw from ``p[r]`` for each ``r`` in ``rows`` (default: every row).

    Row CDFs are normalised and shifted by their row index so a single
    ``searchsorted`` over the flattened table answers every lookup.
    """
    p = np.asarray(p, dtype=np.float64)
    N, C = p.shape
    rows = np.arange(N) if rows is None else np.asarray(rows)
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    cdf += np.arange(N)[:, None]
    idx = np.searchsorted(cdf.ravel(), rows + rng.random(rows.size), side="right")
    return np.minimum(idx - rows * C, C - 1)


def sample_batch(model, policy, obs, K, rng) -> CountBatch:
    """Draw ``K`` independent count trajectories from the count distribution."""
    S, A, H, M = model.num_states, model.num_actions, model.horizon, model.population
    n_s = np.zeros((K, H, S), dtype=np.int64)
    n_sa = np.zeros((K, H, S, A), dtype=np.int64)
    rewards = np.zeros((K, H, S, A))
    n_s[:, 0] = multinomial_rows(rng, np.full(K, M), np.broadcast_to(model.initial_dist, (K, S)))
    flows = []
    for t in range(H):
        ns = n_s[:, t]
        b, i = np.nonzero(ns)
        X = features(model, obs, t, ns, b, i)
        P, _ = policy.probs(X)
        nsa = n_sa[:, t]
        nsa[b, i] = multinomial_rows(rng, ns[b, i], P)
        rewards[:, t] = model.reward(t, ns, nsa)
        if t == H - 1:
            break
        bb, ii, jj = np.nonzero(nsa)
        phi = model.transition(t, ns, nsa, bb, ii, jj)
        r, k, c = multinomial_sparse(rng, nsa[bb, ii, jj], phi)
        flows.append((bb[r], np.full(r.shape, t), ii[r], jj[r], k, c))
        n_s[:, t + 1] = np.bincount(bb[r] * S + k, weights=c, minlength=K * S).reshape(K, S)
    if flows:
        cols = [np.concatenate(col) for col in zip(*flows)]
    else:
        cols = [np.zeros(0, dtype=np.int64)] * 6
    return CountBatch(n_s, n_sa, *cols, rewards=rewards)


def sample_counts(model, policy, obs, rng) -> CountTrajectory:
    return sample_batch(model, policy, obs, 1, rng)[0]


@dataclass
class AgentTrajectory:
    states: np.ndarray
    actions: np.ndarray


def sample_agents_batch(model, policy, obs, B, rng):
    """Per-agent simulation of ``B`` independent populations.

    Returns ``(states, actions, batch)`` with agent arrays of shape
    ``(B, M, H)`` and the count tables aggregated from them.
    """
    S, A, H, M = model.num_states, model.num_actions, model.horizon, model.population
    if M > ORACLE_MAX_AGENTS:
        raise ValueError(f"per-agent simulation limited to {ORACLE_MAX_AGENTS} agents, got {M}")
    states = np.zeros((B, M, H), dtype=np.int64)
    actions = np.zeros((B, M, H), dtype=np.int64)
    bidx = np.repeat(np.arange(B), M)
    s = categorical_rows(rng, np.broadcast_to(model.initial_dist, (B * M, S)))
    for t in range(H):
        states[:, :, t] = s.reshape(B, M)
        ns = np.bincount(bidx * S + s, minlength=B * S).reshape(B, S)
        P, _ = policy.probs(features(model, obs, t, ns, bidx, s))
        a = categorical_rows(rng, P)
        actions[:, :, t] = a.reshape(B, M)
        if t == H - 1:
            break
        nsa = np.bincount((bidx * S + s) * A + a, minlength=B * S * A).reshape(B, S, A)
        s = categorical_rows(rng, model.transition(t, ns, nsa, bidx, s, a))
    return states, actions, aggregate_counts(model, states, actions)


def aggregate_counts(model, states, actions) -> CountBatch:
    """Count tables of agent trajectories shaped ``(B, M, H)``."""
    S, A = model.num_states, model.num_actions
    B, M, H = states.shape
    n_s = np.zeros((B, H, S), dtype=np.int64)
    n_sa = np.zeros((B, H, S, A), dtype=np.int64)
    bidx = np.repeat(np.arange(B), M)
    cols = [[] for _ in range(6)]
    for t in range(H):
        s = states[:, :, t].ravel()
        a = actions[:, :, t].ravel()
        n_s[:, t] = np.bincount(bidx * S + s, minlength=B * S).reshape(B, S)
        n_sa[:, t] = np.bincount((bidx * S + s) * A + a, minlength=B * S * A).reshape(B, S, A)
        if t == H - 1:
            break
        s2 = states[:, :, t + 1].ravel()
        key = ((bidx * S + s) * A + a) * S + s2
        uniq, cnt = np.unique(key, return_counts=True)
        k2 = uniq % S
        rest = uniq // S
        j = rest % A
        rest //= A
        for col, v in zip(cols, (rest // S, np.full(uniq.shape, t), rest % S, j, k2, cnt)):
            col.append(v)
    cols = [np.concatenate(c) if c else np.zeros(0, dtype=np.int64) for c in cols]
    return CountBatch(n_s, n_sa, *cols)


def sample_agents_oracle(model, policy, obs, rng):
    """Simulate each agent individually; returns ``(agent_trajs, counts)``."""
    states, actions, batch = sample_agents_batch(model, policy, obs, 1, rng)
    agents = [AgentTrajectory(states[0, m], actions[0, m]) for m in range(model.population)]
    return agents, batch[0]


def log_factorials(M):
    return gammaln(np.arange(M + 1) + 1.0)


def count_log_prob_batch(batch: CountBatch, model, policy, obs):
    """``log h(n) + log f(n)`` for every trajectory of a batch (no validation)."""
    K, H, S = batch.n_s.shape
    A = model.num_actions
    lf = log_factorials(model.population)
    n_s, n_sa = batch.n_s, batch.n_sa
    fc = batch.flow_count
    logh = lf[model.population] - lf[n_s[:, 0]].sum(axis=1)
    logh = logh + lf[n_s].sum(axis=(1, 2))
    logh -= np.bincount(batch.flow_k, weights=lf[fc], minlength=K)
    logh -= lf[n_sa[:, H - 1]].sum(axis=(1, 2))

    logf = xlogy(n_s[:, 0], model.initial_dist[None]).sum(axis=1)
    for tt in range(H):
        logf += _action_log_prob(model, policy, obs, tt, n_s[:, tt], n_sa[:, tt])
    for tt in range(H - 1):
        lo, hi = batch.flow_offsets[tt], batch.flow_offsets[tt + 1]
        if lo == hi:
            continue
        fk, fi, fj, fn = (batch.flow_k[lo:hi], batch.flow_i[lo:hi],
                          batch.flow_j[lo:hi], batch.flow_next[lo:hi])
        phi = model.transition(tt, n_s[:, tt], n_sa[:, tt], fk, fi, fj)
        logf += np.bincount(fk, weights=xlogy(fc[lo:hi], phi[np.arange(hi - lo), fn]),
                            minlength=K)
    return logh + logf


def _action_log_prob(model, policy, obs, t, ns, nsa):
    """``sum n_sa log pi`` per trajectory; the policy is evaluated once per distinct count vector."""
    K, S = ns.shape
    M = model.population
    if S * np.log2(M + 1) < 62:
        code = ns @ (M + 1) ** np.arange(S, dtype=np.int64)
        _, first, inv = np.unique(code, return_index=True, return_inverse=True)
        uniq = ns[first]
    else:
        uniq, inv = np.unique(ns, axis=0, return_inverse=True)
    inv = inv.ravel()
    u, i = np.nonzero(uniq)
    P, _ = policy.probs(features(model, obs, t, uniq, u, i))
    row = np.full(uniq.shape, -1, dtype=np.int64)
    row[u, i] = np.arange(u.size)
    k, i = np.nonzero(ns)
    w = xlogy(nsa[k, i], P[row[inv[k], i]]).sum(axis=1)
    return np.bincount(k, weights=w, minlength=K)


def count_log_prob(traj: CountTrajectory, model, policy, obs):
    """Exact log-probability of a count trajectory under ``policy``.

    Returns ``-inf`` when a positive count sits on a probability-zero event.
    """
    bad = validate_trajectory(traj, model)
    if bad:
        raise ValueError(f"inconsistent count trajectory: {bad[0]}")
    return float(count_log_prob_batch(CountBatch.stack([traj]), model, policy, obs)[0])


def reward_tables(batch: CountBatch, model):
    """Per-agent reward tables ``(K, H, S, A)``, cached on the batch."""
    if batch.rewards is None:
        H = batch.horizon
        batch.rewards = np.stack(
            [model.reward(t, batch.n_s[:, t], batch.n_sa[:, t]) for t in range(H)], axis=1
        )
    return batch.rewards


def returns_to_go(batch: CountBatch, model):
    """``R[k, t]``: total fleet reward collected from step ``t`` to the end."""
    step = (batch.n_sa * reward_tables(batch, model)).sum(axis=(2, 3))
    return np.cumsum(step[:, ::-1], axis=1)[:, ::-1]


def empirical_return(traj: CountTrajectory, model, t=0):
    H = traj.horizon
    total = 0.0
    for T in range(t, H):
        total += float((traj.n_sa[T] * model.reward_table(traj.n_s[T], traj.n_sa[T], T)).sum())
    return total


def evaluate_policy(model, policy, obs, K, rng, chunk=100):
    """Mean total return over ``K`` sampled count trajectories and its standard error.

    The standard error is ``nan`` when ``K == 1``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    vals = []
    for start in range(0, K, chunk):
        b = sample_batch(model, policy, obs, min(chunk, K - start), rng)
        vals.append(returns_to_go(b, model)[:, 0])
    vals = np.concatenate(vals)
    se = vals.std(ddof=1) / np.sqrt(K) if K > 1 else float("nan")
    return float(vals.mean()), float(se)


def compositions(n, parts):
    """All non-negative integer vectors of length ``parts`` summing to ``n``."""
    if parts == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in compositions(n - first, parts - 1):
            yield (first,) + rest


class _StepTables:
    """Every action split and successor split reachable from each state-count vector."""

    def __init__(self, S, A, M):
        self.comps = np.array(list(compositions(M, S)), dtype=np.int64)
        self.index = {tuple(c): k for k, c in enumerate(self.comps)}
        splits, moves = [], []
        for ns in self.comps:
            sp = [np.array(x, dtype=np.int64).reshape(S, A)
                  for x in product(*(compositions(int(c), A) for c in ns))]
            splits.append(np.stack(sp))
            mv_sa, mv_sas = [], []
            for nsa in sp:
                for succ in product(*(compositions(int(c), S) for c in nsa.ravel())):
                    mv_sa.append(nsa)
                    mv_sas.append(np.array(succ, dtype=np.int64).reshape(S, A, S))
            moves.append((np.stack(mv_sa), np.stack(mv_sas)))
        self.split_off = np.cumsum([0] + [len(x) for x in splits])
        self.splits = np.concatenate(splits)
        self.move_off = np.cumsum([0] + [len(m[0]) for m in moves])
        self.move_sa = np.concatenate([m[0] for m in moves])
        self.move_sas = np.concatenate([m[1] for m in moves])
        nxt = self.move_sas.sum(axis=(1, 2))
        self.move_next = np.array([self.index[tuple(x)] for x in nxt], dtype=np.int64)


def _expand(cur, offsets):
    """Branch every partial path over its options; returns ``(parent, option_id)``."""
    num = offsets[cur + 1] - offsets[cur]
    parent = np.repeat(np.arange(cur.size), num)
    start = np.cumsum(num) - num
    local = np.arange(parent.size) - start[parent]
    return parent, offsets[cur[parent]] + local


def iter_enumerated(model, chunk=200_000):
    """Yield the consistent count-table set in ``CountBatch`` chunks (tiny models only)."""
    S, A, H, M = model.num_states, model.num_actions, model.horizon, model.population
    tab = _StepTables(S, A, M)
    cur = np.arange(len(tab.comps))
    states, moves = [cur], []
    for _ in range(H - 1):
        parent, mv = _expand(cur, tab.move_off)
        states = [s[parent] for s in states]
        moves = [m[parent] for m in moves] + [mv]
        cur = tab.move_next[mv]
        states.append(cur)
    parent, last = _expand(cur, tab.split_off)
    states = np.stack([s[parent] for s in states], axis=1)
    moves = np.stack([m[parent] for m in moves], axis=1) if moves else \
        np.zeros((parent.size, 0), dtype=np.int64)

    for lo in range(0, states.shape[0], chunk):
        st, mv, ls = states[lo:lo + chunk], moves[lo:lo + chunk], last[lo:lo + chunk]
        K = st.shape[0]
        n_sa = np.concatenate([tab.move_sa[mv], tab.splits[ls][:, None]], axis=1)
        cols = []
        for t in range(H - 1):
            k, i, j, n = np.nonzero(tab.move_sas[mv[:, t]])
            c = tab.move_sas[mv[k, t], i, j, n]
            cols.append((k, np.full(k.shape, t), i, j, n, c))
        cols = [np.concatenate(c) for c in zip(*cols)] if cols else \
            [np.zeros(0, dtype=np.int64)] * 6
        yield CountBatch(tab.comps[st], n_sa, *cols)


def enumerate_trajectories(model) -> CountBatch:
    """Every member of the consistent count-table set as one batch (tiny models only)."""
    return CountBatch.concat(list(iter_enumerated(model)))


def batch_keys(batch: CountBatch):
    """Hashable identifiers for the trajectories of a batch."""
    K = len(batch)
    order = np.lexsort((batch.flow_next, batch.flow_j, batch.flow_i, batch.flow_t, batch.flow_k))
    flows = np.stack([batch.flow_t, batch.flow_i, batch.flow_j, batch.flow_next,
                      batch.flow_count])[:, order]
    fk = batch.flow_k[order]
    bounds = np.searchsorted(fk, np.arange(K + 1))
    ns = batch.n_s.reshape(K, -1)
    nsa = batch.n_sa.reshape(K, -1)
    return [
        ns[k].tobytes() + nsa[k].tobytes() + flows[:, bounds[k]:bounds[k + 1]].tobytes()
        for k in range(K)
    ]


def write_jsonl(path, trajs):
    """One line per step: ``{"traj", "t", "n_s", "n_sa", "n_sas"}``."""
    with open(path, "w") as fh:
        for k, tr in enumerate(trajs):
            for rec in tr.to_records():
                fh.write(json.dumps({"traj": k, **rec}) + "\n")


def read_jsonl(path):
    groups = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                groups.setdefault(rec.pop("traj"), []).append(rec)
    return [CountTrajectory.from_records(groups[k]) for k in sorted(groups)]
