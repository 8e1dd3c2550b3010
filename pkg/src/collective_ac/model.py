"""Collective Dec-POMDP instances, count tables and observation features.

Time indices are 0-based throughout: a horizon-``H`` trajectory has steps
``t = 0 .. H-1``.

Domain callbacks are batched so that the samplers can advance many count
trajectories at once:

``transition(t, n_s, n_sa, b, i, j) -> (N, S)``
    successor distributions for the queried ``(b[k], i[k], j[k])`` rows, where
    ``n_s`` is a ``(B, S)`` block of state counts and ``n_sa`` the matching
    ``(B, S, A)`` action counts.
``reward(t, n_s, n_sa) -> (B, S, A)``
    per-agent reward for every state/action pair.
``extra_features(t, n_s, b, i) -> (N, extra_dim)``
    optional domain features appended to ``oN`` observations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

OBS_KINDS = ("o0", "o1", "oN")


@dataclass(eq=False)
class ModelSpec:
    num_states: int
    num_actions: int
    horizon: int
    population: int
    initial_dist: np.ndarray
    transition: Callable
    reward: Callable
    neighborhood: Sequence[Sequence[int]] = ()
    time_dependent: bool = False
    extra_features: Optional[Callable] = None
    extra_dim: int = 0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_states < 1 or self.num_actions < 1:
            raise ValueError("state and action spaces must be non-empty")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        b0 = np.asarray(self.initial_dist, dtype=np.float64)
        if b0.shape != (self.num_states,):
            raise ValueError(f"initial_dist must have length {self.num_states}")
        if np.any(b0 < 0) or abs(b0.sum() - 1.0) > 1e-9:
            raise ValueError("initial_dist must be a probability vector")
        self.initial_dist = b0
        if not self.neighborhood:
            self.neighborhood = tuple(() for _ in range(self.num_states))
        if len(self.neighborhood) != self.num_states:
            raise ValueError("one neighbor list per state is required")
        nbs = []
        for s, nb in enumerate(self.neighborhood):
            nb = tuple(int(x) for x in nb)
            if len(set(nb)) != len(nb):
                raise ValueError(f"duplicate neighbors for state {s}")
            if any(x < 0 or x >= self.num_states for x in nb):
                raise ValueError(f"invalid neighbor index for state {s}")
            nbs.append(nb)
        self.neighborhood = tuple(nbs)
        self.max_degree = max((len(nb) for nb in nbs), default=0)
        table = np.full((self.num_states, max(self.max_degree, 1)), -1, dtype=np.int64)
        for s, nb in enumerate(nbs):
            table[s, : len(nb)] = nb
        self.neighbor_table = table

    @property
    def shape(self):
        return self.num_states, self.num_actions

    def transition_row(self, i, j, n_s, n_sa, t=0):
        """Successor distribution for a single agent at ``(i, j)``."""
        n_s = np.asarray(n_s, dtype=np.int64)[None]
        n_sa = np.asarray(n_sa, dtype=np.int64)[None]
        z = np.zeros(1, dtype=np.int64)
        return self.transition(t, n_s, n_sa, z, z + i, z + j)[0]

    def reward_table(self, n_s, n_sa, t=0):
        """Per-agent ``(S, A)`` reward table for one count step."""
        n_s = np.asarray(n_s, dtype=np.int64)[None]
        n_sa = np.asarray(n_sa, dtype=np.int64)[None]
        return self.reward(t, n_s, n_sa)[0]


@dataclass(frozen=True)
class ObservationModel:
    """Which count information a policy sees.

    ``obs_dim`` counts only the count/domain features; every feature vector
    also carries a one-hot state block and the time fraction ``t/H``.
    """

    kind: str
    obs_dim: int

    @classmethod
    def for_model(cls, model: ModelSpec, kind: str) -> "ObservationModel":
        if kind == "o0":
            return cls(kind, 0)
        if kind == "o1":
            return cls(kind, 1)
        if kind == "oN":
            return cls(kind, 1 + model.max_degree + model.extra_dim)
        raise ValueError(f"unknown observation kind {kind!r}; expected one of {OBS_KINDS}")

    def input_dim(self, model: ModelSpec) -> int:
        return model.num_states + 1 + self.obs_dim


def features(model: ModelSpec, obs: ObservationModel, t, n_s, b, i):
    """Feature rows for agents in states ``i`` of count blocks ``n_s[b]``.

    ``t`` is a scalar or an array aligned with ``b``. Counts are divided by
    the population size.
    """
    i = np.asarray(i, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if i.size and (i.min() < 0 or i.max() >= model.num_states):
        raise IndexError("state index out of range")
    S, M = model.num_states, model.population
    N = i.shape[0]
    X = np.zeros((N, S + 1 + obs.obs_dim))
    X[np.arange(N), i] = 1.0
    X[:, S] = np.asarray(t, dtype=np.float64) / model.horizon
    if obs.kind == "o0":
        return X
    X[:, S + 1] = n_s[b, i] / M
    if obs.kind == "o1":
        return X
    D = model.max_degree
    if D:
        nb = model.neighbor_table[i, :D]
        vals = n_s[b[:, None], np.maximum(nb, 0)] / M
        X[:, S + 2 : S + 2 + D] = np.where(nb >= 0, vals, 0.0)
    if model.extra_dim:
        X[:, S + 2 + D :] = model.extra_features(t, n_s, b, i)
    return X


def observe(model: ModelSpec, obs: ObservationModel, i: int, n_s, t: int):
    """Feature vector of a single agent in state ``i`` given state counts."""
    if not 0 <= int(i) < model.num_states:
        raise IndexError(f"state {i} out of range")
    n_s = np.asarray(n_s, dtype=np.int64)[None]
    return features(model, obs, t, n_s, np.zeros(1, dtype=np.int64), np.array([i]))[0]


@dataclass
class CountStep:
    n_s: np.ndarray
    n_sa: np.ndarray
    n_sas: Optional[np.ndarray] = None


@dataclass
class CountTrajectory:
    """Count tables of one trajectory.

    Successor counts are stored sparsely as parallel arrays
    ``(flow_t, flow_i, flow_j, flow_next, flow_count)``.
    """

    n_s: np.ndarray
    n_sa: np.ndarray
    flow_t: np.ndarray
    flow_i: np.ndarray
    flow_j: np.ndarray
    flow_next: np.ndarray
    flow_count: np.ndarray

    @property
    def horizon(self):
        return self.n_s.shape[0]

    def dense_n_sas(self, t):
        H, S, A = self.n_sa.shape
        out = np.zeros((S, A, S), dtype=np.int64)
        m = self.flow_t == t
        np.add.at(out, (self.flow_i[m], self.flow_j[m], self.flow_next[m]), self.flow_count[m])
        return out

    @property
    def steps(self):
        H = self.horizon
        return [
            CountStep(self.n_s[t], self.n_sa[t], self.dense_n_sas(t) if t < H - 1 else None)
            for t in range(H)
        ]

    @classmethod
    def from_steps(cls, steps: Sequence[CountStep]) -> "CountTrajectory":
        n_s = np.array([s.n_s for s in steps], dtype=np.int64)
        n_sa = np.array([s.n_sa for s in steps], dtype=np.int64)
        parts = []
        for t, s in enumerate(steps):
            if s.n_sas is None:
                continue
            i, j, k = np.nonzero(s.n_sas)
            parts.append((np.full(i.shape, t), i, j, k, s.n_sas[i, j, k]))
        if parts:
            cols = [np.concatenate(c).astype(np.int64) for c in zip(*parts)]
        else:
            cols = [np.zeros(0, dtype=np.int64)] * 5
        return cls(n_s, n_sa, *cols)

    def key(self) -> bytes:
        """Canonical byte string identifying the full count trajectory."""
        order = np.lexsort((self.flow_next, self.flow_j, self.flow_i, self.flow_t))
        flows = np.stack(
            [self.flow_t, self.flow_i, self.flow_j, self.flow_next, self.flow_count]
        )[:, order]
        return self.n_s.tobytes() + self.n_sa.tobytes() + flows.astype(np.int64).tobytes()

    def to_records(self):
        """One JSON-serialisable record per step."""
        recs = []
        for t in range(self.horizon):
            m = self.flow_t == t
            recs.append(
                {
                    "t": t,
                    "n_s": self.n_s[t].tolist(),
                    "n_sa": self.n_sa[t].tolist(),
                    "n_sas": np.stack(
                        [self.flow_i[m], self.flow_j[m], self.flow_next[m], self.flow_count[m]],
                        axis=1,
                    ).tolist(),
                }
            )
        return recs

    @classmethod
    def from_records(cls, recs) -> "CountTrajectory":
        recs = sorted(recs, key=lambda r: r["t"])
        n_s = np.array([r["n_s"] for r in recs], dtype=np.int64)
        n_sa = np.array([r["n_sa"] for r in recs], dtype=np.int64)
        cols = [[], [], [], [], []]
        for r in recs:
            for i, j, k, c in r["n_sas"]:
                for col, v in zip(cols, (r["t"], i, j, k, c)):
                    col.append(v)
        return cls(n_s, n_sa, *(np.array(c, dtype=np.int64) for c in cols))


@dataclass
class CountBatch:
    """``K`` count trajectories stacked along a leading batch axis.

    Flow arrays are sorted by time step; ``flow_offsets[t]:flow_offsets[t+1]``
    slices the successor counts of step ``t``.
    """

    n_s: np.ndarray  # (K, H, S)
    n_sa: np.ndarray  # (K, H, S, A)
    flow_k: np.ndarray
    flow_t: np.ndarray
    flow_i: np.ndarray
    flow_j: np.ndarray
    flow_next: np.ndarray
    flow_count: np.ndarray
    rewards: Optional[np.ndarray] = None  # (K, H, S, A) per-agent rewards

    def __post_init__(self):
        order = np.argsort(self.flow_t, kind="stable")
        for name in ("flow_k", "flow_t", "flow_i", "flow_j", "flow_next", "flow_count"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64)[order])
        H = self.n_s.shape[1]
        self.flow_offsets = np.searchsorted(self.flow_t, np.arange(H + 1))

    def __len__(self):
        return self.n_s.shape[0]

    @property
    def horizon(self):
        return self.n_s.shape[1]

    def __getitem__(self, k) -> CountTrajectory:
        m = self.flow_k == k
        return CountTrajectory(
            self.n_s[k], self.n_sa[k], self.flow_t[m], self.flow_i[m],
            self.flow_j[m], self.flow_next[m], self.flow_count[m],
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def take(self, idx) -> "CountBatch":
        """Sub-batch of the trajectories at the (distinct) positions ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        m = remap[self.flow_k] >= 0
        return CountBatch(
            self.n_s[idx], self.n_sa[idx], remap[self.flow_k[m]], self.flow_t[m],
            self.flow_i[m], self.flow_j[m], self.flow_next[m], self.flow_count[m],
            rewards=None if self.rewards is None else self.rewards[idx],
        )

    @classmethod
    def stack(cls, trajs: Sequence[CountTrajectory]) -> "CountBatch":
        trajs = list(trajs)
        ks = [np.full(tr.flow_t.shape, k, dtype=np.int64) for k, tr in enumerate(trajs)]
        return cls(
            np.stack([tr.n_s for tr in trajs]),
            np.stack([tr.n_sa for tr in trajs]),
            np.concatenate(ks),
            *(np.concatenate([getattr(tr, n) for tr in trajs])
              for n in ("flow_t", "flow_i", "flow_j", "flow_next", "flow_count")),
        )

    @classmethod
    def concat(cls, batches: Sequence["CountBatch"]) -> "CountBatch":
        batches = list(batches)
        offs = np.cumsum([0] + [len(b) for b in batches[:-1]])
        rewards = None
        if all(b.rewards is not None for b in batches):
            rewards = np.concatenate([b.rewards for b in batches])
        return cls(
            np.concatenate([b.n_s for b in batches]),
            np.concatenate([b.n_sa for b in batches]),
            np.concatenate([b.flow_k + o for b, o in zip(batches, offs)]),
            *(np.concatenate([getattr(b, n) for b in batches])
              for n in ("flow_t", "flow_i", "flow_j", "flow_next", "flow_count")),
            rewards=rewards,
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    t: int
    i: Optional[int] = None
    j: Optional[int] = None
    detail: str = ""


def validate_trajectory(traj: CountTrajectory, model: ModelSpec) -> list:
    """Check a trajectory against the consistency constraints.

    Returns one :class:`Violation` per failed constraint; an empty list means
    the trajectory is a member of the consistent count-table set.
    """
    out = []
    H, S, A = model.horizon, model.num_states, model.num_actions
    if traj.n_s.shape != (H, S) or traj.n_sa.shape != (H, S, A):
        return [Violation("shape", -1, detail=f"expected ({H},{S}) / ({H},{S},{A}) tables")]
    if np.any(traj.n_s < 0) or np.any(traj.n_sa < 0) or np.any(traj.flow_count < 0):
        out.append(Violation("negative count", -1))
    bad_t = (traj.flow_t < 0) | (traj.flow_t >= H - 1)
    for t in np.unique(traj.flow_t[bad_t]):
        out.append(Violation("transition after final step", int(t)))
    for t in range(H):
        total = int(traj.n_s[t].sum())
        if total != model.population:
            out.append(Violation("population sum", t, detail=f"{total} != {model.population}"))
        marg = traj.n_sa[t].sum(axis=1)
        for i in np.nonzero(marg != traj.n_s[t])[0]:
            out.append(Violation("action marginal", t, int(i),
                                 detail=f"{marg[i]} != {traj.n_s[t, i]}"))
        if t == H - 1:
            continue
        nsas = traj.dense_n_sas(t)
        tm = nsas.sum(axis=2)
        for i, j in zip(*np.nonzero(tm != traj.n_sa[t])):
            out.append(Violation("transition marginal", t, int(i), int(j),
                                 detail=f"{tm[i, j]} != {traj.n_sa[t, i, j]}"))
        inflow = nsas.sum(axis=(0, 1))
        for i in np.nonzero(inflow != traj.n_s[t + 1])[0]:
            out.append(Violation("flow conservation", t + 1, int(i),
                                 detail=f"{inflow[i]} != {traj.n_s[t + 1, i]}"))
    return out


def tabular_model(transition, reward, initial_dist, horizon, population,
                  neighborhoods=(), crowding_penalty=0.0, name="tabular"):
    """Model with fixed kernels and an optional per-agent crowding penalty.

    The reward of an agent in state ``i`` is ``reward[i, j] - crowding_penalty *
    n_s(i) / M``.
    """
    P = np.asarray(transition, dtype=np.float64)
    R = np.asarray(reward, dtype=np.float64)
    S, A = R.shape
    if P.shape != (S, A, S):
        raise ValueError(f"transition must have shape ({S},{A},{S})")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("transition rows must be probability vectors")

    def trans(t, n_s, n_sa, b, i, j):
        return P[i, j]

    def rew(t, n_s, n_sa):
        return R[None] - crowding_penalty * (n_s / population)[:, :, None]

    return ModelSpec(S, A, horizon, population, initial_dist, trans, rew,
                     neighborhoods, name=name,
                     params={"crowding_penalty": crowding_penalty})


def load_model_json(path_or_doc) -> ModelSpec:
    """Build a model from a JSON document (path or already-parsed dict).

    The ``domain`` block selects the builder: ``{"type": "tabular", ...}``,
    ``{"type": "grid", ...}`` or ``{"type": "taxi", ...}``.
    """
    if isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        with open(path_or_doc) as fh:
            doc = json.load(fh)
    dom = dict(doc.get("domain", {}))
    kind = dom.pop("type", "tabular")
    if kind in ("grid", "taxi"):
        from . import domains

        return domains.build_domain({kind: dom})
    if kind != "tabular":
        raise ValueError(f"unknown domain type {kind!r}")
    for key in ("num_states", "num_actions", "horizon", "population", "initial_dist"):
        if key not in doc:
            raise ValueError(f"model document missing {key!r}")
    model = tabular_model(
        dom["transition"], dom["reward"], doc["initial_dist"], int(doc["horizon"]),
        int(doc["population"]), doc.get("neighborhoods", ()),
        float(dom.get("crowding_penalty", 0.0)),
    )
    if (model.num_states, model.num_actions) != (doc["num_states"], doc["num_actions"]):
        raise ValueError("num_states/num_actions disagree with the kernel shapes")
    return model
