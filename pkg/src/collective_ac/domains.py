"""Built-in domains: congested grid navigation and taxi supply-demand matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .model import ModelSpec

MOVES = ("up", "down", "left", "right", "stay")
_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


def grid_neighbors(width, height, diagonal=False):
    """Neighbor lists of a rectangular grid, row-major state numbering."""
    deltas = [d for d in _DELTAS[:4]]
    if diagonal:
        deltas += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    out = []
    for r in range(height):
        for c in range(width):
            out.append(tuple((r + dr) * width + (c + dc) for dr, dc in deltas
                             if 0 <= r + dr < height and 0 <= c + dc < width))
    return out


@dataclass
class GridParams:
    width: int = 5
    height: int = 5
    initial_states: Sequence[int] = (0, 1, 5)
    goal_state: int = 24
    congestion_penalty: float = -0.1
    goal_reward: float = 1.0
    failure_slope: float = 0.5
    horizon: int = 100
    population: int = 20


def make_grid_domain(p: GridParams = None) -> ModelSpec:
    """Robots travel to a goal cell; crowded edges fail more often and cost reward.

    An agent attempting a move shared by ``n`` agents at the same cell succeeds
    with probability ``max(0, 1 - failure_slope * (n - 1) / M)`` and pays
    ``congestion_penalty * (n - 1) / M``. Any action taken in the goal cell
    earns ``goal_reward`` and sends the agent to a uniformly chosen initial
    cell. Moves off the grid leave the agent in place.
    """
    p = p or GridParams()
    W, Hh = p.width, p.height
    S, A, M = W * Hh, len(MOVES), p.population
    init = [int(s) for s in p.initial_states]
    if W < 1 or Hh < 1 or not init:
        raise ValueError("grid needs positive size and at least one initial state")
    if any(s < 0 or s >= S for s in init) or not 0 <= p.goal_state < S:
        raise ValueError("state index out of range")
    if p.goal_state in init:
        raise ValueError("goal must not be an initial state")
    if not 0 < p.failure_slope <= 1 or p.congestion_penalty > 0:
        raise ValueError("failure_slope must lie in (0, 1] and congestion_penalty be <= 0")

    target = np.zeros((S, A), dtype=np.int64)
    for s in range(S):
        r, c = divmod(s, W)
        for j, (dr, dc) in enumerate(_DELTAS):
            rr, cc = r + dr, c + dc
            target[s, j] = rr * W + cc if 0 <= rr < Hh and 0 <= cc < W else s
    goal = p.goal_state
    moving = target != np.arange(S)[:, None]
    moving[goal] = False
    teleport = np.zeros(S)
    teleport[init] = 1.0 / len(init)
    b0 = teleport.copy()

    def transition(t, n_s, n_sa, b, i, j):
        N = i.shape[0]
        ar = np.arange(N)
        mv = moving[i, j]
        crowd = np.maximum(n_sa[b, i, j] - 1, 0) / M
        ps = np.where(mv, np.clip(1.0 - p.failure_slope * crowd, 0.0, 1.0), 0.0)
        at_goal = i == goal
        out = np.zeros((N, S))
        np.add.at(out, (ar, i), np.where(at_goal, 0.0, 1.0 - ps))
        np.add.at(out, (ar, target[i, j]), ps)
        out[at_goal] = teleport
        return out

    def reward(t, n_s, n_sa):
        crowd = np.maximum(n_sa - 1, 0) / M
        r = np.where(moving[None], p.congestion_penalty * crowd, 0.0)
        r[:, goal, :] = p.goal_reward
        return r

    return ModelSpec(S, A, p.horizon, M, b0, transition, reward,
                     grid_neighbors(W, Hh), name="grid",
                     params={"grid": _asdict(p), "target": target})


@dataclass
class TaxiParams:
    num_zones: int = 81
    zone_adjacency: Optional[Sequence[Sequence[int]]] = None
    horizon: int = 48
    population: int = 8000
    demand: Optional[np.ndarray] = None
    trip_revenue: float = 10.0
    move_cost: float = 1.0
    demand_noise: float = 0.0
    noise_seed: int = 0
    demand_seed: int = 0


def _square_side(n):
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError("default adjacency needs a square number of zones; pass zone_adjacency")
    return side


def make_taxi_domain(p: TaxiParams = None) -> ModelSpec:
    """Taxis either wait for passengers in their zone or drive to a neighbor zone.

    A waiting taxi in zone ``z`` is matched with probability
    ``min(1, demand[t, z] / n_t(z))``, earns ``trip_revenue`` and is dropped
    uniformly in ``{z} U Nb(z)``. Action ``k >= 1`` drives to the ``k``-th
    neighbor for ``move_cost``; slots beyond a zone's degree act as waiting.
    The default map is a square grid with king-move adjacency.
    """
    p = p or TaxiParams()
    Z, H, M = p.num_zones, p.horizon, p.population
    adj = p.zone_adjacency
    if adj is None:
        side = _square_side(Z)
        adj = grid_neighbors(side, side, diagonal=True)
    adj = [tuple(int(x) for x in nb) for nb in adj]
    if len(adj) != Z:
        raise ValueError("one adjacency list per zone is required")
    for z, nb in enumerate(adj):
        for x in nb:
            if not 0 <= x < Z or x == z:
                raise ValueError(f"bad neighbor {x} of zone {z}")
            if z not in adj[x]:
                raise ValueError(f"adjacency is not symmetric ({z}, {x})")
    demand = p.demand
    if demand is None:
        demand = generate_synthetic_demand(Z, H, p.demand_seed, total=0.3 * M * H)
    demand = np.asarray(demand, dtype=np.float64)
    if demand.shape != (H, Z):
        raise ValueError(f"demand must have shape ({H}, {Z}), got {demand.shape}")
    if np.any(demand < 0):
        raise ValueError("demand must be non-negative")
    if p.demand_noise > 0:
        rng = np.random.default_rng(p.noise_seed)
        demand = demand * rng.lognormal(0.0, p.demand_noise, size=demand.shape)

    D = max(len(nb) for nb in adj)
    A = 1 + D
    dest = np.full((Z, A), -1, dtype=np.int64)
    dest[:, 0] = np.arange(Z)
    drop = np.zeros((Z, Z))
    for z, nb in enumerate(adj):
        dest[z, 1 : 1 + len(nb)] = nb
        drop[z, [z, *nb]] = 1.0 / (1 + len(nb))
    waits = dest < 0
    waits[:, 0] = True
    dest = np.where(dest < 0, np.arange(Z)[:, None], dest)

    def match_prob(t, n_s):
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(n_s > 0, demand[t] / n_s, 0.0)
        return np.minimum(q, 1.0)

    def transition(t, n_s, n_sa, b, i, j):
        N = i.shape[0]
        q = match_prob(t, n_s)[b, i]
        w = waits[i, j]
        out = np.zeros((N, Z))
        out[w] = q[w, None] * drop[i[w]]
        out[np.flatnonzero(w), i[w]] += 1.0 - q[w]
        out[np.flatnonzero(~w), dest[i[~w], j[~w]]] = 1.0
        return out

    def reward(t, n_s, n_sa):
        q = match_prob(t, n_s)
        return np.where(waits[None], p.trip_revenue * q[..., None], -p.move_cost)

    def extra(t, n_s, b, i):
        own = demand[t, i] / M
        nb = dest[i, 1:]
        vals = np.where(waits[i, 1:], 0.0, demand[np.asarray(t)[..., None], nb] / M)
        return np.column_stack([own, vals])

    return ModelSpec(Z, A, H, M, np.full(Z, 1.0 / Z), transition, reward, adj,
                     time_dependent=True, extra_features=extra, extra_dim=1 + D,
                     name="taxi", params={"demand": demand, "dest": dest})


def generate_synthetic_demand(num_zones, horizon, seed=0, base=0.3, peak_amplitude=1.0,
                              peak_times=(0.35, 0.75), peak_width=0.08, total=None):
    """Two-peak daily demand profile with per-zone scale factors.

    When ``total`` is given the matrix is rescaled to sum to it.
    """
    if num_zones < 1 or horizon < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    x = (np.arange(horizon) + 0.5) / horizon
    profile = base + peak_amplitude * sum(
        np.exp(-0.5 * ((x - mu) / peak_width) ** 2) for mu in peak_times
    )
    scale = rng.gamma(2.0, 0.5, size=num_zones)
    scale /= scale.mean()
    demand = np.outer(profile, scale)
    if total is not None:
        demand *= total / demand.sum()
    return demand


def load_demand_csv(path, horizon, num_zones):
    """Parse ``t,zone,demand`` rows into a ``(horizon, num_zones)`` matrix.

    A leading header row is allowed; unlisted cells are zero.
    """
    demand = np.zeros((horizon, num_zones))
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "t":
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t, z, d = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= t < horizon:
                raise ValueError(f"{path}:{lineno}: time {t} outside [0, {horizon})")
            if not 0 <= z < num_zones:
                raise ValueError(f"{path}:{lineno}: zone {z} outside [0, {num_zones})")
            if not np.isfinite(d) or d < 0:
                raise ValueError(f"{path}:{lineno}: demand must be finite and >= 0")
            demand[t, z] = d
    return demand


def write_demand_csv(path, demand):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "zone", "demand"])
        for t, z in zip(*np.nonzero(demand)):
            w.writerow([t, z, repr(float(demand[t, z]))])


def _asdict(p):
    return {f.name: getattr(p, f.name) for f in fields(p)}


def _build(cls, block):
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**block)


def build_domain(block: dict) -> ModelSpec:
    """Model from a run-configuration domain block.

    ``{"grid": {...GridParams}}`` or ``{"taxi": {...TaxiParams, "demand_csv": path,
    "synthetic_demand": {...}}}``.
    """
    if len(block) != 1:
        raise ValueError("domain block must name exactly one domain")
    (kind, params), = block.items()
    if kind == "file":
        from .model import load_model_json

        return load_model_json(params["path"] if isinstance(params, dict) else params)
    params = dict(params or {})
    if kind == "grid":
        return make_grid_domain(_build(GridParams, params))
    if kind == "taxi":
        csv_path = params.pop("demand_csv", None)
        synth = params.pop("synthetic_demand", None)
        p = _build(TaxiParams, params)
        if csv_path is not None:
            p.demand = load_demand_csv(csv_path, p.horizon, p.num_zones)
        elif synth is not None:
            p.demand = generate_synthetic_demand(p.num_zones, p.horizon, **synth)
        return make_taxi_domain(p)
    raise ValueError(f"unknown domain {kind!r}")
