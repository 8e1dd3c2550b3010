"""Oracle checks that can be run against any build of the package.

Each check returns a :class:`CheckResult` with the measured quantity and the
threshold it is held to. The instances are small enough that exact
enumeration or per-agent simulation is cheap.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import countsim, trainer
from .domains import GridParams, make_grid_domain
from .model import ObservationModel, tabular_model
from .nets import CriticNet, Mlp, PolicyNet, critic_grad, policy_logprob_grad
from .values import batch_values


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3e} (threshold {self.threshold:g}) {self.detail}".rstrip()


def tiny_model(population=5, horizon=3, flip=0.01, b0=(0.97, 0.03), crowding=0.5):
    """Two states, two actions; action 0 tends to keep the state, action 1 to switch it."""
    T = np.array([[[1 - flip, flip], [flip, 1 - flip]],
                  [[flip, 1 - flip], [1 - flip, flip]]])
    R = np.array([[1.0, 0.0], [0.5, 0.2]])
    return tabular_model(T, R, np.array(b0), horizon, population, crowding_penalty=crowding)


def random_policy(model, obs, seed=0, scale=5.0, hidden=()):
    """Policy with normally distributed weights; a large ``scale`` makes it nearly deterministic."""
    rng = np.random.default_rng(seed)
    sizes = (obs.input_dim(model), *hidden, model.num_actions)
    return PolicyNet(Mlp(sizes, rng.normal(0.0, scale, size=Mlp(sizes).size)))


def random_critic(model, obs, seed=0, scale=1.0, hidden=()):
    rng = np.random.default_rng(seed)
    sizes = (obs.input_dim(model), *hidden, model.num_actions)
    return CriticNet(Mlp(sizes, rng.normal(0.0, scale, size=Mlp(sizes).size)))


def tv_from_counts(a: Counter, b: Counter):
    na, nb = sum(a.values()), sum(b.values())
    return 0.5 * sum(abs(a.get(k, 0) / na - b.get(k, 0) / nb) for k in set(a) | set(b))


def tv_to_exact(batch, model, policy, obs):
    """Total variation between the empirical law of ``batch`` and the exact count law.

    Only sampled trajectories can carry an empirical excess over the exact
    probability, so ``sum_x max(p_hat - p, 0)`` is exact without enumeration.
    """
    keys = countsim.batch_keys(batch)
    first, counts = {}, Counter()
    for k, key in enumerate(keys):
        first.setdefault(key, k)
        counts[key] += 1
    uniq = list(first)
    lp = countsim.count_log_prob_batch(batch.take([first[u] for u in uniq]), model, policy, obs)
    phat = np.array([counts[u] for u in uniq]) / len(keys)
    return float(np.maximum(phat - np.exp(lp), 0.0).sum())


def check_sampler_tv(samples=100_000, seed=0, threshold=0.02):
    """Count sampler against the per-agent simulator and against the exact count law."""
    m = tiny_model()
    obs = ObservationModel.for_model(m, "o1")
    pol = random_policy(m, obs, seed)
    rng = np.random.default_rng([seed, 11])
    counts = countsim.sample_batch(m, pol, obs, samples, rng)
    _, _, agents = countsim.sample_agents_batch(m, pol, obs, samples, rng)
    tv_oracle = tv_from_counts(Counter(countsim.batch_keys(counts)),
                               Counter(countsim.batch_keys(agents)))
    tv_exact = tv_to_exact(counts, m, pol, obs)
    worst = max(tv_oracle, tv_exact)
    return CheckResult("sampler total variation", worst < threshold, worst, threshold,
                       f"(vs agents {tv_oracle:.4f}, vs exact {tv_exact:.4f})")


def enumerated_log_probs(model, policy, obs):
    return np.concatenate([countsim.count_log_prob_batch(b, model, policy, obs)
                           for b in countsim.iter_enumerated(model)])


def check_normalization(seed=0, threshold=1e-9):
    m = tiny_model()
    obs = ObservationModel.for_model(m, "o1")
    total = float(np.exp(logsumexp(enumerated_log_probs(m, random_policy(m, obs, seed), obs))))
    return CheckResult("count probability normalization", abs(total - 1) < threshold,
                       abs(total - 1), threshold, f"(sum {total!r})")


def lemma_gap(batch, model):
    """Largest ``|sum n V - R| / max(1, |R|)`` over every trajectory and step."""
    V = batch_values(batch, model)
    lhs = (batch.n_sa * V).sum(axis=(2, 3))
    R = countsim.returns_to_go(batch, model)
    return float((np.abs(lhs - R) / np.maximum(1.0, np.abs(R))).max())


def check_value_identity(num=100, seed=0, threshold=1e-8):
    """Count-weighted individual values reproduce the fleet return at every step."""
    m = make_grid_domain()
    obs = ObservationModel.for_model(m, "o1")
    pol = random_policy(m, obs, seed, scale=0.5)
    batch = countsim.sample_batch(m, pol, obs, num, np.random.default_rng([seed, 12]))
    gap = lemma_gap(batch, m)
    return CheckResult("individual value identity", gap < threshold, gap, threshold)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_fd(fn, params, direction, h=1e-6):
    return (fn(params + h * direction) - fn(params - h * direction)) / (2 * h)


def gradient_probes(probes=100, seed=0):
    """Largest relative error of every analytic gradient against central differences.

    Each probe is a random unit direction in parameter space. Returns a dict
    keyed by gradient name.
    """
    rng = np.random.default_rng([seed, 13])
    g = make_grid_domain(GridParams(width=3, height=3, initial_states=(0, 1), goal_state=8,
                                    horizon=6, population=6))
    out = {}

    def probe(name, params, fn, grad):
        worst = 0.0
        for _ in range(probes):
            d = rng.normal(size=params.size)
            d /= np.linalg.norm(d)
            worst = max(worst, rel_err(float(grad @ d), directional_fd(fn, params, d)))
        out[name] = max(out.get(name, 0.0), worst)

    for kind, hidden in (("o1", ()), ("oN", (18, 18))):
        obs = ObservationModel.for_model(g, kind)
        pol = random_policy(g, obs, seed, scale=0.5, hidden=hidden)
        cri = random_critic(g, obs, seed + 1, scale=0.5, hidden=hidden)
        batch = countsim.sample_batch(g, pol, obs, 3, rng)
        rows = trainer.batch_rows(batch, g, obs)
        x, j = rows.X[0], int(rng.integers(g.num_actions))

        _, gp = policy_logprob_grad(pol, x, j)
        probe("policy log-probability", pol.mlp.params,
              lambda p: policy_logprob_grad(PolicyNet(Mlp(pol.mlp.layer_sizes, p)), x, j)[0], gp)

        gc = critic_grad(cri, 0, j, x)
        probe("critic output", cri.mlp.params,
              lambda p: CriticNet(Mlp(cri.mlp.layer_sizes, p)).values(x[None])[0][0, j], gc)

        V = batch_values(batch, g)[rows.k, rows.t, rows.i]
        R = countsim.returns_to_go(batch, g).ravel()
        for name, loss, target in (("factored critic loss", trainer.factored_critic_loss, V),
                                   ("global critic loss", trainer.global_critic_loss, R)):
            _, gl = loss(cri, rows, target)
            probe(name, cri.mlp.params,
                  lambda p, loss=loss, target=target:
                  loss(CriticNet(Mlp(cri.mlp.layer_sizes, p)), rows, target)[0], gl)

        f, _ = cri.values(rows.X)
        G = np.bincount(rows.seg, weights=(rows.n * f).sum(axis=1), minlength=rows.K * rows.H)
        for name, est, C in (
            ("factored actor", trainer.actor_grad_factored, rows.n * f),
            ("global actor", trainer.actor_grad_global, rows.n * G[rows.seg, None]),
        ):
            ga = est(batch, pol, cri, g, obs, None)

            def surrogate(p, C=C):
                P, _ = PolicyNet(Mlp(pol.mlp.layer_sizes, p)).probs(rows.X)
                return float((C * np.log(P)).sum() / rows.K)

            probe(name, pol.mlp.params, surrogate, ga)
    return out


def check_gradients(probes=100, seed=0, threshold=1e-4):
    errs = gradient_probes(probes, seed)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return CheckResult("finite-difference gradients", worst < threshold, worst, threshold,
                       f"(worst: {name})")


def bound_violations(batches=1000, seed=0, rtol=1e-12):
    """Batches where ``M * L_fC < L_C`` with unscaled targets and random critics.

    Equality holds whenever every agent of a step shares one state-action
    cell, so a batch only counts as a violation when the bound fails by more
    than float64 rounding (relative ``rtol``).

    Returns ``(violations, smallest ratio M * L_fC / L_C)``.
    """
    rng = np.random.default_rng([seed, 14])
    models = [tiny_model(population=4, horizon=4, flip=0.3, b0=(0.5, 0.5)),
              make_grid_domain(GridParams(width=3, height=3, initial_states=(0, 1),
                                          goal_state=8, horizon=8, population=6))]
    bad, ratio = 0, np.inf
    for b in range(batches):
        m = models[b % 2]
        kind = ("o0", "o1", "oN")[b % 3]
        obs = ObservationModel.for_model(m, kind)
        hidden = (18, 18) if kind == "oN" else ()
        s = int(rng.integers(2**31))
        pol = random_policy(m, obs, s, scale=1.0, hidden=hidden)
        cri = random_critic(m, obs, s + 1, scale=float(rng.uniform(0.1, 3.0)), hidden=hidden)
        batch = countsim.sample_batch(m, pol, obs, int(rng.integers(1, 5)), rng)
        rows = trainer.batch_rows(batch, m, obs)
        V = batch_values(batch, m)[rows.k, rows.t, rows.i]
        R = countsim.returns_to_go(batch, m).ravel()
        lf, _ = trainer.factored_critic_loss(cri, rows, V)
        lc, _ = trainer.global_critic_loss(cri, rows, R)
        if m.population * lf < lc * (1 - rtol):
            bad += 1
        if lc > 0:
            ratio = min(ratio, m.population * lf / lc)
    return bad, float(ratio)


def check_bound(batches=1000, seed=0):
    bad, ratio = bound_violations(batches, seed)
    return CheckResult("critic loss bound", bad == 0, float(bad), 0,
                       f"violations over {batches} batches (min ratio {ratio:.4f})")


def run_all(seed=0, scale="small"):
    """Run the five oracle checks; ``scale="full"`` uses more probes and batches."""
    full = scale == "full"
    return [
        check_sampler_tv(seed=seed),
        check_normalization(seed=seed),
        check_value_identity(seed=seed),
        check_gradients(probes=200 if full else 100, seed=seed),
        check_bound(batches=2000 if full else 1000, seed=seed),
    ]
