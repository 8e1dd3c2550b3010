"""Small numpy MLPs with hand-written backpropagation, Adam and target rescaling.

Parameters of a network live in one flat float64 vector so that optimiser
state, gradient clipping, finite-difference checks and checkpoints all work
on a single array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1
HIDDEN_ON = (18, 18)


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


class Mlp:
    """Fully connected network, relu hidden units, linear output layer."""

    def __init__(self, layer_sizes, params=None):
        self.layer_sizes = tuple(int(x) for x in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        n = sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params

    @property
    def size(self):
        return self.params.size

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def layers(self, flat=None):
        """``(W, b)`` views into ``flat`` (defaults to the parameters)."""
        flat = self.params if flat is None else flat
        out, pos = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = flat[pos : pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, flat[pos : pos + b]))
            pos += b
        return out

    @classmethod
    def glorot(cls, layer_sizes, rng, zero_last=False):
        net = cls(layer_sizes)
        layers = net.layers()
        for k, (W, _) in enumerate(layers):
            if zero_last and k == len(layers) - 1:
                continue
            lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-lim, lim, size=W.shape)
        return net

    def copy(self):
        return Mlp(self.layer_sizes, self.params.copy())

    def forward(self, X):
        """Return ``(outputs, cache)`` for a ``(N, in_dim)`` input block."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got {X.shape}")
        acts = [X]
        h = X
        layers = self.layers()
        for k, (W, b) in enumerate(layers):
            h = h @ W + b
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        """Gradient of ``sum(dout * outputs)`` with respect to the parameters."""
        grad = np.zeros_like(self.params)
        layers = self.layers()
        glayers = self.layers(grad)
        d = dout
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            gW, gb = glayers[k]
            gW[...] = acts[k].T @ d
            gb[...] = d.sum(axis=0)
            if k:
                d = (d @ W.T) * (acts[k] > 0)
        return grad


def hidden_for(kind):
    """Hidden widths for an observation kind: none for o0/o1, two of 18 for oN."""
    return HIDDEN_ON if kind == "oN" else ()


@dataclass
class PolicyNet:
    """Softmax policy over actions given a feature row."""

    mlp: Mlp

    @classmethod
    def create(cls, in_dim, num_actions, hidden=(), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(Mlp.glorot((in_dim, *hidden, num_actions), rng, zero_last=True))

    def copy(self):
        return PolicyNet(self.mlp.copy())

    def probs(self, X):
        logits, acts = self.mlp.forward(X)
        return softmax(logits), acts


@dataclass
class CriticNet:
    """Factored critic ``f_w(i, j, o)``: one linear output head per action."""

    mlp: Mlp

    @classmethod
    def create(cls, in_dim, num_actions, hidden=(), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(Mlp.glorot((in_dim, *hidden, num_actions), rng))

    def copy(self):
        return CriticNet(self.mlp.copy())

    def values(self, X):
        return self.mlp.forward(X)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_forward(net: PolicyNet, x):
    p, _ = net.probs(np.atleast_2d(x))
    return p[0] if np.ndim(x) == 1 else p


def policy_logprob_grad(net: PolicyNet, x, j):
    """``log pi(j | x)`` and its gradient with respect to the policy parameters."""
    x = np.atleast_2d(x)
    logits, acts = net.mlp.forward(x)
    if not 0 <= j < net.mlp.out_dim:
        raise IndexError(f"action {j} out of range")
    z = logits[0] - logits[0].max()
    logp = z[j] - np.log(np.exp(z).sum())
    d = -softmax(logits)
    d[0, j] += 1.0
    return logp, net.mlp.backward(acts, d)


def critic_forward(net: CriticNet, i, j, x):
    """Critic value for action ``j``; ``i`` is already one-hot encoded in ``x``."""
    out, _ = net.mlp.forward(np.atleast_2d(x))
    return float(out[0, j])


def critic_grad(net: CriticNet, i, j, x):
    out, acts = net.mlp.forward(np.atleast_2d(x))
    d = np.zeros_like(out)
    d[0, j] = 1.0
    return net.mlp.backward(acts, d)


def score_weighted_grad(net: PolicyNet, X, C, probs=None, acts=None):
    """Gradient of ``sum_{r,j} C[r, j] * log pi(j | X[r])``.

    This is the workhorse of both actor estimators: the row weights are
    action counts times critic values.
    """
    if probs is None:
        probs, acts = net.probs(X)
    d = C - probs * C.sum(axis=1, keepdims=True)
    return net.mlp.backward(acts, d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params, state: AdamState, grad, lr):
    """One bias-corrected Adam descent step; returns new parameters."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and optimiser shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NumericalError(f"non-finite gradient at {bad.size} coordinates (first {bad[:5]})")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


def clip_by_norm(grad, max_norm):
    if max_norm is None:
        return grad
    norm = np.linalg.norm(grad)
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class TargetScaler:
    """Exponential running mean/std of regression targets."""

    decay: float = 0.01
    mean: float = 0.0
    sq_mean: float = 1.0
    count: int = 0
    floor: float = 1e-4

    @property
    def std(self):
        return max(np.sqrt(max(self.sq_mean - self.mean ** 2, 0.0)), self.floor)

    def update(self, x, weights=None):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        w = None if weights is None else np.asarray(weights, dtype=np.float64).ravel()
        mu = np.average(x, weights=w)
        sq = np.average(x * x, weights=w)
        if self.count == 0:
            self.mean, self.sq_mean = mu, sq
        else:
            self.mean += self.decay * (mu - self.mean)
            self.sq_mean += self.decay * (sq - self.sq_mean)
        self.count += 1

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def unscale(self, v):
        return np.asarray(v, dtype=np.float64) * self.std + self.mean


def scale_targets(scaler: TargetScaler, targets, weights=None):
    """Update running statistics with ``targets`` then normalise them."""
    scaler.update(targets, weights)
    return scaler.normalize(targets)


def unscale(scaler: TargetScaler, v):
    return scaler.unscale(v)


def save_checkpoint(path, policy: PolicyNet, critic: CriticNet, scaler=None, meta=None):
    """Write a versioned ``.npz`` checkpoint; loading is bit-exact."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "policy_sizes": np.array(policy.mlp.layer_sizes, dtype=np.int64),
        "policy_params": policy.mlp.params,
        "critic_sizes": np.array(critic.mlp.layer_sizes, dtype=np.int64),
        "critic_params": critic.mlp.params,
    }
    if scaler is not None:
        payload["scaler"] = np.array([scaler.decay, scaler.mean, scaler.sq_mean,
                                      scaler.count, scaler.floor])
    if meta:
        payload["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Return ``(policy, critic, scaler_or_None, meta_dict)``."""
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        policy = PolicyNet(Mlp(z["policy_sizes"], z["policy_params"].copy()))
        critic = CriticNet(Mlp(z["critic_sizes"], z["critic_params"].copy()))
        scaler = None
        if "scaler" in z:
            d, mu, sq, c, fl = z["scaler"]
            scaler = TargetScaler(float(d), float(mu), float(sq), int(c), float(fl))
        meta = json.loads(str(z["meta"])) if "meta" in z else {}
    return policy, critic, scaler, meta

