"""High-level agent: Gaussian target actor, state-value critic, M-step reward."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .catalog import ItemCatalog, target_is_valid
from .tracker import encode_history, init_tracker

PREFIX = "hra"
ACTOR = "hra.actor"
CRITIC = "hra.critic.online"
TARGET = "hra.critic.target"
TRACKER = "hra.tracker"


@dataclass
class FairnessTarget:
    g: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    logprob: float
    valid: bool
    window_start: int = 0
    window_length: int = 1


@dataclass
class HighTransition:
    items: np.ndarray
    feedback: np.ndarray
    g: np.ndarray
    reward: float
    next_items: np.ndarray
    next_feedback: np.ndarray
    done: bool
    valid: bool
    window_length: int


def high_reward(window: Sequence[tuple[float, float]], valid: bool, lambda_f: float) -> float:
    """Sum of accuracy plus weighted fairness reward over the realised window; 0 if invalid."""
    if lambda_f < 0:
        raise ValueError("lambda_f must be >= 0")
    if not window:
        raise ValueError("window must be nonempty")
    if not valid:
        return 0.0
    return float(sum(r_a + lambda_f * r_f for r_a, r_f in window))


def critic_loss(values, rewards, next_values, dones, gamma: float):
    """Mean squared TD error against ``r + gamma * V_target(s') * (1 - done)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty batch")
    returns = td_targets(rewards, next_values, dones, gamma)
    return nc.mean(nc.square(nc.sub(values, returns)))


def td_targets(rewards, next_values, dones, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    return rewards + gamma * np.asarray(next_values, dtype=np.float64) * not_done


def actor_loss(logprobs, advantages):
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size == 0:
        raise ValueError("empty batch")
    return nc.mul(nc.mean(nc.mul(logprobs, advantages)), -1.0)


def sync_target(store: nc.ParamStore, online: str, target: str, tau: float) -> None:
    """Polyak average ``target <- tau * online + (1 - tau) * target``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for name in store.names(online + "."):
        tname = target + name[len(online):]
        src, dst = store.values[name], store.values[tname]
        if src.shape != dst.shape:
            raise nc.NumericsError(f"shape mismatch between {name} and {tname}")
        store.values[tname] = src.copy() if tau == 1.0 else tau * src + (1.0 - tau) * dst


def critic_value(params: Mapping, s, prefix: str = CRITIC):
    out = nc.mlp_forward(params, prefix, s)
    return nc.getitem(out, (Ellipsis, 0))


class HighAgent:
    def __init__(self, store: nc.ParamStore, catalog: ItemCatalog, hidden: int,
                 rng: np.random.Generator, sigma2_floor: float = 1e-4,
                 init_log_var: float = -3.0, reduce: str = "last",
                 identity_init: bool = True, identity_gain: float = 0.1):
        self.store = store
        self.catalog = catalog
        self.sigma2_floor = sigma2_floor
        self.reduce = reduce
        d = catalog.dim
        init_tracker(store, TRACKER, catalog.embeddings, rng)
        nc.init_mlp(store, ACTOR, [d, hidden, 2 * d], rng, out_scale=0.1)
        if identity_init and hidden >= d:
            # tanh(c x) / c ~ x for small c: the mean head starts out as mu ~ s_h
            w0 = store[f"{ACTOR}.w0"].copy()
            w0[:, :d] = identity_gain * np.eye(d)
            w1 = store[f"{ACTOR}.w1"].copy()
            w1[:d, :d] = np.eye(d) / identity_gain
            store.assign(f"{ACTOR}.w0", w0)
            store.assign(f"{ACTOR}.w1", w1)
        else:
            bias = store[f"{ACTOR}.b1"].copy()
            bias[:d] = catalog.center
            store.assign(f"{ACTOR}.b1", bias)
        bias = store[f"{ACTOR}.b1"].copy()
        bias[d:] = init_log_var
        store.assign(f"{ACTOR}.b1", bias)
        nc.init_mlp(store, CRITIC, [d, hidden, 1], rng)
        nc.init_mlp(store, TARGET, [d, hidden, 1], rng)
        sync_target(store, CRITIC, TARGET, 1.0)

    @property
    def dim(self) -> int:
        return self.catalog.dim

    def state(self, params: Mapping, items, feedback):
        return encode_history(params, TRACKER, items, feedback, self.reduce)

    def distribution(self, params: Mapping, s):
        out = nc.mlp_forward(params, ACTOR, s)
        d = self.dim
        mu = nc.getitem(out, (Ellipsis, slice(0, d)))
        log_var = nc.getitem(out, (Ellipsis, slice(d, 2 * d)))
        sigma2 = nc.clamp_min(nc.exp(log_var), self.sigma2_floor)
        return mu, sigma2

    def act(self, s_h, rng: np.random.Generator, deterministic: bool = False,
            gate: bool = True) -> FairnessTarget:
        mu, sigma2 = self.distribution(self.store.values, nc.check_finite(s_h, "high-level state"))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma2))):
            raise nc.NumericsError("high-level actor produced non-finite output")
        if deterministic:
            g = mu.copy()
        else:
            g = mu + np.sqrt(sigma2) * rng.standard_normal(mu.shape)
        logprob = float(nc.gaussian_logprob(g, mu, sigma2))
        valid = target_is_valid(g, self.catalog) if gate else True
        return FairnessTarget(g, mu, sigma2, logprob, valid)

    def losses(self, params: Mapping, batch: Sequence[HighTransition], gamma: float,
               frozen: Mapping | None = None):
        """Actor and critic losses.

        Advantages and bootstrap values are computed from ``frozen`` (default:
        the current store values) and carry no gradient.
        """
        items = np.stack([t.items for t in batch])
        fb = np.stack([t.feedback for t in batch])
        g = np.stack([t.g for t in batch])
        rewards = np.array([t.reward for t in batch])
        dones = np.array([t.done for t in batch], dtype=np.float64)
        raw = self.store.values if frozen is None else frozen
        s0 = self.state(raw, items, fb)
        s1 = self.state(raw, np.stack([t.next_items for t in batch]),
                        np.stack([t.next_feedback for t in batch]))
        v_next = critic_value(raw, s1, TARGET)
        returns = td_targets(rewards, v_next, dones, gamma)
        advantages = returns - critic_value(raw, s0, CRITIC)

        s = self.state(params, items, fb)
        mu, sigma2 = self.distribution(params, s)
        logp = nc.gaussian_logprob(g, mu, sigma2)
        a_loss = actor_loss(logp, advantages)
        c_loss = critic_loss(critic_value(params, s, CRITIC), rewards, v_next, dones, gamma)
        return a_loss, c_loss, advantages
