"""Low-level agent: candidate filtering around the target and a masked item policy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .agent_high import actor_loss, critic_loss, critic_value, sync_target, td_targets
from .catalog import ItemCatalog
from .tracker import build_low_state, encode_history, init_tracker

PREFIX = "lra"
ACTOR = "lra.actor"
CRITIC = "lra.critic.online"
TARGET = "lra.critic.target"
TRACKER = "lra.tracker"


@dataclass
class CandidateSet:
    items: np.ndarray
    mask: np.ndarray


@dataclass
class LowTransition:
    items: np.ndarray
    feedback: np.ndarray
    g: np.ndarray
    mask: np.ndarray
    action: int
    logprob: float
    reward: float
    next_items: np.ndarray
    next_feedback: np.ndarray
    done: bool


def filter_candidates(g, catalog: ItemCatalog, L: int) -> CandidateSet:
    """The min(L, |I|) items nearest to g in L2; ties by ascending item id."""
    if L < 1:
        raise ValueError("L must be >= 1")
    emb = catalog.embeddings
    if emb.shape[0] == 0:
        raise ValueError("empty catalog")
    dist = np.linalg.norm(emb - np.asarray(g, dtype=np.float64), axis=1)
    order = np.lexsort((np.arange(len(dist)), dist))[: min(L, len(dist))]
    mask = np.zeros(len(dist), dtype=bool)
    mask[order] = True
    return CandidateSet(order, mask)


def full_candidates(catalog: ItemCatalog) -> CandidateSet:
    return CandidateSet(np.arange(catalog.n_items), np.ones(catalog.n_items, dtype=bool))


def policy(params: Mapping, s_l, mask):
    """Item probabilities: softmax of actor logits restricted to the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no items")
    return nc.softmax(nc.mlp_forward(params, ACTOR, s_l), mask=mask)


def guiding_reward(p_t, p_next, g) -> float:
    """How much closer the tracked preference moved toward g."""
    p_t, p_next, g = (np.asarray(x, dtype=np.float64) for x in (p_t, p_next, g))
    if not (p_t.shape == p_next.shape == g.shape):
        raise ValueError("dimension mismatch")
    return float(np.linalg.norm(p_t - g) - np.linalg.norm(p_next - g))


def low_reward(r_a: float, r_g: float, valid: bool, lambda_g: float) -> float:
    if lambda_g < 0:
        raise ValueError("lambda_g must be >= 0")
    if not valid:
        return 0.0
    return r_a + lambda_g * r_g


class LowAgent:
    def __init__(self, store: nc.ParamStore, catalog: ItemCatalog, hidden: int,
                 rng: np.random.Generator, reduce: str = "last", score_scale: float = 5.0,
                 identity_gain: float = 0.1):
        self.store = store
        self.catalog = catalog
        self.reduce = reduce
        d = catalog.dim
        init_tracker(store, TRACKER, catalog.embeddings, rng)
        nc.init_mlp(store, ACTOR, [2 * d, hidden, catalog.n_items], rng, out_scale=0.1)
        if score_scale > 0 and hidden >= d:
            # output layer tied to item embeddings: logits start near score_scale * v_i . p
            w0 = store[f"{ACTOR}.w0"].copy()
            w0[:d, :d] = identity_gain * np.eye(d)
            w0[d:, :d] = 0.0
            w1 = store[f"{ACTOR}.w1"].copy()
            w1[:d] = score_scale * catalog.embeddings.T / identity_gain
            store.assign(f"{ACTOR}.w0", w0)
            store.assign(f"{ACTOR}.w1", w1)
        nc.init_mlp(store, CRITIC, [2 * d, hidden, 1], rng)
        nc.init_mlp(store, TARGET, [2 * d, hidden, 1], rng)
        sync_target(store, CRITIC, TARGET, 1.0)

    def preference(self, params: Mapping, items, feedback):
        return encode_history(params, TRACKER, items, feedback, self.reduce)

    def act(self, s_l, mask, rng: np.random.Generator, deterministic: bool = False) -> tuple[int, float]:
        probs = policy(self.store.values, s_l, mask)
        if deterministic:
            item = int(np.argmax(probs))
        else:
            item = int(rng.choice(len(probs), p=probs))
        return item, float(np.log(probs[item]))

    def losses(self, params: Mapping, batch: Sequence[LowTransition], gamma: float,
               frozen: Mapping | None = None):
        """Actor and critic losses; advantages and bootstrap values come from ``frozen``."""
        items = np.stack([t.items for t in batch])
        fb = np.stack([t.feedback for t in batch])
        g = np.stack([t.g for t in batch])
        masks = np.stack([t.mask for t in batch])
        actions = np.array([t.action for t in batch])
        rewards = np.array([t.reward for t in batch])
        dones = np.array([t.done for t in batch], dtype=np.float64)
        raw = self.store.values if frozen is None else frozen
        s0 = build_low_state(self.preference(raw, items, fb), g)
        p1 = self.preference(raw, np.stack([t.next_items for t in batch]),
                             np.stack([t.next_feedback for t in batch]))
        v_next = critic_value(raw, build_low_state(p1, g), TARGET)
        returns = td_targets(rewards, v_next, dones, gamma)
        advantages = returns - critic_value(raw, s0, CRITIC)

        s = build_low_state(self.preference(params, items, fb), g)
        logits = nc.mlp_forward(params, ACTOR, s)
        logp_all = nc.log_softmax(logits, mask=masks)
        logp = nc.getitem(logp_all, (np.arange(len(batch)), actions))
        a_loss = actor_loss(logp, advantages)
        c_loss = critic_loss(critic_value(params, s, CRITIC), rewards, v_next, dones, gamma)
        return a_loss, c_loss, advantages
