"""Hierarchical rollouts, on-policy updates, ablation variants and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agent_high as ah
from . import agent_low as al
from . import numcore as nc
from .catalog import ItemCatalog
from .config import RunConfig
from .env import EnvConfig, UserProfile, reset
from .metrics import EvalReport, aggregate
from .tracker import build_low_state

log = logging.getLogger(__name__)

# stream tags mixed into per-episode seed sequences
INIT, TRAIN, EVAL = 0, 1, 2


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class StepRecord:
    item: int
    r_a: float
    r_f: float
    r_g: float
    r_l: float
    valid: bool
    window: int


@dataclass
class WindowRecord:
    g: np.ndarray
    reward: float
    valid: bool
    start: int
    length: int


@dataclass
class EpisodeLog:
    user_id: int
    key: tuple
    steps: list[StepRecord] = field(default_factory=list)
    windows: list[WindowRecord] = field(default_factory=list)
    cause: str | None = None

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def accuracy_rewards(self) -> list[float]:
        return [s.r_a for s in self.steps]

    @property
    def items(self) -> list[int]:
        return [s.item for s in self.steps]


@dataclass
class Hierarchy:
    """Agents plus the switches that distinguish ablation variants."""

    variant: str
    store: nc.ParamStore
    catalog: ItemCatalog
    low: al.LowAgent
    high: ah.HighAgent | None
    use_mask: bool
    gate: bool
    lambda_f: float
    lambda_g: float
    L: int
    M: int
    gamma: float
    tau: float

    @property
    def uniform(self) -> bool:
        return self.variant == "random"


def make_variant(cfg: RunConfig, catalog: ItemCatalog, seed: int) -> Hierarchy:
    variant = cfg.trainer.variant
    a = cfg.agents
    store = nc.ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence([seed, INIT]))
    high = None
    if variant not in ("wo-hie", "random"):
        high = ah.HighAgent(store, catalog, a.hidden, rng, a.sigma2_floor, a.init_log_var,
                            a.tracker_reduce, identity_init=a.high_identity_init)
    low = al.LowAgent(store, catalog, a.hidden, rng, a.tracker_reduce, score_scale=a.low_score_scale)
    return Hierarchy(
        variant=variant,
        store=store,
        catalog=catalog,
        low=low,
        high=high,
        # with no high level there is no target to filter around
        use_mask=variant not in ("wo-fm", "wo-hie"),
        gate=variant != "wo-tc",
        lambda_f=a.lambda_f,
        lambda_g=0.0 if variant == "wo-hie" else a.lambda_g,
        L=a.L,
        M=cfg.trainer.M,
        gamma=a.gamma,
        tau=a.tau,
    )


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if idx >= len(probs):
        idx = int(np.flatnonzero(probs)[-1])
    return idx


def rollout_episode(hier: Hierarchy, users: Sequence[UserProfile], env_cfg: EnvConfig,
                    mode: str, key: tuple) -> tuple[EpisodeLog, list, list]:
    """Run one session; returns the log and, in train mode, both levels' transitions."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    deterministic = not train
    rng = np.random.default_rng(np.random.SeedSequence(list(key)))
    profile = users[int(rng.integers(len(users)))]
    user_rng = np.random.default_rng(np.random.SeedSequence(list(key) + [profile.user_id]))
    catalog = hier.catalog
    session = reset(catalog, profile, env_cfg, user_rng)
    ep = EpisodeLog(profile.user_id, tuple(key))
    low_batch: list[al.LowTransition] = []
    high_batch: list[ah.HighTransition] = []
    raw = hier.store.values
    d = catalog.dim
    full = al.full_candidates(catalog)

    items, fb = session.history_arrays()
    p = None if hier.uniform else hier.low.preference(raw, items, fb)
    g = np.zeros(d)
    valid = True
    target = None
    window: list[tuple[float, float]] = []
    win_items, win_fb = items, fb
    done = False
    while not done:
        t = session.t
        if hier.high is not None and t % hier.M == 0:
            s_h = hier.high.state(raw, items, fb)
            target = hier.high.act(s_h, rng, deterministic, gate=hier.gate)
            target.window_start, target.window_length = t, hier.M
            g, valid = target.g, target.valid
            window, win_items, win_fb = [], items, fb
        cands = al.filter_candidates(g, catalog, hier.L) if hier.use_mask else full
        if hier.uniform:
            item = int(rng.integers(catalog.n_items))
            logp = -np.log(catalog.n_items)
        else:
            s_l = build_low_state(p, g)
            probs = al.policy(raw, s_l, cands.mask)
            item = int(np.argmax(probs)) if deterministic else _sample(probs, rng)
            logp = float(np.log(probs[item]))
        feedback, done = session.step(item)
        next_items, next_fb = session.history_arrays()
        if hier.uniform:
            p_next, r_g = None, 0.0
        else:
            p_next = hier.low.preference(raw, next_items, next_fb)
            r_g = al.guiding_reward(p, p_next, g)
        r_f = catalog.fairness_reward(item)
        r_l = al.low_reward(feedback.r_a, r_g, valid, hier.lambda_g)
        ep.steps.append(StepRecord(item, feedback.r_a, r_f, r_g, r_l, valid, len(ep.windows)))
        if train:
            low_batch.append(al.LowTransition(items, fb, g, cands.mask, item, logp, r_l,
                                              next_items, next_fb, done))
        window.append((feedback.r_a, r_f))
        closes = hier.high is None or len(window) == hier.M or done
        if closes:
            r_h = ah.high_reward(window, valid, hier.lambda_f)
            ep.windows.append(WindowRecord(g, r_h, valid, t + 1 - len(window), len(window)))
            if train and hier.high is not None:
                high_batch.append(ah.HighTransition(win_items, win_fb, g, r_h, next_items,
                                                    next_fb, done, valid, len(window)))
            window = []
        items, fb, p = next_items, next_fb, p_next
    ep.cause = session.cause
    return ep, low_batch, high_batch


def _update(agent, store: nc.ParamStore, batch, gamma: float, opt_actor, opt_critic,
            tau: float, prefixes: tuple[str, str, str, str], where: dict) -> dict:
    actor, tracker, critic, target = prefixes
    tape = nc.Tape()
    params = store.view(tape, agent_prefix(actor))
    a_loss, c_loss, adv = agent.losses(params, batch, gamma)
    total = a_loss + c_loss
    losses = {"actor": float(a_loss.value), "critic": float(c_loss.value)}
    if not np.all(np.isfinite(list(losses.values()))):
        norms = {n: float(np.linalg.norm(store[n])) for n in store.names(agent_prefix(actor))}
        raise TrainingDiverged(f"non-finite loss at {where}",
                               {**where, **losses, "param_norms": norms,
                                "advantage_range": [float(np.min(adv)), float(np.max(adv))]})
    tape.backward(total)
    opt_actor.step(store, actor + ".")
    opt_actor.step(store, tracker + ".")
    opt_critic.step(store, critic + ".")
    store.zero_grad(target + ".")
    ah.sync_target(store, critic, target, tau)
    return losses


def agent_prefix(name: str) -> str:
    return name.split(".")[0] + "."


@dataclass
class TrainResult:
    hierarchy: Hierarchy
    initial: nc.ParamStore
    rows: list[dict]
    reports: list[EvalReport]
    losses: list[dict]


def evaluate(hier: Hierarchy, users: Sequence[UserProfile], env_cfg: EnvConfig, seed: int,
             n_episodes: int, epoch: int = 0) -> tuple[EvalReport, list[EpisodeLog]]:
    """Deterministic-policy evaluation over a fixed set of seeded sessions."""
    logs = [rollout_episode(hier, users, env_cfg, "eval", (seed, EVAL, 0, k))[0]
            for k in range(n_episodes)]
    report = aggregate(((ep.accuracy_rewards, ep.items, ep.cause) for ep in logs),
                       hier.catalog.n_items, hier.catalog.tail, epoch)
    return report, logs


def train(cfg: RunConfig, catalog: ItemCatalog, users: Sequence[UserProfile], seed: int,
          out_dir: Path | None = None,
          on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    tc, a = cfg.trainer, cfg.agents
    hier = make_variant(cfg, catalog, seed)
    store = hier.store
    initial = store.copy()
    opts = {
        "lra": (nc.make_optimizer(a.optimizer, a.lr_low_actor), nc.make_optimizer(a.optimizer, a.lr_low_critic)),
        "hra": (nc.make_optimizer(a.optimizer, a.lr_high_actor), nc.make_optimizer(a.optimizer, a.lr_high_critic)),
    }
    rows: list[dict] = []
    reports: list[EvalReport] = []
    losses: list[dict] = []
    for epoch in range(tc.epochs):
        if not hier.uniform:
            for start in range(0, tc.episodes_per_epoch, tc.batch_episodes):
                low_batch, high_batch = [], []
                for k in range(start, min(start + tc.batch_episodes, tc.episodes_per_epoch)):
                    _, lb, hb = rollout_episode(hier, users, cfg.env, "train", (seed, TRAIN, epoch, k))
                    low_batch += lb
                    high_batch += hb
                where = {"epoch": epoch, "batch": start // tc.batch_episodes}
                rec = {"epoch": epoch}
                rec.update({f"low_{k}": v for k, v in _update(
                    hier.low, store, low_batch, hier.gamma, *opts["lra"], hier.tau,
                    (al.ACTOR, al.TRACKER, al.CRITIC, al.TARGET), {**where, "level": "low"}).items()})
                if hier.high is not None:
                    rec.update({f"high_{k}": v for k, v in _update(
                        hier.high, store, high_batch, hier.gamma, *opts["hra"], hier.tau,
                        (ah.ACTOR, ah.TRACKER, ah.CRITIC, ah.TARGET), {**where, "level": "high"}).items()})
                losses.append(rec)
        if (epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1:
            report, _ = evaluate(hier, users, cfg.env, seed, tc.eval_episodes, epoch)
            reports.append(report)
            rows.append(report.row())
            log.info("epoch %d: R_cum %.3f Len %.2f Gini %.4f", epoch, report.r_cum_mean,
                     report.len_mean, report.gini)
            if on_epoch is not None:
                on_epoch(epoch, rows[-1])
        if out_dir is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            nc.save_checkpoint(store, Path(out_dir) / f"checkpoint_epoch{epoch + 1:04d}.bin")
    return TrainResult(hier, initial, rows, reports, losses)
