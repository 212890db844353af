"""Simulated interactive recommendation environment.

Users hold a unit preference vector. Feedback on an item is the rescaled
alignment ``(u . v + 1) / 2`` plus Gaussian noise, clamped to [0, 1]. Positive
feedback pulls the preference toward the recommended item. A session ends at
``max_len`` steps or after ``exit_window`` consecutive popular items.
"""
from __future__ import annotations

import csv
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .catalog import ItemCatalog, popularity

POSITIVE_THRESHOLD = 0.5
MAX_LEN = "max_len"
POPULARITY_EXIT = "popularity_exit"


class EnvError(ValueError):
    pass


@dataclass
class EnvConfig:
    n_items: int = 200
    dim: int = 8
    n_users: int = 500
    eta: float = 0.1
    noise: float = 0.05
    history_len: int = 5
    exit_window: int = 3
    max_len: int = 30
    zipf_s: float = 1.2
    # pull of popular items / users toward the shared popular region
    item_pull: float = 2.0
    user_pull: float = 0.0
    seed: int = 0
    catalog_path: str | None = None
    users_path: str | None = None

    def validate(self) -> None:
        if self.max_len not in (30, 50):
            raise EnvError(f"max_len must be 30 or 50, got {self.max_len}")
        if self.exit_window < 1:
            raise EnvError("exit_window must be >= 1")
        if self.history_len < 1:
            raise EnvError("history_len must be >= 1")
        if not 0.0 <= self.eta < 1.0:
            raise EnvError("eta must lie in [0, 1)")
        if self.noise < 0:
            raise EnvError("noise must be >= 0")
        if self.n_items < 1 or self.dim < 1 or self.n_users < 1:
            raise EnvError("n_items, dim and n_users must be positive")


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    if n == 0:
        raise EnvError("cannot normalise a zero vector")
    return x / n


@dataclass
class UserProfile:
    user_id: int
    pref: np.ndarray
    eta: float
    noise: float


class SyntheticUser:
    def __init__(self, profile: UserProfile, rng: np.random.Generator):
        self.user_id = profile.user_id
        self.pref = _unit(np.array(profile.pref, dtype=np.float64))
        self.eta = profile.eta
        self.noise = profile.noise
        self.rng = rng

    def expected_feedback(self, v: np.ndarray) -> float:
        return float(np.clip((self.pref @ v + 1.0) / 2.0, 0.0, 1.0))

    def feedback(self, v: np.ndarray) -> float:
        r = (self.pref @ v + 1.0) / 2.0
        if self.noise > 0:
            r += self.noise * self.rng.standard_normal()
        return float(np.clip(r, 0.0, 1.0))

    def drift(self, v: np.ndarray) -> None:
        if self.eta > 0:
            self.pref = _unit((1.0 - self.eta) * self.pref + self.eta * v)


@dataclass(frozen=True)
class Feedback:
    r_a: float
    positive: bool
    item: int
    step: int


class Session:
    """One user's interaction episode."""

    def __init__(self, catalog: ItemCatalog, user: SyntheticUser, cfg: EnvConfig):
        cfg.validate()
        self.catalog = catalog
        self.user = user
        self.max_len = cfg.max_len
        self.exit_window = cfg.exit_window
        self.history_len = cfg.history_len
        self.t = 0
        self.consecutive_popular = 0
        self.done = False
        self.cause: str | None = None
        self.history: deque[tuple[int, int]] = deque(maxlen=cfg.history_len)
        self._bootstrap()

    def _bootstrap(self) -> None:
        scores = self.catalog.embeddings @ self.user.pref
        pool = np.argsort(-scores, kind="stable")[: 2 * self.history_len]
        picks = self.user.rng.choice(pool, size=self.history_len, replace=False)
        for item in picks:
            self.history.append((int(item), 1))

    def history_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        items = np.fromiter((h[0] for h in self.history), dtype=np.int64, count=len(self.history))
        fb = np.fromiter((h[1] for h in self.history), dtype=np.int64, count=len(self.history))
        return items, fb

    def peek_preference(self) -> np.ndarray:
        return self.user.pref.copy()

    def step(self, item: int) -> tuple[Feedback, bool]:
        if self.done:
            raise EnvError("session already terminated")
        item = self.catalog.check_item(item)
        v = self.catalog.embeddings[item]
        r_a = self.user.feedback(v)
        positive = r_a >= POSITIVE_THRESHOLD
        if positive:
            self.user.drift(v)
        self.catalog.record_exposure(item)
        if self.catalog.popular[item]:
            self.consecutive_popular += 1
        else:
            self.consecutive_popular = 0
        fb = Feedback(r_a, positive, item, self.t)
        self.t += 1
        self.history.append((item, int(positive)))
        if self.t == self.max_len:
            self.done, self.cause = True, MAX_LEN
        elif self.consecutive_popular == self.exit_window:
            self.done, self.cause = True, POPULARITY_EXIT
        return fb, self.done


def reset(catalog: ItemCatalog, profile: UserProfile, cfg: EnvConfig, rng: np.random.Generator) -> Session:
    return Session(catalog, SyntheticUser(profile, rng), cfg)


# -- generation and I/O --------------------------------------------------------

def generate_environment(cfg: EnvConfig, seed: int | None = None) -> tuple[ItemCatalog, list[UserProfile]]:
    """Zipf popularity over items clustered so popular items share a region."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n, d = cfg.n_items, cfg.dim
    hub = _unit(rng.standard_normal(d))
    rank = rng.permutation(n)  # rank[i] = popularity rank of item i, 0 = most popular
    counts = np.floor(cfg.n_users * (rank + 1.0) ** (-cfg.zipf_s)).astype(int)
    pop = np.array([popularity(int(c), cfg.n_users) for c in counts])
    closeness = (1.0 - rank / max(n - 1, 1)) ** 2
    noise = rng.standard_normal((n, d)) / np.sqrt(d)
    emb = cfg.item_pull * closeness[:, None] * hub + noise
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    catalog = ItemCatalog(emb, pop)
    users = []
    for u in range(cfg.n_users):
        pref = _unit(cfg.user_pull * hub + rng.standard_normal(d) / np.sqrt(d))
        users.append(UserProfile(u, pref, cfg.eta, cfg.noise))
    return catalog, users


def save_users_csv(users: list[UserProfile], path) -> None:
    dim = len(users[0].pref) if users else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "eta", "noise"] + [f"u_{k}" for k in range(dim)])
        for u in users:
            w.writerow([u.user_id, f"{u.eta:.17g}", f"{u.noise:.17g}"] + [f"{x:.17g}" for x in u.pref])


def load_users_csv(path) -> list[UserProfile]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["user_id", "eta", "noise"]:
        raise EnvError(f"{path}: bad users header")
    return [UserProfile(int(r[0]), np.array([float(x) for x in r[3:]]), float(r[1]), float(r[2]))
            for r in rows[1:]]


def ingest_log(path, catalog: ItemCatalog, cfg: EnvConfig) -> tuple[ItemCatalog, list[UserProfile]]:
    """Fit popularity and initial preferences from a ``user_id,item_id,timestamp,feedback`` log.

    Popularity counts distinct users with feedback >= 0.5 per item; a user's
    preference is the normalised mean of the items they liked.
    """
    liked: dict[str, set[int]] = defaultdict(set)
    users_seen: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"user_id", "item_id", "timestamp", "feedback"}:
            raise EnvError(f"{path}: expected columns user_id,item_id,timestamp,feedback")
        for row in reader:
            uid = row["user_id"]
            if uid not in liked:
                users_seen.append(uid)
                liked[uid]
            item = catalog.check_item(int(row["item_id"]))
            fb = float(row["feedback"])
            if not 0.0 <= fb <= 1.0:
                raise EnvError(f"{path}: feedback {fb} outside [0, 1]")
            if fb >= POSITIVE_THRESHOLD:
                liked[uid].add(item)
    if not users_seen:
        raise EnvError(f"{path}: empty log")
    n_users = len(users_seen)
    counts = np.zeros(catalog.n_items, dtype=int)
    for items in liked.values():
        for i in items:
            counts[i] += 1
    pop = np.array([popularity(int(c), n_users) for c in counts])
    new_catalog = ItemCatalog(catalog.embeddings.copy(), pop)
    profiles = []
    for k, uid in enumerate(users_seen):
        items = sorted(liked[uid])
        if items:
            pref = _unit(catalog.embeddings[items].mean(axis=0))
        else:
            pref = _unit(catalog.center) if np.linalg.norm(catalog.center) > 0 else _unit(np.ones(catalog.dim))
        profiles.append(UserProfile(k, pref, cfg.eta, cfg.noise))
    return new_catalog, profiles
