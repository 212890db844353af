"""Item universe: embeddings, popularity, long-tail split and exposure counts."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# relative slack on the ball test so points built on the boundary sphere stay inside
BOUNDARY_RTOL = 1e-12


class CatalogError(ValueError):
    pass


def popularity(positive_user_count: int, total_users: int) -> float:
    """Share of users with positive feedback, floored at 1/(2|U|)."""
    if total_users <= 0:
        raise CatalogError("total_users must be positive")
    if positive_user_count < 0 or positive_user_count > total_users:
        raise CatalogError("positive_user_count must lie in [0, total_users]")
    return max(positive_user_count / total_users, 1.0 / (2 * total_users))


def fairness_reward(pop: float) -> float:
    if not 0.0 < pop <= 1.0:
        raise CatalogError(f"popularity must lie in (0, 1], got {pop}")
    return -math.log(pop)


def popular_count(n_items: int) -> int:
    return (n_items + 4) // 5  # ceil(0.2 n)


def popular_mask(pop: np.ndarray) -> np.ndarray:
    """Top 20% by popularity; ties go to the lower item id."""
    pop = np.asarray(pop, dtype=np.float64)
    order = np.lexsort((np.arange(len(pop)), -pop))
    mask = np.zeros(len(pop), dtype=bool)
    mask[order[: popular_count(len(pop))]] = True
    return mask


def center_and_radius(embeddings: np.ndarray) -> tuple[np.ndarray, float]:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise CatalogError("center_and_radius needs a non-empty item matrix")
    center = emb.mean(axis=0)
    radius = float(np.max(np.linalg.norm(emb - center, axis=1)))
    return center, radius


@dataclass
class ItemCatalog:
    embeddings: np.ndarray
    pop: np.ndarray
    popular: np.ndarray | None = None
    exposure: np.ndarray | None = None
    center: np.ndarray = field(init=False)
    radius: float = field(init=False)

    def __post_init__(self):
        self.embeddings = np.array(self.embeddings, dtype=np.float64)
        self.pop = np.array(self.pop, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise CatalogError("catalog needs at least one item")
        if self.pop.shape != (self.n_items,):
            raise CatalogError("one popularity value per item required")
        if not np.all(np.isfinite(self.embeddings)):
            raise CatalogError("non-finite item embeddings")
        if np.any(self.pop <= 0) or np.any(self.pop > 1):
            raise CatalogError("popularity must lie in (0, 1]")
        expected = popular_mask(self.pop)
        if self.popular is None:
            self.popular = expected
        else:
            self.popular = np.asarray(self.popular, dtype=bool)
            if not np.array_equal(self.popular, expected):
                raise CatalogError("popular/tail flags disagree with the top-20% popularity split")
        if self.exposure is None:
            self.exposure = np.zeros(self.n_items, dtype=np.int64)
        else:
            self.exposure = np.asarray(self.exposure, dtype=np.int64).copy()
        self._refresh_geometry()

    def _refresh_geometry(self):
        self.center, self.radius = center_and_radius(self.embeddings)

    @property
    def n_items(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def tail(self) -> np.ndarray:
        return ~self.popular

    def set_embeddings(self, embeddings: np.ndarray) -> None:
        emb = np.array(embeddings, dtype=np.float64)
        if emb.shape != self.embeddings.shape:
            raise CatalogError("embedding shape cannot change")
        self.embeddings = emb
        self._refresh_geometry()

    def check_item(self, item: int) -> int:
        if not (isinstance(item, (int, np.integer)) and 0 <= item < self.n_items):
            raise CatalogError(f"unknown item {item!r}")
        return int(item)

    def record_exposure(self, item: int) -> None:
        self.exposure[self.check_item(item)] += 1

    def fairness_reward(self, item: int) -> float:
        return fairness_reward(float(self.pop[item]))

    def copy(self) -> "ItemCatalog":
        return ItemCatalog(self.embeddings.copy(), self.pop.copy(), self.popular.copy(),
                           self.exposure.copy())

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "pop", "tail"] + [f"e_{k}" for k in range(self.dim)])
            for i in range(self.n_items):
                w.writerow([i, f"{self.pop[i]:.17g}", int(not self.popular[i])]
                           + [f"{x:.17g}" for x in self.embeddings[i]])

    @classmethod
    def load_csv(cls, path) -> "ItemCatalog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["item_id", "pop", "tail"]:
            raise CatalogError(f"{path}: bad catalog header")
        body = rows[1:]
        ids = [int(r[0]) for r in body]
        if ids != list(range(len(ids))):
            raise CatalogError(f"{path}: item ids must be 0..n-1 in order")
        pop = [float(r[1]) for r in body]
        popular = [r[2] == "0" for r in body]
        emb = [[float(x) for x in r[3:]] for r in body]
        return cls(np.array(emb), np.array(pop), np.array(popular))


def target_is_valid(g, catalog: ItemCatalog) -> bool:
    """Whether g lies in the ball around the item centroid that holds every item."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (catalog.dim,):
        raise CatalogError(f"target has shape {g.shape}, catalog dim is {catalog.dim}")
    dist = float(np.linalg.norm(g - catalog.center))
    return dist <= catalog.radius * (1.0 + BOUNDARY_RTOL)


def exposure_ratio(exposure, tail=None) -> float:
    """Share of all exposure spent on long-tail items.

    Accepts a catalog (its own counters) or an explicit counts/tail pair.
    """
    if isinstance(exposure, ItemCatalog):
        exposure, tail = exposure.exposure, exposure.tail
    exposure = np.asarray(exposure, dtype=np.float64)
    total = exposure.sum()
    if total <= 0:
        raise CatalogError("exposure ratio undefined with zero total exposure")
    return float(exposure[np.asarray(tail, dtype=bool)].sum() / total)
