"""Session-level satisfaction metrics and exposure inequality."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .catalog import exposure_ratio

REPORT_FIELDS = [
    "epoch", "r_cum_mean", "r_cum_sd", "r_single_mean", "r_single_sd",
    "len_mean", "len_sd", "gini", "rho", "exit_maxlen", "exit_popularity",
]


def episode_metrics(rewards: Sequence[float]) -> tuple[float, float, int]:
    """(R_cum, R_single, Len) from the accuracy rewards of one session."""
    n = len(rewards)
    if n == 0:
        raise ValueError("empty episode")
    r_cum = math.fsum(rewards)
    return r_cum, r_cum / n, n


def gini(exposures) -> float:
    """Gini index of exposure counts, zeros included."""
    x = np.sort(np.asarray(exposures, dtype=np.float64))
    if x.ndim != 1 or x.size == 0:
        raise ValueError("need a nonempty 1-d array of counts")
    if np.any(x < 0):
        raise ValueError("exposure counts must be nonnegative")
    total = x.sum()
    if total <= 0:
        raise ValueError("gini undefined for all-zero exposure")
    n = x.size
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * total))


def _sd(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class EvalReport:
    r_cum: list[float]
    r_single: list[float]
    lengths: list[int]
    exposure: np.ndarray = field(repr=False)
    gini: float
    rho: float
    exit_maxlen: int
    exit_popularity: int
    epoch: int = 0

    @property
    def r_cum_mean(self):
        return float(np.mean(self.r_cum))

    @property
    def len_mean(self):
        return float(np.mean(self.lengths))

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "r_cum_mean": self.r_cum_mean,
            "r_cum_sd": _sd(self.r_cum),
            "r_single_mean": float(np.mean(self.r_single)),
            "r_single_sd": _sd(self.r_single),
            "len_mean": self.len_mean,
            "len_sd": _sd(self.lengths),
            "gini": self.gini,
            "rho": self.rho,
            "exit_maxlen": self.exit_maxlen,
            "exit_popularity": self.exit_popularity,
        }

    def to_json(self) -> dict:
        doc = self.row()
        doc["gini_pct"] = 100.0 * self.gini
        doc["episodes"] = [
            {"r_cum": c, "r_single": s, "len": n}
            for c, s, n in zip(self.r_cum, self.r_single, self.lengths)
        ]
        return doc


def aggregate(episodes: Iterable[tuple[Sequence[float], Sequence[int], str]],
              n_items: int, tail: np.ndarray, epoch: int = 0) -> EvalReport:
    """Pool eval sessions given as (accuracy rewards, recommended items, exit cause)."""
    r_cum, r_single, lengths = [], [], []
    exposure = np.zeros(n_items, dtype=np.int64)
    causes = {"max_len": 0, "popularity_exit": 0}
    for rewards, items, cause in episodes:
        c, s, n = episode_metrics(rewards)
        r_cum.append(c)
        r_single.append(s)
        lengths.append(n)
        np.add.at(exposure, np.asarray(items, dtype=np.int64), 1)
        causes[cause] += 1
    if not lengths:
        raise ValueError("no episodes to aggregate")
    return EvalReport(r_cum, r_single, lengths, exposure, gini(exposure),
                      exposure_ratio(exposure, tail), causes["max_len"],
                      causes["popularity_exit"], epoch)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csv(rows: Sequence[dict], path, extra: dict | None = None) -> None:
    """Metrics table; ``extra`` columns (e.g. variant) are prepended."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(extra) + REPORT_FIELDS + ["gini_pct"])
        for r in rows:
            w.writerow([str(v) for v in extra.values()] + [_fmt(r[k]) for k in REPORT_FIELDS]
                       + [_fmt(100.0 * r["gini"])])


def write_report_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
