"""Attention state trackers over the recent interaction window."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numcore as nc


class TrackerError(ValueError):
    pass


def init_tracker(store: nc.ParamStore, prefix: str, item_embeddings: np.ndarray,
                 rng: np.random.Generator, qk_scale: float = 0.1) -> None:
    """Item table seeded from the catalog; value path starts as the identity.

    With these initial values the tracked vector is an attention-weighted
    mean of recent item embeddings, so it lives in item space from step one.
    """
    n, d = item_embeddings.shape
    store.add(f"{prefix}.items", item_embeddings)
    store.add(f"{prefix}.feedback", rng.normal(0.0, 0.01, size=(2, d)))
    store.add(f"{prefix}.proj", np.vstack([np.eye(d), np.zeros((d, d))]))
    store.add(f"{prefix}.wq", rng.normal(0.0, qk_scale, size=(d, d)))
    store.add(f"{prefix}.wk", rng.normal(0.0, qk_scale, size=(d, d)))
    store.add(f"{prefix}.wv", np.eye(d))


def embed_interactions(params: Mapping, prefix: str, items: np.ndarray, feedback: np.ndarray):
    table = params[f"{prefix}.items"]
    fb_table = params[f"{prefix}.feedback"]
    joined = nc.concat([nc.getitem(table, items), nc.getitem(fb_table, feedback)], axis=-1)
    return nc.matmul(joined, params[f"{prefix}.proj"])


def encode_history(params: Mapping, prefix: str, items, feedback, reduce: str = "last"):
    """Track state from ``items``/``feedback`` of shape (..., N); returns (..., d)."""
    items = np.asarray(items, dtype=np.int64)
    feedback = np.asarray(feedback, dtype=np.int64)
    if items.shape[-1] == 0:
        raise TrackerError("history is empty")
    if items.shape != feedback.shape:
        raise TrackerError("items and feedback shapes differ")
    e = embed_interactions(params, prefix, items, feedback)
    d = np.shape(nc._val(e))[-1]
    q = nc.matmul(e, params[f"{prefix}.wq"])
    k = nc.matmul(e, params[f"{prefix}.wk"])
    v = nc.matmul(e, params[f"{prefix}.wv"])
    out = nc.scaled_dot_attention(q, k, v, scale=d)
    if reduce == "last":
        return nc.getitem(out, (Ellipsis, -1, slice(None)))
    if reduce == "mean":
        return nc.mean(out, axis=-2)
    raise TrackerError(f"unknown reduction {reduce!r}")


def encode_history_high(params: Mapping, items, feedback, reduce: str = "last"):
    return encode_history(params, "hra.tracker", items, feedback, reduce)


def encode_history_low(params: Mapping, items, feedback, reduce: str = "last"):
    return encode_history(params, "lra.tracker", items, feedback, reduce)


def build_low_state(p, g):
    """Concatenate tracked preference and target along the last axis."""
    if np.shape(nc._val(p))[-1] != np.shape(nc._val(g))[-1]:
        raise TrackerError("preference and target dimensions differ")
    return nc.concat([p, g], axis=-1)
