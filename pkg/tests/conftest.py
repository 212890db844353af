import numpy as np
import pytest

from hrlfair import numcore as nc
from hrlfair.catalog import ItemCatalog
from hrlfair.env import EnvConfig, generate_environment


def random_catalog(rng, n=12, d=3):
    emb = rng.standard_normal((n, d))
    pop = rng.uniform(0.01, 1.0, size=n)
    return ItemCatalog(emb, pop)


def numeric_grad(store: nc.ParamStore, loss_fn, names, h=1e-5):
    """Central differences of ``loss_fn(raw params)`` for every entry of ``names``."""
    out = {}
    for name in names:
        base = store.values[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            up = float(loss_fn(store.values))
            base[idx] = orig - h
            down = float(loss_fn(store.values))
            base[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def analytic_grad(store: nc.ParamStore, loss_fn, prefix=""):
    tape = nc.Tape()
    loss = loss_fn(store.view(tape, prefix))
    store.zero_grad()
    tape.backward(loss)
    grads = {n: store.grads[n].copy() for n in store.names(prefix)}
    store.zero_grad()
    return grads


def relative_error(a: dict, b: dict) -> float:
    va = np.concatenate([a[n].ravel() for n in sorted(a)])
    vb = np.concatenate([b[n].ravel() for n in sorted(a)])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(va), np.linalg.norm(vb), 1e-8))


def gradcheck(store, loss_fn, prefix="", exclude=(), h=1e-5):
    ana = analytic_grad(store, loss_fn, prefix)
    names = [n for n in ana if not any(n.startswith(e) for e in exclude)]
    num = numeric_grad(store, loss_fn, names, h)
    return relative_error({n: ana[n] for n in names}, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_env():
    cfg = EnvConfig()
    catalog, users = generate_environment(cfg)
    return cfg, catalog, users
