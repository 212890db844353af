"""Small reverse-mode autodiff over float64 numpy arrays.

Every op accepts plain arrays or :class:`Var` nodes. When no input is a
``Var`` the op is plain numpy and returns an ``ndarray``, so the same model
code serves fast rollouts and taped training passes.
"""
from __future__ import annotations

import math
import struct
from typing import Iterable, Mapping

import numpy as np

CHECKPOINT_MAGIC = b"HRL4PFG1"


class NumericsError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def check_finite(x, what: str = "value") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite entries in {what}")
    return arr


class Var:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "grad", "tape", "_backward")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: "Tape", backward=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self._backward = backward
        tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Tape:
    """Records one forward pass; ``backward`` may run once."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict[str, Var] = {}
        self._store: ParamStore | None = None
        self._spent = False

    def _record(self, node: Var) -> None:
        if self._spent:
            raise TapeError("tape already consumed by backward; run a new forward pass")
        self.nodes.append(node)

    def constant(self, value) -> Var:
        return Var(check_finite(value, "tape input"), self)

    def watch(self, store: "ParamStore", prefix: str = "") -> dict[str, Var]:
        """Expose parameters as leaves; their grads land in ``store`` on backward."""
        if self._store is not None and self._store is not store:
            raise TapeError("a tape can watch a single ParamStore")
        self._store = store
        out = {}
        for name in store.names(prefix):
            if name not in self._params:
                self._params[name] = Var(store.values[name], self)
            out[name] = self._params[name]
        return out

    def backward(self, loss: Var) -> None:
        if self._spent:
            raise TapeError("backward already ran on this tape")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        # creation order is a topological order
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        if self._store is not None:
            for name, var in self._params.items():
                if var.grad is not None:
                    self._store.grads[name] += var.grad
        self._spent = True


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(x, g: np.ndarray) -> None:
    if not isinstance(x, Var):
        return
    g = _unbroadcast(g, x.value.shape)
    x.grad = g.copy() if x.grad is None else x.grad + g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b, dtype=np.float64)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return Var(_val(a) + _val(b), tape, bw)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b, dtype=np.float64)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return Var(_val(a) - _val(b), tape, bw)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av * bv

    def bw(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return Var(av * bv, tape, bw)


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if tape is None:
        return av / bv
    out = av / bv

    def bw(g):
        _accum(a, g / bv)
        _accum(b, -g * out / bv)

    return Var(out, tape, bw)


def tanh(x):
    out = np.tanh(_val(x))
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g * (1.0 - out * out)))


def exp(x):
    out = np.exp(_val(x))
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g * out))


def log(x):
    xv = _val(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g / xv))


def square(x):
    xv = _val(x)
    if not isinstance(x, Var):
        return xv * xv
    return Var(xv * xv, x.tape, lambda g: _accum(x, 2.0 * xv * g))


def sqrt(x):
    out = np.sqrt(_val(x))
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g * 0.5 / out))


def clamp_min(x, lo: float):
    xv = _val(x)
    out = np.maximum(xv, lo)
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g * (xv > lo)))


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = _val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, xv.shape))

    return Var(np.asarray(out, dtype=np.float64), x.tape, bw)


def mean(x, axis=None, keepdims=False):
    xv = _val(x)
    count = xv.size if axis is None else xv.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(x, idx):
    xv = _val(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out

    def bw(g):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        _accum(x, z)

    return Var(np.array(out, dtype=np.float64), x.tape, bw)


def concat(xs, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, bounds, axis=axis)):
            _accum(x, part)

    return Var(out, tape, bw)


def reshape(x, shape):
    xv = _val(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, g.reshape(xv.shape)))


def swap_last(x):
    """Transpose the two trailing axes."""
    out = np.swapaxes(_val(x), -1, -2)
    if not isinstance(x, Var):
        return out
    return Var(out, x.tape, lambda g: _accum(x, np.swapaxes(g, -1, -2)))


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av @ bv
    if tape is None:
        return out
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    out2_shape = (a2 @ b2).shape

    def bw(g):
        g2 = g.reshape(out2_shape)
        if isinstance(a, Var):
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
            _accum(a, ga.reshape(av.shape))
        if isinstance(b, Var):
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            _accum(b, gb.reshape(bv.shape))

    return Var(out, tape, bw)


# -- probability ops ---------------------------------------------------------

def _masked(xv, mask):
    if mask is None:
        return xv
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise NumericsError("mask selects no entries")
    return np.where(mask, xv, -np.inf)


def softmax(x, axis: int = -1, mask=None):
    """Max-shifted softmax; entries outside ``mask`` get probability exactly 0."""
    xv = _val(x)
    if xv.size == 0 or xv.shape[axis] == 0:
        raise NumericsError("softmax of an empty input")
    check_finite(xv, "softmax logits")
    z = _masked(xv, mask)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)
    if not isinstance(x, Var):
        return out

    def bw(g):
        _accum(x, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return Var(out, x.tape, bw)


def log_softmax(x, axis: int = -1, mask=None):
    xv = _val(x)
    check_finite(xv, "log_softmax logits")
    z = _masked(xv, mask)
    z = z - np.max(z, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    if not isinstance(x, Var):
        return out
    probs = np.exp(out)

    def bw(g):
        g = np.where(np.isfinite(out), g, 0.0)
        _accum(x, g - probs * np.sum(g, axis=axis, keepdims=True))

    return Var(out, x.tape, bw)


def scaled_dot_attention(q, k, v, scale: float):
    """softmax(Q K^T / sqrt(scale)) V over the trailing two axes."""
    qv, kv, vv = _val(q), _val(k), _val(v)
    if qv.shape[-1] != kv.shape[-1]:
        raise NumericsError(f"query/key width mismatch {qv.shape} vs {kv.shape}")
    if kv.shape[-2] != vv.shape[-2]:
        raise NumericsError(f"key/value length mismatch {kv.shape} vs {vv.shape}")
    if not scale > 0:
        raise NumericsError("attention scale must be positive")
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(scale))
    return matmul(softmax(scores, axis=-1), v)


_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_logprob(x, mu, sigma2):
    """Diagonal Gaussian log-density, summed over the last axis."""
    xv, mv, sv = _val(x), _val(mu), _val(sigma2)
    if xv.shape[-1] != mv.shape[-1] or sv.shape[-1] != mv.shape[-1]:
        raise NumericsError("gaussian_logprob dimension mismatch")
    if np.any(sv <= 0):
        raise NumericsError("variance must be positive")
    diff = sub(x, mu)
    terms = mul(add(log(sigma2), _LOG_2PI), -0.5) - div(square(diff), mul(sigma2, 2.0))
    return sum(terms, axis=-1)


# -- parameters --------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with same-shaped gradient slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(check_finite(value, name), dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self):
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def assign(self, name: str, value) -> None:
        arr = np.array(check_finite(value, name), dtype=np.float64)
        if arr.shape != self.values[name].shape:
            raise NumericsError(
                f"shape mismatch for {name}: expected {self.values[name].shape}, got {arr.shape}"
            )
        self.values[name] = arr

    def zero_grad(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.grads[n] = np.zeros_like(self.values[n])

    def view(self, tape: Tape | None = None, prefix: str = "") -> Mapping:
        if tape is None:
            return {n: self.values[n] for n in self.names(prefix)}
        return tape.watch(self, prefix)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self.values.items():
            out.add(n, v)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.values.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.values) - set(state)
        if missing:
            raise NumericsError(f"checkpoint lacks tensor {sorted(missing)[0]!r}")
        extra = set(state) - set(self.values)
        if extra:
            raise NumericsError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
        for n in self.values:
            self.assign(n, state[n])

    def equals(self, other: "ParamStore") -> bool:
        return self.values.keys() == other.values.keys() and all(
            np.array_equal(v, other.values[n]) for n, v in self.values.items()
        )


def sgd_step(store: ParamStore, lr: float, prefix: str = "") -> None:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for n in store.names(prefix):
        store.values[n] = store.values[n] - lr * store.grads[n]
        store.steps[n] += 1
    store.zero_grad(prefix)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, prefix: str = "") -> None:
        for n in store.names(prefix):
            g = store.grads[n]
            m = self.m.get(n, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(n, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            store.steps[n] += 1
            t = store.steps[n]
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            store.values[n] = store.values[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        store.zero_grad(prefix)


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        if not lr > 0:
            raise ValueError("learning rate must be positive")

        class _SGD:
            def step(self, store, prefix=""):
                sgd_step(store, lr, prefix)

        return _SGD()
    raise ValueError(f"unknown optimizer {kind!r}")


# -- networks ----------------------------------------------------------------

def init_mlp(store: ParamStore, prefix: str, sizes: Iterable[int], rng: np.random.Generator,
             out_scale: float = 1.0) -> None:
    sizes = list(sizes)
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        if k == len(sizes) - 2:
            w = w * out_scale
        store.add(f"{prefix}.w{k}", w)
        store.add(f"{prefix}.b{k}", np.zeros(fan_out))


def mlp_layers(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in params:
        n += 1
    return n


def mlp_forward(params: Mapping, prefix: str, x):
    """Affine layers with tanh between them and a linear output."""
    n = mlp_layers(params, prefix)
    if n == 0:
        raise NumericsError(f"no layers under {prefix!r}")
    h = x
    for k in range(n):
        w = params[f"{prefix}.w{k}"]
        if _val(h).shape[-1] != _val(w).shape[0]:
            raise NumericsError(
                f"{prefix}.w{k} expects width {_val(w).shape[0]}, got {_val(h).shape[-1]}"
            )
        h = add(matmul(h, w), params[f"{prefix}.b{k}"])
        if k < n - 1:
            h = tanh(h)
    return h


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in store.values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise NumericsError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as exc:
        raise NumericsError(f"{path}: truncated checkpoint") from exc
    return out
