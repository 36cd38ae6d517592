"""A small dense tensor engine with reverse-mode differentiation.

Every primitive builds a node holding its output, its parent nodes and a
closure that pushes the output gradient back to the parents.  ``backward``
orders the graph topologically and runs the closures in reverse.

Arrays are float32 by default; wrap construction in ``precision(np.float64)``
for gradient verification.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

_DTYPE = [np.float32]
NEG_INF = -1e9


class InputError(ValueError):
    pass


class TrainingFault(RuntimeError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self):
        backward(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _node(data, parents, fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=fn if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# -- primitives ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def fn(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), fn)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fn(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(a.data @ b.data, (a, b), fn)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if int(np.prod([s for s in shape if s != -1])) and -1 not in shape \
            and int(np.prod(shape)) != a.data.size:
        raise InputError(f"cannot reshape {a.shape} to {shape}")

    def fn(g):
        _acc(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), fn)


def transpose(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        _acc(a, np.transpose(g, inv))
    return _node(np.transpose(a.data, axes), (a,), fn)


def index(a, idx) -> Tensor:
    a = _t(a)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)
    return _node(a.data[idx], (a,), fn)


def embedding(table, ids) -> Tensor:
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _acc(table, full)
    return _node(table.data[ids], (table,), fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def sum_all(a) -> Tensor:
    a = _t(a)

    def fn(g):
        _acc(a, np.broadcast_to(g, a.shape))
    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), fn)


def mean_all(a) -> Tensor:
    a = _t(a)
    n = a.data.size

    def fn(g):
        _acc(a, np.broadcast_to(g / n, a.shape))
    return _node(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), fn)


def gelu(a) -> Tensor:
    a = _t(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner))
    return _node(out, (a,), fn)


def softmax(a, mask=None) -> Tensor:
    """Row-wise softmax over the last axis; mask is an additive array (0 or NEG_INF)."""
    a = _t(a)
    x = a.data if mask is None else a.data + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        _acc(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _node(y, (a,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def fn(g):
        if gamma.requires_grad:
            _acc(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _acc(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            _acc(x, inv / n * (n * gx - gx.sum(-1, keepdims=True)
                               - xhat * (gx * xhat).sum(-1, keepdims=True)))
    return _node(out, (x, gamma, beta), fn)


def _weights(weights, n, dtype):
    if weights is None:
        return np.ones(n, dtype=dtype)
    w = np.asarray(weights, dtype=dtype).reshape(n)
    return w


def cross_entropy(logits, targets, weights=None, mask=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows of a (B, C) array."""
    logits = _t(logits)
    if logits.ndim == 1:
        return cross_entropy(reshape(logits, (1, -1)), np.atleast_1d(targets), weights, mask)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    B = logits.shape[0]
    if targets.shape[0] != B:
        raise InputError("targets and logits disagree on batch size")
    x = logits.data if mask is None else logits.data + mask
    x = x - x.max(axis=-1, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
    w = _weights(weights, B, logits.data.dtype)
    wsum = w.sum()
    nll = -logp[np.arange(B), targets]
    loss = (w * nll).sum() / wsum if wsum > 0 else np.zeros((), logits.data.dtype)

    def fn(g):
        if wsum <= 0:
            return
        p = np.exp(logp)
        p[np.arange(B), targets] -= 1.0
        _acc(logits, g * p * (w / wsum)[:, None])
    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), fn)


def mse(a, b, weights=None) -> Tensor:
    """Mean squared difference; with per-row weights, a weighted mean of per-row means."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise InputError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    if weights is None:
        n = d.size
        loss = (d * d).sum() / n

        def fn(g):
            _acc(a, g * 2.0 * d / n)
            _acc(b, -g * 2.0 * d / n)
    else:
        B = a.shape[0]
        per = d.reshape(B, -1)
        m = per.shape[1]
        w = _weights(weights, B, d.dtype)
        wsum = w.sum()
        scale = (w / wsum) if wsum > 0 else np.zeros_like(w)
        loss = (scale * (per * per).mean(axis=1)).sum()
        coef = scale.reshape((B,) + (1,) * (d.ndim - 1))

        def fn(g):
            _acc(a, g * 2.0 * d * coef / m)
            _acc(b, -g * 2.0 * d * coef / m)
    return _node(np.asarray(loss, dtype=d.dtype), (a, b), fn)


# -- graph traversal ------------------------------------------------------------------

def record(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from root (inputs before outputs)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = record(loss)
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            node.grad = None


def zero_grad(params) -> None:
    for p in _values(params):
        p.grad = None


def _values(params):
    return params.values() if isinstance(params, dict) else params


# -- optimization ---------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_frac: float = 0.03
    total_steps: int = 1000


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup over the first warmup_frac of steps, cosine decay to zero after."""
    total = max(int(cfg.total_steps), 1)
    warm = int(round(cfg.warmup_frac * total))
    if step < warm:
        return cfg.base_lr * step / warm
    if total <= warm:
        return cfg.base_lr
    progress = min((step - warm) / (total - warm), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam moments with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, step_index: int) -> float:
        cfg = self.cfg
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingFault(f"non-finite gradient in parameter {name!r}")
        lr = lr_at(step_index, cfg)
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            upd = (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
            if cfg.weight_decay:
                upd = upd + cfg.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype)
        return lr

    def state_dict(self) -> dict:
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


def optimizer_step(params: dict, grads: dict, step_index: int, cfg: OptimizerConfig,
                   state: Adam | None = None) -> Adam:
    """Functional wrapper: copy grads onto params and apply one Adam update."""
    for k, p in params.items():
        p.grad = grads.get(k)
    state = state or Adam(params, cfg)
    state.step(step_index)
    return state


# -- verification ---------------------------------------------------------------------

def numeric_grad(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() with respect to param.data."""
    g = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def grad_error(a: np.ndarray, n: np.ndarray) -> float:
    """Relative error of a gradient array measured in norm: |a - n| / max(|a|, |n|)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


# -- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"DACK"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named f32 tensors: magic, u32 manifest length, JSON manifest, payloads."""
    names = sorted(tensors)
    entries, payloads, offset = [], [], 0
    for name in names:
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else arr
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "dims": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                          separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + mlen])
    base = 8 + mlen
    out = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        arr = np.frombuffer(raw[lo:lo + e["nbytes"]], dtype="<f4").reshape(e["dims"])
        out[e["name"]] = arr.astype(np.float32)
    return out, manifest.get("meta", {})
