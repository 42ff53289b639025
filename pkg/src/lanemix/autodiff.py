"""Small reverse-mode autodiff over numpy arrays.

Only what the value networks and the trajectory predictor need is here:
dense matmul, elementwise activations, concatenation, slicing, gathers and
reductions. Everything runs in float64.
"""

from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_VERSION = 1

_grad_enabled = True


class GraphConsumedError(RuntimeError):
    """Raised when backward() is called twice on the same graph."""


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._consumed = False
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out.grad = None
        out._parents = parents
        out._backward = backward_fn
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf tensor."""
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                _accum(parent, pg)
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
    loss._consumed = True


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor] | None] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "linear": None,
    None: None,
}


def activate(x: Tensor, activation: str | None) -> Tensor:
    try:
        fn = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return x if fn is None else fn(x)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """Batched matmul; a (..., m, k) @ b (k, n) or matching batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {ad.shape} @ {bd.shape}")

    def _bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T if a.requires_grad else None
            if b.requires_grad:
                a2 = ad.reshape(-1, ad.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = None
        else:
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), _bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    src = a.shape

    def _bw(g):
        full = np.zeros(src)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), _bw)


def take_step(a: Tensor, t: int) -> Tensor:
    """Select a[:, t] from a (B, T, ...) tensor."""
    src = a.shape

    def _bw(g):
        full = np.zeros(src)
        full[:, t] = g
        return (full,)

    return _result(a.data[:, t], (a,), _bw)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """out[b] = a[b, index[b]] for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    src = a.shape

    def _bw(g):
        full = np.zeros(src)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _result(a.data[rows, index], (a,), _bw)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    src = a.shape
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, src).copy(),)
    )


def sum_axis(a: Tensor, axis: int) -> Tensor:
    src = a.shape

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _result(a.data.sum(axis=axis), (a,), _bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), _bw)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    return mean_all(square(sub(pred, target)))


# ---------------------------------------------------------------- layers


def fc_forward(x, weight: Tensor, bias: Tensor | None = None, activation: str | None = None) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"fc input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    h = matmul(x, weight)
    if bias is not None:
        h = add(h, bias)
    return activate(h, activation)


def gcn_forward(adjacency, h, weight: Tensor, bias: Tensor | None = None,
                activation: str | None = "relu") -> Tensor:
    """activation(Â · H · W [+ b]); Â is (..., V, V), H is (..., V, d)."""
    adjacency, h = as_tensor(adjacency), as_tensor(h)
    if adjacency.shape[-1] != h.shape[-2] or adjacency.shape[-2] != adjacency.shape[-1]:
        raise ValueError(f"gcn shape mismatch: A {adjacency.shape}, H {h.shape}")
    out = matmul(adjacency, matmul(h, weight))
    if bias is not None:
        out = add(out, bias)
    return activate(out, activation)


def gru_forward(sequence, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor,
                h0: np.ndarray | None = None) -> Tensor:
    """Run a gated recurrent cell over (B, T, d_in); returns the final (B, H) state.

    Gate layout in the fused weights is [reset | update | candidate].
    """
    sequence = as_tensor(sequence)
    if sequence.data.ndim != 3 or sequence.shape[-1] != w_x.shape[0]:
        raise ValueError(f"gru input {sequence.shape} incompatible with W_x {w_x.shape}")
    hidden = w_h.shape[0]
    batch, steps = sequence.shape[0], sequence.shape[1]
    h = Tensor(np.zeros((batch, hidden)) if h0 is None else h0)
    for t in range(steps):
        gx = add(matmul(take_step(sequence, t), w_x), b_x)
        gh = add(matmul(h, w_h), b_h)
        r = sigmoid(add(slice_last(gx, 0, hidden), slice_last(gh, 0, hidden)))
        z = sigmoid(add(slice_last(gx, hidden, 2 * hidden), slice_last(gh, hidden, 2 * hidden)))
        n = tanh(add(slice_last(gx, 2 * hidden, 3 * hidden),
                     mul(r, slice_last(gh, 2 * hidden, 3 * hidden))))
        # h' = n + z * (h - n)
        h = add(n, mul(z, sub(h, n)))
    return h


def star_pattern(rows: int, block: int | None = None) -> np.ndarray:
    """0/1 edge pattern: self-loops, ego-neighbour edges inside each block of
    ``block`` rows (row 0 of a block is its ego), and ego-ego edges across blocks."""
    block = block or rows
    if rows % block:
        raise ValueError(f"{rows} rows do not split into blocks of {block}")
    idx = np.arange(rows)
    ego = idx % block == 0
    same = (idx[:, None] // block) == (idx[None, :] // block)
    s = np.eye(rows, dtype=bool) | (same & (ego[:, None] | ego[None, :])) | (ego[:, None] & ego[None, :])
    return s.astype(np.float64)


def normalized_adjacency(presence: np.ndarray, block: int | None = None,
                         pattern: np.ndarray | None = None) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over present nodes.

    ``presence`` is (..., V) of 0/1. Edges follow ``pattern`` (default: the
    ego-centred star from :func:`star_pattern`). Absent nodes get an all-zero
    row and column, so they never leak into present nodes.
    """
    p = (np.asarray(presence) > 0.5).astype(np.float64)
    if pattern is None:
        pattern = star_pattern(p.shape[-1], block)
    a = p[..., :, None] * p[..., None, :] * pattern
    deg = a.sum(axis=-1)
    inv = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv, where=deg > 0)
    return inv[..., :, None] * a * inv[..., None, :]


# ---------------------------------------------------------------- parameters


class ParameterSet:
    """Named, fixed-shape collection of trainable tensors."""

    def __init__(self, architecture: str, seed: int | None = None, meta: dict | None = None):
        self.architecture = architecture
        self.seed = seed
        self.meta = dict(meta or {})
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already defined")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._params.items()}

    def num_params(self) -> int:
        return int(sum(v.data.size for v in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: v.grad for k, v in self._params.items()}

    def clone(self, requires_grad: bool | None = None) -> "ParameterSet":
        out = ParameterSet(self.architecture, self.seed, self.meta)
        for k, v in self._params.items():
            out.add(k, v.data.copy(), v.requires_grad if requires_grad is None else requires_grad)
        return out

    def copy_from(self, other: "ParameterSet") -> None:
        if other.shapes() != self.shapes():
            raise ValueError("cannot copy between parameter sets of different architecture")
        for k, v in self._params.items():
            v.data = other[k].data.copy()

    def equals(self, other: "ParameterSet") -> bool:
        return self.shapes() == other.shapes() and all(
            np.array_equal(v.data, other[k].data) for k, v in self._params.items()
        )

    def save(self, path: str | Path) -> Path:
        """Write manifest.json plus one little-endian float64 blob."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        with open(path / "weights.bin", "wb") as fh:
            for name, t in self._params.items():
                arr = np.ascontiguousarray(t.data, dtype="<f8")
                fh.write(arr.tobytes())
                entries.append({"name": name, "shape": list(t.shape), "offset": offset})
                offset += arr.size
        manifest = {
            "architecture": self.architecture,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "meta": self.meta,
            "params": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path, requires_grad: bool = True) -> "ParameterSet":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        flat = np.fromfile(path / "weights.bin", dtype="<f8")
        out = cls(manifest["architecture"], manifest.get("seed"), manifest.get("meta"))
        for e in manifest["params"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            out.add(e["name"], flat[e["offset"]:e["offset"] + n].reshape(e["shape"]), requires_grad)
        return out


def he_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, lr: float) -> None:
        """Apply one update from the gradients currently stored on ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: ParameterSet, lr: float, state: Adam | None = None) -> Adam:
    state = state or Adam()
    state.step(params, lr)
    return state


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], params: ParameterSet, tolerance: float = 1e-4,
               h: float = 1e-5, max_per_param: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The relative error of one entry is |a - n| / max(|a|, |n|, floor); the
    floor keeps entries whose true gradient is ~0 from dividing noise by noise.
    With ``max_per_param`` set, a random subset of entries is probed per tensor.
    """
    params.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {k: v.grad.copy() for k, v in params.items()}
    rng = rng or np.random.default_rng(0)
    worst, worst_name, checked = 0.0, "", 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = rng.choice(flat.size, size=max_per_param, replace=False)
            ga = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
                checked += 1
                if err > worst:
                    worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, checked, tolerance)
