"""Small reverse-mode differentiation engine over numpy float64 arrays.

Only what the actor/critic networks and the PPO losses need is provided:
dense and 2-D convolution layers, tanh, (masked) softmax, a handful of
elementwise ops and reductions, Adam, step schedules and a lossless
checkpoint format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AllMasked, NonScalarLoss, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of tanh expressed through its output."""
    return 1.0 - y * y


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * tanh_grad(y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _node(out, (a, b), lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                                         _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise pick: ``out[i] = a[i, index[i]]`` for a 2-D tensor."""
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _node(a.data[rows, idx], (a,), back)


def _check_mask(mask: np.ndarray, shape) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, dtype=DTYPE), shape)
    if np.any(mask.sum(axis=-1) <= 0):
        raise AllMasked("every action is masked")
    return mask


def _masked_shift(z: np.ndarray, valid: np.ndarray) -> np.ndarray:
    zmax = np.where(valid, z, -np.inf).max(axis=-1, keepdims=True)
    return np.where(valid, z - zmax, 0.0)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.ones(logits.shape))


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax, then invalid entries zeroed and the rest renormalised."""
    logits = as_tensor(logits)
    mask = _check_mask(mask, logits.shape)
    valid = mask > 0
    e = np.exp(_masked_shift(logits.data, valid)) * valid
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (logits,), back)


def masked_log_softmax(logits: Tensor, mask) -> Tensor:
    """Log of :func:`masked_softmax`; masked entries hold 0 and receive no gradient."""
    logits = as_tensor(logits)
    mask = _check_mask(mask, logits.shape)
    valid = mask > 0
    z = _masked_shift(logits.data, valid)
    lse = np.log((np.exp(z) * valid).sum(axis=-1, keepdims=True))
    out = np.where(valid, z - lse, 0.0)
    p = np.where(valid, np.exp(out), 0.0)

    def back(g):
        g = np.where(valid, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (logits,), back)


def renormalize(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask a probability vector and rescale it to sum to one."""
    logits = np.log(np.where(np.asarray(mask) > 0, probs, 1.0))
    return masked_softmax(Tensor(logits), mask).data


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW cross-correlation via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} vs weight {w.shape}")
    B, C, H, W = x.shape
    O, _, k, k2 = w.shape
    if k != k2:
        raise ShapeMismatch("square kernels only")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeMismatch(f"input {H}x{W} too small for kernel {k}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    parents: tuple = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gf.T @ cols).reshape(w.shape)
        dcols = (gf @ wmat).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros((B, C, Hp, Wp))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return _node(np.ascontiguousarray(out), parents, back)


# -- layer specifications ---------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeMismatch(f"Conv2d expects {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeMismatch(f"spatial size {h}x{w} too small for kernel {self.kernel}")
        return (self.out_channels, ho, wo)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def out_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeMismatch(f"Dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)


@dataclass(frozen=True)
class Tanh:
    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(frozen=True)
class Softmax:
    def out_shape(self, shape):
        return shape


LayerSpec = Conv2d | Dense | Tanh | Flatten | Softmax


def output_shape(layers: Sequence, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(in_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    return shape


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(layers: Sequence, rng: np.random.Generator, gain: float = np.sqrt(2.0),
                last_gain: float | None = None, prefix: str = "") -> dict[str, Tensor]:
    """Orthogonal weights and zero biases for every Conv2d/Dense layer."""
    params: dict[str, Tensor] = {}
    weighted = [i for i, l in enumerate(layers) if isinstance(l, (Conv2d, Dense))]
    for i in weighted:
        layer = layers[i]
        g = last_gain if (last_gain is not None and i == weighted[-1]) else gain
        if isinstance(layer, Conv2d):
            fan = layer.in_channels * layer.kernel * layer.kernel
            w = orthogonal((layer.out_channels, fan), g, rng).reshape(
                layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            b = np.zeros(layer.out_channels)
        else:
            # stored (in, out) so forward is x @ W
            w = orthogonal((layer.out_features, layer.in_features), g, rng).T
            b = np.zeros(layer.out_features)
        params[f"{prefix}{i}.w"] = Tensor(w, requires_grad=True, name=f"{prefix}{i}.w")
        params[f"{prefix}{i}.b"] = Tensor(b, requires_grad=True, name=f"{prefix}{i}.b")
    return params


def forward(layers: Sequence, params: dict[str, Tensor], x: Tensor, prefix: str = "") -> Tensor:
    """Run a layer stack; the leading axis of ``x`` is the batch."""
    out = as_tensor(x)
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            w = params[f"{prefix}{i}.w"]
            if out.ndim != 4 or out.shape[1] != layer.in_channels:
                raise ShapeMismatch(f"layer {i}: Conv2d got input {out.shape}")
            out = conv2d(out, w, params[f"{prefix}{i}.b"], layer.stride, layer.padding)
        elif isinstance(layer, Dense):
            if out.ndim != 2 or out.shape[1] != layer.in_features:
                raise ShapeMismatch(f"layer {i}: Dense({layer.in_features}) got input {out.shape}")
            out = matmul(out, params[f"{prefix}{i}.w"]) + params[f"{prefix}{i}.b"]
        elif isinstance(layer, Tanh):
            out = tanh(out)
        elif isinstance(layer, Flatten):
            out = flatten(out)
        elif isinstance(layer, Softmax):
            out = softmax(out)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return out


# -- optimisation -----------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None,
                   max_grad_norm: float | None = None) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``."""
    lr = state.lr if lr is None else lr
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        grads[name] = g
    if max_grad_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > max_grad_norm:
            grads = {k: g * (max_grad_norm / (total + 1e-12)) for k, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class StepSchedule:
    """Value that drops by ``decrement`` every ``every`` episodes, floored at ``minimum``."""

    start: float
    decrement: float
    every: int
    minimum: float = 0.0

    def __call__(self, episode: int) -> float:
        return max(self.start - self.decrement * (episode // self.every), self.minimum)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"PATROLMARL-CKPT v1\n"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header line + JSON index line + raw little-endian float64 payload."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a patrolmarl checkpoint")
        header = json.loads(fh.readline())
        payload = fh.read()
    arrays = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(DTYPE)
    return arrays, header["meta"]
