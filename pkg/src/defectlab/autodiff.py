"""Dense float32 tensor engine with reverse-mode differentiation.

Every op below builds the backward graph eagerly; `backward` walks it in
reverse topological order and accumulates gradients into `.grad` buffers.
Reductions accumulate in float64 before casting back to float32 so that
gradient checks stay stable. Broadcasting is deliberately narrow: elementwise
ops want equal shapes, `add`/`sub` additionally accept a trailing-suffix
operand (bias-add), and `mul_const`/`add_const` accept any numpy-broadcastable
constant.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class DTensor:
    """A dense float32 tensor with an optional backward-graph record.

    Float64 leaves are allowed and propagate through every op; `grad_check`
    uses that to verify gradient rules free of float32 rounding noise.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None,
                 dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        # graph edges are only kept where gradients can flow
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"DTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def dtensor(data, requires_grad: bool = False) -> DTensor:
    return DTensor(data, requires_grad=requires_grad)


def parameter(data) -> DTensor:
    return DTensor(data, requires_grad=True)


def _as_tensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def _node(data, parents, vjp) -> DTensor:
    # op results keep whatever dtype the forward math produced
    return DTensor(data, _parents=parents, _vjp=vjp, dtype=None)


def _unbroadcast_suffix(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to a trailing-suffix operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a[len(a) - len(b):] != b:
        raise ShapeError(f"shape {b} is not a trailing suffix of {a}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _check_suffix(a.shape, b.shape)
    out = a.data + b.data

    def vjp(g):
        return g, _unbroadcast_suffix(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        _check_suffix(a.shape, b.shape)
    out = a.data - b.data

    def vjp(g):
        return g, -_unbroadcast_suffix(g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, g * a.data

    return _node(out, (a, b), vjp)


def scale(a, c: float) -> DTensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def add_const(a, c) -> DTensor:
    """Add a non-differentiable constant, numpy-broadcast against `a`."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=a.data.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"constant {c.shape} does not broadcast into {a.shape}")
    return _node(a.data + c, (a,), lambda g: (g,))


def mul_const(a, c) -> DTensor:
    """Multiply by a non-differentiable constant, numpy-broadcast against `a`."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=a.data.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"constant {c.shape} does not broadcast into {a.shape}")
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> DTensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a) -> DTensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _node(out, (a,), vjp)


def exp(a) -> DTensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> DTensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def minimum(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum needs equal shapes, got {a.shape} vs {b.shape}")
    take_a = a.data <= b.data  # ties route gradient to the first operand

    def vjp(g):
        return g * take_a, g * ~take_a

    return _node(np.where(take_a, a.data, b.data), (a, b), vjp)


def clip(a, lo: float, hi: float) -> DTensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> DTensor:
    """Matrix product: 2-D pairs, equal-stacked batches, or stacked @ 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            k = a.shape[-1]
            n = b.shape[-1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _node(out, (a, b), vjp)


def reshape(a, shape) -> DTensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes) -> DTensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> DTensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(ts), vjp)


def slice_(a, key) -> DTensor:
    """Basic slicing (tuples of slices/ints); gradient scatters back."""
    a = _as_tensor(a)
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return _node(np.ascontiguousarray(out), (a,), vjp)


def expand(a, axis: int, reps: int) -> DTensor:
    """Repeat a length-1 axis `reps` times."""
    a = _as_tensor(a)
    if a.shape[axis] != 1:
        raise ShapeError(f"expand needs a length-1 axis, got {a.shape} axis {axis}")
    return _node(np.repeat(a.data, reps, axis=axis), (a,),
                 lambda g: (g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> DTensor:  # noqa: A001 - numpy-style name
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> DTensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g / count, shape)),)

    return _node(out.astype(a.data.dtype), (a,), vjp)


def amax(a, axis=None, keepdims: bool = False) -> DTensor:
    """Max reduction; the gradient flows to the first maximal entry per slice."""
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out_keep = np.max(a.data, axis=axes, keepdims=True)
    hit = a.data == out_keep
    other = tuple(i for i in range(a.data.ndim) if i not in axes)
    perm = other + axes
    hit_m = hit.transpose(perm)
    flat = hit_m.reshape(hit_m.shape[:len(other)] + (-1,))
    first_flat = flat & (np.cumsum(flat, axis=-1) == 1)
    first = first_flat.reshape(hit_m.shape).transpose(np.argsort(perm))
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) * first,)

    result = out_keep if keepdims else np.squeeze(out_keep, axis=axes)
    return _node(result, (a,), vjp)


def softmax(a, axis: int = -1) -> DTensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (a,), vjp)


def rms_norm(a, axis: int = -1, eps: float = 1e-6) -> DTensor:
    a = _as_tensor(a)
    x = a.data
    ms = np.mean(np.square(x), axis=axis, keepdims=True) + eps
    r = np.sqrt(ms)
    y = x / r
    n = x.shape[axis]

    def vjp(g):
        dot = np.sum(g * x, axis=axis, keepdims=True)
        return (g / r - x * (dot / (n * ms * r)),)

    return _node(y, (a,), vjp)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal shapes, got {a.shape} vs {b.shape}")
    xa, xb = a.data, b.data
    sa = np.sum(np.square(xa), axis=axis, keepdims=True)
    sb = np.sum(np.square(xb), axis=axis, keepdims=True)
    p = np.sum(xa * xb, axis=axis, keepdims=True)
    na = np.sqrt(sa)
    nb = np.sqrt(sb)
    d = na * nb + eps
    cos = p / d
    out = np.squeeze(cos, axis=axis)

    def vjp(g):
        g = np.expand_dims(g, axis)
        ga = g * (xb / d - (p / (d * d)) * (nb / np.maximum(na, eps)) * xa)
        gb = g * (xa / d - (p / (d * d)) * (na / np.maximum(nb, eps)) * xb)
        return ga, gb

    return _node(out, (a, b), vjp)


def l2_norm(a) -> DTensor:
    a = _as_tensor(a)
    norm = float(np.sqrt(np.sum(np.square(a.data), dtype=np.float64)))
    data = a.data

    def vjp(g):
        return (g * data / max(norm, 1e-12),)

    return _node(np.asarray(norm, dtype=a.data.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# structured ops used by the denoiser and reward models
# ---------------------------------------------------------------------------

def apply_rope(a, cos: Array, sin: Array) -> DTensor:
    """Rotate even/odd feature pairs of (..., T, dh) by fixed angles.

    `cos`/`sin` have shape (T, dh // 2) and are treated as constants; the
    rotation is orthonormal, so norms are preserved and the vjp is the
    inverse rotation.
    """
    a = _as_tensor(a)
    x = a.data
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rope needs an even feature dim, got {x.shape}")
    cos = np.asarray(cos, dtype=x.dtype)
    sin = np.asarray(sin, dtype=x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _node(out, (a,), vjp)


def conv2d(x, w, b=None, padding: int = 1) -> DTensor:
    """NHWC 2-D convolution, stride 1, via shift-and-add GEMMs."""
    x, w = _as_tensor(x), _as_tensor(w)
    bt = _as_tensor(b) if b is not None else None
    bsz, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    p = padding
    dt = np.result_type(x.data, w.data)
    xp = np.pad(x.data.astype(dt, copy=False), ((0, 0), (p, p), (p, p), (0, 0)))
    oh, ow = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    out = np.zeros((bsz * oh * ow, cout), dtype=dt)
    patches = []
    for i in range(kh):
        for j in range(kw):
            patch = np.ascontiguousarray(xp[:, i:i + oh, j:j + ow, :]).reshape(-1, cin)
            patches.append(patch)
            out += patch @ w.data[i, j]
    if bt is not None:
        out += bt.data
    out = out.reshape(bsz, oh, ow, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        idx = 0
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = patches[idx].T @ g2
                gxp[:, i:i + oh, j:j + ow, :] += (g2 @ w.data[i, j].T).reshape(bsz, oh, ow, cin)
                idx += 1
        gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bt is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64).astype(g2.dtype))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _node(out, parents, vjp)


def avg_pool2d(x, k: int = 2) -> DTensor:
    x = _as_tensor(x)
    bsz, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d needs dims divisible by {k}, got {x.shape}")
    blocks = x.data.reshape(bsz, h // k, k, w // k, k, c)
    out = blocks.mean(axis=(2, 4))

    def vjp(g):
        g = g[:, :, None, :, None, :] / (k * k)
        return (np.ascontiguousarray(np.broadcast_to(g, (bsz, h // k, k, w // k, k, c))).reshape(bsz, h, w, c),)

    return _node(out.astype(x.data.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: DTensor) -> None:
    """Reverse-mode accumulation from a scalar loss into leaf `.grad` buffers.

    Interior gradients live in a scratch table that is freed as soon as each
    node has been processed; only leaves keep a `.grad` buffer. Repeated calls
    without clearing gradients accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    scratch: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = scratch.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf (or user-built node without a rule): accumulate and keep
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in scratch:
                scratch[key] = scratch[key] + pg
            else:
                scratch[key] = pg


def zero_grad(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def grad_check(f: Callable[[DTensor], DTensor], x: DTensor, h: float = 1e-3) -> float:
    """Max relative error between backward grads and central differences.

    The probe leaf is promoted to float64 so the comparison measures the
    gradient rules rather than float32 rounding in the forward pass; any
    float32 tensors captured by `f` keep their stored values.
    """
    probe = DTensor(x.data, requires_grad=True, dtype=np.float64)
    out = f(probe)
    backward(out)
    analytic = (np.zeros_like(probe.data) if probe.grad is None
                else probe.grad.astype(np.float64))
    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(probe).data)
        flat[i] = orig - h
        fm = float(f(probe).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain stochastic gradient with momentum."""

    def __init__(self, params: dict[str, DTensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self._vel[k]
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(np.float32)

    def zero_grad(self) -> None:
        zero_grad(self.params)


class Adam:
    def __init__(self, params: dict[str, DTensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.b1 ** self._t
        bc2 = 1.0 - self.b2 ** self._t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(np.float32)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"UDGC"
_VERSION = 1
_CONFIG_KEY = "__config__"


def save_checkpoint(path, tensors: dict[str, Array | DTensor], config: dict | None = None) -> None:
    """Write named float32 tensors (and an optional JSON config) to `path`."""
    entries: dict[str, Array] = {}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, DTensor) else np.asarray(t)
        entries[name] = np.asarray(arr, dtype=np.float32, order="C")
    if config is not None:
        payload = np.frombuffer(json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        entries[_CONFIG_KEY] = payload.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(entries)))
        for name in sorted(entries):
            arr = entries[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Array], dict | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, Array] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = np.array(data, dtype=np.float32)
    config = None
    if _CONFIG_KEY in tensors:
        raw = tensors.pop(_CONFIG_KEY).astype(np.uint8).tobytes()
        config = json.loads(raw.decode("utf-8"))
    return tensors, config
