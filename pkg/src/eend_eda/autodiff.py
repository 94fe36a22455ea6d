"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the diarization model needs are provided.  Every op
builds a node holding its parents and a closure that maps the output
gradient to the parents' gradients; ``Tensor.backward`` walks the graph in
reverse topological order and then releases it, so a second backward over
the same graph raises instead of silently double-counting.

Two kernels are fused for speed (``attention_core`` and ``lstm_sequence``).
Both have unfused counterparts built from primitives (see
``multi_head_self_attention`` and ``lstm_cell``) that the tests use as
oracles.
"""
from __future__ import annotations

import contextlib
import json
import threading
from pathlib import Path

import numpy as np

BCE_EPS = 1e-7
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer was configured with inconsistent sizes."""


class Tensor:
    """A float64 array with an optional node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._released = False
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

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
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self._released:
            raise RuntimeError("graph already consumed by a previous backward; re-run forward")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _node(data, parents, backward, op):
    if not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "mul")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x):
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x):
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,), "exp")


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def dropout(x, rate, rng):
    """Zero each element with probability ``rate`` and scale the rest by 1 / (1 - rate).

    Identity when ``rate`` is 0 or ``rng`` is None (inference).
    """
    x = as_tensor(x)
    if rng is None or rate <= 0:
        return x
    if rate >= 1:
        raise ValueError("dropout rate must be below 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def stop_gradient(x):
    """Cut the graph: the result is a constant sharing ``x``'s values.

    Nothing computed from the result sends gradient into ``x`` or anything
    upstream of it.
    """
    return Tensor(x.data, op="stop_gradient")


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    """Swap the last two axes, or apply an explicit axis permutation."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs at least 2 dimensions")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x, index):
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return _node(np.array(out), (x,), backward, "getitem")


def gather_frames(x, order):
    """``out[b, t] = x[b, order[b, t]]`` for x of shape (B, T, D)."""
    order = np.asarray(order, dtype=np.int64)
    if order.shape != x.shape[:2]:
        raise DimensionError(f"order shape {order.shape} does not match {x.shape[:2]}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, order]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, order), g)
        return (gx,)

    return _node(out, (x,), backward, "gather_frames")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _node(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * s).sum(axis=axis, keepdims=True)) * s,)

    return _node(s, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer norm affine params must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out, (x, gain, bias), backward, "layer_norm")


def binary_cross_entropy(y, p, eps=BCE_EPS):
    """Summed BCE ``sum(-y log p - (1 - y) log(1 - p))`` with p clamped to [eps, 1-eps].

    ``y`` holds constant 0/1 targets; gradient flows only into ``p``.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"labels {y.shape} and posteriors {p.shape} differ in shape")
    pc = np.clip(p.data, eps, 1.0 - eps)
    value = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum()
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def backward(g):
        return (g * inside * ((1.0 - y) / (1.0 - pc) - y / pc),)

    return _node(np.asarray(value), (p,), backward, "bce")


# ---------------------------------------------------------------- attention


def attention_core(q, k, v):
    """Scaled dot-product attention over (B, H, T, d) tensors, fused.

    Per (batch, head): ``softmax(q k^T / sqrt(d)) v``.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise DimensionError("attention_core expects equal (B, H, T, d) shapes")
    scale = 1.0 / np.sqrt(q.shape[-1])
    batch = q.shape[0]
    weights = np.empty(q.shape[:3] + (q.shape[2],))
    out = np.empty_like(v.data)
    for b in range(batch):
        s = (q.data[b] * scale) @ np.swapaxes(k.data[b], -1, -2)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        weights[b] = s
        out[b] = s @ v.data[b]

    def backward(g):
        gq, gk, gv = np.empty_like(q.data), np.empty_like(k.data), np.empty_like(v.data)
        for b in range(batch):
            s = weights[b]
            gv[b] = np.swapaxes(s, -1, -2) @ g[b]
            ds = g[b] @ np.swapaxes(v.data[b], -1, -2)
            ds -= np.einsum("hij,hij->hi", ds, s)[..., None]
            ds *= s
            gq[b] = (ds @ k.data[b]) * scale
            gk[b] = np.swapaxes(ds, -1, -2) @ (q.data[b] * scale)
        return gq, gk, gv

    return _node(out, (q, k, v), backward, "attention")


def multi_head_self_attention(x, params, num_heads, fused=True):
    """Multi-head self-attention without positional information.

    ``x`` has shape (..., T, D); ``params`` maps ``wq, bq, wk, bk, wv, bv, wo,
    bo`` to tensors with D x D weights and D biases.  With ``fused=False``
    the attention core is assembled from primitive ops instead.
    """
    d = x.shape[-1]
    if d % num_heads:
        raise ConfigurationError(f"embedding dim {d} is not divisible by {num_heads} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    batch, frames = x.shape[0], x.shape[1]
    dh = d // num_heads

    def heads(w, b):
        y = matmul(x, params[w]) + params[b]
        return transpose(reshape(y, (batch, frames, num_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    if fused:
        ctx = attention_core(q, k, v)
    else:
        scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(dh))
        ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, frames, d))
    out = matmul(ctx, params["wo"]) + params["bo"]
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- LSTM


def _check_lstm(x_dim, h, params):
    hidden = params["w_hh"].shape[0]
    if params["w_ih"].shape != (x_dim, 4 * hidden) or params["w_hh"].shape != (hidden, 4 * hidden) \
            or params["b"].shape != (4 * hidden,) or h.shape[-1] != hidden:
        raise DimensionError("LSTM input/state sizes do not match its parameters")
    return hidden


def lstm_cell(x, h, c, params):
    """One LSTM step built from primitives; gate order is input, forget, cell, output.

    ``params`` maps ``w_ih`` (In x 4H), ``w_hh`` (H x 4H) and ``b`` (4H).
    """
    hidden = _check_lstm(x.shape[-1], h, params)
    if c.shape != h.shape:
        raise DimensionError("hidden and cell state shapes differ")
    gates = matmul(x, params["w_ih"]) + matmul(h, params["w_hh"]) + params["b"]
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_sequence(xs, h0, c0, params):
    """Run an LSTM over (B, T, In) inputs from (B, H) initial states, fused.

    Returns ``(hs, c_last)``: all hidden states (B, T, H) and the final cell
    state (B, H).  Numerically identical recursion to ``lstm_cell``.
    """
    hidden = _check_lstm(xs.shape[-1], h0, params)
    batch, steps = xs.shape[0], xs.shape[1]
    if steps < 1:
        raise DimensionError("LSTM needs at least one step")
    w_ih, w_hh, b = params["w_ih"], params["w_hh"], params["b"]
    pre = xs.data @ w_ih.data + b.data
    acts = np.empty((steps, batch, 4 * hidden))
    cs = np.empty((steps + 1, batch, hidden))
    hs = np.empty((steps + 1, batch, hidden))
    tanh_c = np.empty((steps, batch, hidden))
    hs[0], cs[0] = h0.data, c0.data
    for t in range(steps):
        z = pre[:, t] + hs[t] @ w_hh.data
        a = acts[t]
        a[:, :2 * hidden] = _sigmoid(z[:, :2 * hidden])
        a[:, 2 * hidden:3 * hidden] = np.tanh(z[:, 2 * hidden:3 * hidden])
        a[:, 3 * hidden:] = _sigmoid(z[:, 3 * hidden:])
        cs[t + 1] = a[:, hidden:2 * hidden] * cs[t] + a[:, :hidden] * a[:, 2 * hidden:3 * hidden]
        tanh_c[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[:, 3 * hidden:] * tanh_c[t]
    packed = np.concatenate([hs[1:].transpose(1, 0, 2), cs[-1][:, None, :]], axis=1)

    def backward(g):
        gh_all = g[:, :steps].transpose(1, 0, 2)
        gc = g[:, steps].copy()
        gh = np.zeros((batch, hidden))
        gz = np.empty((steps, batch, 4 * hidden))
        for t in range(steps - 1, -1, -1):
            a = acts[t]
            i, f, cc, o = (a[:, :hidden], a[:, hidden:2 * hidden],
                           a[:, 2 * hidden:3 * hidden], a[:, 3 * hidden:])
            gh = gh + gh_all[t]
            go = gh * tanh_c[t]
            gc = gc + gh * o * (1.0 - tanh_c[t] ** 2)
            z = gz[t]
            z[:, :hidden] = gc * cc * i * (1.0 - i)
            z[:, hidden:2 * hidden] = gc * cs[t] * f * (1.0 - f)
            z[:, 2 * hidden:3 * hidden] = gc * i * (1.0 - cc * cc)
            z[:, 3 * hidden:] = go * o * (1.0 - o)
            gc = gc * f
            gh = z @ w_hh.data.T
        gz_b = gz.transpose(1, 0, 2)
        gxs = gz_b @ w_ih.data.T if xs.requires_grad else None
        flat_gz = gz_b.reshape(-1, 4 * hidden)
        gw_ih = xs.data.reshape(-1, xs.shape[-1]).T @ flat_gz if w_ih.requires_grad else None
        gw_hh = (hs[:-1].transpose(1, 0, 2).reshape(-1, hidden).T @ flat_gz
                 if w_hh.requires_grad else None)
        gb = gz.sum(axis=(0, 1)) if b.requires_grad else None
        return gxs, gh, gc, gw_ih, gw_hh, gb

    node = _node(packed, (xs, h0, c0, w_ih, w_hh, b), backward, "lstm_sequence")
    return node[:, :steps], node[:, steps]


# ---------------------------------------------------------------- modules


class Module:
    """Container that names its parameters and sub-modules recursively."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Tensor) and v.requires_grad:
                        out[f"{key}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        out.update(v.named_parameters(f"{key}.{i}."))
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for key, p in params.items():
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{key}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.copy()


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


# ---------------------------------------------------------------- checkpoints

_META_KEY = "__meta__"


def save_checkpoint(path, state, meta=None):
    """Write ``{name: float64 array}`` plus a JSON ``meta`` dict to an ``.npz`` file.

    Arrays are stored uncompressed at full precision, so a round trip is
    bit-exact.  ``meta`` lands under the ``__meta__`` key as UTF-8 bytes.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k].astype(np.float64) for k in z.files if k != _META_KEY}
        meta = json.loads(z[_META_KEY].tobytes().decode()) if _META_KEY in z.files else {}
    return state, meta
