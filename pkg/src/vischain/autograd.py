"""Minimal reverse-mode autodiff engine on numpy arrays.

Network math runs in the dtype of its inputs (float32 by default);
finite-difference verification instantiates models in float64.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


def seed_rng(base_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Deterministic generator derived from (base_seed, purpose tag, index)."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    tag_int = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([base_seed, tag_int, index]))


class ShapeMismatch(ValueError):
    pass


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents  # tuple of (Tensor, fn: out_grad -> parent_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        self.grad = grad
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, fn in node._parents:
                if not parent.requires_grad:
                    continue
                g = fn(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents):
    parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(parents), parents=parents)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: incompatible shapes {a.shape} vs {b.shape}")
    return _node(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: incompatible shapes {a.shape} vs {b.shape}")
    return _node(data, [(a, lambda g: _unbroadcast(g, a.shape)),
                        (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    return _node(data, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                        (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def scale(a, s: float):
    a = _wrap(a)
    return _node(a.data * s, [(a, lambda g: g * s)])


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _node(data, [(a, grad_a), (b, grad_b)])


def reshape(a, shape):
    a = _wrap(a)
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inv))])


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(start), int(stop))
        parents.append((t, lambda g, sl=tuple(sl): np.ascontiguousarray(g[sl])))
    return _node(data, parents)


def take(a, idx):
    """Slice / integer-array indexing with scatter-add backward."""
    a = _wrap(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _node(a.data[idx], [(a, grad_fn)])


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(a.data.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).astype(a.data.dtype)

    return _node(data, [(a, grad_fn)])


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return y * (g - dot)

    return _node(y, [(a, grad_fn)])


def sigmoid(a):
    a = _wrap(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, [(a, lambda g: g * y * (1.0 - y))])


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """tanh-approximation GELU."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return g * dy

    return _node(y, [(a, grad_fn)])


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeMismatch(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature size {a.shape[-1:]}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def grad_x(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        return inv * (gh - m1 - xhat * m2)

    def grad_gain(g):
        return (g * xhat).reshape(-1, a.shape[-1]).sum(axis=0)

    def grad_bias(g):
        return g.reshape(-1, a.shape[-1]).sum(axis=0)

    return _node(y, [(a, grad_x), (gain, grad_gain), (bias, grad_bias)])


def linear(x, w, b=None):
    """x @ w (+ b); w is (in, out)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def conv1d(x, kernel, bias=None):
    """1D convolution with same zero padding.

    x: (..., T, Cin), kernel: (K, Cin, Cout), K odd.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    K, cin, cout = kernel.shape
    if K % 2 != 1:
        raise ShapeMismatch(f"conv1d: kernel length must be odd, got {K}")
    if x.shape[-1] != cin:
        raise ShapeMismatch(f"conv1d: input channels {x.shape[-1]} vs kernel {cin}")
    T = x.shape[-2]
    pad = K // 2
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    y = np.zeros(x.shape[:-1] + (cout,), dtype=x.data.dtype)
    for k in range(K):
        y += xp[..., k:k + T, :] @ kernel.data[k]

    def grad_x(g):
        gx = np.zeros_like(xp)
        for k in range(K):
            gx[..., k:k + T, :] += g @ kernel.data[k].T
        return gx[..., pad:pad + T, :]

    def grad_kernel(g):
        gk = np.zeros_like(kernel.data)
        gflat = g.reshape(-1, T, cout)
        xpflat = xp.reshape(-1, T + 2 * pad, cin)
        for k in range(K):
            gk[k] = np.einsum("btc,btd->cd", xpflat[:, k:k + T, :], gflat)
        return gk

    out = _node(y, [(x, grad_x), (kernel, grad_kernel)])
    if bias is not None:
        out = add(out, bias)
    return out


def external_grad(value: float, inputs_and_grads, dtype=np.float32):
    """Scalar loss node whose gradient w.r.t. each input tensor is precomputed.

    Used for objectives evaluated outside the tape (the transport matching
    loss is solved in float64 and only its envelope gradient re-enters).
    """
    parents = [(t, lambda g, gr=gr, t=t: (g * gr).astype(t.data.dtype))
               for t, gr in inputs_and_grads]
    return _node(np.asarray(value, dtype=dtype), parents)


def mse(pred, target):
    """Mean squared error against a constant target."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, Tensor(target))
    return mean(mul(d, d))


# ---------------------------------------------------------------------------
# attention


def attention(q, k, v, n_heads: int):
    """Scaled dot-product multi-head attention.

    q: (..., Sq, D), k/v: (..., Sk, D), D divisible by n_heads.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    D = q.shape[-1]
    if D % n_heads != 0:
        raise ShapeMismatch(f"attention: dim {D} not divisible by {n_heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: key count {k.shape[-2]} vs value count {v.shape[-2]}")
    if k.shape[-1] != D or v.shape[-1] != D:
        raise ShapeMismatch(f"attention: mixed dims {q.shape} / {k.shape} / {v.shape}")
    hd = D // n_heads

    def split(t):
        s = t.shape
        t = reshape(t, s[:-1] + (n_heads, hd))
        axes = tuple(range(t.ndim - 3)) + (t.ndim - 2, t.ndim - 3, t.ndim - 1)
        return transpose(t, axes)  # (..., H, S, hd)

    qh, kh, vh = split(q), split(k), split(v)
    kt = transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))
    logits = scale(matmul(qh, kt), 1.0 / float(np.sqrt(hd)))
    att = softmax(logits, axis=-1)
    out = matmul(att, vh)  # (..., H, Sq, hd)
    axes = tuple(range(out.ndim - 3)) + (out.ndim - 2, out.ndim - 3, out.ndim - 1)
    out = transpose(out, axes)  # (..., Sq, H, hd)
    return reshape(out, out.shape[:-2] + (D,))


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params: dict, state: AdamState):
    """One Adam update over {name: Tensor}; tensors without grads are skipped."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g.astype(np.float64) ** 2)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# finite differences


def grad_check(closure, params: dict, fd_step=1e-5, samples_per_param=4, seed=0):
    """Compare backward gradients against central finite differences.

    closure() must rebuild the graph and return a scalar loss Tensor.
    Returns {name: max relative error over sampled entries}.
    """
    zero_grads(params)
    loss = closure()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = seed_rng(seed, "grad-check")
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(samples_per_param, n), replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + fd_step
            up = float(closure().data)
            flat[i] = orig - fd_step
            dn = float(closure().data)
            flat[i] = orig
            fd = (up - dn) / (2 * fd_step)
            an = float(analytic[name].reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint i/o


def save_params(params: dict, directory):
    """Write manifest.json + params.bin (little-endian arrays in manifest order)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    offset = 0
    blobs = []
    for name in sorted(params):
        t = params[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype),
                          "offset": offset}
        offset += len(raw)
        blobs.append(raw)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(os.path.join(directory, "params.bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_params(directory) -> dict:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    with open(os.path.join(directory, "params.bin"), "rb") as f:
        blob = f.read()
    out = {}
    for name, meta in manifest.items():
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(meta["shape"]) or 1),
                            offset=meta["offset"])
        out[name] = arr.reshape(meta["shape"]).astype(meta["dtype"])
    return out
