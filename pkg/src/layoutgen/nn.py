"""Minimal numpy layer library with hand-written backward passes.

Layers cache what their backward pass needs on forward and accumulate
parameter gradients in place; matrix work stays in BLAS via numpy matmul.
Dropout draws its masks from an explicit Generator so training runs are
reproducible bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)


class Module:
    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = ""):
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_params(prefix + name + ".")

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad[...] = 0.0


def gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def _dropout(x, p, rng):
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, scale=0.02, zero_init=False):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            w = (rng.standard_normal((n_in, n_out)) * scale).astype(dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        self._x = x.reshape(-1, x.shape[-1])
        self._shape = x.shape
        y = self._x @ self.w.data + self.b.data
        return y.reshape(x.shape[:-1] + (self.w.data.shape[1],))

    def backward(self, dy):
        d2 = dy.reshape(-1, dy.shape[-1])
        self.w.grad += self._x.T @ d2
        self.b.grad += d2.sum(axis=0)
        return (d2 @ self.w.data.T).reshape(self._shape)


class Embedding(Module):
    def __init__(self, n, dim, rng, dtype=np.float32, scale=0.02):
        self.table = Param((rng.standard_normal((n, dim)) * scale).astype(dtype))

    def forward(self, idx):
        self._idx = idx
        return self.table.data[idx]

    def backward(self, dy):
        np.add.at(self.table.grad, self._idx.reshape(-1),
                  dy.reshape(-1, dy.shape[-1]))


def _norm_forward(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _norm_backward(dxhat, xhat, inv):
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.g = Param(np.ones(dim, dtype=dtype))
        self.b = Param(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        self._xhat, self._inv = _norm_forward(x)
        return self.g.data * self._xhat + self.b.data

    def backward(self, dy):
        red = tuple(range(dy.ndim - 1))
        self.g.grad += (dy * self._xhat).sum(axis=red)
        self.b.grad += dy.sum(axis=red)
        return _norm_backward(dy * self.g.data, self._xhat, self._inv)


class AdaNorm(Module):
    """Parameter-free normalization modulated by a conditioning vector.

    The scale/shift projection starts at zero so the layer is an identity
    normalization at initialization.
    """

    def __init__(self, dim, cond_dim, rng, dtype=np.float32):
        self.proj = Linear(cond_dim, 2 * dim, rng, dtype, zero_init=True)
        self._dim = dim

    def forward(self, x, cond):
        ss = self.proj.forward(cond)  # (B, 2D)
        self._scale = ss[:, :self._dim][:, None, :]
        self._shift = ss[:, self._dim:][:, None, :]
        self._xhat, self._inv = _norm_forward(x)
        return self._xhat * (1.0 + self._scale) + self._shift

    def backward(self, dy):
        dscale = (dy * self._xhat).sum(axis=1)
        dshift = dy.sum(axis=1)
        dcond = self.proj.backward(np.concatenate([dscale, dshift], axis=-1))
        dx = _norm_backward(dy * (1.0 + self._scale), self._xhat, self._inv)
        return dx, dcond


def _softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class SelfAttention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float32, dropout=0.0):
        assert dim % heads == 0
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)
        self.heads = heads
        self.head_dim = dim // heads
        self.p_drop = dropout

    def forward(self, x, train=False, rng=None):
        b, s, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv.forward(x).reshape(b, s, 3, h, hd)
        q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))  # (b, h, s, hd)
        k = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
        v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(hd)
        attn = _softmax(scores)
        if train and self.p_drop > 0:
            attn_d, self._amask = _dropout(attn, self.p_drop, rng)
        else:
            attn_d, self._amask = attn, None
        ctx = (attn_d @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        y = self.out.forward(ctx)
        if train and self.p_drop > 0:
            y, self._omask = _dropout(y, self.p_drop, rng)
        else:
            self._omask = None
        self._cache = (q, k, v, attn, attn_d)
        return y

    def backward(self, dy):
        q, k, v, attn, attn_d = self._cache
        b, h, s, hd = q.shape
        if self._omask is not None:
            dy = dy * self._omask
        dctx = self.out.backward(dy).reshape(b, s, h, hd).transpose(0, 2, 1, 3)
        dattn_d = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn_d.transpose(0, 1, 3, 2) @ dctx
        dattn = dattn_d * self._amask if self._amask is not None else dattn_d
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(hd)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.empty((b, s, 3, h, hd), dtype=dy.dtype)
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        return self.qkv.backward(dqkv.reshape(b, s, 3 * h * hd))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float32, dropout=0.0):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)
        self.p_drop = dropout

    def forward(self, x, train=False, rng=None):
        self._pre = self.fc1.forward(x)
        y = self.fc2.forward(gelu(self._pre))
        if train and self.p_drop > 0:
            y, self._mask = _dropout(y, self.p_drop, rng)
        else:
            self._mask = None
        return y

    def backward(self, dy):
        if self._mask is not None:
            dy = dy * self._mask
        dh = self.fc2.backward(dy) * gelu_grad(self._pre)
        return self.fc1.backward(dh)


class Block(Module):
    """Pre-norm transformer block with conditioning-modulated normalization."""

    def __init__(self, dim, heads, hidden, cond_dim, rng, dtype=np.float32, dropout=0.0):
        self.norm1 = AdaNorm(dim, cond_dim, rng, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype, dropout)
        self.norm2 = AdaNorm(dim, cond_dim, rng, dtype)
        self.ff = FeedForward(dim, hidden, rng, dtype, dropout)

    def forward(self, x, cond, train=False, rng=None):
        x = x + self.attn.forward(self.norm1.forward(x, cond), train, rng)
        x = x + self.ff.forward(self.norm2.forward(x, cond), train, rng)
        return x

    def backward(self, dy):
        dn2, dcond2 = self.norm2.backward(self.ff.backward(dy))
        dx = dy + dn2
        dn1, dcond1 = self.norm1.backward(self.attn.backward(dx))
        return dx + dn1, dcond1 + dcond2


def sinusoidal_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class TimeEmbedding(Module):
    def __init__(self, dim, rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)
        self._dim = dim
        self._dtype = dtype

    def forward(self, t):
        base = sinusoidal_embedding(t, self._dim).astype(self._dtype)
        self._pre = self.fc1.forward(base)
        return self.fc2.forward(gelu(self._pre))

    def backward(self, dy):
        dh = self.fc2.backward(dy) * gelu_grad(self._pre)
        self.fc1.backward(dh)  # the sinusoidal base is constant


class AdamW:
    """Adam with decoupled weight decay over a list of Params."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)
