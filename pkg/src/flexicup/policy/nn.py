"""Minimal float64 layers with hand-written backward passes.

Parameters live in one flat, ordered ``dict`` owned by the model; layers keep
only their key prefix, so saving, gradient checking and optimisation all see
the same arrays. ``forward`` returns an output and a cache, ``backward``
takes the cache and the upstream gradient and accumulates into ``grads``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ParamStore:
    def __init__(self, rng: np.random.Generator | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.rng = rng or np.random.default_rng(0)

    def add(self, name: str, shape, init: str = "zeros", fan_in: int | None = None) -> str:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if init == "zeros":
            a = np.zeros(shape)
        elif init == "he":
            a = self.rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif init == "xavier":
            a = self.rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)
        else:
            raise ValueError(init)
        self.params[name] = a
        return name

    def count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, init: str = "he"):
        self.w = store.add(f"{name}.weight", (n_in, n_out), init, fan_in=n_in)
        self.b = store.add(f"{name}.bias", (n_out,))
        self.n_in, self.n_out = n_in, n_out

    def forward(self, P, x):
        return x @ P[self.w] + P[self.b], x

    def backward(self, P, G, cache, dy):
        x = cache
        x2 = x.reshape(-1, self.n_in)
        d2 = dy.reshape(-1, self.n_out)
        G[self.w] += x2.T @ d2
        G[self.b] += d2.sum(axis=0)
        return dy @ P[self.w].T


_relu_masks: list | None = None


@contextmanager
def record_relu_masks():
    """Collect every ReLU mask computed inside the block (used to spot kinks)."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x):
    mask = x > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    return np.maximum(x, 0.0), mask


def relu_backward(mask, dy):
    return dy * mask


class Conv2d:
    """3x3 convolution (NCHW) via im2col; stride and zero padding configurable."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 2,
                 pad: int = 1):
        self.w = store.add(f"{name}.weight", (c_in * k * k, c_out), "he", fan_in=c_in * k * k)
        self.b = store.add(f"{name}.bias", (c_out,))
        self.c_in, self.c_out, self.k, self.s, self.p = c_in, c_out, k, stride, pad

    def out_size(self, n: int) -> int:
        return (n + 2 * self.p - self.k) // self.s + 1

    def _cols(self, xp, ho, wo):
        b, c, _, _ = xp.shape
        sb, sc, sh, sw = xp.strides
        view = as_strided(xp, shape=(b, ho, wo, c, self.k, self.k),
                          strides=(sb, sh * self.s, sw * self.s, sc, sh, sw), writeable=False)
        return view.reshape(b, ho, wo, c * self.k * self.k)

    def forward(self, P, x):
        b, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {c}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.p, self.p), (self.p, self.p)))
        ho, wo = self.out_size(h), self.out_size(w)
        cols = self._cols(np.ascontiguousarray(xp), ho, wo)
        y = cols @ P[self.w] + P[self.b]  # (b, ho, wo, c_out)
        return y.transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, P, G, cache, dy):
        cols, xshape = cache
        b, c, h, w = xshape
        d = dy.transpose(0, 2, 3, 1)  # (b, ho, wo, c_out)
        ho, wo = d.shape[1], d.shape[2]
        G[self.w] += cols.reshape(-1, cols.shape[-1]).T @ d.reshape(-1, self.c_out)
        G[self.b] += d.sum(axis=(0, 1, 2))
        dcols = (d @ P[self.w].T).reshape(b, ho, wo, c, self.k, self.k)
        dxp = np.zeros((b, c, h + 2 * self.p, w + 2 * self.p))
        s = self.s
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, self.p:self.p + h, self.p:self.p + w]


class ImageEncoder:
    """Conv stages (each followed by ReLU) then a linear projection to ``d``."""

    def __init__(self, store: ParamStore, name: str, img: int, channels, d: int):
        self.convs = []
        c_prev, n = 1, img
        for i, c in enumerate(channels):
            conv = Conv2d(store, f"{name}.conv{i}", c_prev, c)
            self.convs.append(conv)
            c_prev, n = c, conv.out_size(n)
        self.flat = c_prev * n * n
        self.proj = Linear(store, f"{name}.proj", self.flat, d, init="xavier")
        self.img = img

    def forward(self, P, x):
        if x.ndim != 3 or x.shape[1:] != (self.img, self.img):
            raise ValueError(f"expected images of shape (*, {self.img}, {self.img}), got {x.shape}")
        h = x[:, None, :, :]
        caches = []
        for conv in self.convs:
            h, cc = conv.forward(P, h)
            h, m = relu(h)
            caches.append((cc, m))
        shape = h.shape
        y, pc = self.proj.forward(P, h.reshape(shape[0], -1))
        return y, (caches, pc, shape)

    def backward(self, P, G, cache, dy):
        caches, pc, shape = cache
        dh = self.proj.backward(P, G, pc, dy).reshape(shape)
        for conv, (cc, m) in zip(reversed(self.convs), reversed(caches)):
            dh = conv.backward(P, G, cc, relu_backward(m, dh))
        return dh[:, 0]


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, name: str, sizes, last_init: str = "he"):
        self.layers = [Linear(store, f"{name}.fc{i}", a, b, init=last_init if i == len(sizes) - 2 else "he")
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def forward(self, P, x):
        caches = []
        h = x
        for i, lin in enumerate(self.layers):
            h, lc = lin.forward(P, h)
            m = None
            if i < len(self.layers) - 1:
                h, m = relu(h)
            caches.append((lc, m))
        return h, caches

    def backward(self, P, G, caches, dy):
        d = dy
        for lin, (lc, m) in zip(reversed(self.layers), reversed(caches)):
            if m is not None:
                d = relu_backward(m, d)
            d = lin.backward(P, G, lc, d)
        return d


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadSelfAttention:
    """Self-attention over a short token sequence, (B, N, d) -> (B, N, d)."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        if d % heads:
            raise ValueError("model dim must be divisible by the head count")
        self.d, self.h, self.dh = d, heads, d // heads
        self.q = Linear(store, f"{name}.q", d, d, init="xavier")
        self.k = Linear(store, f"{name}.k", d, d, init="xavier")
        self.v = Linear(store, f"{name}.v", d, d, init="xavier")
        self.o = Linear(store, f"{name}.o", d, d, init="xavier")

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.h, self.dh).transpose(0, 2, 1, 3)  # (b, h, n, dh)

    def _merge(self, x):
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def forward(self, P, x):
        q, qc = self.q.forward(P, x)
        k, kc = self.k.forward(P, x)
        v, vc = self.v.forward(P, x)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        logits = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(self.dh)
        att = softmax(logits)
        ctx = self._merge(att @ vh)
        y, oc = self.o.forward(P, ctx)
        return y, (qc, kc, vc, oc, qh, kh, vh, att)

    def backward(self, P, G, cache, dy):
        qc, kc, vc, oc, qh, kh, vh, att = cache
        dctx = self._split(self.o.backward(P, G, oc, dy))
        datt = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dctx
        dlogits = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dlogits /= math.sqrt(self.dh)
        dqh = dlogits @ kh
        dkh = dlogits.transpose(0, 1, 3, 2) @ qh
        dx = self.q.backward(P, G, qc, self._merge(dqh))
        dx = dx + self.k.backward(P, G, kc, self._merge(dkh))
        dx = dx + self.v.backward(P, G, vc, self._merge(dvh))
        return dx

    @staticmethod
    def weights(cache):
        return cache[-1]


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb
