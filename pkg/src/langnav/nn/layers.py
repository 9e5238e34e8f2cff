"""Layers: linear, 2d/3d convolution, embedding, attention, upsampling.

Convolutions are cross-correlations lowered to one BLAS matmul over an
unrolled window matrix; the input gradient scatters the matmul result back
offset-by-offset (windows overlap, so the scatter must accumulate).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, parameter


class Module:
    """Parameter container; subclasses set attributes that are Tensors or
    Modules and get naming/collection for free."""

    def parameters(self):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend((f"{name}.{n}", p) for n, p in val.parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{n}", p)
                                   for n, p in item.parameters())
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator):
        self.weight = parameter((in_features, out_features), rng,
                                scale=1.0 / np.sqrt(in_features))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.weight = parameter((count, dim), rng, scale=0.1)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        w = self.weight
        out = Tensor(w.data[ids], parents=(w,))

        def bwd(g):
            full = np.zeros_like(w.data)
            np.add.at(full, ids, g)
            w._accumulate(full)
        out._backward = bwd if out.requires_grad else None
        return out


def _pair(v):
    return v if isinstance(v, tuple) else (v, v)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng,
                 stride=1, padding=0):
        kh, kw = _pair(kernel)
        self.weight = parameter((out_ch, in_ch, kh, kw), rng)
        self.bias = parameter(np.zeros(out_ch))
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """x: [B, Cin, H, W]; w: [Cout, Cin, kh, kw] -> [B, Cout, Ho, Wo]."""
    stride, padding = _pair(stride), _pair(padding)
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d channels: input {Cin} vs kernel {Cw}")
    (sh, sw), (ph, pw) = stride, padding
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError("kernel larger than padded input")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) \
        else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    col = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, Cin * kh * kw, Ho * Wo)
    y = (w.data.reshape(Cout, -1) @ col).reshape(B, Cout, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y, parents=parents)

    def bwd(g):
        gf = g.reshape(B, Cout, Ho * Wo)
        if x.requires_grad:
            gcol = (w.data.reshape(Cout, -1).T @ gf) \
                .reshape(B, Cin, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + sh * Ho:sh, dj:dj + sw * Wo:sw] += \
                        gcol[:, :, di, dj]
            x._accumulate(gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw)
                          else gxp)
        if w.requires_grad:
            gw = np.tensordot(gf, col, axes=([0, 2], [0, 2]))
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
    out._backward = bwd if out.requires_grad else None
    return out


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng,
                 stride=(1, 1, 1), padding=(0, 0, 0)):
        kt, kh, kw = kernel
        self.weight = parameter((out_ch, in_ch, kt, kh, kw), rng)
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """x: [B, Cin, T, H, W]; w: [Cout, Cin, kt, kh, kw].

    The grounder instantiates kt = T+1 with no temporal padding, collapsing
    the temporal extent to exactly 1.
    """
    B, Cin, T, H, W = x.shape
    Cout, Cw, kt, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"conv3d channels: input {Cin} vs kernel {Cw}")
    st, sh, sw = stride
    pt, ph, pw = padding
    Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
    if Tp < kt or Hp < kh or Wp < kw:
        raise ShapeError("kernel larger than padded input")
    To, Ho, Wo = (Tp - kt) // st + 1, (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) \
        if (pt or ph or pw) else x.data
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4)) \
        [:, :, ::st, ::sh, ::sw]
    col = win.transpose(0, 1, 5, 6, 7, 2, 3, 4) \
        .reshape(B, Cin * kt * kh * kw, To * Ho * Wo)
    y = (w.data.reshape(Cout, -1) @ col).reshape(B, Cout, To, Ho, Wo)
    if b is not None:
        y = y + b.data[None, :, None, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents=parents)

    def bwd(g):
        gf = g.reshape(B, Cout, To * Ho * Wo)
        if x.requires_grad:
            gcol = (w.data.reshape(Cout, -1).T @ gf) \
                .reshape(B, Cin, kt, kh, kw, To, Ho, Wo)
            gxp = np.zeros_like(xp)
            for dt in range(kt):
                for di in range(kh):
                    for dj in range(kw):
                        gxp[:, :, dt:dt + st * To:st, di:di + sh * Ho:sh,
                            dj:dj + sw * Wo:sw] += gcol[:, :, dt, di, dj]
            x._accumulate(gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
                          if (pt or ph or pw) else gxp)
        if w.requires_grad:
            gw = np.tensordot(gf, col, axes=([0, 2], [0, 2]))
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
    out._backward = bwd if out.requires_grad else None
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of [B, C, H, W]; exact gradients."""
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor(y, parents=(x,))

    def bwd(g):
        x._accumulate(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))
    out._backward = bwd if out.requires_grad else None
    return out


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with learned Q/K/V/output maps.

    Returns both the value-projected output and the per-head weight matrices;
    the fusion block consumes the head-averaged weights.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if channels % heads != 0:
            raise ShapeError(f"channels {channels} not divisible by "
                             f"{heads} heads")
        self.heads = heads
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.wo = Linear(channels, channels, rng)

    def __call__(self, x: Tensor):
        """x: [L, C] or [B, L, C] -> (output same shape,
        weights [heads, L, L] or [B, heads, L, L])."""
        unbatched = x.ndim == 2
        if unbatched:
            x = x.reshape(1, *x.shape)
        B, L, C = x.shape
        h, dh = self.heads, C // self.heads

        def split(t):
            return t.reshape(B, L, h, dh).transpose((0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        weights = scores.softmax(axis=-1)              # [B, h, L, L]
        ctx = (weights @ v).transpose((0, 2, 1, 3)).reshape(B, L, C)
        out = self.wo(ctx)
        if unbatched:
            return out.reshape(L, C), weights.reshape(h, L, L)
        return out, weights
