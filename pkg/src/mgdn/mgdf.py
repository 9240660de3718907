"""Mutual-guided dynamic filter.

Two streams each project layer-normed features to Q/K/V (1x1 then 3x3
depthwise). Queries are swapped between streams and a per-head channel x
channel attention map mixes the values; the result plus the input is the
guidance feature G. A small conv stack turns G into one k x k kernel per
pixel, and that kernel filters the stream's own input depthwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .params import Initializer, ParamStore
from .tensor import ShapeError, Tensor


@dataclass
class KernelVolume:
    values: Tensor  # H x W x k*k
    kernel_size: int

    def __post_init__(self):
        k = self.kernel_size
        if k % 2 == 0 or self.values.ndim != 3 or self.values.shape[2] != k * k:
            raise ShapeError(f"kernel volume {self.values.shape} inconsistent with k={k}")

    def kernel_at(self, y: int, x: int) -> np.ndarray:
        k = self.kernel_size
        return self.values.data[y, x].reshape(k, k)


class MGDFOutput(NamedTuple):
    c1: Tensor
    c2: Tensor
    g1: Tensor
    g2: Tensor
    kv1: KernelVolume
    kv2: KernelVolume


def stream_scope(p: ParamStore, i: int) -> ParamStore:
    """Per-stream parameters; shared-weight stores only hold stream 0."""
    return p.sub(f"s{i}") if p.has(f"s{i}") else p.sub("s")


def init_mgdf(init: Initializer, prefix: str, c: int, heads: int, k: int,
              shared: bool = False) -> None:
    streams = ["s"] if shared else ["s0", "s1"]
    for s in streams:
        n = f"{prefix}.{s}"
        init.norm(f"{n}.ln", c)
        init.conv(f"{n}.qkv", 1, c, 3 * c, bias=False)
        init.dwconv(f"{n}.qkv_dw", 3, 3 * c)
        init.const(f"{n}.log_alpha", np.zeros(heads))
        init.conv(f"{n}.proj", 1, c, c, bias=False)
        init.conv(f"{n}.pred1", 3, c, c)
        # final predictor layer: zero weights + delta bias = identity filtering at step 0
        init.const(f"{n}.pred2.w", np.zeros((3, 3, c, k * k)))
        init.const(f"{n}.pred2.b", delta_kernel(k))


def delta_kernel(k: int) -> np.ndarray:
    d = np.zeros(k * k)
    d[(k * k) // 2] = 1.0
    return d


def l2_normalize(x: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt(T.tsum(x * x, axis=axis, keepdims=True) + eps)


def qkv_tokens(f: Tensor, p: ParamStore) -> tuple[Tensor, Tensor, Tensor]:
    """LN -> 1x1 -> 3x3 depthwise, reshaped to three HW x C token matrices."""
    H, W, C = f.shape
    x = T.layer_norm(f, p["ln.gamma"], p["ln.beta"])
    x = T.conv2d(x, p["qkv.w"])
    x = T.depthwise_conv2d(x, p["qkv_dw.w"])
    tok = x.reshape(H * W, 3 * C)
    return tok[:, :C], tok[:, C:2 * C], tok[:, 2 * C:]


def transposed_attention(q: Tensor, k: Tensor, v: Tensor, log_alpha: Tensor, heads: int,
                         normalize: bool = True) -> tuple[Tensor, Tensor]:
    """V . softmax(K^T Q / alpha) per head.

    q, k, v are HW x C. The map for each head is d x d (d = C / heads) with
    rows indexed by key channel and columns by query channel; the softmax
    runs over key channels so every output channel's mixing weights sum to 1.
    Returns the HW x C output and the h x d x d attention maps.
    """
    n, C = q.shape
    if k.shape != (n, C) or v.shape != (n, C):
        raise ShapeError(f"attention token shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if C % heads:
        raise ShapeError(f"{C} channels not divisible by {heads} heads")
    d = C // heads
    qh = q.reshape(n, heads, d).transpose(1, 0, 2)  # h, n, d
    kh = k.reshape(n, heads, d).transpose(1, 2, 0)  # h, d, n
    vh = v.reshape(n, heads, d).transpose(1, 0, 2)  # h, n, d
    if normalize:
        qh = l2_normalize(qh, axis=1)
        kh = l2_normalize(kh, axis=2)
    alpha = T.exp(log_alpha).reshape(heads, 1, 1)
    attn = T.softmax((kh @ qh) / alpha, axis=-2)
    out = (vh @ attn).transpose(1, 0, 2).reshape(n, C)
    return out, attn


def mgca_forward(f1: Tensor, f2: Tensor, p: ParamStore, heads: int,
                 cross: bool = True, normalize: bool = True) -> tuple[Tensor, Tensor]:
    """G1 = proj(Attn(Q2, K1, V1)) + F1 and symmetrically for G2.

    ``cross=False`` falls back to plain transposed self-attention (each stream
    uses its own queries).
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"MGCA inputs differ in shape: {f1.shape} vs {f2.shape}")
    H, W, C = f1.shape
    p1, p2 = stream_scope(p, 0), stream_scope(p, 1)
    q1, k1, v1 = qkv_tokens(f1, p1)
    q2, k2, v2 = qkv_tokens(f2, p2)
    guide1, guide2 = (q2, q1) if cross else (q1, q2)
    a1, _ = transposed_attention(guide1, k1, v1, p1["log_alpha"], heads, normalize)
    a2, _ = transposed_attention(guide2, k2, v2, p2["log_alpha"], heads, normalize)
    g1 = T.conv2d(a1.reshape(H, W, C), p1["proj.w"]) + f1
    g2 = T.conv2d(a2.reshape(H, W, C), p2["proj.w"]) + f2
    return g1, g2


def predict_kernel_volume(g: Tensor, p: ParamStore, k: int, softmax: bool = False) -> KernelVolume:
    h = T.gelu(T.conv2d(g, p["pred1.w"], p["pred1.b"]))
    kv = T.conv2d(h, p["pred2.w"], p["pred2.b"])
    if kv.shape[2] != k * k:
        raise ShapeError(f"predictor emits {kv.shape[2]} taps, expected {k * k}")
    if softmax:
        kv = T.softmax(kv, axis=-1)
    return KernelVolume(kv, k)


def spatially_shared(kv: KernelVolume) -> KernelVolume:
    """Replace every pixel's kernel with the spatial mean kernel."""
    v = kv.values
    return KernelVolume(T.broadcast_to(T.mean(v, axis=(0, 1), keepdims=True), v.shape),
                        kv.kernel_size)


def apply_dynamic_filter(f: Tensor, kv: KernelVolume) -> Tensor:
    return T.dynamic_filter(f, kv.values, kv.kernel_size)


def mgdf_forward(f1: Tensor, f2: Tensor, p: ParamStore, *, heads: int, k: int,
                 cross: bool = True, dynamic: bool = True, normalize: bool = True,
                 kernel_softmax: bool = False) -> MGDFOutput:
    g1, g2 = mgca_forward(f1, f2, p, heads, cross=cross, normalize=normalize)
    kv1 = predict_kernel_volume(g1, stream_scope(p, 0), k, kernel_softmax)
    kv2 = predict_kernel_volume(g2, stream_scope(p, 1), k, kernel_softmax)
    if not dynamic:
        kv1, kv2 = spatially_shared(kv1), spatially_shared(kv2)
    return MGDFOutput(apply_dynamic_filter(f1, kv1), apply_dynamic_filter(f2, kv2),
                      g1, g2, kv1, kv2)
