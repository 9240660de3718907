"""Parallel feature fusion: windowed transformer branch + channel-gated conv branch."""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import Initializer, ParamStore
from .tensor import ShapeError, Tensor

MASK_NEG = -1e9


def init_pff(init: Initializer, prefix: str, c: int, arity: int,
             ffn_ratio: int = 2, squeeze: int = 4, trunk_gain: float = 1.0) -> None:
    init.conv(f"{prefix}.merge", 1, arity * c, c, gain=trunk_gain)
    g = f"{prefix}.global"
    init.norm(f"{g}.ln1", c)
    init.linear(f"{g}.qkv", c, 3 * c)
    init.linear(f"{g}.attn_proj", c, c)
    init.norm(f"{g}.ln2", c)
    init.linear(f"{g}.ffn1", c, ffn_ratio * c)
    init.linear(f"{g}.ffn2", ffn_ratio * c, c)
    init.conv(f"{g}.out", 1, c, c, gain=trunk_gain)
    loc = f"{prefix}.local"
    init.conv(f"{loc}.conv1", 3, c, c)
    init.conv(f"{loc}.conv2", 3, c, c)
    init.linear(f"{loc}.ca1", c, max(c // squeeze, 1), bias=False)
    init.linear(f"{loc}.ca2", max(c // squeeze, 1), c, bias=False)


def _padded(n: int, w: int) -> int:
    return -(-n // w) * w


@lru_cache(maxsize=64)
def window_mask(H: int, W: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask, shape (num_windows, 1, w*w, w*w).

    Works in the (rolled) padded frame: keys that are padding, or that came
    from a different region after the cyclic shift, get a large negative bias.
    """
    w = window
    Hp, Wp = _padded(H, w), _padded(W, w)
    label = np.zeros((Hp, Wp), dtype=np.int64)
    if shift:
        cnt = 0
        for hs in (slice(0, Hp - w), slice(Hp - w, Hp - shift), slice(Hp - shift, Hp)):
            for ws in (slice(0, Wp - w), slice(Wp - w, Wp - shift), slice(Wp - shift, Wp)):
                label[hs, ws] = cnt
                cnt += 1
    valid = np.zeros((Hp, Wp), dtype=bool)
    valid[:H, :W] = True
    valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    lw = _partition_np(label, w)
    vw = _partition_np(valid, w)
    same = lw[:, :, None] == lw[:, None, :]
    allowed = same & vw[:, None, :]
    return np.where(allowed, 0.0, MASK_NEG)[:, None]


def _partition_np(a: np.ndarray, w: int) -> np.ndarray:
    Hp, Wp = a.shape
    return a.reshape(Hp // w, w, Wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)


def window_partition(x: Tensor, w: int) -> Tensor:
    Hp, Wp, C = x.shape
    return (x.reshape(Hp // w, w, Wp // w, w, C).transpose(0, 2, 1, 3, 4)
            .reshape((Hp // w) * (Wp // w), w * w, C))


def window_reverse(xw: Tensor, w: int, Hp: int, Wp: int) -> Tensor:
    C = xw.shape[-1]
    return (xw.reshape(Hp // w, Wp // w, w, w, C).transpose(0, 2, 1, 3, 4)
            .reshape(Hp, Wp, C))


def window_attention(x: Tensor, p: ParamStore, window: int, shift: int, heads: int) -> Tensor:
    """Multi-head self-attention restricted to (optionally shifted) w x w windows."""
    H, W, C = x.shape
    if C % heads:
        raise ShapeError(f"{C} channels not divisible by {heads} heads")
    w = window
    Hp, Wp = _padded(H, w), _padded(W, w)
    xp = T.pad2d(x, 0, Hp - H, 0, Wp - W)
    if shift:
        xp = T.roll2d(xp, -shift, -shift)
    xw = window_partition(xp, w)  # nW, n, C
    nW, n = xw.shape[:2]
    d = C // heads
    qkv = xw @ p["qkv.w"] + p["qkv.b"]
    q, k, v = (qkv[:, :, i * C:(i + 1) * C].reshape(nW, n, heads, d).transpose(0, 2, 1, 3)
               for i in range(3))
    logits = (q @ k.transpose(0, 1, 3, 2)) * (d ** -0.5) + window_mask(H, W, w, shift)
    attn = T.softmax(logits, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(nW, n, C)
    out = out @ p["attn_proj.w"] + p["attn_proj.b"]
    out = window_reverse(out, w, Hp, Wp)
    if shift:
        out = T.roll2d(out, shift, shift)
    return out[:H, :W]


def encoder_layer(x: Tensor, p: ParamStore, window: int, shift: int, heads: int) -> Tensor:
    H, W, C = x.shape
    h = x + window_attention(T.layer_norm(x, p["ln1.gamma"], p["ln1.beta"]), p, window, shift, heads)
    t = T.layer_norm(h, p["ln2.gamma"], p["ln2.beta"]).reshape(H * W, C)
    t = T.gelu(t @ p["ffn1.w"] + p["ffn1.b"]) @ p["ffn2.w"] + p["ffn2.b"]
    return h + t.reshape(H, W, C)


def global_branch(x: Tensor, p: ParamStore, window: int, shift: int, heads: int) -> Tensor:
    return T.conv2d(encoder_layer(x, p, window, shift, heads), p["out.w"], p["out.b"])


def channel_gate(y: Tensor, p: ParamStore) -> Tensor:
    s = T.global_avg_pool(y).reshape(1, -1)
    return T.sigmoid(T.gelu(s @ p["ca1.w"]) @ p["ca2.w"]).reshape(-1)


def local_branch(x: Tensor, p: ParamStore) -> Tensor:
    y = T.conv2d(T.gelu(T.conv2d(x, p["conv1.w"], p["conv1.b"])), p["conv2.w"], p["conv2.b"])
    return y * channel_gate(y, p)


def merge_inputs(features: Sequence[Tensor], p: ParamStore) -> Tensor:
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"PFF inputs differ in shape: {sorted(shapes)}")
    cin = p["merge.w"].shape[2]
    total = sum(f.shape[2] for f in features)
    if total != cin:
        raise ShapeError(f"PFF built for {cin} merged channels, got {len(features)} inputs "
                         f"totalling {total}")
    return T.conv2d(T.concat(list(features), axis=-1), p["merge.w"], p["merge.b"])


def pff_forward(features: Sequence[Tensor], p: ParamStore, *, window: int, shift: int,
                heads: int, return_merged: bool = False):
    x = merge_inputs(features, p)
    m = global_branch(x, p.sub("global"), window, shift, heads) + local_branch(x, p.sub("local"))
    return (m, x) if return_merged else m
