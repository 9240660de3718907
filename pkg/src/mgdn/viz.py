"""Raster visualizations of predicted kernels and gradient masks."""
from __future__ import annotations

import numpy as np

from .losses import predict_gradient_mask
from .mgdf import KernelVolume
from .model import StageFeatures
from .params import ParamStore
from .tensor import no_grad


def kernel_grid(kv: KernelVolume, stride: int = 8, zoom: int = 4, gap: int = 1) -> np.ndarray:
    """Tile the kernels at every ``stride``-th pixel into one grayscale image.

    Each kernel is upscaled ``zoom`` times (nearest) and the whole grid is
    min-max normalized together, so relative magnitudes stay comparable.
    """
    k = kv.kernel_size
    vol = kv.values.data
    ys = range(stride // 2, vol.shape[0], stride)
    xs = range(stride // 2, vol.shape[1], stride)
    cell = k * zoom + gap
    grid = np.zeros((len(ys) * cell + gap, len(xs) * cell + gap))
    lo, hi = vol.min(), vol.max()
    scale = 1.0 / (hi - lo) if hi > lo else 0.0
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            ker = (kv.kernel_at(y, x) - lo) * scale
            tile = np.kron(ker, np.ones((zoom, zoom)))
            grid[gap + r * cell: gap + r * cell + k * zoom,
                 gap + c * cell: gap + c * cell + k * zoom] = tile
    return grid[..., None]


def stage_masks(records: list[StageFeatures], params: ParamStore) -> list[list[np.ndarray]]:
    """Gradient masks per stage: one for two inputs, (under, over) for three."""
    out = []
    with no_grad():
        for n, rec in enumerate(records):
            s = rec.s
            if len(s) == 2:
                pairs = [(s[0], s[1], "mask0")]
            else:
                pairs = [(s[1], s[0], "mask0"), (s[1], s[2], "mask1")]
            out.append([predict_gradient_mask(a, b, params.sub(f"stage{n}.{m}")).data
                        for a, b, m in pairs])
    return out
