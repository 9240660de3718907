"""Finite-difference checks over every differentiable block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .gradcheck import finite_diff_check
from .losses import HistogramConfig, init_mask_net, masked_mi
from .mgdf import KernelVolume, apply_dynamic_filter, init_mgdf, mgca_forward, mgdf_forward
from .model import compute_loss, init_params, mgdn_forward
from .params import Initializer, ParamStore
from .pff import init_pff, pff_forward
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
BLOCK_TOL = 1e-4
MI_TOL = 1e-3
# Whole-network step: smaller steps lose near-zero gradients to round-off,
# larger ones pick up curvature from the soft histogram.
FULL_MODEL_EPS = 1e-5


@dataclass
class CheckResult:
    block: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def randomize(store: ParamStore, rng, scale=0.3) -> ParamStore:
    """Overwrite every parameter with noise so no path is trivially zero."""
    for t in store.values():
        t.data[...] = rng.normal(scale=scale, size=t.shape)
    return store


def projector(rng, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output coordinate gets a distinct weight."""
    r = rng.normal(size=shape)
    return lambda out: T.tsum(out * r)


def _primitive_checks(rng, eps):
    out = []
    x = leaf(rng, 6, 6, 2)
    w = leaf(rng, 3, 3, 2, 3)
    b = leaf(rng, 3)
    proj = projector(rng, (6, 6, 3))
    out.append(("conv2d", finite_diff_check(lambda: proj(T.conv2d(x, w, b)), [x, w, b], eps),
                PRIMITIVE_TOL))
    x = leaf(rng, 6, 6, 3)
    w = leaf(rng, 3, 3, 3)
    proj = projector(rng, (6, 6, 3))
    out.append(("depthwise_conv2d",
                finite_diff_check(lambda: proj(T.depthwise_conv2d(x, w)), [x, w], eps),
                PRIMITIVE_TOL))
    a, bm = leaf(rng, 3, 4), leaf(rng, 4, 2)
    proj = projector(rng, (3, 2))
    out.append(("matmul", finite_diff_check(lambda: proj(a @ bm), [a, bm], eps), PRIMITIVE_TOL))
    s = leaf(rng, 4, 5)
    proj = projector(rng, (4, 5))
    out.append(("softmax", finite_diff_check(lambda: proj(T.softmax(s, axis=0)), [s], eps),
                PRIMITIVE_TOL))
    x, g, bb = leaf(rng, 3, 3, 4), leaf(rng, 4), leaf(rng, 4)
    proj = projector(rng, (3, 3, 4))
    out.append(("layer_norm",
                finite_diff_check(lambda: proj(T.layer_norm(x, g, bb)), [x, g, bb], eps),
                PRIMITIVE_TOL))
    x, kv = leaf(rng, 5, 5, 2), leaf(rng, 5, 5, 9)
    proj = projector(rng, (5, 5, 2))
    out.append(("dynamic_filter",
                finite_diff_check(lambda: proj(T.dynamic_filter(x, kv, 3)), [x, kv], eps),
                PRIMITIVE_TOL))
    x = leaf(rng, 7)
    proj = projector(rng, (7,))
    out.append(("sigmoid/gelu",
                finite_diff_check(lambda: proj(T.sigmoid(x) + T.gelu(x)), [x], eps),
                PRIMITIVE_TOL))
    return [CheckResult(*r) for r in out]


def block_checks(seed: int = 0, size: int = 8, channels: int = 4, eps: float = 1e-6
                 ) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = _primitive_checks(rng, eps)
    H = W = size
    C = channels
    heads = 2

    init = Initializer(rng)
    init_mgdf(init, "mgdf", C, heads, 3)
    p = randomize(init.store, rng).sub("mgdf")
    f1, f2 = leaf(rng, H, W, C), leaf(rng, H, W, C)
    proj = projector(rng, (H, W, C))

    def mgca_loss():
        g1, g2 = mgca_forward(f1, f2, p, heads)
        return proj(g1) + 0.5 * proj(g2)

    params = {"F1": f1, "F2": f2, **{k: v for k, v in p.items() if "pred" not in k}}
    results.append(CheckResult("mgca", finite_diff_check(mgca_loss, params, eps), BLOCK_TOL))

    kv = leaf(rng, H, W, 9, scale=0.5)
    results.append(CheckResult(
        "dynamic_filter_path",
        finite_diff_check(lambda: proj(apply_dynamic_filter(f1, KernelVolume(kv, 3))),
                          {"F": f1, "KV": kv}, eps),
        BLOCK_TOL))

    def mgdf_loss():
        o = mgdf_forward(f1, f2, p, heads=heads, k=3)
        return proj(o.c1) + 0.5 * proj(o.c2)

    results.append(CheckResult("mgdf", finite_diff_check(mgdf_loss, {"F1": f1, "F2": f2, **p}, eps),
                               BLOCK_TOL))

    init = Initializer(rng)
    init_pff(init, "pff", C, 2)
    pp = randomize(init.store, rng).sub("pff")
    c1, c2 = leaf(rng, H, W, C), leaf(rng, H, W, C)
    for shift in (0, 2):
        results.append(CheckResult(
            f"pff(shift={shift})",
            finite_diff_check(lambda: proj(pff_forward([c1, c2], pp, window=4, shift=shift,
                                                        heads=heads)),
                              {"C1": c1, "C2": c2, **pp}, eps),
            BLOCK_TOL))

    init = Initializer(rng)
    init_mask_net(init, "mask")
    mp = randomize(init.store, rng, scale=0.5).sub("mask")
    s1, s2 = leaf(rng, H, W, 1), leaf(rng, H, W, 1)
    hc = HistogramConfig(bins=8)
    ranges = masked_mi(s1, s2, mp, hc).ranges
    results.append(CheckResult(
        "masked_mi_loss",
        finite_diff_check(lambda: masked_mi(s1, s2, mp, hc, ranges).loss,
                          {"S1": s1, "S2": s2, **mp}, eps),
        MI_TOL))

    results.append(full_model_check(seed, size, channels))
    return results


def full_model_check(seed: int = 0, size: int = 8, channels: int = 4, eps: float = FULL_MODEL_EPS,
                     arity: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed + 1)
    task = "mff" if arity == 2 else "hdr"
    cfg = ModelConfig.for_task(task, stages=1, channels=channels, heads=2, window=4)
    params = randomize(init_params(cfg, seed), rng, scale=0.3)
    inputs = [rng.random((size, size, c)) for c in cfg.in_channels]
    gt = rng.random((size, size, cfg.out_channels))
    io, rec = mgdn_forward(inputs, params, cfg)
    ranges = compute_loss(io, gt, rec, params, cfg).ranges

    def loss():
        io, rec = mgdn_forward(inputs, params, cfg)
        return compute_loss(io, gt, rec, params, cfg, frozen_ranges=ranges).total

    name = f"full_model(N=1,C={channels},{size}x{size},arity={arity})"
    return CheckResult(name, finite_diff_check(loss, params, eps, max_coords=3), BLOCK_TOL)


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.block) for r in results)
    lines = [f"{'block'.ljust(width)}  max_rel_err  tolerance  status"]
    for r in results:
        lines.append(f"{r.block.ljust(width)}  {r.error:11.3e}  {r.tolerance:9.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
