"""N-stage network: embed -> (MGDF -> PFF -> recombine) x N -> head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import BOUNDED_TASKS, ModelConfig
from .losses import HistogramConfig, LossTerms, fusion_loss, hdr_loss, init_mask_net
from .mgdf import KernelVolume, MGDFOutput, init_mgdf, mgdf_forward
from .params import Initializer, ParamStore
from .pff import init_pff, pff_forward
from .tensor import ShapeError, Tensor


@dataclass
class StageFeatures:
    f: list[Tensor]  # stage inputs (what the dynamic filters act on)
    c: list[Tensor]  # filtered features
    s: list[Tensor]  # one-channel projections of c
    m: Tensor  # PFF output
    mgdf: list[MGDFOutput]  # one per stream pair
    pairs: list[tuple[int, int]]

    @property
    def g(self) -> list[Tensor]:
        return self._per_stream("g")

    @property
    def kv(self) -> list[KernelVolume]:
        return self._per_stream("kv")

    def _per_stream(self, attr: str) -> list:
        # the reference stream of a 3-input model takes its entry from the first pair
        out: dict[int, object] = {}
        for (a, b), o in zip(self.pairs, self.mgdf):
            out.setdefault(a, getattr(o, attr + "1"))
            out.setdefault(b, getattr(o, attr + "2"))
        return [out[i] for i in sorted(out)]


def stream_pairs(arity: int, reference: int = 1) -> list[tuple[int, int]]:
    if arity == 2:
        return [(0, 1)]
    return [(i, reference) for i in range(arity) if i != reference]


def _sname(base: str, i: int, shared: bool) -> str:
    return base if shared else f"{base}{i}"


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    cfg.validate()
    if cfg.share_streams and len(set(cfg.in_channels)) != 1:
        raise ValueError("share_streams needs equal input channels across streams")
    init = Initializer(np.random.default_rng(seed))
    C, sh = cfg.channels, cfg.share_streams
    streams = [0] if sh else list(range(cfg.arity))
    for i in streams:
        init.conv(_sname("embed", i, sh), 3, cfg.in_channels[i], C, gain=cfg.trunk_gain)
    for n in range(cfg.stages):
        st = f"stage{n}"
        for j, _ in enumerate(stream_pairs(cfg.arity)):
            init_mgdf(init, f"{st}.mgdf{j}", C, cfg.heads, cfg.kernel_size, shared=sh)
        init_pff(init, f"{st}.pff", C, cfg.arity, cfg.ffn_ratio, cfg.squeeze, cfg.trunk_gain)
        for i in streams:
            init.conv(f"{st}.{_sname('sproj', i, sh)}", 1, C, 1)
        for j, _ in enumerate(stream_pairs(cfg.arity)):
            init_mask_net(init, f"{st}.mask{j}", cfg.mask_hidden)
        if n < cfg.stages - 1:
            for i in streams:
                init.conv(f"{st}.{_sname('recomb', i, sh)}", 1, 2 * C, C, gain=cfg.trunk_gain)
    init.conv("head", 3, C, cfg.out_channels)
    return init.store


def _stream_conv(x: Tensor, p: ParamStore, base: str, i: int, shared: bool) -> Tensor:
    n = _sname(base, i, shared)
    return T.conv2d(x, p[f"{n}.w"], p[f"{n}.b"])


def check_inputs(inputs: Sequence, cfg: ModelConfig) -> None:
    if len(inputs) != cfg.arity:
        raise ShapeError(f"model expects {cfg.arity} inputs, got {len(inputs)}")
    spatial = {tuple(np.shape(x)[:2]) for x in inputs}
    if len(spatial) != 1:
        raise ShapeError(f"inputs differ in spatial size: {sorted(spatial)}")
    for i, x in enumerate(inputs):
        if np.ndim(x) != 3 or np.shape(x)[2] != cfg.in_channels[i]:
            raise ShapeError(f"input {i} has shape {np.shape(x)}, expected H x W x {cfg.in_channels[i]}")


def mgdn_forward(inputs: Sequence, params: ParamStore, cfg: ModelConfig
                 ) -> tuple[Tensor, list[StageFeatures]]:
    check_inputs(inputs, cfg)
    sh = cfg.share_streams
    feats = [_stream_conv(T.as_tensor(x), params, "embed", i, sh) for i, x in enumerate(inputs)]
    pairs = stream_pairs(cfg.arity, cfg.reference)
    records = []
    m = None
    for n in range(cfg.stages):
        p = params.sub(f"stage{n}")
        outs = [
            mgdf_forward(feats[a], feats[b], p.sub(f"mgdf{j}"), heads=cfg.heads,
                         k=cfg.kernel_size, cross=not cfg.disable_mgca,
                         dynamic=not cfg.disable_dynamic_filter,
                         normalize=cfg.qk_normalize, kernel_softmax=cfg.kernel_softmax)
            for j, (a, b) in enumerate(pairs)
        ]
        filtered: list[list[Tensor]] = [[] for _ in range(cfg.arity)]
        for (a, b), o in zip(pairs, outs):
            filtered[a].append(o.c1)
            filtered[b].append(o.c2)
        c = [fs[0] if len(fs) == 1 else sum(fs[1:], fs[0]) * (1.0 / len(fs)) for fs in filtered]
        s = [_stream_conv(ci, p, "sproj", i, sh) for i, ci in enumerate(c)]
        m = pff_forward(c, p.sub("pff"), window=cfg.window,
                        shift=cfg.shift if n % 2 else 0, heads=cfg.heads)
        records.append(StageFeatures(feats, c, s, m, outs, pairs))
        if n < cfg.stages - 1:
            feats = [_stream_conv(T.concat([m, f], axis=-1), p, "recomb", i, sh)
                     for i, f in enumerate(feats)]
    out = T.conv2d(m, params["head.w"], params["head.b"])
    if cfg.task in BOUNDED_TASKS:
        out = T.sigmoid(out)
    return out, records


def hist_config(cfg: ModelConfig) -> HistogramConfig:
    return HistogramConfig(bins=cfg.hist_bins, sigma=cfg.hist_sigma)


def compute_loss(io: Tensor, gt, records: Sequence[StageFeatures], params: ParamStore,
                 cfg: ModelConfig, frozen_ranges=None) -> LossTerms:
    lam = cfg.effective_lam
    hc = hist_config(cfg)
    if cfg.arity == 2:
        pairs = [(r.s[0], r.s[1]) for r in records]
        masks = [params.sub(f"stage{n}.mask0") for n in range(len(records))]
        return fusion_loss(io, gt, pairs, lam, masks, hc, frozen_ranges)
    triples = [tuple(r.s) for r in records]
    masks = [(params.sub(f"stage{n}.mask0"), params.sub(f"stage{n}.mask1"))
             for n in range(len(records))]
    return hdr_loss(io, gt, triples, lam, masks, hc, cfg.mu, frozen_ranges)


def parameter_count(cfg: ModelConfig) -> int:
    return init_params(cfg, 0).numel()
