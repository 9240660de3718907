"""Masked normalized-mutual-information loss and the total training losses.

Shared structure between two one-channel feature maps is located with a
learned sigmoid mask over their Sobel responses; what remains after masking
is histogrammed with Gaussian soft bins so the NMI redundancy term is
differentiable.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .params import Initializer, ParamStore
from .tensor import ShapeError, Tensor

ENTROPY_FLOOR = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
_SOBEL_W = np.stack([SOBEL_X, SOBEL_Y], axis=-1)[:, :, None, :]  # 3 x 3 x 1 x 2


class DegenerateHistogram(ValueError):
    pass


@dataclass
class HistogramConfig:
    bins: int = 32
    sigma: float = 1.5  # in units of bin width
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.bins < 2 or self.sigma <= 0:
            raise ValueError(f"need bins >= 2 and sigma > 0, got {self.bins}, {self.sigma}")


def init_mask_net(init: Initializer, prefix: str, hidden: int = 8) -> None:
    init.conv(f"{prefix}.c1", 3, 4, hidden)
    init.conv(f"{prefix}.c2", 3, hidden, 1)


def sobel_gradients(s: Tensor) -> tuple[Tensor, Tensor]:
    if s.ndim != 3 or s.shape[2] != 1:
        raise ShapeError(f"sobel_gradients needs an H x W x 1 map, got {s.shape}")
    g = T.conv2d(s, Tensor(_SOBEL_W))
    return g[:, :, 0:1], g[:, :, 1:2]


def predict_gradient_mask(s1: Tensor, s2: Tensor, p: ParamStore) -> Tensor:
    if s1.shape != s2.shape:
        raise ShapeError(f"mask inputs differ in shape: {s1.shape} vs {s2.shape}")
    gx1, gy1 = sobel_gradients(s1)
    gx2, gy2 = sobel_gradients(s2)
    x = T.concat([gx1, gy1, gx2, gy2], axis=-1)
    h = T.gelu(T.conv2d(x, p["c1.w"], p["c1.b"]))
    return T.sigmoid(T.conv2d(h, p["c2.w"], p["c2.b"]))


def mask_uncommon(s: Tensor, gm: Tensor) -> Tensor:
    if s.shape != gm.shape:
        raise ShapeError(f"feature {s.shape} and mask {gm.shape} differ")
    return s * (1.0 - gm)


def observed_range(t: Tensor) -> tuple[float, float]:
    return float(t.data.min()), float(t.data.max())


def _is_degenerate(lo: float, hi: float) -> bool:
    return not hi - lo > 1e-12 * max(1.0, abs(lo), abs(hi))


def soft_bin_weights(t: Tensor, cfg: HistogramConfig, value_range: tuple[float, float]) -> Tensor:
    """n x B Gaussian memberships, each row normalised to sum to 1.

    Bin centres and width come from ``value_range``, which is a constant with
    respect to differentiation.
    """
    lo, hi = value_range
    if _is_degenerate(lo, hi):
        raise DegenerateHistogram(f"degenerate value range [{lo}, {hi}]")
    width = (hi - lo) / cfg.bins
    centres = lo + (np.arange(cfg.bins) + 0.5) * width
    z = (t.reshape(-1, 1) - centres.reshape(1, -1)) * (1.0 / (cfg.sigma * width))
    return T.softmax(z * z * -0.5, axis=1)


def soft_joint_histogram(t1: Tensor, t2: Tensor, cfg: HistogramConfig,
                         ranges: Sequence[tuple[float, float]] | None = None):
    """Returns (p1, p2, p12) with p12 = mean over pixels of w(t1) w(t2)^T."""
    if t1.data.size != t2.data.size or t1.data.size == 0:
        raise ShapeError(f"histogram inputs need equal nonzero sizes: {t1.shape}, {t2.shape}")
    if ranges is None:
        ranges = [cfg.value_range or observed_range(t) for t in (t1, t2)]
    w1 = soft_bin_weights(t1, cfg, ranges[0])
    w2 = soft_bin_weights(t2, cfg, ranges[1])
    n = w1.shape[0]
    p12 = (w1.transpose(1, 0) @ w2) * (1.0 / n)
    return T.tsum(p12, axis=1), T.tsum(p12, axis=0), p12


def entropy(p) -> Tensor:
    """-sum p log p (nats); entries below the floor contribute p log(floor)."""
    p = T.as_tensor(p)
    return -T.tsum(p * T.log(T.maximum(p, ENTROPY_FLOOR)))


def cross_entropy(p, q) -> Tensor:
    p, q = T.as_tensor(p), T.as_tensor(q)
    return -T.tsum(p * T.log(T.maximum(q, ENTROPY_FLOOR)))


def kl_divergence(p, q) -> Tensor:
    p, q = T.as_tensor(p), T.as_tensor(q)
    return T.tsum(p * (T.log(T.maximum(p, ENTROPY_FLOOR)) - T.log(T.maximum(q, ENTROPY_FLOOR))))


def marginal_entropy_via_kl(p, q) -> Tensor:
    """Entropy of ``p`` written as cross-entropy against ``q`` minus KL(p || q)."""
    return cross_entropy(p, q) - kl_divergence(p, q)


def nmi_from_joint(p12: Tensor) -> Tensor:
    """2 (1 - H(X,Y) / (H(X) + H(Y))) from a joint distribution."""
    h1 = entropy(T.tsum(p12, axis=1))
    h2 = entropy(T.tsum(p12, axis=0))
    return 2.0 * (1.0 - entropy(p12) / (h1 + h2))


class MaskedMI(NamedTuple):
    loss: Tensor
    gm: Tensor
    t1: Tensor
    t2: Tensor
    ranges: tuple | None


def masked_mi(s1: Tensor, s2: Tensor, p: ParamStore, cfg: HistogramConfig,
              ranges: Sequence[tuple[float, float]] | None = None) -> MaskedMI:
    gm = predict_gradient_mask(s1, s2, p)
    t1, t2 = mask_uncommon(s1, gm), mask_uncommon(s2, gm)
    if ranges is None:
        ranges = tuple(cfg.value_range or observed_range(t) for t in (t1, t2))
    if any(_is_degenerate(lo, hi) for lo, hi in ranges):
        warnings.warn("masked MI: degenerate value range, contributing 0", RuntimeWarning)
        return MaskedMI(Tensor(0.0), gm, t1, t2, tuple(ranges))
    _, _, p12 = soft_joint_histogram(t1, t2, cfg, ranges)
    loss = T.clip(nmi_from_joint(p12), 0.0, 1.0)
    return MaskedMI(loss, gm, t1, t2, tuple(ranges))


def masked_mi_loss(s1: Tensor, s2: Tensor, p: ParamStore, cfg: HistogramConfig,
                   ranges=None) -> Tensor:
    return masked_mi(s1, s2, p, cfg, ranges).loss


def l1_loss(a: Tensor, b) -> Tensor:
    b = T.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"L1 operands differ in shape: {a.shape} vs {b.shape}")
    return T.mean(T.absolute(a - b))


def mu_law(x: Tensor, mu: float = 5000.0) -> Tensor:
    return T.log(1.0 + mu * x) * (1.0 / np.log1p(mu))


@dataclass
class LossTerms:
    total: Tensor
    l1: Tensor
    mi: Tensor
    # per pair type: "mi" for two inputs; "mi_under" and "mi_over" for HDR
    parts: dict[str, float] = field(default_factory=dict)
    ranges: list = field(default_factory=list)

    def report(self) -> dict[str, float]:
        out = {"total": float(self.total.data), "l1": float(self.l1.data),
               "mi": float(self.mi.data)}
        out.update(self.parts)
        return out


def _mi_sum(pairs, mask_params, cfg, lam, frozen):
    """Sum of masked MI over (s_a, s_b) pairs; returns (sum, ranges used)."""
    total = Tensor(0.0)
    used = []
    for i, ((sa, sb), mp) in enumerate(zip(pairs, mask_params)):
        r = frozen[i] if frozen is not None else None
        if lam == 0.0:
            with T.no_grad():
                res = masked_mi(sa, sb, mp, cfg, r)
        else:
            res = masked_mi(sa, sb, mp, cfg, r)
        total = total + res.loss
        used.append(res.ranges)
    return total, used


def fusion_loss(io: Tensor, gt, stage_s_pairs: Sequence[tuple[Tensor, Tensor]], lam: float,
                mask_params: Sequence[ParamStore], cfg: HistogramConfig,
                frozen_ranges=None) -> LossTerms:
    """L1 + lam * sum over stages of MaskMI(S1, S2)."""
    if len(stage_s_pairs) != len(mask_params):
        raise ShapeError("one mask network per stage pair is required")
    l1 = l1_loss(io, gt)
    mi, used = _mi_sum(stage_s_pairs, mask_params, cfg, lam, frozen_ranges)
    total = l1 + lam * mi if lam else l1
    return LossTerms(total, l1, mi, {"mi": float(mi.data)}, used)


def hdr_loss(io: Tensor, gt, stage_s_triples: Sequence[Sequence[Tensor]], lam: float,
             mask_params: Sequence[tuple[ParamStore, ParamStore]], cfg: HistogramConfig,
             mu: float = 5000.0, frozen_ranges=None) -> LossTerms:
    """Tonemapped L1 + lam * sum_n [MaskMI(S2, S1) + MaskMI(S2, S3)]."""
    if any(len(t) != 3 for t in stage_s_triples):
        raise ValueError("hdr_loss needs three streams per stage")
    if len(stage_s_triples) != len(mask_params):
        raise ShapeError("one mask-network pair per stage is required")
    l1 = l1_loss(mu_law(io, mu), mu_law(T.as_tensor(gt), mu))
    under = [(s[1], s[0]) for s in stage_s_triples]
    over = [(s[1], s[2]) for s in stage_s_triples]
    fu = fo = None
    if frozen_ranges is not None:
        n = len(under)
        fu, fo = frozen_ranges[:n], frozen_ranges[n:]
    mi_u, used_u = _mi_sum(under, [m[0] for m in mask_params], cfg, lam, fu)
    mi_o, used_o = _mi_sum(over, [m[1] for m in mask_params], cfg, lam, fo)
    mi = mi_u + mi_o
    total = l1 + lam * mi if lam else l1
    parts = {"mi_under": float(mi_u.data), "mi_over": float(mi_o.data)}
    return LossTerms(total, l1, mi, parts, used_u + used_o)
