"""Adam training loop over in-memory fusion samples."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig
from .data import FusionSample
from .model import compute_loss, init_params, mgdn_forward
from .params import ParamStore

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, step: int, report: dict):
        super().__init__(f"non-finite {term} at step {step}: {report}")
        self.term = term
        self.step = step
        self.report = report


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    crop: int = 0  # train on random crop x crop patches; 0 = full samples
    decay_steps: int = 0  # cosine decay of lr to 0 over this many steps; 0 = constant


def learning_rate(o: OptimConfig, step: int) -> float:
    """Rate used for update number ``step`` (1-based)."""
    if o.decay_steps <= 0:
        return o.lr
    frac = min(step, o.decay_steps) / o.decay_steps
    return o.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    config: ModelConfig
    optim: OptimConfig
    params: ParamStore
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    seed: int = 0

    @classmethod
    def fresh(cls, config: ModelConfig, optim: OptimConfig | None = None, seed: int = 0):
        params = init_params(config, seed)
        zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(config, optim or OptimConfig(), params, zeros,
                   {k: z.copy() for k, z in zeros.items()}, 0,
                   np.random.default_rng([seed, 1]), seed)


def adam_update(state: TrainState) -> None:
    o = state.optim
    t = state.step + 1
    bc1 = 1.0 - o.beta1 ** t
    bc2 = 1.0 - o.beta2 ** t
    lr = learning_rate(o, t)
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= o.beta1
        m += (1.0 - o.beta1) * g
        v *= o.beta2
        v += (1.0 - o.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + o.eps)
    state.step = t


def _crop(sample: FusionSample, size: int, rng: np.random.Generator):
    H, W = sample.gt.shape[:2]
    if size <= 0 or (size >= H and size >= W):
        return sample.inputs, sample.gt
    y = int(rng.integers(0, H - size + 1))
    x = int(rng.integers(0, W - size + 1))
    sl = (slice(y, y + size), slice(x, x + size))
    return [inp[sl] for inp in sample.inputs], sample.gt[sl]


def train_step(state: TrainState, sample: FusionSample) -> dict[str, float]:
    """forward -> loss -> backward -> Adam. Returns the loss report."""
    inputs, gt = _crop(sample, state.optim.crop, state.rng)
    state.params.zero_grad()
    io, records = mgdn_forward(inputs, state.params, state.config)
    terms = compute_loss(io, gt, records, state.params, state.config)
    report = terms.report()
    for name, val in report.items():
        if not np.isfinite(val):
            raise NonFiniteLoss(name, state.step, report)
    terms.total.backward()
    adam_update(state)
    report["step"] = state.step
    return report


def train(state: TrainState, samples: Sequence[FusionSample], steps: int,
          on_step: Callable[[TrainState, dict], None] | None = None) -> list[dict]:
    """Run ``steps`` updates, drawing one sample per step from the state's RNG."""
    history = []
    for _ in range(steps):
        idx = int(state.rng.integers(len(samples)))
        report = train_step(state, samples[idx])
        history.append(report)
        if on_step is not None:
            on_step(state, report)
    return history
