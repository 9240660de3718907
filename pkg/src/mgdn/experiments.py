"""Toy-scale training experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ModelConfig
from .data import FusionSample, generate
from .metrics import nmi_metric, psnr
from .model import mgdn_forward
from .runconfig import ABLATIONS
from .tensor import no_grad
from .train import OptimConfig, TrainState, train

TRAIN_SEED = 0  # dataset seeds; held-out samples come from a different stream
HELDOUT_SEED = 1


@dataclass
class ToySetup:
    task: str = "mff"
    train_count: int = 200
    heldout_count: int = 20
    size: int = 64
    steps: int = 2000
    seed: int = 0
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3, crop=32))
    cosine: bool = True  # decay lr to 0 over exactly ``steps`` updates
    data_kw: dict = field(default_factory=dict)


def make_split(setup: ToySetup) -> tuple[list[FusionSample], list[FusionSample]]:
    def gen(seed, n):
        return [generate(setup.task, seed, i, size=setup.size, **setup.data_kw) for i in range(n)]
    return gen(TRAIN_SEED, setup.train_count), gen(HELDOUT_SEED, setup.heldout_count)


@dataclass
class ToyRun:
    setup: ToySetup
    config: ModelConfig
    state: TrainState
    history: list[dict]
    seconds: float


def train_toy(setup: ToySetup, samples: list[FusionSample], config: ModelConfig | None = None,
              progress: Callable[[TrainState, dict], None] | None = None) -> ToyRun:
    cfg = config or ModelConfig.for_task(setup.task)
    optim = dataclasses.replace(setup.optim, decay_steps=setup.steps if setup.cosine else 0)
    state = TrainState.fresh(cfg, optim, seed=setup.seed)
    t0 = time.perf_counter()
    history = train(state, samples, setup.steps, on_step=progress)
    return ToyRun(setup, cfg, state, history, time.perf_counter() - t0)


def ablated(config: ModelConfig, name: str) -> ModelConfig:
    return dataclasses.replace(config, **{ABLATIONS[name]: True})


@dataclass
class HeldoutScores:
    fused: list[float]
    best_input: list[float]
    nmi_filtered: list[float]  # nmi(C_1^1, C_2^1)
    nmi_embedded: list[float]  # nmi(F_1^0, F_2^0)

    @property
    def mean_fused(self) -> float:
        return float(np.mean(self.fused))

    @property
    def mean_best_input(self) -> float:
        return float(np.mean(self.best_input))

    @property
    def nmi_reduced_fraction(self) -> float:
        return float(np.mean(np.array(self.nmi_filtered) < np.array(self.nmi_embedded)))


def score_heldout(state: TrainState, samples: list[FusionSample]) -> HeldoutScores:
    out = HeldoutScores([], [], [], [])
    with no_grad():
        for s in samples:
            io, recs = mgdn_forward(s.inputs, state.params, state.config)
            out.fused.append(psnr(io.data, s.gt))
            out.best_input.append(max(psnr(x, s.gt) for x in s.inputs))
            first = recs[0]
            out.nmi_filtered.append(nmi_metric(first.c[0].data, first.c[1].data))
            out.nmi_embedded.append(nmi_metric(first.f[0].data, first.f[1].data))
    return out


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[i : i + window]."""
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        raise ValueError(f"need at least {window} values, got {len(v)}")
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def decreased(values, window: int = 50) -> tuple[float, float]:
    """First and last smoothed value of a logged series."""
    s = smoothed(values, window)
    return float(s[0]), float(s[-1])
