"""Desk-scale training loop: Adam with per-epoch exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .encoders import ModelConfig, Params
from .errors import InvalidInputError
from .geom import RigidTransform
from .losses import LossConfig
from .pipeline import Frame, PipelineConfig, pair_loss


@dataclass
class Adam:
    params: Params
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self) -> None:
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float = 1e-4
    # multiplicative decay applied after every epoch (one pass over the pairs)
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInputError("steps must be nonnegative")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr must be positive and lr_decay in (0, 1]")


@dataclass
class StepRecord:
    step: int
    pair: int
    total: float
    coarse: float
    fine: float
    lr: float

    def line(self) -> str:
        return (f"step={self.step} pair={self.pair} total={self.total!r} coarse={self.coarse!r} "
                f"fine={self.fine!r} lr={self.lr!r}")


def train(params: Params, frames: Sequence[tuple[Frame, Frame, RigidTransform]], mcfg: ModelConfig,
          pcfg: PipelineConfig, lcfg: LossConfig, tcfg: TrainConfig,
          callback: Optional[Callable[[StepRecord], None]] = None) -> list[StepRecord]:
    """Optimise ``params`` in place, one pair per step, and return the loss log.

    Pairs are visited in a fresh seeded permutation every epoch. All
    randomness (pair order, anchors, training groups) comes from one
    generator seeded with ``tcfg.seed``.
    """
    if not frames and tcfg.steps:
        raise InvalidInputError("no training pairs")
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    log: list[StepRecord] = []
    order: list[int] = []
    epoch = 0
    for step in range(1, tcfg.steps + 1):
        if not order:
            if step > 1:
                epoch += 1
                opt.lr = tcfg.lr * tcfg.lr_decay ** epoch
            order = rng.permutation(len(frames)).tolist()
        k = order.pop(0)
        fx, fy, T = frames[k]
        dc.zero_grad(params.values())
        out = pair_loss(fx, fy, T, params, mcfg, pcfg, lcfg, rng)
        dc.backward(out.total)
        opt.step()
        rec = StepRecord(step, k, out.total.item(), out.coarse.item(), out.fine.item(), opt.lr)
        log.append(rec)
        if callback is not None:
            callback(rec)
    return log


def evaluate_loss(params: Params, frames, mcfg: ModelConfig, pcfg: PipelineConfig, lcfg: LossConfig,
                  seed: int = 0) -> float:
    """Mean total loss over ``frames`` with a fixed sampling seed and no gradients."""
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        vals = [pair_loss(fx, fy, T, params, mcfg, pcfg, lcfg, rng).total.item() for fx, fy, T in frames]
    return float(np.mean(vals))
