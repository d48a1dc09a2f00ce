"""Shared fixtures: the desk-scale configuration and one trained toy model.

Training is the expensive part of the suite (a few minutes on one core), so
it runs once per session and every test that needs trained weights reuses it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from riga.config import RunConfig, load_config
from riga.data import synth_pair
from riga.encoders import init_params
from riga.pipeline import prepare_frame
from riga.train import TrainConfig, evaluate_loss, train

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.cfg"

TRAIN_SEEDS = range(0, 200)
HELDOUT_SEEDS = range(1000, 1020)
PROBE_PAIRS = 20


@pytest.fixture(scope="session")
def toy_cfg() -> RunConfig:
    return load_config(TOY_CONFIG)


@dataclass
class TrainedToy:
    cfg: RunConfig
    params: dict
    log: list
    probe_before: float
    probe_after: float
    train_seconds: float
    total_seconds: float


def _train_toy(cfg: RunConfig) -> TrainedToy:
    start = time.perf_counter()
    pcfg, mcfg, lcfg = cfg.pipeline(), cfg.model(), cfg.loss()
    frames = []
    for s in TRAIN_SEEDS:
        pair = synth_pair(cfg.synth(seed=s))
        frames.append((prepare_frame(pair.source, pcfg), prepare_frame(pair.target, pcfg), pair.T_gt))
    params = init_params(cfg.init_seed, mcfg)
    probe = frames[:PROBE_PAIRS]
    before = evaluate_loss(params, probe, mcfg, pcfg, lcfg, seed=1)
    t0 = time.perf_counter()
    tcfg = TrainConfig(steps=cfg.steps, lr=cfg.lr, lr_decay=cfg.lr_decay, beta1=cfg.adam_beta1,
                       beta2=cfg.adam_beta2, eps=cfg.adam_eps, seed=cfg.train_seed)
    log = train(params, frames, mcfg, pcfg, lcfg, tcfg)
    t1 = time.perf_counter()
    after = evaluate_loss(params, probe, mcfg, pcfg, lcfg, seed=1)
    return TrainedToy(cfg, params, log, before, after, t1 - t0, time.perf_counter() - start)


@pytest.fixture(scope="session")
def trained_toy(toy_cfg) -> TrainedToy:
    return _train_toy(toy_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
