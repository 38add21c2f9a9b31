"""Shared optimisation loop for teacher, scratch and student training."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import flow
from . import policy as P
from . import tensor as T
from .optim import Adam
from .policy import PolicyConfig, PolicyParams
from .rng import Rng
from .sim import ACTION_SCALE, Codebook, Dataset, tokenize

LOSS_COLUMNS = ("task_loss", "kd_loss", "attn_loss", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 32  # observations per step
    noise_per_obs: int = 4  # flow samples drawn per observation
    lr: float = 3e-4
    warmup: int = 100
    min_lr_ratio: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    codebook_seed: int = 0

    def lr_at(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(1, self.steps - self.warmup)
        cos = 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
        return self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)


class BatchSampler:
    """Random (observation, flow sample) batches from an expert dataset.

    Each observation row carries ``noise_per_obs`` independent (noise, tau)
    draws; the prefix pass is shared across them.
    """

    def __init__(self, dataset: Dataset, config: PolicyConfig, codebook: Codebook, rng: Rng,
                 batch_size: int, noise_per_obs: int):
        if dataset.actions.shape[1:] != (config.chunk_len, config.action_dim):
            raise P.ConfigError(
                f"dataset chunks {dataset.actions.shape[1:]} do not match policy "
                f"({config.chunk_len}, {config.action_dim})"
            )
        self.dataset = dataset
        self.config = config
        self.codebook = codebook
        self.rng = rng
        self.batch_size = batch_size
        self.noise_per_obs = noise_per_obs
        self.actions = (dataset.actions / ACTION_SCALE).astype(T.default_dtype())

    def sample(self):
        idx = self.rng.integers(0, len(self.dataset), (self.batch_size,))
        obs = tokenize(self.dataset.worlds.index(idx), self.config, self.codebook, T.default_dtype())
        act = np.repeat(self.actions[idx][:, None], self.noise_per_obs, axis=1)
        return obs, flow.make_flow_sample(act, self.rng)


def fit(
    params: PolicyParams,
    sampler: BatchSampler,
    cfg: TrainConfig,
    loss_fn: Callable[[PolicyParams, object, flow.FlowSample], Dict[str, T.Tensor]],
    log_path=None,
    progress: Optional[Callable[[int, dict], None]] = None,
) -> list:
    """Minimise ``loss_fn(...)["total"]`` with Adam; returns per-step loss rows."""
    params.requires_grad_(True)
    opt = Adam(params.tensors, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rows = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(("step",) + LOSS_COLUMNS)
    try:
        for step in range(cfg.steps):
            obs, sample = sampler.sample()
            opt.zero_grad()
            losses = loss_fn(params, obs, sample)
            values = {k: float(losses[k].data) if k in losses else 0.0 for k in LOSS_COLUMNS}
            for k, v in values.items():
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {k} ({v}) at step {step}")
            losses["total"].backward()
            opt.step(cfg.lr_at(step))
            row = {"step": step, **values}
            rows.append(row)
            if writer:
                writer.writerow([step] + [repr(values[k]) for k in LOSS_COLUMNS])
            if progress:
                progress(step, row)
    finally:
        if fh:
            fh.close()
    params.requires_grad_(False)
    return rows


def task_only(params, obs, sample) -> Dict[str, T.Tensor]:
    loss = flow.task_loss(params, obs, sample)
    return {"task_loss": loss, "total": loss}


def train_policy(dataset: Dataset, config: PolicyConfig, cfg: TrainConfig, log_path=None,
                 init: Optional[PolicyParams] = None, progress=None) -> PolicyParams:
    """Plain flow-matching training (teacher, or a shallow model from scratch)."""
    params = init if init is not None else P.init_params(config, Rng(cfg.seed, 0))
    codebook = Codebook.create(config, cfg.codebook_seed)
    sampler = BatchSampler(dataset, config, codebook, Rng(cfg.seed, 1), cfg.batch_size, cfg.noise_per_obs)
    fit(params, sampler, cfg, task_only, log_path, progress)
    return params


class FlowPolicy:
    """Adapter from a parameter set to the simulator's ``act`` interface."""

    def __init__(self, params: PolicyParams, codebook: Codebook, n_steps: int = 10):
        self.params = params
        self.codebook = codebook
        self.n_steps = n_steps

    def act(self, worlds, rngs) -> np.ndarray:
        cfg = self.params.config
        obs = tokenize(worlds, cfg, self.codebook, self.params["prefix_pos"].dtype)
        noise = np.stack([r.normal((cfg.chunk_len, cfg.action_dim)) for r in rngs])
        chunk = flow.euler_integrate(self.params, obs, n_steps=self.n_steps, noise=noise)
        return chunk.astype(np.float64) * ACTION_SCALE
