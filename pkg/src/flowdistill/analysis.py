"""Diagnostics for test-time layer skipping.

Three views of how much each layer matters: cosine similarity between the
action-token states entering and leaving each layer, the success-rate drop when
a single layer is skipped, and success as layers are removed cumulatively in
order of increasing sensitivity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import flow
from . import policy as P
from . import tensor as T
from .policy import PolicyParams, TokenizedObservation
from .rng import Rng
from .sim import ACTION_SCALE, Codebook, ExecutorConfig, evaluate, tokenize
from .training import FlowPolicy

DEFAULT_TAU_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [n_layers, n_tau]; row i is the transition i -> i+1
    tau_grid: tuple

    def rows(self):
        for i in range(self.values.shape[0]):
            for j, tau in enumerate(self.tau_grid):
                yield i, tau, float(self.values[i, j])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "tau", "cosine"])
            for i, tau, c in self.rows():
                w.writerow([i, repr(float(tau)), repr(c)])


@dataclass
class SensitivityTable:
    baseline: float
    skipped: List[float]
    n_episodes: int = 0

    @property
    def drop(self) -> List[float]:
        return [self.baseline - s for s in self.skipped]

    def __len__(self) -> int:
        return len(self.skipped)

    def ascending_order(self) -> List[int]:
        """Layers from least to most sensitive (ties broken by index)."""
        drops = self.drop
        return sorted(range(len(drops)), key=lambda i: (drops[i], i))

    def ratio(self) -> float:
        """max drop / min drop with the min floored at one episode's worth.

        A zero or negative minimum would make the plain ratio meaningless, so
        the denominator is at least the resolution of the success estimate.
        """
        drops = np.asarray(self.drop)
        floor = 1.0 / self.n_episodes if self.n_episodes else 1e-12
        return float(drops.max() / max(drops.min(), floor))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "baseline", "skipped", "drop"])
            for i, (s, d) in enumerate(zip(self.skipped, self.drop)):
                w.writerow([i, repr(self.baseline), repr(s), repr(d)])


def cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity along the last axis, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.clip(num / np.maximum(den, eps), -1.0, 1.0)


def cosine_similarity_profile(params: PolicyParams, obs: TokenizedObservation, actions: np.ndarray,
                              tau_grid: Sequence[float] = DEFAULT_TAU_GRID, seed: int = 0,
                              noise: Optional[np.ndarray] = None) -> SimilarityMatrix:
    """Per-token cosine between action-token states before and after each layer.

    ``actions`` are ground-truth chunks in model units; the noisy input at each
    grid time interpolates them with one fixed noise draw, so every grid column
    sees the same noise.
    """
    actions = np.asarray(actions)
    if actions.shape[0] == 0 or not obs.batch_shape or obs.batch_shape[0] == 0:
        raise ValueError("empty evaluation set")
    taus = tuple(float(t) for t in tau_grid)
    if any(not 0.0 <= t <= 1.0 for t in taus):
        raise ValueError("tau grid must lie in [0, 1]")
    cfg = params.config
    if noise is None:
        noise = Rng(seed, 7).normal(actions.shape)
    values = np.zeros((cfg.n_layers, len(taus)))
    ns = cfg.n_state_tokens
    with T.no_grad():
        cache = P.build_cache(params, obs)
        for j, tau in enumerate(taus):
            sample = flow.make_flow_sample(actions, tau=tau, noise=noise)
            out = P.forward_cached(params, cache, obs.state, sample.noisy, sample.tau)
            hs = [h.data[..., ns:, :] for h in out.suffix_hidden]
            for i in range(cfg.n_layers):
                values[i, j] = cosine_rows(hs[i], hs[i + 1]).mean()
    return SimilarityMatrix(values, taus)


def eval_set(dataset, config, codebook: Codebook, n: int, seed: int = 0):
    """Random dataset rows as (observations, model-unit action chunks)."""
    if len(dataset) == 0 or n < 1:
        raise ValueError("empty evaluation set")
    idx = np.sort(Rng(seed, 5).permutation(len(dataset))[: min(n, len(dataset))])
    obs = tokenize(dataset.worlds.index(idx), config, codebook, T.default_dtype())
    return obs, (dataset.actions[idx] / ACTION_SCALE).astype(T.default_dtype())


def _success(params: PolicyParams, codebook: Codebook, suite: str, n_episodes: int,
             executor: ExecutorConfig, seed: int, n_steps: int) -> float:
    return evaluate(FlowPolicy(params, codebook, n_steps), suite, n_episodes, executor, seed).success_rate


def sensitivity_sweep(params: PolicyParams, codebook: Codebook, suite: str = "static", n_episodes: int = 200,
                      executor: Optional[ExecutorConfig] = None, seed: int = 10_000, n_steps: int = 10,
                      baseline: Optional[float] = None) -> SensitivityTable:
    """Success-rate drop from skipping each layer on its own."""
    executor = executor or ExecutorConfig(chunk_len=params.config.chunk_len)
    if baseline is None:
        baseline = _success(params, codebook, suite, n_episodes, executor, seed, n_steps)
    skipped = []
    for i in range(params.config.n_layers):
        skipped.append(_success(P.skip_layers(params, {i}), codebook, suite, n_episodes, executor, seed, n_steps))
    return SensitivityTable(baseline, skipped, n_episodes)


def progressive_skip_eval(params: PolicyParams, codebook: Codebook, order: Sequence[int], max_removed: int,
                          suite: str = "static", n_episodes: int = 200,
                          executor: Optional[ExecutorConfig] = None, seed: int = 10_000,
                          n_steps: int = 10) -> List[float]:
    """Success with the first ``r`` layers of ``order`` skipped, r = 0..max_removed."""
    n = params.config.n_layers
    if not 0 <= max_removed < n:
        raise ValueError(f"max_removed must be in [0, {n})")
    if sorted(order) != sorted(set(order)) or len(order) < max_removed:
        raise ValueError("order must list distinct layers, at least max_removed of them")
    executor = executor or ExecutorConfig(chunk_len=params.config.chunk_len)
    rates = []
    for r in range(max_removed + 1):
        view = P.skip_layers(params, order[:r]) if r else params
        rates.append(_success(view, codebook, suite, n_episodes, executor, seed, n_steps))
    return rates


def write_progressive_csv(rates: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_removed", "success_rate"])
        for r, s in enumerate(rates):
            w.writerow([r, repr(float(s))])
