"""Wall-clock latency of full inference versus depth and visual-token count."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import flow
from . import policy as P
from . import tensor as T
from .policy import ConfigError, PolicyConfig
from .rng import Rng

MIN_TRIALS = 30
MIN_WARMUP = 5
ROW_FIELDS = ("n_layers", "n_vis_tokens", "n_diffusion_steps", "median_ms", "p10_ms", "p90_ms", "n_trials")


@dataclass
class LatencyRow:
    n_layers: int
    n_vis_tokens: int
    n_diffusion_steps: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    n_trials: int


@dataclass
class LatencyReport:
    rows: List[LatencyRow]
    environment: dict = field(default_factory=dict)

    def find(self, n_layers: int, n_vis_tokens: int) -> LatencyRow:
        for r in self.rows:
            if r.n_layers == n_layers and r.n_vis_tokens == n_vis_tokens:
                return r
        raise KeyError((n_layers, n_vis_tokens))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow([getattr(r, k) for k in ROW_FIELDS])

    def to_dict(self) -> dict:
        return {"environment": self.environment, "rows": [asdict(r) for r in self.rows]}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def environment(threads: int, dtype) -> dict:
    blas = [{"api": i.get("internal_api"), "threads": i.get("num_threads")} for i in threadpool_info()]
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "blas": blas,
        "dtype": np.dtype(dtype).name,
    }


def robust_stats(times_s: Sequence[float]):
    """(median, p10, p90) in milliseconds."""
    ms = np.asarray(times_s, dtype=np.float64) * 1e3
    p10, med, p90 = np.percentile(ms, [10, 50, 90])
    return float(med), float(p10), float(p90)


def grid_points(base: PolicyConfig, depth_grid: Sequence[int], token_grid: Sequence[int]):
    """Depth sweep at base tokens, then token sweep at base depth; base point once."""
    if not depth_grid or not token_grid:
        raise ConfigError("depth and token grids must be non-empty")
    if base.n_layers not in depth_grid or base.n_vis_tokens not in token_grid:
        raise ConfigError(
            f"base point (depth {base.n_layers}, tokens {base.n_vis_tokens}) must appear in both grids"
        )
    if len(set(depth_grid)) != len(depth_grid) or len(set(token_grid)) != len(token_grid):
        raise ConfigError("grid entries must be distinct")
    pts = [(int(d), base.n_vis_tokens) for d in depth_grid]
    pts += [(base.n_layers, int(v)) for v in token_grid if v != base.n_vis_tokens]
    return pts


def time_inference(cfg: PolicyConfig, n_steps: int, trials: int, warmup: int, seed: int = 0,
                   timer: Callable[[], float] = time.perf_counter) -> List[float]:
    """Seconds per full inference (cache build plus ``n_steps`` cached passes)."""
    params = P.init_params(cfg, Rng(seed, 0))
    rng = Rng(seed, 1)
    obs = P.TokenizedObservation(
        rng.normal((1, cfg.n_vis_tokens, cfg.d_model)),
        rng.normal((1, cfg.n_lang_tokens, cfg.d_model)),
        rng.normal((1, cfg.state_dim)),
    )
    noise = rng.normal((1, cfg.chunk_len, cfg.action_dim))
    for _ in range(warmup):
        flow.euler_integrate(params, obs, n_steps=n_steps, noise=noise)
    times = []
    for _ in range(trials):
        t0 = timer()
        flow.euler_integrate(params, obs, n_steps=n_steps, noise=noise)
        times.append(timer() - t0)
    return times


def bench_sweep(base: PolicyConfig, depth_grid: Sequence[int], token_grid: Sequence[int], n_steps: int = 10,
                trials: int = MIN_TRIALS, warmup: int = MIN_WARMUP, seed: int = 0, threads: int = 1,
                progress: Optional[Callable[[LatencyRow], None]] = None) -> LatencyReport:
    if warmup < MIN_WARMUP:
        raise ConfigError(f"warmup must be >= {MIN_WARMUP}")
    if trials < MIN_TRIALS:
        raise ConfigError(f"trials must be >= {MIN_TRIALS}")
    pts = grid_points(base, depth_grid, token_grid)
    rows = []
    with threadpool_limits(limits=threads):
        env = environment(threads, T.default_dtype())
        for depth, tokens in pts:
            cfg = PolicyConfig.from_dict({**base.to_dict(), "n_layers": depth, "n_vis_tokens": tokens})
            med, p10, p90 = robust_stats(time_inference(cfg, n_steps, trials, warmup, seed))
            row = LatencyRow(depth, tokens, n_steps, med, p10, p90, trials)
            rows.append(row)
            if progress:
                progress(row)
    return LatencyReport(rows, env)


def linear_fit(x: Sequence[float], y: Sequence[float]):
    """Least-squares line; returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def estimate_flops(cfg: PolicyConfig, n_steps: int) -> float:
    """Multiply-add count of one full inference (matmuls only)."""
    d, f, P_, S = cfg.d_model, cfg.d_ff, cfg.prefix_len, cfg.suffix_len
    dense = 4 * d * d + 2 * d * f
    prefix = P_ * dense + 2 * P_ * P_ * d
    suffix = S * dense + 2 * S * (P_ + S) * d
    return float(cfg.n_layers * (prefix + n_steps * suffix))


def speedup_summary(report: LatencyReport, base: Optional[PolicyConfig] = None) -> List[dict]:
    """Latency ratios between grid extremes on each axis.

    Each entry compares the larger configuration (numerator) with the smaller;
    ``flop_ratio`` gives the matching reduction in arithmetic, so the two axes
    can be compared per unit of work removed.
    """
    base = base or PolicyConfig()
    by_depth = sorted({r.n_layers for r in report.rows if r.n_vis_tokens == base.n_vis_tokens})
    by_tok = sorted({r.n_vis_tokens for r in report.rows if r.n_layers == base.n_layers})
    out = []

    def entry(axis, big, small):
        rb, rs = report.find(*big), report.find(*small)
        steps = rb.n_diffusion_steps
        cb = PolicyConfig.from_dict({**base.to_dict(), "n_layers": big[0], "n_vis_tokens": big[1]})
        cs = PolicyConfig.from_dict({**base.to_dict(), "n_layers": small[0], "n_vis_tokens": small[1]})
        flop_ratio = estimate_flops(cb, steps) / estimate_flops(cs, steps)
        lat_ratio = rb.median_ms / rs.median_ms
        out.append({
            "axis": axis, "numerator": list(big), "denominator": list(small),
            "latency_ratio": lat_ratio, "flop_ratio": flop_ratio,
            "latency_per_flop_ratio": lat_ratio / flop_ratio,
        })

    if len(by_depth) > 1:
        entry("depth", (by_depth[-1], base.n_vis_tokens), (by_depth[0], base.n_vis_tokens))
    if len(by_tok) > 1:
        entry("tokens", (base.n_layers, by_tok[-1]), (base.n_layers, by_tok[0]))
    return out


def latency_ratio(report: LatencyReport, big, small) -> float:
    return report.find(*big).median_ms / report.find(*small).median_ms


def depth_fit(report: LatencyReport, n_vis_tokens: int):
    rows = sorted((r for r in report.rows if r.n_vis_tokens == n_vis_tokens), key=lambda r: r.n_layers)
    return linear_fit([r.n_layers for r in rows], [r.median_ms for r in rows])
