"""Scaled reproduction runs behind the acceptance suite.

Everything lands in one run directory and is reused on later calls: the
dataset, the teacher, every student arm and seed, the scratch baselines, the
layer-skip analyses and the latency sweep. A fingerprint of the plan is stored
next to the artifacts; a different plan refuses to reuse them.

    python3 -m flowdistill.experiments --run-dir runs/acceptance
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

from . import analysis as A
from . import checkpoint as ckpt
from . import distill as D
from . import sim
from .bench import bench_sweep, depth_fit, latency_ratio
from .policy import PolicyConfig, PolicyParams
from .training import FlowPolicy, TrainConfig, train_policy

# arm -> DistillConfig overrides; "scratch" is plain training at student depth
ARMS: Dict[str, dict] = {
    "full": {},
    "task_kd": {"lambda_attn": 0.0},
    "task_only": {"lambda_kd": 0.0, "lambda_attn": 0.0},
    "initial": {"attn_placement": "initial"},
    "scratch": {},
}


@dataclass
class Plan:
    data_episodes: int = 2000
    data_seed: int = 0
    teacher_steps: int = 3000
    teacher_lr: float = 1e-3
    teacher_layers: int = 8
    student_layers: int = 4
    student_steps: int = 60
    student_lr: float = 1e-3
    student_warmup: int = 6
    seeds: Tuple[int, ...] = (0, 1, 2)
    eval_episodes: int = 200
    eval_seed: int = 10_000
    skip_episodes: int = 200
    bench_depths: Tuple[int, ...] = (2, 4, 6, 8, 12, 18)
    bench_trials: int = 30
    arms: Tuple[str, ...] = field(default_factory=lambda: tuple(ARMS))

    def fingerprint(self) -> str:
        doc = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


class Runner:
    def __init__(self, run_dir: str, plan: Optional[Plan] = None, log=functools.partial(print, flush=True)):
        self.dir = run_dir
        self.plan = plan or Plan()
        self.log = log
        os.makedirs(run_dir, exist_ok=True)
        stamp = os.path.join(run_dir, "plan.json")
        doc = {"fingerprint": self.plan.fingerprint(), "plan": asdict(self.plan)}
        if os.path.exists(stamp):
            with open(stamp) as fh:
                old = json.load(fh)
            if old.get("fingerprint") != doc["fingerprint"]:
                raise ValueError(f"{run_dir} holds runs from a different plan; use a fresh directory")
        else:
            with open(stamp, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True, default=list)
        self.results_path = os.path.join(run_dir, "results.json")
        self.results = {}
        if os.path.exists(self.results_path):
            with open(self.results_path) as fh:
                self.results = json.load(fh)
        self._dataset = None

    # ------------------------------------------------------------ caching
    def _path(self, *parts) -> str:
        return os.path.join(self.dir, *parts)

    def _remember(self, key: str, value):
        self.results[key] = value
        tmp = self.results_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.results, fh, indent=2, sort_keys=True)
        os.replace(tmp, self.results_path)
        return value

    def _cached(self, key: str, compute):
        if key not in self.results:
            t0 = time.perf_counter()
            value = compute()
            self.log(f"[{time.perf_counter() - t0:7.1f}s] {key} = {value if not isinstance(value, dict) else '...'}")
            self._remember(key, value)
        return self.results[key]

    # ------------------------------------------------------------- models
    def dataset(self) -> sim.Dataset:
        if self._dataset is None:
            path = self._path("data_static.bin")
            if not os.path.exists(path):
                sim.save_dataset(sim.gen_dataset(self.plan.data_episodes, False, self.plan.data_seed), path)
            self._dataset = sim.load_dataset(path)
        return self._dataset

    def teacher(self) -> PolicyParams:
        path = self._path("teacher", "model.ckpt")
        if not os.path.exists(path):
            os.makedirs(self._path("teacher"), exist_ok=True)
            cfg = TrainConfig(steps=self.plan.teacher_steps, lr=self.plan.teacher_lr)
            t0 = time.perf_counter()
            params = train_policy(self.dataset(), PolicyConfig(n_layers=self.plan.teacher_layers), cfg,
                                  log_path=self._path("teacher", "loss.csv"))
            ckpt.save(params, path)
            self._remember("teacher/train_seconds", time.perf_counter() - t0)
        return ckpt.load(path)

    def student(self, arm: str, seed: int) -> PolicyParams:
        if arm not in ARMS:
            raise KeyError(arm)
        d = self._path(f"{arm}_s{seed}")
        path = os.path.join(d, "model.ckpt")
        if not os.path.exists(path):
            os.makedirs(d, exist_ok=True)
            p = self.plan
            if arm == "scratch":
                cfg = TrainConfig(steps=p.student_steps, lr=p.student_lr, warmup=p.student_warmup, seed=seed)
                teacher_cfg = PolicyConfig(n_layers=p.teacher_layers)
                params = train_policy(self.dataset(), teacher_cfg.with_layers(p.student_layers), cfg,
                                      log_path=os.path.join(d, "loss.csv"))
            else:
                cfg = D.DistillConfig(student_layers=p.student_layers, steps=p.student_steps, lr=p.student_lr,
                                      warmup=p.student_warmup, seed=seed, **ARMS[arm])
                params = D.distill_train(self.teacher(), self.dataset(), cfg, log_path=os.path.join(d, "loss.csv"),
                                         config_path=os.path.join(d, "distill_config.json"))
            ckpt.save(params, path)
        return ckpt.load(path)

    def model(self, name: str) -> PolicyParams:
        if name == "teacher":
            return self.teacher()
        arm, seed = name.rsplit("_s", 1)
        return self.student(arm, int(seed))

    # -------------------------------------------------------- evaluations
    def success(self, name: str, suite: str = "static", staleness: int = 0) -> float:
        def compute():
            params = self.model(name)
            cb = sim.Codebook.create(params.config, 0)
            ex = sim.ExecutorConfig(chunk_len=params.config.chunk_len, staleness_frames=staleness)
            return sim.evaluate(FlowPolicy(params, cb), suite, self.plan.eval_episodes, ex,
                                self.plan.eval_seed).success_rate
        return self._cached(f"success/{name}/{suite}/stale{staleness}", compute)

    def arm_success(self, arm: str, suite: str = "static", staleness: int = 0):
        return [self.success(f"{arm}_s{s}", suite, staleness) for s in self.plan.seeds]

    def dynamic_success(self, name: str) -> float:
        """Dynamic suite with staleness from the synthetic depth-linear latency model."""
        depth = self.model(name).config.n_layers
        return self.success(name, "dynamic", sim.linear_staleness(depth))

    def sensitivity(self) -> dict:
        def compute():
            params = self.teacher()
            cb = sim.Codebook.create(params.config, 0)
            table = A.sensitivity_sweep(params, cb, "static", self.plan.skip_episodes, seed=self.plan.eval_seed)
            table.write_csv(self._path("sensitivity.csv"))
            return {"baseline": table.baseline, "skipped": table.skipped, "n_episodes": table.n_episodes}
        return self._cached("teacher/sensitivity", compute)

    def progressive(self) -> list:
        def compute():
            params = self.teacher()
            cb = sim.Codebook.create(params.config, 0)
            s = self.sensitivity()
            order = A.SensitivityTable(s["baseline"], s["skipped"], s["n_episodes"]).ascending_order()
            rates = A.progressive_skip_eval(params, cb, order, params.config.n_layers - 1, "static",
                                            self.plan.skip_episodes, seed=self.plan.eval_seed)
            A.write_progressive_csv(rates, self._path("progressive.csv"))
            return rates
        return self._cached("teacher/progressive", compute)

    def similarity(self) -> list:
        def compute():
            params = self.teacher()
            cb = sim.Codebook.create(params.config, 0)
            obs, actions = A.eval_set(self.dataset(), params.config, cb, 256)
            mat = A.cosine_similarity_profile(params, obs, actions)
            mat.write_csv(self._path("similarity.csv"))
            return mat.values.tolist()
        return self._cached("teacher/similarity", compute)

    def bench(self) -> dict:
        """Latency sweep; timings are measured once and then reused."""
        def compute():
            base = PolicyConfig(n_layers=self.plan.teacher_layers)
            report = bench_sweep(base, list(self.plan.bench_depths), [base.n_vis_tokens],
                                 trials=self.plan.bench_trials)
            report.write_csv(self._path("bench.csv"))
            slope, intercept, r2 = depth_fit(report, base.n_vis_tokens)
            return {"rows": [asdict(r) for r in report.rows], "environment": report.environment,
                    "slope_ms": slope, "intercept_ms": intercept, "r_squared": r2,
                    "ratio_18_6": latency_ratio(report, (18, base.n_vis_tokens), (6, base.n_vis_tokens))}
        return self._cached("bench", compute)

    def run_all(self) -> dict:
        self.success("teacher")
        for arm in self.plan.arms:
            self.arm_success(arm)
        for s in self.plan.seeds:
            self.dynamic_success(f"full_s{s}")
            self.success(f"full_s{s}", "dynamic", 0)
        self.dynamic_success("teacher")
        self.success("teacher", "dynamic", 0)
        self.sensitivity()
        self.progressive()
        self.similarity()
        self.bench()
        return self.results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Build (or reuse) the scaled reproduction runs.")
    ap.add_argument("--run-dir", default="runs/acceptance")
    args = ap.parse_args(argv)
    Runner(args.run_dir).run_all()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
