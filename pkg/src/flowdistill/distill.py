"""Depth distillation: shallow student initialised from a deep teacher.

The student keeps every width of the teacher and a subset of its layers. It is
trained on a weighted sum of the flow-matching loss, a velocity-matching loss
against the frozen teacher, and a KL loss between the teacher's and student's
action-to-observation attention at one layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from . import flow
from . import policy as P
from . import tensor as T
from .policy import ConfigError, PolicyConfig, PolicyParams
from .rng import Rng
from .sim import Codebook, Dataset
from .training import BatchSampler, TrainConfig, fit

PLACEMENTS = ("initial", "middle", "later")
SCOPES = ("action_only", "all_tokens")


@dataclass
class DistillConfig:
    student_layers: int = 4
    lambda_task: float = 1.0
    lambda_kd: float = 1.0
    lambda_attn: float = 0.1
    attn_placement: str = "middle"
    attn_scope: str = "action_only"
    head_aggregation: str = "mean"
    steps: int = 2000
    batch_size: int = 32
    noise_per_obs: int = 4
    lr: float = 3e-4
    warmup: int = 100
    min_lr_ratio: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    codebook_seed: int = 0

    def validate(self, teacher_depth: Optional[int] = None) -> "DistillConfig":
        if self.student_layers < 1:
            raise ConfigError("student_layers must be >= 1")
        if teacher_depth is not None and self.student_layers > teacher_depth:
            raise ConfigError(f"student depth {self.student_layers} exceeds teacher depth {teacher_depth}")
        weights = (self.lambda_task, self.lambda_kd, self.lambda_attn)
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be non-negative")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one loss weight must be positive")
        if self.attn_placement not in PLACEMENTS:
            raise ConfigError(f"attn_placement must be one of {PLACEMENTS}")
        if self.attn_scope not in SCOPES:
            raise ConfigError(f"attn_scope must be one of {SCOPES}")
        if self.head_aggregation != "mean":
            raise ConfigError("only head_aggregation='mean' is supported")
        if self.steps < 0 or self.batch_size < 1 or self.noise_per_obs < 1:
            raise ConfigError("steps must be >= 0, batch sizes >= 1")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, noise_per_obs=self.noise_per_obs, lr=self.lr,
            warmup=self.warmup, min_lr_ratio=self.min_lr_ratio, clip_norm=self.clip_norm,
            seed=self.seed, codebook_seed=self.codebook_seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerMap:
    """Teacher layer index for each student layer."""

    indices: tuple
    teacher_depth: int

    def __post_init__(self):
        idx = list(self.indices)
        if not idx:
            raise ConfigError("empty layer map")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"layer map {idx} is not strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.teacher_depth:
            raise ConfigError(f"layer map {idx} outside [0, {self.teacher_depth})")

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> int:
        return self.indices[i]

    @property
    def is_identity(self) -> bool:
        return list(self.indices) == list(range(self.teacher_depth))


def uniform_subsample(teacher_depth: int, student_depth: int) -> LayerMap:
    """Evenly spaced, end-aligned layer choice: ``ceil((i+1) * L_t / L_s) - 1``."""
    if student_depth < 1:
        raise ConfigError("student depth must be >= 1")
    if student_depth > teacher_depth:
        raise ConfigError(f"student depth {student_depth} exceeds teacher depth {teacher_depth}")
    # exact integer ceil of a rational
    idx = tuple(-(-(i + 1) * teacher_depth // student_depth) - 1 for i in range(student_depth))
    return LayerMap(idx, teacher_depth)


def placement_rule(placement: str, student_depth: int) -> int:
    if placement == "initial":
        return 0
    if placement == "middle":
        return student_depth // 2
    if placement == "later":
        return student_depth - 1
    raise ConfigError(f"unknown placement {placement!r}")


def init_student(teacher: PolicyParams, layer_map: LayerMap, config: Optional[PolicyConfig] = None) -> PolicyParams:
    """Copy embeddings, heads and the mapped layers (both experts) into a new model."""
    tcfg = teacher.config
    if layer_map.teacher_depth != tcfg.n_layers:
        raise ConfigError(f"layer map built for depth {layer_map.teacher_depth}, teacher has {tcfg.n_layers}")
    scfg = tcfg.with_layers(len(layer_map))
    if config is not None and config != scfg:
        raise ConfigError(
            "student config must match the teacher except for depth: "
            f"got {config.to_dict()}, expected {scfg.to_dict()}"
        )
    tensors = {}
    for name in P.parameter_shapes(scfg):
        src = name
        if name.startswith("layers."):
            _, i, rest = name.split(".", 2)
            src = f"layers.{layer_map[int(i)]}.{rest}"
        t = teacher[src].data
        tensors[name] = T.Tensor(t.copy(), dtype=t.dtype)
    return PolicyParams(scfg, tensors)


def capture_layers(cfg: DistillConfig, layer_map: LayerMap):
    """(student layer, teacher layer) whose attention maps are aligned."""
    s = placement_rule(cfg.attn_placement, len(layer_map))
    return s, layer_map[s]


def _check_heads(student: PolicyParams, teacher: PolicyParams) -> None:
    sc, tc = student.config, teacher.config
    if sc.n_heads != tc.n_heads:
        raise ConfigError(f"head count mismatch: student {sc.n_heads}, teacher {tc.n_heads}")
    if (sc.prefix_len, sc.suffix_len) != (tc.prefix_len, tc.suffix_len):
        raise ConfigError("student and teacher token layouts differ")


def _teacher_pass(teacher: PolicyParams, obs, sample, capture: Optional[int], joint: bool):
    with T.no_grad():
        return P.forward(teacher, obs, sample.noisy, sample.tau, capture_layer=capture, joint_attention=joint)


def attention_kl(teacher_rows: T.Tensor, student_rows: T.Tensor) -> T.Tensor:
    """KL(teacher || student) per row, averaged over heads, rows and batch."""
    return T.mean(T.kl_divergence(teacher_rows, student_rows))


def _rows(record: P.AttentionRecord, scope: str) -> T.Tensor:
    return record.action_to_prefix if scope == "action_only" else record.joint


def kd_loss(student: PolicyParams, teacher: PolicyParams, obs, sample: flow.FlowSample) -> T.Tensor:
    """Mean squared gap between student and frozen-teacher velocities."""
    target = _teacher_pass(teacher, obs, sample, None, False).velocity.data
    out = P.forward(student, obs, sample.noisy, sample.tau)
    return T.mse(out.velocity, target)


def attn_loss(student: PolicyParams, teacher: PolicyParams, obs, sample: flow.FlowSample,
              config: DistillConfig, layer_map: Optional[LayerMap] = None) -> T.Tensor:
    _check_heads(student, teacher)
    if layer_map is None:
        layer_map = uniform_subsample(teacher.config.n_layers, student.config.n_layers)
    s_layer, t_layer = capture_layers(config, layer_map)
    joint = config.attn_scope == "all_tokens"
    t_rec = _teacher_pass(teacher, obs, sample, t_layer, joint).attn
    s_rec = P.forward(student, obs, sample.noisy, sample.tau, capture_layer=s_layer, joint_attention=joint).attn
    return attention_kl(T.as_tensor(_rows(t_rec, config.attn_scope).data), _rows(s_rec, config.attn_scope))


def distill_losses(student: PolicyParams, teacher: PolicyParams, obs, sample: flow.FlowSample,
                   config: DistillConfig, layer_map: LayerMap) -> Dict[str, T.Tensor]:
    """All three terms from one student pass and one teacher pass.

    Every term sees the same observation, noise and flow time. Terms whose
    weight is zero are skipped entirely (no teacher pass when both teacher
    terms are off).
    """
    use_kd = config.lambda_kd > 0
    use_attn = config.lambda_attn > 0
    joint = use_attn and config.attn_scope == "all_tokens"
    s_layer = t_layer = None
    if use_attn:
        _check_heads(student, teacher)
        s_layer, t_layer = capture_layers(config, layer_map)
    out = P.forward(student, obs, sample.noisy, sample.tau, capture_layer=s_layer, joint_attention=joint)
    losses: Dict[str, T.Tensor] = {}
    total = None

    def add(name, value, weight):
        nonlocal total
        losses[name] = value
        if weight > 0:
            term = value * weight
            total = term if total is None else total + term

    if config.lambda_task > 0:
        add("task_loss", T.mse(out.velocity, sample.target), config.lambda_task)
    if use_kd or use_attn:
        t_out = _teacher_pass(teacher, obs, sample, t_layer, joint)
        if use_kd:
            add("kd_loss", T.mse(out.velocity, t_out.velocity.data), config.lambda_kd)
        if use_attn:
            t_rows = T.as_tensor(_rows(t_out.attn, config.attn_scope).data)
            add("attn_loss", attention_kl(t_rows, _rows(out.attn, config.attn_scope)), config.lambda_attn)
    losses["total"] = total
    return losses


def distill_train(teacher: PolicyParams, dataset: Dataset, config: DistillConfig, log_path=None,
                  config_path=None, progress=None) -> PolicyParams:
    """Subsample, copy and train a student; the teacher is never modified."""
    config.validate(teacher.config.n_layers)
    layer_map = uniform_subsample(teacher.config.n_layers, config.student_layers)
    student = init_student(teacher, layer_map)
    if config_path is not None:
        with open(config_path, "w") as fh:
            json.dump({"distill": config.to_dict(), "layer_map": list(layer_map.indices),
                       "teacher": teacher.config.to_dict()}, fh, indent=2, sort_keys=True)
    teacher.requires_grad_(False)
    codebook = Codebook.create(student.config, config.codebook_seed)
    sampler = BatchSampler(dataset, student.config, codebook, Rng(config.seed, 1),
                           config.batch_size, config.noise_per_obs)

    def loss_fn(params, obs, sample):
        return distill_losses(params, teacher, obs, sample, config, layer_map)

    fit(student, sampler, config.train_config(), loss_fn, log_path, progress)
    return student
