"""Joint prefix/suffix transformer with per-layer expert weights.

Prefix tokens (visual + language) and suffix tokens (state + noisy action chunk)
share one attention operation per layer but use separate parameter sets. Prefix
queries never see suffix keys, so the prefix stack can run once per observation
and its keys/values be reused for every integration step.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

EXPERTS = ("prefix", "suffix")
LAYER_PARTS = (
    "attn_norm",
    "qkv",
    "out",
    "mlp_norm",
    "fc1.w",
    "fc1.b",
    "fc2.w",
    "fc2.b",
)


class ConfigError(ValueError):
    pass


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    n_vis_tokens: int = 16
    n_lang_tokens: int = 1
    n_state_tokens: int = 1
    state_dim: int = 2
    chunk_len: int = 8
    action_dim: int = 2
    tau_embed: int = 32
    d_ff: int = 128

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        for name in ("n_vis_tokens", "n_lang_tokens", "n_state_tokens", "chunk_len", "action_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def prefix_len(self) -> int:
        return self.n_vis_tokens + self.n_lang_tokens

    @property
    def suffix_len(self) -> int:
        return self.n_state_tokens + self.chunk_len

    def with_layers(self, n_layers: int) -> "PolicyConfig":
        return dataclasses.replace(self, n_layers=n_layers)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown PolicyConfig fields: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: PolicyConfig) -> Dict[str, tuple]:
    """Name -> shape for every parameter; depends on the config only."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "prefix_pos": (cfg.prefix_len, d),
        "suffix_pos": (cfg.suffix_len, d),
        "state_in.w": (cfg.state_dim, cfg.n_state_tokens * d),
        "state_in.b": (cfg.n_state_tokens * d,),
        "action_in.w": (cfg.action_dim, d),
        "action_in.b": (d,),
        "time_in.w": (cfg.tau_embed, d),
        "time_in.b": (d,),
    }
    per_layer = {
        "attn_norm": (d,),
        "qkv": (d, 3 * d),
        "out": (d, d),
        "mlp_norm": (d,),
        "fc1.w": (d, f),
        "fc1.b": (f,),
        "fc2.w": (f, d),
        "fc2.b": (d,),
    }
    for i in range(cfg.n_layers):
        for expert in EXPERTS:
            for part, shape in per_layer.items():
                shapes[f"layers.{i}.{expert}.{part}"] = shape
    shapes["final_norm"] = (d,)
    shapes["action_out.w"] = (d, cfg.action_dim)
    shapes["action_out.b"] = (cfg.action_dim,)
    return shapes


class PolicyParams:
    """Named parameter set plus the config that produced it.

    ``skip`` lists layers that act as the identity in both expert stacks; it is
    only ever non-empty on views returned by :func:`skip_layers`.
    """

    def __init__(self, config: PolicyConfig, tensors: Dict[str, Tensor], skip=frozenset()):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise ConfigError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            tensors = {k: tensors[k] for k in expected}
        for k, shape in expected.items():
            if tensors[k].shape != shape:
                raise ConfigError(f"{k}: expected shape {shape}, got {tensors[k].shape}")
        self.config = config
        self.tensors = tensors
        self.skip = frozenset(skip)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def layer(self, i: int, expert: str) -> Dict[str, Tensor]:
        prefix = f"layers.{i}.{expert}."
        return {part: self.tensors[prefix + part] for part in LAYER_PARTS}

    def requires_grad_(self, flag: bool = True) -> "PolicyParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def copy(self) -> "PolicyParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype)
                   for k, v in self.tensors.items()}
        return PolicyParams(self.config, tensors, self.skip)

    def astype(self, dtype) -> "PolicyParams":
        tensors = {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype) for k, v in self.tensors.items()}
        return PolicyParams(self.config, tensors, self.skip)

    def equal(self, other: "PolicyParams") -> bool:
        """Bitwise equality of config and every tensor."""
        if self.config != other.config or self.names() != other.names():
            return False
        return all(
            a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init_params(config: PolicyConfig, rng: Rng) -> PolicyParams:
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("attn_norm", "mlp_norm", "final_norm"):
            data = np.ones(shape)
        elif leaf == "b":
            data = np.zeros(shape)
        elif name in ("prefix_pos", "suffix_pos"):
            data = rng.normal(shape, np.float64) / math.sqrt(config.d_model)
        else:
            data = rng.normal(shape, np.float64) / math.sqrt(shape[0])
        tensors[name] = T.parameter(data)
    return PolicyParams(config, tensors)


def skip_layers(params: PolicyParams, skip_set) -> PolicyParams:
    """View of ``params`` whose listed layers pass the residual stream through."""
    skip = frozenset(int(i) for i in skip_set)
    n = params.config.n_layers
    bad = [i for i in skip if not 0 <= i < n]
    if bad:
        raise IndexError(f"skip indices {sorted(bad)} outside [0, {n})")
    if len(skip) >= n:
        raise ValueError("cannot skip every layer")
    return PolicyParams(params.config, params.tensors, skip)


# ----------------------------------------------------------------- containers
@dataclass
class TokenizedObservation:
    vis_tokens: np.ndarray  # [..., V, d_model]
    lang_tokens: np.ndarray  # [..., n_lang, d_model]
    state: np.ndarray  # [..., state_dim]

    @property
    def batch_shape(self) -> tuple:
        return self.vis_tokens.shape[:-2]

    def index(self, idx) -> "TokenizedObservation":
        return TokenizedObservation(self.vis_tokens[idx], self.lang_tokens[idx], self.state[idx])

    def check(self, cfg: PolicyConfig) -> None:
        if self.vis_tokens.shape[-2:] != (cfg.n_vis_tokens, cfg.d_model):
            raise ConfigError(f"vis_tokens shape {self.vis_tokens.shape} does not match config")
        if self.lang_tokens.shape[-2:] != (cfg.n_lang_tokens, cfg.d_model):
            raise ConfigError(f"lang_tokens shape {self.lang_tokens.shape} does not match config")
        if self.state.shape[-1] != cfg.state_dim:
            raise ConfigError(f"state shape {self.state.shape} does not match config")


@dataclass
class KVCache:
    """Per-layer prefix keys/values, each ``[..., n_heads, P, d_head]``.

    Skipped layers hold ``None``. Built once per observation and never mutated.
    """

    keys: List[Optional[Tensor]]
    values: List[Optional[Tensor]]
    prefix_attn: List[Optional[Tensor]]
    prefix_hidden: List[Tensor]
    n_heads: int
    d_head: int
    prefix_len: int
    skip: frozenset = frozenset()

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def batch_shape(self) -> tuple:
        return self.prefix_hidden[0].shape[:-2]


@dataclass
class AttentionRecord:
    """Post-softmax attention captured at one layer.

    ``suffix_to_prefix`` holds, for each suffix query, a softmax over the prefix
    keys only (``[..., n_heads, S, P]``). ``joint`` (optional) is the full masked
    attention over all queries and keys, ``[..., n_heads, P+S, P+S]``.
    """

    layer_index: int
    suffix_to_prefix: Tensor
    n_state_tokens: int
    joint: Optional[Tensor] = None

    @property
    def action_to_prefix(self) -> Tensor:
        return self.suffix_to_prefix[..., self.n_state_tokens:, :]


@dataclass
class PolicyOutput:
    velocity: Tensor
    attn: Optional[AttentionRecord] = None
    cache: Optional[KVCache] = None
    suffix_hidden: Optional[List[Tensor]] = None
    prefix_hidden: Optional[List[Tensor]] = None

    def __iter__(self):
        # (velocity, attn, cache) unpacking
        return iter((self.velocity, self.attn, self.cache))


# ------------------------------------------------------------------ building blocks
def _split_heads(x: Tensor, cfg: PolicyConfig) -> Tensor:
    *b, n, _ = x.shape
    return T.swapaxes(x.reshape(*b, n, cfg.n_heads, cfg.d_head), -2, -3)


def _merge_heads(x: Tensor, cfg: PolicyConfig) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *b, n, _, _ = x.shape
    return x.reshape(*b, n, cfg.d_model)


def _qkv(x: Tensor, lp: Dict[str, Tensor], cfg: PolicyConfig):
    d = cfg.d_model
    y = T.rms_norm(x, lp["attn_norm"]) @ lp["qkv"]
    q = _split_heads(y[..., :d], cfg)
    k = _split_heads(y[..., d:2 * d], cfg)
    v = _split_heads(y[..., 2 * d:], cfg)
    return q, k, v


def _mlp(x: Tensor, lp: Dict[str, Tensor]) -> Tensor:
    h = T.linear(T.rms_norm(x, lp["mlp_norm"]), lp["fc1.w"], lp["fc1.b"])
    return T.linear(T.gelu(h), lp["fc2.w"], lp["fc2.b"])


def _tau_array(tau, batch_shape) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("tau must lie in [0, 1]")
    return np.broadcast_to(tau, batch_shape)


def _prefix_inputs(params: PolicyParams, obs: TokenizedObservation) -> Tensor:
    dtype = params["prefix_pos"].dtype
    tokens = np.concatenate([obs.vis_tokens, obs.lang_tokens], axis=-2).astype(dtype, copy=False)
    return T.as_tensor(tokens) + params["prefix_pos"]


def _suffix_inputs(params: PolicyParams, state, a_tau, tau) -> Tensor:
    cfg = params.config
    dtype = params["suffix_pos"].dtype
    a_tau = T.as_tensor(a_tau, dtype)
    batch = a_tau.shape[:-2]
    if a_tau.shape[-2:] != (cfg.chunk_len, cfg.action_dim):
        raise ConfigError(f"a_tau shape {a_tau.shape} does not match config")
    state = T.as_tensor(np.asarray(state, dtype=dtype))
    if state.shape[-1] != cfg.state_dim:
        raise ConfigError(f"state shape {state.shape} does not match config")
    # one observation may serve several noise draws: align on leading axes
    if state.ndim - 1 < len(batch):
        state = _expand_batch(state, len(batch))
    s = T.linear(state, params["state_in.w"], params["state_in.b"])
    s = s.reshape(*s.shape[:-1], cfg.n_state_tokens, cfg.d_model)
    s = T.broadcast_to(s, batch + (cfg.n_state_tokens, cfg.d_model))
    a = T.linear(a_tau, params["action_in.w"], params["action_in.b"])
    x = T.concat([s, a], axis=-2) + params["suffix_pos"]
    temb = T.sinusoidal(_tau_array(tau, batch), cfg.tau_embed).astype(dtype, copy=False)
    temb = T.linear(T.as_tensor(temb), params["time_in.w"], params["time_in.b"])
    return x + temb.reshape(*batch, 1, cfg.d_model)


def _expand_batch(state: Tensor, n_batch: int) -> Tensor:
    """Append singleton batch axes so ``state`` has ``n_batch`` of them."""
    extra = n_batch - (state.ndim - 1)
    return state.reshape(*state.shape[:-1], *(1,) * extra, state.shape[-1])


def _expand_cache(t: Tensor, n_extra: int) -> Tensor:
    if n_extra == 0:
        return t
    b = t.shape[:-3]
    return t.reshape(*b, *(1,) * n_extra, *t.shape[-3:])


# ------------------------------------------------------------------ public ops
def build_cache(params: PolicyParams, obs: TokenizedObservation) -> KVCache:
    """Run the prefix-expert stack once and keep each layer's keys/values."""
    cfg = params.config
    obs.check(cfg)
    scale = 1.0 / math.sqrt(cfg.d_head)
    x = _prefix_inputs(params, obs)
    keys, values, attns, hidden = [], [], [], [x]
    for i in range(cfg.n_layers):
        if i in params.skip:
            keys.append(None)
            values.append(None)
            attns.append(None)
            hidden.append(x)
            continue
        lp = params.layer(i, "prefix")
        q, k, v = _qkv(x, lp, cfg)
        att = T.softmax((q @ k.T) * scale)
        x = x + _merge_heads(att @ v, cfg) @ lp["out"]
        x = x + _mlp(x, lp)
        keys.append(k)
        values.append(v)
        attns.append(att)
        hidden.append(x)
    return KVCache(keys, values, attns, hidden, cfg.n_heads, cfg.d_head, cfg.prefix_len, params.skip)


def forward_cached(
    params: PolicyParams,
    cache: KVCache,
    state,
    a_tau,
    tau,
    capture_layer: Optional[int] = None,
    joint_attention: bool = False,
) -> PolicyOutput:
    """Suffix-expert pass reusing cached prefix keys/values.

    ``a_tau`` may carry extra leading batch axes beyond the cache's (several
    noise draws per observation); cached tensors broadcast over them.
    """
    cfg = params.config
    if (
        cache.n_layers != cfg.n_layers
        or cache.n_heads != cfg.n_heads
        or cache.d_head != cfg.d_head
        or cache.prefix_len != cfg.prefix_len
    ):
        raise CacheError("cache was built for a different config")
    if cache.skip != params.skip:
        raise CacheError("cache was built with a different skip set")
    if capture_layer is not None:
        if not 0 <= capture_layer < cfg.n_layers:
            raise IndexError(f"capture_layer {capture_layer} outside [0, {cfg.n_layers})")
        if capture_layer in params.skip:
            raise ValueError(f"capture_layer {capture_layer} is skipped")
    scale = 1.0 / math.sqrt(cfg.d_head)
    P = cfg.prefix_len
    n_cache_batch = len(cache.batch_shape)

    x = _suffix_inputs(params, state, a_tau, tau)
    n_extra = x.ndim - 2 - n_cache_batch
    if n_extra < 0 or x.shape[:n_cache_batch] != cache.batch_shape:
        raise CacheError(f"suffix batch {x.shape[:-2]} incompatible with cache batch {cache.batch_shape}")
    hidden = [x]
    record = None
    for i in range(cfg.n_layers):
        if i in params.skip:
            hidden.append(x)
            continue
        lp = params.layer(i, "suffix")
        q, k, v = _qkv(x, lp, cfg)
        kp = _expand_cache(cache.keys[i], n_extra)
        vp = _expand_cache(cache.values[i], n_extra)
        logits_p = (q @ kp.T) * scale
        logits_s = (q @ k.T) * scale
        att = T.softmax(T.concat([logits_p, logits_s], axis=-1))
        o = att[..., :P] @ vp + att[..., P:] @ v
        x = x + _merge_heads(o, cfg) @ lp["out"]
        x = x + _mlp(x, lp)
        hidden.append(x)
        if i == capture_layer:
            joint = None
            if joint_attention:
                joint = _joint_rows(cache.prefix_attn[i], att, n_extra, cfg)
            record = AttentionRecord(i, T.softmax(logits_p), cfg.n_state_tokens, joint)
    act = x[..., cfg.n_state_tokens:, :]
    velocity = T.linear(T.rms_norm(act, params["final_norm"]), params["action_out.w"], params["action_out.b"])
    return PolicyOutput(velocity, record, cache, hidden, cache.prefix_hidden)


def _joint_rows(prefix_att: Tensor, suffix_att: Tensor, n_extra: int, cfg: PolicyConfig) -> Tensor:
    """Assemble the full masked attention matrix from the two blocks."""
    batch = suffix_att.shape[:-3]
    pa = _expand_cache(prefix_att, n_extra)
    pad = T.as_tensor(np.zeros(pa.shape[:-1] + (cfg.suffix_len,), dtype=pa.dtype))
    top = T.broadcast_to(T.concat([pa, pad], axis=-1), batch + (cfg.n_heads, cfg.prefix_len, cfg.prefix_len + cfg.suffix_len))
    return T.concat([top, suffix_att], axis=-2)


def forward(
    params: PolicyParams,
    obs: TokenizedObservation,
    a_tau,
    tau,
    capture_layer: Optional[int] = None,
    joint_attention: bool = False,
) -> PolicyOutput:
    """Velocity prediction ``v(a_tau, obs, tau)``; also returns the cache it built."""
    cache = build_cache(params, obs)
    return forward_cached(params, cache, obs.state, a_tau, tau, capture_layer, joint_attention)


def forward_joint(
    params: PolicyParams,
    obs: TokenizedObservation,
    a_tau,
    tau,
    capture_layer: Optional[int] = None,
) -> PolicyOutput:
    """Reference pass: one attention over ``[prefix | suffix]`` with an explicit mask.

    Slower than :func:`forward` and used as its recompute oracle. Observation and
    action batch shapes must match exactly.
    """
    cfg = params.config
    obs.check(cfg)
    scale = 1.0 / math.sqrt(cfg.d_head)
    P, S = cfg.prefix_len, cfg.suffix_len
    mask = np.zeros((P + S, P + S), dtype=params["prefix_pos"].dtype)
    mask[:P, P:] = -np.inf
    mask = T.as_tensor(mask)

    xp = _prefix_inputs(params, obs)
    xs = _suffix_inputs(params, obs.state, a_tau, tau)
    if xp.shape[:-2] != xs.shape[:-2]:
        raise ConfigError("forward_joint needs identical observation and action batch shapes")
    x = T.concat([xp, xs], axis=-2)
    prefix_hidden, suffix_hidden = [x[..., :P, :]], [x[..., P:, :]]
    record = None
    for i in range(cfg.n_layers):
        if i in params.skip:
            prefix_hidden.append(x[..., :P, :])
            suffix_hidden.append(x[..., P:, :])
            continue
        lpp, lps = params.layer(i, "prefix"), params.layer(i, "suffix")
        qp, kp, vp = _qkv(x[..., :P, :], lpp, cfg)
        qs, ks, vs = _qkv(x[..., P:, :], lps, cfg)
        q = T.concat([qp, qs], axis=-2)
        k = T.concat([kp, ks], axis=-2)
        v = T.concat([vp, vs], axis=-2)
        logits = (q @ k.T) * scale
        att = T.softmax(logits + mask)
        o = _merge_heads(att @ v, cfg)
        o = T.concat([o[..., :P, :] @ lpp["out"], o[..., P:, :] @ lps["out"]], axis=-2)
        x = x + o
        x = T.concat([x[..., :P, :] + _mlp(x[..., :P, :], lpp), x[..., P:, :] + _mlp(x[..., P:, :], lps)], axis=-2)
        prefix_hidden.append(x[..., :P, :])
        suffix_hidden.append(x[..., P:, :])
        if i == capture_layer:
            record = AttentionRecord(i, T.softmax(logits[..., P:, :P]), cfg.n_state_tokens, att)
    act = x[..., P + cfg.n_state_tokens:, :]
    velocity = T.linear(T.rms_norm(act, params["final_norm"]), params["action_out.w"], params["action_out.b"])
    return PolicyOutput(velocity, record, None, suffix_hidden, prefix_hidden)
