"""Flow-matching targets, loss, and Euler sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import policy as P
from . import tensor as T
from .policy import PolicyParams, TokenizedObservation
from .rng import Rng


@dataclass
class FlowSample:
    action: np.ndarray  # [..., H, D] ground-truth chunk
    noise: np.ndarray  # [..., H, D]
    tau: np.ndarray  # [...]
    noisy: np.ndarray  # tau * action + (1 - tau) * noise
    target: np.ndarray  # action - noise


def sample_tau(rng: Rng, shape, tau_dist: Union[str, tuple] = "uniform") -> np.ndarray:
    """Draw flow times. ``tau_dist`` is ``"uniform"`` or ``("beta", a, b)``."""
    if tau_dist == "uniform":
        return rng.uniform(shape)
    if isinstance(tau_dist, (tuple, list)) and tau_dist[0] == "beta":
        return rng._gen.beta(tau_dist[1], tau_dist[2], shape)
    raise ValueError(f"unknown tau distribution {tau_dist!r}")


def make_flow_sample(action, rng: Optional[Rng] = None, tau_dist="uniform", tau=None, noise=None) -> FlowSample:
    action = np.asarray(action, dtype=T.default_dtype())
    if not np.all(np.isfinite(action)):
        raise ValueError("action chunk must be finite")
    if noise is None:
        noise = rng.normal(action.shape)
    noise = np.asarray(noise, dtype=action.dtype)
    batch = action.shape[:-2]
    if tau is None:
        tau = sample_tau(rng, batch, tau_dist)
    tau = np.broadcast_to(np.asarray(tau, dtype=action.dtype), batch)
    t = tau[..., None, None]
    noisy = t * action + (1 - t) * noise
    return FlowSample(action, noise, np.array(tau), noisy, action - noise)


def task_loss(params: PolicyParams, obs: TokenizedObservation, sample: FlowSample) -> T.Tensor:
    """Mean squared velocity error over batch and all chunk entries."""
    out = P.forward(params, obs, sample.noisy, sample.tau)
    return T.mse(out.velocity, sample.target)


def euler_integrate(
    params: PolicyParams,
    obs: TokenizedObservation,
    rng: Optional[Rng] = None,
    n_steps: int = 10,
    noise: Optional[np.ndarray] = None,
    model=None,
) -> np.ndarray:
    """Integrate the learned field from tau=0 (noise) to tau=1.

    The prefix cache is built once; each step calls ``forward_cached``. Noise
    and observation batches may differ in trailing axes (several samples per
    observation).
    ``model`` may replace the network with any ``(a, tau) -> velocity`` callable
    (used by tests with analytic fields).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = params.config if params is not None else None
    if noise is None:
        shape = obs.batch_shape + (cfg.chunk_len, cfg.action_dim)
        noise = rng.normal(shape)
    a = np.array(noise, dtype=np.float64 if model is not None else T.default_dtype())
    dt = 1.0 / n_steps
    with T.no_grad():
        cache = None
        if model is None:
            cache = P.build_cache(params, obs)
        for k in range(n_steps):
            tau = k * dt
            if model is not None:
                v = np.asarray(model(a, tau))
            else:
                v = P.forward_cached(params, cache, obs.state, a, np.full(a.shape[:-2], tau)).velocity.data
            a = a + dt * v
    return a
