import numpy as np
import pytest

from flowdistill import policy as P
from flowdistill import tensor as T
from flowdistill.rng import Rng


def tiny_config(rng: np.random.Generator, max_layers=3, max_heads=2, max_d_head=8, max_chunk=4, **over):
    n_heads = int(rng.integers(1, max_heads + 1))
    d_head = int(rng.choice([2, 4, max_d_head]))
    kw = dict(
        n_layers=int(rng.integers(1, max_layers + 1)),
        d_model=n_heads * d_head,
        n_heads=n_heads,
        d_head=d_head,
        n_vis_tokens=int(rng.integers(1, 5)),
        n_lang_tokens=int(rng.integers(1, 3)),
        n_state_tokens=int(rng.integers(1, 3)),
        state_dim=2,
        chunk_len=int(rng.integers(1, max_chunk + 1)),
        action_dim=int(rng.integers(1, 3)),
        tau_embed=int(rng.choice([4, 6])),
        d_ff=int(rng.choice([8, 16])),
    )
    kw.update(over)
    return P.PolicyConfig(**kw)


def random_obs(cfg: P.PolicyConfig, batch, rng: Rng, dtype=None):
    dtype = dtype or T.default_dtype()
    batch = tuple(batch)
    return P.TokenizedObservation(
        rng.normal(batch + (cfg.n_vis_tokens, cfg.d_model), dtype),
        rng.normal(batch + (cfg.n_lang_tokens, cfg.d_model), dtype),
        rng.normal(batch + (cfg.state_dim,), dtype),
    )


def randomize(params: P.PolicyParams, rng: Rng, scale=0.3) -> P.PolicyParams:
    """Perturb every tensor so norms and biases are not at their trivial init."""
    for t in params.tensors.values():
        t.data = (t.data + scale * rng.normal(t.shape, t.data.dtype)).astype(t.data.dtype)
    return params


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x: np.ndarray, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def check_grads(loss_fn, tensors, rng: np.random.Generator, n_coords=None, h=1e-5, tol=1e-4, resolvable=None):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``tensors`` is a dict of leaf tensors (requires_grad set). With ``n_coords``
    only that many random entries per tensor are probed; a full random
    directional derivative is always checked as well. With ``resolvable`` the
    per-entry probes skip entries below that fraction of the largest gradient
    entry: central differences cannot resolve them to ``tol`` in float64.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for k, t in tensors.items()}
    f = lambda: float(loss_fn().data)  # noqa: E731
    worst = 0.0
    with T.no_grad():
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            cand = np.arange(flat.size)
            if resolvable is not None:
                scale = max(float(np.max(np.abs(g))) for g in grads.values())
                cand = np.flatnonzero(np.abs(grads[name].reshape(-1)) >= resolvable * scale)
            picks = cand if n_coords is None else rng.choice(cand, min(n_coords, cand.size), replace=False)
            for j in picks:
                num = numeric_grad(f, flat, int(j), h)
                err = float(rel_err(grads[name].reshape(-1)[j], num))
                worst = max(worst, err)
                assert err < tol, f"{name}[{j}]: analytic {grads[name].reshape(-1)[j]!r} numeric {num!r}"
        # directional derivative along a random direction over every tensor
        dirs = {k: rng.standard_normal(t.shape) for k, t in tensors.items()}
        analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in tensors)
        base = {k: t.data.copy() for k, t in tensors.items()}
        vals = []
        for sgn in (1, -1):
            for k, t in tensors.items():
                t.data = base[k] + sgn * h * dirs[k]
            vals.append(f())
        for k, t in tensors.items():
            t.data = base[k]
        num = (vals[0] - vals[1]) / (2 * h)
        err = float(rel_err(analytic, num))
        assert err < tol, f"directional: analytic {analytic!r} numeric {num!r}"
    return max(worst, err)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield
