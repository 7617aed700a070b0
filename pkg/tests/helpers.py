"""Shared builders for model-level tests."""

import numpy as np

from radgen import tensor as T
from radgen.model import ModelConfig, forward, init_params
from radgen.training import cross_entropy

from oracles import finite_difference, relative_error


def tiny_config(**kw):
    base = dict(vocab_size=12, d_f=6, d_model=8, n_heads=2, n_layers=2, d_ff=16, dropout_p=0.0, max_len=10)
    base.update(kw)
    return ModelConfig(**base)


def randomized_params(config, seed=0, dtype=np.float64, mix=0.5):
    """Initialized params with every bias, gain and mixing weight perturbed away from its init."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, dtype=dtype)
    for name, p in params.items():
        if p.data.ndim < 2:
            p.data = np.asarray(p.data + rng.normal(0, 0.3, p.shape), dtype=dtype)
        if name.endswith(".mix"):
            p.data = np.asarray(mix + rng.normal(0, 0.1), dtype=dtype)
    return params


def model_gradient_errors(config, params, feats, rep, target, step=1e-5):
    """Worst relative error between tape and finite-difference CE gradients, per parameter."""
    for p in params.values():
        p.grad = None
    loss = cross_entropy(forward(feats, rep, target[:-1], params, config), target[1:])
    T.backward(loss)

    def f():
        with T.no_grad():
            return float(cross_entropy(forward(feats, rep, target[:-1], params, config), target[1:]).item())

    out = {}
    for name, p in params.items():
        numeric = finite_difference(f, [p.data], step)[0]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = relative_error(analytic, numeric)
    return out
