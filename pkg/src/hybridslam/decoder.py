"""Residual decoder: a small ReLU MLP mapping interpolated features to (rgb, sdf residual).

Forward and backward passes are written out by hand so gradients reach both the
weights and the input features.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_params(feature_dim: int = 16, hidden: int = 128, n_hidden: int = 2, color_init: float = 1e-2, seed: int = 0) -> dict:
    """Trunk layers get He-uniform init; the SDF head starts at exactly zero so the
    decoded residual vanishes until training moves it."""
    rng = np.random.default_rng(seed)
    params = {}
    fan_in = feature_dim
    for i in range(n_hidden):
        bound = np.sqrt(6.0 / fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, hidden))
        params[f"b{i}"] = np.zeros(hidden)
        fan_in = hidden
    params["Wc"] = rng.normal(0.0, color_init, (hidden, 3))
    params["bc"] = np.zeros(3)
    params["Ws"] = np.zeros((hidden, 1))
    params["bs"] = np.zeros(1)
    return params


def zero_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def n_hidden_layers(params: dict) -> int:
    n = 0
    while f"W{n}" in params:
        n += 1
    return n


def forward(params: dict, E: np.ndarray, dtype=np.float64):
    """Batched decode of features (N, D). Returns ``(color (N, 3), s_res (N,), cache)``."""
    x = np.asarray(E, dtype=dtype)
    acts = [x]
    for i in range(n_hidden_layers(params)):
        z = x @ params[f"W{i}"].astype(dtype, copy=False) + params[f"b{i}"].astype(dtype, copy=False)
        x = np.maximum(z, 0)
        acts.append(x)
    color = sigmoid(x @ params["Wc"].astype(dtype, copy=False) + params["bc"].astype(dtype, copy=False))
    s_res = (x @ params["Ws"].astype(dtype, copy=False))[:, 0] + params["bs"].astype(dtype, copy=False)[0]
    return color.astype(np.float64), s_res.astype(np.float64), (acts, color, dtype)


def backward(params: dict, cache, grad_color: np.ndarray, grad_sdf: np.ndarray, need_input_grad: bool = True, need_param_grad: bool = True):
    """Reverse pass for ``forward``. Returns ``(param_grads or {}, grad_E or None)``."""
    acts, color, dtype = cache
    gc = np.asarray(grad_color, dtype=dtype)
    gs = np.asarray(grad_sdf, dtype=dtype)
    h = acts[-1]
    dzc = gc * color * (1.0 - color)
    grads = {}
    if need_param_grad:
        grads["Wc"] = (h.T @ dzc).astype(np.float64)
        grads["bc"] = dzc.sum(0).astype(np.float64)
        grads["Ws"] = (h.T @ gs[:, None]).astype(np.float64)
        grads["bs"] = np.array([gs.sum()], dtype=np.float64)
    dh = dzc @ params["Wc"].T.astype(dtype, copy=False) + gs[:, None] * params["Ws"][:, 0].astype(dtype, copy=False)
    n = n_hidden_layers(params)
    for i in range(n - 1, -1, -1):
        dz = dh * (acts[i + 1] > 0)
        if need_param_grad:
            grads[f"W{i}"] = (acts[i].T @ dz).astype(np.float64)
            grads[f"b{i}"] = dz.sum(0).astype(np.float64)
        if i > 0 or need_input_grad:
            dh = dz @ params[f"W{i}"].T.astype(dtype, copy=False)
    grad_E = dh.astype(np.float64) if need_input_grad else None
    return grads, grad_E


def decode(params: dict, E):
    """Decode one feature vector. Returns ``(color (3,), s_res)``."""
    c, s, _ = forward(params, np.asarray(E, dtype=np.float64)[None])
    return c[0], float(s[0])


def decode_backward(params: dict, E, upstream):
    """Gradients of ``<upstream, decode(params, E)>`` w.r.t. params and E."""
    g_color, g_sdf = upstream
    _, _, cache = forward(params, np.asarray(E, dtype=np.float64)[None])
    grads, gE = backward(params, cache, np.asarray(g_color, dtype=np.float64)[None], np.array([g_sdf], dtype=np.float64))
    return grads, gE[0]
