"""Tiny numpy networks with hand-derived gradients.

Parameters are plain ``dict[str, ndarray]`` so optimizers, checkpoints and the
finite-difference checker can treat every model the same way.  Row-vector
convention throughout: a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import EnapError

CHECKPOINT_KEY = "nnkit_v1"
_NORM_EPS = 1e-12


class ShapeMismatch(EnapError, ValueError):
    pass


class NonFiniteLoss(EnapError, FloatingPointError):
    pass


Params = dict  # name -> ndarray


# ---------------------------------------------------------------------------
# feedforward


def init_mlp(sizes, rng, zero_last: bool = False) -> Params:
    """He-initialised ReLU stack; ``sizes`` lists layer widths from input to output."""
    p = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        scale = np.sqrt(2.0 / n_in) if not last else np.sqrt(1.0 / n_in)
        p[f"W{i}"] = np.zeros((n_in, n_out)) if (last and zero_last) else rng.standard_normal((n_in, n_out)) * scale
        p[f"b{i}"] = np.zeros(n_out)
    return p


def mlp_layers(p: Params) -> int:
    return sum(1 for k in p if k.startswith("W"))


def mlp_sizes(p: Params) -> list[int]:
    n = mlp_layers(p)
    return [p["W0"].shape[0]] + [p[f"W{i}"].shape[1] for i in range(n)]


def mlp_forward(p: Params, x, return_cache: bool = False):
    """ReLU hidden layers, linear output."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != p["W0"].shape[0]:
        raise ShapeMismatch(f"input dim {h.shape[-1]} != {p['W0'].shape[0]}")
    n = mlp_layers(p)
    acts = [h]
    for i in range(n):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        h = z if i == n - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return (h, acts) if return_cache else h


def mlp_backward(p: Params, acts, dy):
    """Gradients of a scalar loss given dL/dy; returns (param grads, dL/dx)."""
    n = mlp_layers(p)
    g = {}
    d = dy
    for i in reversed(range(n)):
        if i < n - 1:
            d = d * (acts[i + 1] > 0)
        g[f"W{i}"] = acts[i].reshape(-1, acts[i].shape[-1]).T @ d.reshape(-1, d.shape[-1])
        g[f"b{i}"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ p[f"W{i}"].T
    return g, d


def mlp_grads(p: Params, x, y):
    """Mean squared error ``mean_n ||f(x_n) - y_n||^2`` and its gradients."""
    pred, acts = mlp_forward(p, x, return_cache=True)
    diff = pred - np.asarray(y, dtype=float)
    n = len(diff)
    loss = float(np.sum(diff**2) / n)
    if not np.isfinite(loss):
        raise NonFiniteLoss("mlp loss is not finite")
    g, _ = mlp_backward(p, acts, 2.0 * diff / n)
    return loss, g


# ---------------------------------------------------------------------------
# Elman recurrence


def init_rnn(n_symbols: int, action_dim: int, hidden: int = 64, embed: int = 16, rng=None,
             scale: float = 1.0) -> Params:
    """Parameters of the history RNN.

    The symbol embedding table has one extra row (index ``n_symbols``) used as
    the begin-of-history token, so the empty history has its own embedding.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d_in = action_dim + embed
    return {
        "W_h": rng.standard_normal((hidden, hidden)) * scale / np.sqrt(hidden),
        "W_x": rng.standard_normal((d_in, hidden)) * scale / np.sqrt(d_in),
        "b": np.zeros(hidden),
        "E": rng.standard_normal((n_symbols + 1, embed)),
        "W_a": rng.standard_normal((hidden, action_dim)) / np.sqrt(hidden),
        "b_a": np.zeros(action_dim),
        "W_s": rng.standard_normal((hidden, n_symbols)) / np.sqrt(hidden),
        "b_s": np.zeros(n_symbols),
    }


def rnn_dims(p: Params) -> tuple[int, int, int, int]:
    """(n_symbols, action_dim, hidden, embed)."""
    return p["W_s"].shape[1], p["W_a"].shape[1], p["W_h"].shape[0], p["E"].shape[1]


def rnn_inputs(p: Params, actions, symbols) -> np.ndarray:
    """Input sequence for one history: a begin token, then ``[a_j, E[c_j]]`` per step.

    Returns (T+1, d_in); running the recurrence over its first k+1 rows gives
    the embedding of the history made of the first k steps.
    """
    n_sym, d_a, _, d_e = rnn_dims(p)
    actions = np.asarray(actions, dtype=float).reshape(-1, d_a)
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if len(actions) != len(symbols):
        raise ShapeMismatch("actions and symbols differ in length")
    if len(symbols) and (symbols.min() < 0 or symbols.max() >= n_sym):
        raise ShapeMismatch("symbol outside the embedding table")
    x = np.zeros((len(symbols) + 1, d_a + d_e))
    x[0, d_a:] = p["E"][n_sym]
    x[1:, :d_a] = actions
    x[1:, d_a:] = p["E"][symbols]
    return x


def rnn_forward(p: Params, inputs):
    """Run the recurrence ``h_t = tanh(h_{t-1} W_h + x_t W_x + b)`` from ``h_0 = 0``.

    ``inputs`` is (T, d_in) or (B, T, d_in).  Returns hiddens h_1..h_T plus the
    action-head and symbol-head outputs at every step.
    """
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != p["W_x"].shape[0] or x.shape[1] < 1:
        raise ShapeMismatch(f"bad input shape {x.shape} for input dim {p['W_x'].shape[0]}")
    B, T, _ = x.shape
    H = p["W_h"].shape[0]
    hs = np.empty((B, T, H))
    xw = x @ p["W_x"] + p["b"]
    h = np.zeros((B, H))
    for t in range(T):
        h = np.tanh(h @ p["W_h"] + xw[:, t])
        hs[:, t] = h
    act = hs @ p["W_a"] + p["b_a"]
    logits = hs @ p["W_s"] + p["b_s"]
    if squeeze:
        return hs[0], act[0], logits[0]
    return hs, act, logits


@dataclass
class RnnBatch:
    """Padded batch of annotated trajectories: actions (B, T, d_a), symbols (B, T), lengths (B,)."""

    actions: np.ndarray
    symbols: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs) -> "RnnBatch":
        seqs = list(seqs)
        T = max(len(s) for _, s in seqs)
        d_a = np.asarray(seqs[0][0]).reshape(len(seqs[0][1]), -1).shape[1]
        A = np.zeros((len(seqs), T, d_a))
        C = np.zeros((len(seqs), T), dtype=np.int64)
        L = np.zeros(len(seqs), dtype=np.int64)
        for i, (a, c) in enumerate(seqs):
            n = len(c)
            A[i, :n] = np.asarray(a, dtype=float).reshape(n, d_a)
            C[i, :n] = c
            L[i] = n
        return cls(A, C, L)


def _batch_inputs(p: Params, batch: RnnBatch) -> np.ndarray:
    n_sym, d_a, _, d_e = rnn_dims(p)
    B, T = batch.symbols.shape
    x = np.zeros((B, T + 1, d_a + d_e))
    x[:, 0, d_a:] = p["E"][n_sym]
    x[:, 1:, :d_a] = batch.actions
    x[:, 1:, d_a:] = p["E"][batch.symbols]
    return x


def rnn_loss_and_grads(p: Params, batch: RnnBatch, lambda_contrast: float = 0.5, return_parts: bool = False):
    """Multi-objective history loss and its gradients by backpropagation through time.

    Hidden k summarises the first k steps and predicts step k's action (squared
    error) and symbol (cross-entropy).  Consecutive hiddens k, k+1 (k >= 1) are
    pulled together when their last symbols agree (1 - cos) and pushed apart
    otherwise (cos).
    """
    n_sym, d_a, H, d_e = rnn_dims(p)
    B, T = batch.symbols.shape
    L = np.asarray(batch.lengths)
    x = _batch_inputs(p, batch)
    hs, act, logits = rnn_forward(p, x)  # positions 0..T

    pos = np.arange(T)[None, :]
    pred_mask = (pos < L[:, None]).astype(float)  # (B, T) over positions 0..T-1
    n_pred = pred_mask.sum()

    diff = act[:, :T] - batch.actions
    l_act = float(np.sum(pred_mask[..., None] * diff**2) / (n_pred * d_a))

    z = logits[:, :T]
    z = z - z.max(axis=2, keepdims=True)
    ez = np.exp(z)
    prob = ez / ez.sum(axis=2, keepdims=True)
    logp = z - np.log(ez.sum(axis=2, keepdims=True))
    tgt = np.take_along_axis(logp, batch.symbols[..., None], axis=2)[..., 0]
    l_state = float(-np.sum(pred_mask * tgt) / n_pred)

    # contrast pairs (k, k+1) for k = 1..L-1, compared on symbols c_{k-1}, c_k
    h1, h2 = hs[:, 1:T], hs[:, 2:T + 1]
    pair_mask = (np.arange(1, T)[None, :] < L[:, None]).astype(float)  # (B, T-1)
    n_pair = pair_mask.sum()
    same = (batch.symbols[:, :-1] == batch.symbols[:, 1:]).astype(float)
    n1 = np.sqrt(np.sum(h1**2, axis=2) + _NORM_EPS)
    n2 = np.sqrt(np.sum(h2**2, axis=2) + _NORM_EPS)
    cos = np.sum(h1 * h2, axis=2) / (n1 * n2)
    if n_pair > 0:
        l_con = float(np.sum(pair_mask * (same * (1.0 - cos) + (1.0 - same) * cos)) / n_pair)
    else:
        l_con = 0.0

    loss = l_act + l_state + lambda_contrast * l_con
    if not np.isfinite(loss):
        raise NonFiniteLoss("history loss is not finite")

    # heads
    d_act = np.zeros_like(act)
    d_act[:, :T] = 2.0 * pred_mask[..., None] * diff / (n_pred * d_a)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, batch.symbols[..., None], 1.0, axis=2)
    d_log = np.zeros_like(logits)
    d_log[:, :T] = pred_mask[..., None] * (prob - onehot) / n_pred

    g = {}
    g["W_a"] = hs.reshape(-1, H).T @ d_act.reshape(-1, d_a)
    g["b_a"] = d_act.reshape(-1, d_a).sum(axis=0)
    g["W_s"] = hs.reshape(-1, H).T @ d_log.reshape(-1, n_sym)
    g["b_s"] = d_log.reshape(-1, n_sym).sum(axis=0)
    dh = d_act @ p["W_a"].T + d_log @ p["W_s"].T

    if n_pair > 0 and lambda_contrast != 0.0:
        w = lambda_contrast * pair_mask * (1.0 - 2.0 * same) / n_pair  # d loss / d cos
        w = w[..., None]
        c = cos[..., None]
        dcos_h1 = h2 / (n1 * n2)[..., None] - c * h1 / (n1**2)[..., None]
        dcos_h2 = h1 / (n1 * n2)[..., None] - c * h2 / (n2**2)[..., None]
        dh[:, 1:T] += w * dcos_h1
        dh[:, 2:T + 1] += w * dcos_h2

    # backpropagation through time
    g_Wh = np.zeros_like(p["W_h"])
    dz_all = np.zeros_like(hs)
    carry = np.zeros((B, H))
    for t in range(T, -1, -1):
        dz = (dh[:, t] + carry) * (1.0 - hs[:, t] ** 2)
        dz_all[:, t] = dz
        if t > 0:
            g_Wh += hs[:, t - 1].T @ dz
        carry = dz @ p["W_h"].T
    g["W_h"] = g_Wh
    g["W_x"] = x.reshape(-1, x.shape[2]).T @ dz_all.reshape(-1, H)
    g["b"] = dz_all.reshape(-1, H).sum(axis=0)
    dx = dz_all @ p["W_x"].T
    dE = np.zeros_like(p["E"])
    np.add.at(dE, n_sym, dx[:, 0, d_a:].sum(axis=0))
    np.add.at(dE, batch.symbols.reshape(-1), dx[:, 1:, d_a:].reshape(-1, d_e))
    g["E"] = dE

    if return_parts:
        return loss, g, {"act": l_act, "state": l_state, "contrast": l_con}
    return loss, g


# ---------------------------------------------------------------------------
# optimisation


class Optimizer:
    """Gradient descent with optional adaptive moment scaling (Adam when ``adaptive``)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 adaptive: bool = True):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.adaptive = adaptive
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: Params, grads: Params) -> Params:
        for k, g in grads.items():
            if np.shape(g) != np.shape(params[k]):
                raise ShapeMismatch(f"gradient {k} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
        self.t += 1
        new = dict(params)
        for k, g in grads.items():
            if not self.adaptive:
                new[k] = params[k] - self.lr * g
                continue
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.beta1**self.t)
            vh = v / (1 - self.beta2**self.t)
            new[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)
        return new


def optimizer_step(state: Optimizer, params: Params, grads: Params) -> Params:
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# checking and persistence


def max_relative_error(f: Callable[[Params], float], params: Params, grads: Params, step: float = 1e-5,
                       floor: float = 1e-7, keys=None) -> float:
    """Largest entrywise |analytic - central difference| / max(|analytic|, |numeric|, floor)."""
    worst = 0.0
    for k in keys or sorted(params):
        base = params[k]
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = {**params, k: base.copy()}
            minus = {**params, k: base.copy()}
            plus[k][idx] += step
            minus[k][idx] -= step
            num = (f(plus) - f(minus)) / (2 * step)
            ana = grads[k][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


def params_to_dict(params: Params, header: dict | None = None) -> dict:
    out = {"format": CHECKPOINT_KEY}
    if header:
        out.update(header)
    out["params"] = {
        k: {"shape": list(np.shape(v)), "data": [float(x) for x in np.ravel(v)]} for k, v in sorted(params.items())
    }
    return out


def params_from_dict(d: dict) -> Params:
    if d.get("format") != CHECKPOINT_KEY:
        raise ValueError(f"not an {CHECKPOINT_KEY} checkpoint")
    return {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}


def save_params(params: Params, path, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(params_to_dict(params, header), fh)
        fh.write("\n")


def load_params(path) -> tuple[Params, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    header = {k: v for k, v in d.items() if k not in ("params", "format")}
    return params_from_dict(d), header
