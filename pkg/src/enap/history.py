"""History encoder: maps (action, symbol) prefixes to fixed-size phase embeddings.

Three modes share one interface:

* ``trained-rnn``  Elman RNN trained on action/symbol prediction plus the
  consecutive-step contrastive term;
* ``random-rnn``   the same network left at its random initialisation;
* ``exact-history`` a hash of the quantised prefix expanded into a pseudo-random
  unit vector, so distinct prefixes are (nearly) orthogonal and equal prefixes
  coincide.  Used as the deterministic path for discrete domains.

The embedding of a trajectory prefix with k steps is written h(tau[:k]); the
empty prefix has its own begin-of-history embedding.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, EmptyDataset, EnapError, Trajectory
from .nnkit import (
    NonFiniteLoss,
    Optimizer,
    Params,
    RnnBatch,
    init_rnn,
    params_from_dict,
    params_to_dict,
    rnn_loss_and_grads,
)

log = logging.getLogger(__name__)

MODES = ("trained-rnn", "random-rnn", "exact-history")
_HEAD_KEYS = ("W_a", "b_a", "W_s", "b_s")


class UnannotatedDataset(EnapError, ValueError):
    pass


@dataclass
class HistoryConfig:
    mode: str = "trained-rnn"
    hidden: int = 64
    embed: int = 16
    exact_dim: int = 256
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    lambda_contrast: float = 0.5
    normalize_output: bool = True
    seed: int = 0


@dataclass
class HistoryEncoder:
    mode: str
    embed_dim: int
    n_symbols: int
    action_dim: int
    normalize_output: bool = True
    rnn: Params | None = None
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown history mode {self.mode!r}")

    # -- embedding -----------------------------------------------------------

    def _inputs(self, actions, symbols) -> np.ndarray:
        E = self.rnn["E"]
        d_a = self.action_dim
        x = np.zeros((len(symbols) + 1, d_a + E.shape[1]))
        x[0, d_a:] = E[self.n_symbols]
        x[1:, :d_a] = actions
        x[1:, d_a:] = E[symbols]
        return x

    def _raw(self, actions, symbols) -> np.ndarray:
        """Unnormalised embeddings of every prefix length 0..T, shape (T+1, d)."""
        actions = np.asarray(actions, dtype=float).reshape(-1, self.action_dim)
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if len(actions) != len(symbols):
            raise ValueError("actions and symbols differ in length")
        if len(symbols) and (symbols.min() < 0 or symbols.max() >= self.n_symbols):
            raise ValueError(f"symbol outside alphabet of size {self.n_symbols}")
        if self.mode == "exact-history":
            return np.stack(_exact_chain(actions, symbols, self.embed_dim))
        x = self._inputs(actions, symbols)
        xw = x @ self.rnn["W_x"] + self.rnn["b"]
        h = np.zeros(self.embed_dim)
        out = np.empty((len(x), self.embed_dim))
        for t in range(len(x)):
            h = np.tanh(h @ self.rnn["W_h"] + xw[t])
            out[t] = h
        return out

    def _post(self, H: np.ndarray) -> np.ndarray:
        if not self.normalize_output:
            return H
        n = np.linalg.norm(H, axis=-1, keepdims=True)
        return H / np.where(n > 0, n, 1.0)

    def embed_prefixes(self, actions, symbols) -> np.ndarray:
        """h(tau[:k]) for k = 0..T as rows of a (T+1, d) array."""
        return self._post(self._raw(actions, symbols))

    def embed(self, actions, symbols) -> np.ndarray:
        """Embedding of the whole given prefix (may be empty)."""
        return self.embed_prefixes(actions, symbols)[-1]

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": "history_encoder",
            "mode": self.mode,
            "normalize_output": self.normalize_output,
            "embed_dim": self.embed_dim,
            "n_symbols": self.n_symbols,
            "action_dim": self.action_dim,
        }

    def to_dict(self) -> dict:
        if self.rnn is None:
            return {"format": "nnkit_v1", **self.header(), "params": {}}
        return params_to_dict(self.rnn, self.header())

    @classmethod
    def from_dict(cls, d: dict) -> "HistoryEncoder":
        rnn = params_from_dict(d) if d.get("params") else None
        return cls(d["mode"], int(d["embed_dim"]), int(d["n_symbols"]), int(d["action_dim"]),
                   bool(d["normalize_output"]), rnn)


def save_history_encoder(enc: HistoryEncoder, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(enc.to_dict(), fh)
        fh.write("\n")


def load_history_encoder(path) -> HistoryEncoder:
    with open(path, encoding="utf-8") as fh:
        return HistoryEncoder.from_dict(json.load(fh))


def _exact_chain(actions: np.ndarray, symbols: np.ndarray, dim: int) -> list[np.ndarray]:
    digest = hashlib.sha256(b"enap-history-bos").digest()
    out = [_digest_vector(digest, dim)]
    for a, c in zip(actions, symbols):
        q = np.round(a, 6) + 0.0  # adding 0.0 folds -0.0 into 0.0
        token = ",".join(repr(float(v)) for v in q) + f"|{int(c)}"
        digest = hashlib.sha256(digest + token.encode()).digest()
        out.append(_digest_vector(digest, dim))
    return out


def _digest_vector(digest: bytes, dim: int) -> np.ndarray:
    v = np.random.default_rng(int.from_bytes(digest[:16], "little")).standard_normal(dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# construction and training


def _require_annotated(ds: Dataset):
    if len(ds) == 0:
        raise EmptyDataset("dataset has no trajectories")
    if not ds.annotated:
        raise UnannotatedDataset("history encoder needs a symbol-annotated dataset")


def exact_history_encoder(n_symbols: int, action_dim: int, dim: int = 256) -> HistoryEncoder:
    return HistoryEncoder("exact-history", dim, n_symbols, action_dim, True, None)


def random_history_encoder(n_symbols: int, action_dim: int, hidden: int = 64, embed: int = 16, seed: int = 0,
                           normalize_output: bool = True) -> HistoryEncoder:
    p = init_rnn(n_symbols, action_dim, hidden, embed, np.random.default_rng(seed))
    for k in _HEAD_KEYS:
        del p[k]
    return HistoryEncoder("random-rnn", hidden, n_symbols, action_dim, normalize_output, p)


def _batch(ds: Dataset, idx) -> RnnBatch:
    return RnnBatch.from_sequences([(ds[i].actions, ds[i].symbols) for i in idx])


def train_history_encoder(ds: Dataset, cfg: HistoryConfig | None = None, n_symbols: int | None = None) -> HistoryEncoder:
    """Build the encoder for ``cfg.mode``; ``trained-rnn`` runs minibatch Adam for ``cfg.epochs``.

    The auxiliary prediction heads are dropped from the returned encoder.  The
    full-dataset loss before training and after every epoch is kept in
    ``loss_curve``.
    """
    cfg = cfg or HistoryConfig()
    _require_annotated(ds)
    n_symbols = ds.max_symbol() + 1 if n_symbols is None else n_symbols
    if cfg.mode == "exact-history":
        return exact_history_encoder(n_symbols, ds.action_dim, cfg.exact_dim)
    rng = np.random.default_rng(cfg.seed)
    p = init_rnn(n_symbols, ds.action_dim, cfg.hidden, cfg.embed, rng)
    curve = []
    if cfg.mode == "trained-rnn":
        full = _batch(ds, range(len(ds)))
        opt = Optimizer(lr=cfg.lr)
        curve.append(rnn_loss_and_grads(p, full, cfg.lambda_contrast)[0])
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(ds))
            for s in range(0, len(order), cfg.batch_size):
                _, g = rnn_loss_and_grads(p, _batch(ds, order[s:s + cfg.batch_size]), cfg.lambda_contrast)
                p = opt.step(p, g)
            loss = rnn_loss_and_grads(p, full, cfg.lambda_contrast)[0]
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"history loss diverged at epoch {epoch + 1}")
            curve.append(loss)
        if curve:
            log.info("history encoder: loss %.4f -> %.4f over %d epochs", curve[0], curve[-1], cfg.epochs)
    for k in _HEAD_KEYS:
        del p[k]
    return HistoryEncoder(cfg.mode, cfg.hidden, n_symbols, ds.action_dim, cfg.normalize_output, p, curve)


def embed_history(enc: HistoryEncoder, prefix) -> np.ndarray:
    """Embedding of a prefix given as a sequence of (action, symbol) pairs; empty means the start state."""
    prefix = list(prefix)
    if not prefix:
        return enc.embed(np.zeros((0, enc.action_dim)), np.zeros(0, dtype=np.int64))
    acts = np.stack([np.asarray(a, dtype=float).reshape(enc.action_dim) for a, _ in prefix])
    syms = np.array([int(c) for _, c in prefix], dtype=np.int64)
    return enc.embed(acts, syms)


def embed_trajectory(enc: HistoryEncoder, traj: Trajectory) -> np.ndarray:
    if traj.symbols is None:
        raise UnannotatedDataset(f"trajectory {traj.traj_id} has no symbols")
    return enc.embed_prefixes(traj.actions, traj.symbols)


def embed_dataset(enc: HistoryEncoder, ds: Dataset) -> list[np.ndarray]:
    _require_annotated(ds)
    return [embed_trajectory(enc, t) for t in ds]


# ---------------------------------------------------------------------------
# saturation diagnostics


@dataclass
class SaturationReport:
    mean_abs_component: float
    epsilon_hat: float
    d: int
    kappa_max: float | None  # None when the bound is vacuous

    @property
    def vacuous(self) -> bool:
        return self.kappa_max is None

    def to_dict(self) -> dict:
        return {"mean_abs_component": self.mean_abs_component, "epsilon_hat": self.epsilon_hat, "d": self.d,
                "kappa_max": self.kappa_max, "vacuous": self.vacuous}


def saturation_bound(d: int, epsilon: float) -> float | None:
    """Largest similarity slack kappa that still forces equal sign vertices; None if vacuous."""
    if d < 1 or epsilon < 0:
        raise ValueError("need d >= 1 and epsilon >= 0")
    gap = 1.0 / np.sqrt(d) - epsilon
    if gap <= 0:
        return None
    return float(2.0 * gap**2)


def sign_vertex(h) -> np.ndarray:
    """Normalised hypercube vertex nearest to direction h (zero components count as positive)."""
    h = np.asarray(h, dtype=float)
    return np.where(h >= 0, 1.0, -1.0) / np.sqrt(h.shape[-1])


def saturation_distance(h) -> np.ndarray:
    """Distance of the normalised embedding(s) to their sign vertex."""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    n = np.linalg.norm(h, axis=1, keepdims=True)
    u = h / np.where(n > 0, n, 1.0)
    return np.linalg.norm(u - sign_vertex(u), axis=1)


def saturation_report(enc: HistoryEncoder, ds: Dataset) -> SaturationReport:
    _require_annotated(ds)
    H = np.concatenate([enc._raw(t.actions, t.symbols) for t in ds])
    eps = float(saturation_distance(H).max())
    return SaturationReport(float(np.mean(np.abs(H))), eps, enc.embed_dim, saturation_bound(enc.embed_dim, eps))


def _perturbed(vertex: np.ndarray, eps: float, rng) -> np.ndarray:
    # a unit vector within eps of the vertex, radius drawn up to the limit
    while True:
        delta = rng.standard_normal(len(vertex))
        delta *= rng.uniform(0, eps) / np.linalg.norm(delta)
        h = vertex + delta
        h /= np.linalg.norm(h)
        if np.linalg.norm(h - vertex) <= eps:
            return h


def identifiability_trials(d: int, n_trials: int = 10_000, seed: int = 0) -> tuple[int, int]:
    """Randomised check that similar saturated embeddings share a sign vertex.

    Each trial draws eps below 1/sqrt(d), a vertex v1 and a second vertex that is
    either v1 or differs in one random sign, perturbs both within eps, and uses
    kappa just under the bound.  Returns (pairs judged similar, counterexamples),
    a counterexample being a similar pair whose vertices differ.
    """
    rng = np.random.default_rng(seed)
    similar = bad = 0
    for _ in range(n_trials):
        eps = rng.uniform(0, 1.0 / np.sqrt(d)) * 0.999
        kappa = saturation_bound(d, eps) * (1 - 1e-9)
        s1 = rng.choice([-1.0, 1.0], size=d)
        s2 = s1.copy()
        if rng.uniform() < 0.5:
            s2[rng.integers(d)] *= -1
        v1, v2 = s1 / np.sqrt(d), s2 / np.sqrt(d)
        h1, h2 = _perturbed(v1, eps, rng), _perturbed(v2, eps, rng)
        if float(h1 @ h2) >= 1.0 - kappa:
            similar += 1
            if not np.array_equal(s1, s2):
                bad += 1
    return similar, bad
