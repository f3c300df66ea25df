"""Bi-level controller: the mined machine supplies a coarse action, a residual net refines it.

At each step the observation is encoded and assigned a symbol c_t, the
current state q_t and c_t select the pooled edge action a_base, and the
residual network adds a correction from (state embedding, feature, a_base).
After acting, the next state is chosen among the edge destinations, preferring
those whose next-input set contains the newly observed symbol.

Training alternates structure extraction (cluster, train history encoder,
mine) with supervised fitting of the residual, state embedding and, when it
has parameters, the feature encoder.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .abstraction import (
    Codebook,
    EncoderParams,
    annotate_dataset,
    assign_symbols,
    discover_alphabet,
    encode_dataset,
    identity_encoder,
    load_codebook,
    save_codebook,
    standardizing_encoder,
)
from .config import PipelineConfig, stage_seed
from .core import PMM, Dataset, EnapError, load_pmm, nd_trace, save_pmm
from .history import (
    HistoryConfig,
    HistoryEncoder,
    load_history_encoder,
    save_history_encoder,
    train_history_encoder,
)
from .mining import MineConfig, MineResult, mine
from .nnkit import NonFiniteLoss, Optimizer, Params, init_mlp, mlp_backward, mlp_forward, params_from_dict, params_to_dict

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class NoTransition(EnapError, KeyError):
    pass


class DeadEnd(EnapError, KeyError):
    pass


class NoValidPath(EnapError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# machine-level control


def coarse_action(pmm: PMM, q: int, c: int) -> np.ndarray:
    """Sample-count-weighted mean of the action means on the edges leaving q under c."""
    edges = pmm.out_edges(q, c)
    if not edges:
        raise NoTransition(f"no edge from q{q} on c{c}")
    w = np.array([e.action_samples for e in edges], dtype=float)
    return (w[:, None] * np.stack([e.action_mean for e in edges])).sum(axis=0) / w.sum()


def next_state(pmm: PMM, q: int, c: int, c_next: int, eps: float = 0.5) -> int:
    """Destination maximising [c_next in NIS(q')] + eps * P(q'|q, c); ties go to the lowest id."""
    edges = pmm.out_edges(q, c)
    if not edges:
        raise DeadEnd(f"no edge from q{q} on c{c}")
    best, best_score = None, -np.inf
    for e in edges:  # sorted by destination id
        score = float(c_next in pmm.state(e.dst).nis) + eps * e.prob
        if score > best_score:
            best, best_score = e.dst, score
    return best


# ---------------------------------------------------------------------------
# bundle


@dataclass
class PolicyBundle:
    pmm: PMM
    codebook: Codebook
    encoder: EncoderParams
    residual: Params
    state_embed: np.ndarray  # row q is the embedding of state q
    eps_tiebreak: float = 0.5
    fallback: str = "nearest-state"
    history: HistoryEncoder | None = None

    def __post_init__(self):
        if not 0.0 < self.eps_tiebreak < 1.0:
            raise ValueError("eps_tiebreak must lie in (0, 1)")
        want = self.state_embed.shape[1] + self.encoder.out_dim + self.pmm.action_dim
        if self.residual["W0"].shape[0] != want:
            raise ValueError(f"residual input {self.residual['W0'].shape[0]} != {want}")

    def residual_input(self, q, f, a_base) -> np.ndarray:
        return np.concatenate([self.state_embed[np.asarray(q)], f, a_base], axis=-1)


@dataclass
class ControllerState:
    q: int
    t: int = 0
    last_symbol: int | None = None
    last_action: np.ndarray | None = None
    actions: list = field(default_factory=list)
    symbols: list = field(default_factory=list)


def initial_controller_state(bundle: PolicyBundle) -> ControllerState:
    return ControllerState(bundle.pmm.initial)


def _fallback_state(bundle: PolicyBundle, cs: ControllerState, c: int) -> int | None:
    if bundle.fallback != "nearest-state" or bundle.history is None:
        return None
    cands = [s for s in bundle.pmm.states if c in s.nis]
    if not cands:
        return None
    h = bundle.history.embed(np.asarray(cs.actions).reshape(-1, bundle.pmm.action_dim),
                             np.asarray(cs.symbols, dtype=np.int64))
    sims = [float(s.centroid @ h) / (np.linalg.norm(h) or 1.0) for s in cands]
    return cands[int(np.argmax(sims))].id


def act(bundle: PolicyBundle, cs: ControllerState, obs) -> tuple[np.ndarray, int, str | None]:
    """Coarse edge action plus residual; returns (action, symbol, fallback used or None).

    May move ``cs.q`` when the nearest-state fallback fires.
    """
    f = bundle.encoder(np.asarray(obs, dtype=float))
    c = int(assign_symbols(bundle.codebook, f[None])[0])
    used = None
    if not bundle.pmm.out_edges(cs.q, c):
        q = _fallback_state(bundle, cs, c)
        if q is None:
            hold = np.zeros(bundle.pmm.action_dim) if cs.last_action is None else cs.last_action
            return hold.copy(), c, "hold"
        cs.q, used = q, "nearest-state"
    a_base = coarse_action(bundle.pmm, cs.q, c)
    a = a_base + mlp_forward(bundle.residual, bundle.residual_input(cs.q, f, a_base))
    return a, c, used


@dataclass
class EpisodeTrace:
    steps: list
    states: list
    success: bool
    status: str
    fallbacks: int

    def to_dict(self) -> dict:
        return {"success": self.success, "status": self.status, "fallbacks": self.fallbacks,
                "states": self.states, "steps": self.steps}


def run_episode(env, bundle: PolicyBundle, max_steps: int, seed=None) -> EpisodeTrace:
    obs = env.reset(seed)
    cs = initial_controller_state(bundle)
    steps, states, fallbacks = [], [cs.q], 0
    for t in range(max_steps):
        if env.done:
            break
        a, c, used = act(bundle, cs, obs)
        fallbacks += used is not None
        obs, done, _ = env.step(a)
        cs.actions.append(np.asarray(a, dtype=float))
        cs.symbols.append(c)
        cs.last_action, cs.last_symbol, cs.t = np.asarray(a, dtype=float), c, t + 1
        steps.append({"t": t, "q": cs.q, "symbol": c, "action": [float(v) for v in a], "fallback": used})
        if not done and used != "hold":
            f = bundle.encoder(np.asarray(obs, dtype=float))
            c_next = int(assign_symbols(bundle.codebook, f[None])[0])
            cs.q = next_state(bundle.pmm, cs.q, c, c_next, bundle.eps_tiebreak)
        states.append(cs.q)
    return EpisodeTrace(steps, states, bool(env.success), getattr(env, "status", ""), fallbacks)


# ---------------------------------------------------------------------------
# joint objective


@dataclass
class StepBatch:
    obs: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    symbols: np.ndarray

    def __len__(self):
        return len(self.symbols)

    def take(self, idx) -> "StepBatch":
        return StepBatch(self.obs[idx], self.actions[idx], self.states[idx], self.symbols[idx])


def pack_trainable(bundle: PolicyBundle) -> Params:
    p = {f"res.{k}": v for k, v in bundle.residual.items()}
    p["state_embed"] = bundle.state_embed
    if not bundle.encoder.identity:
        p.update({f"enc.{k}": v for k, v in bundle.encoder.params.items()})
    return p


def unpack_trainable(bundle: PolicyBundle, p: Params) -> PolicyBundle:
    res = {k[4:]: v for k, v in p.items() if k.startswith("res.")}
    enc = bundle.encoder
    if not enc.identity:
        enc = EncoderParams(enc.in_dim, {k[4:]: v for k, v in p.items() if k.startswith("enc.")}, False)
    return PolicyBundle(bundle.pmm, bundle.codebook, enc, res, p["state_embed"], bundle.eps_tiebreak,
                        bundle.fallback, bundle.history)


def base_action_table(pmm: PMM) -> dict:
    return {(q, c): coarse_action(pmm, q, c) for (q, c) in {(e.src, e.input) for e in pmm.edges}}


def joint_loss(p: Params, batch: StepBatch, a_base: np.ndarray, centers: np.ndarray, lambda_reg: float = 0.01,
               encoder_identity: bool = True, return_parts: bool = False):
    """Mean ||a - (a_base + residual)||^2 + lambda_reg * mean 0.5 ||f - mu_c||^2 and its gradients.

    ``a_base`` and ``centers`` (cluster centre of each step's symbol) are
    constants.  Gradients cover the residual, the state embedding and, when the
    encoder has parameters, the encoder.
    """
    n = len(batch)
    enc = None if encoder_identity else {k[4:]: v for k, v in p.items() if k.startswith("enc.")}
    res = {k[4:]: v for k, v in p.items() if k.startswith("res.")}
    SE = p["state_embed"]
    if enc is None:
        f = batch.obs
    else:
        f, enc_acts = mlp_forward(enc, batch.obs, return_cache=True)
    x = np.concatenate([SE[batch.states], f, a_base], axis=1)
    r, acts = mlp_forward(res, x, return_cache=True)
    diff = a_base + r - batch.actions
    dc = f - centers
    l_act = float(np.sum(diff**2) / n)
    l_center = float(0.5 * np.sum(dc**2) / n)
    loss = l_act + lambda_reg * l_center
    if not np.isfinite(loss):
        raise NonFiniteLoss("joint loss is not finite")

    g_res, dx = mlp_backward(res, acts, 2.0 * diff / n)
    g = {f"res.{k}": v for k, v in g_res.items()}
    d_se = SE.shape[1]
    gSE = np.zeros_like(SE)
    np.add.at(gSE, batch.states, dx[:, :d_se])
    g["state_embed"] = gSE
    if enc is not None:
        df = dx[:, d_se:d_se + f.shape[1]] + lambda_reg * dc / n
        g_enc, _ = mlp_backward(enc, enc_acts, df)
        g.update({f"enc.{k}": v for k, v in g_enc.items()})
    if return_parts:
        return loss, g, {"action": l_act, "center": l_center}
    return loss, g


def state_labels(pmm: PMM, ds: Dataset, eps_err: float | None = None) -> list[np.ndarray]:
    """Per-step state q_t from the lexicographically least surviving machine path."""
    out = []
    for t in ds:
        tr = nd_trace(pmm, t.symbols, t.actions if eps_err is not None else None, eps_err)
        if not tr.ok:
            raise NoValidPath(f"trajectory {t.traj_id} fails at step {tr.failed_at}")
        out.append(np.asarray(tr.path[:-1], dtype=np.int64))
    return out


def training_batch(pmm: PMM, ds: Dataset, eps_err: float | None = None) -> StepBatch:
    labels = state_labels(pmm, ds, eps_err)
    return StepBatch(np.concatenate([t.obs for t in ds]), np.concatenate([t.actions for t in ds]),
                     np.concatenate(labels), np.concatenate([t.symbols for t in ds]).astype(np.int64))


def _base_for(pmm: PMM, batch: StepBatch) -> np.ndarray:
    table = base_action_table(pmm)
    return np.stack([table[(int(q), int(c))] for q, c in zip(batch.states, batch.symbols)])


def fit_residual(bundle: PolicyBundle, batch: StepBatch, lambda_reg: float = 0.01, lr: float = 1e-3,
                 max_epochs: int = 200, batch_size: int = 256, tol: float = 1e-6, seed: int = 0):
    """M-step: minimise the joint loss with the machine and codebook frozen.

    Stops when the full-batch loss changes by less than ``tol`` between epochs
    or after ``max_epochs``, and keeps the parameters with the lowest
    full-batch loss seen.  Returns (bundle, loss curve).
    """
    rng = np.random.default_rng(seed)
    a_base = _base_for(bundle.pmm, batch)
    centers = bundle.codebook.centroids[batch.symbols]
    ident = bundle.encoder.identity
    p = pack_trainable(bundle)
    opt = Optimizer(lr=lr)
    curve = [joint_loss(p, batch, a_base, centers, lambda_reg, ident)[0]]
    best, best_loss = p, curve[0]
    for _ in range(max_epochs):
        order = rng.permutation(len(batch))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            _, g = joint_loss(p, batch.take(idx), a_base[idx], centers[idx], lambda_reg, ident)
            p = opt.step(p, g)
        curve.append(joint_loss(p, batch, a_base, centers, lambda_reg, ident)[0])
        if curve[-1] < best_loss:
            best, best_loss = p, curve[-1]
        if abs(curve[-2] - curve[-1]) < tol:
            break
    return unpack_trainable(bundle, best), curve


def action_mse(bundle: PolicyBundle, batch: StepBatch) -> float:
    a_base = _base_for(bundle.pmm, batch)
    f = bundle.encoder(batch.obs)
    pred = a_base + mlp_forward(bundle.residual, bundle.residual_input(batch.states, f, a_base))
    return float(np.mean(np.sum((pred - batch.actions) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# pipeline


def make_feature_encoder(ds: Dataset, kind: str) -> EncoderParams:
    if kind == "standardize":
        return standardizing_encoder(ds)
    return identity_encoder(ds.obs_dim)


@dataclass
class StructureResult:
    codebook: Codebook
    annotated: Dataset
    history: HistoryEncoder
    mined: MineResult


def extract_structure(ds: Dataset, enc: EncoderParams, cfg: PipelineConfig) -> StructureResult:
    """E-step: encode, discover symbols, annotate, train the history encoder, mine the machine.

    Seeds do not depend on the EM iteration, so an unchanged encoder yields the same structure.
    """
    feats = encode_dataset(enc, ds)
    cb, _ = discover_alphabet(feats, cfg.min_cluster_size or None, cfg.min_samples or None,
                              refine=cfg.refine_kmeans, seed=stage_seed(cfg.seed, "kmeans"),
                              selection=cfg.cluster_selection)
    ads = annotate_dataset(ds, cb, enc)
    henc = train_history_encoder(ads, history_config(cfg), n_symbols=len(cb))
    mined = mine(ads, henc, mine_config(cfg), alphabet_size=len(cb))
    return StructureResult(cb, ads, henc, mined)


def history_config(cfg: PipelineConfig) -> HistoryConfig:
    return HistoryConfig(cfg.encoder, cfg.rnn_hidden, cfg.symbol_embed, cfg.exact_dim, cfg.rnn_epochs, cfg.rnn_lr,
                         cfg.rnn_batch, cfg.lambda_contrast, cfg.normalize_output, stage_seed(cfg.seed, "rnn"))


def mine_config(cfg: PipelineConfig) -> MineConfig:
    return MineConfig(cfg.tau_sim, cfg.eps_err, cfg.max_eq_rounds, cfg.prune, cfg.eq_on_holdout,
                      cfg.holdout_fraction, stage_seed(cfg.seed, "holdout"))


def carry_state_embed(new_labels: np.ndarray, old_labels: np.ndarray, old_embed: np.ndarray,
                      fresh: np.ndarray) -> np.ndarray:
    """Give each new state the embedding of the old state most of its steps were labelled with."""
    out = fresh.copy()
    for q in np.unique(new_labels):
        votes = np.bincount(old_labels[new_labels == q], minlength=len(old_embed))
        out[q] = old_embed[int(np.argmax(votes))]
    return out


def new_bundle(struct: StructureResult, enc: EncoderParams, cfg: PipelineConfig, residual: Params | None = None,
               it: int = 0) -> PolicyBundle:
    pmm = struct.mined.pmm
    rng = np.random.default_rng(stage_seed(cfg.seed, f"residual/{it}"))
    d_in = cfg.state_embed_dim + enc.out_dim + pmm.action_dim
    if residual is None or residual["W0"].shape[0] != d_in:
        residual = init_mlp([d_in, *cfg.hidden_sizes, pmm.action_dim], rng, zero_last=True)
    state_embed = 0.1 * rng.standard_normal((pmm.n_states, cfg.state_embed_dim))
    return PolicyBundle(pmm, struct.codebook, enc, residual, state_embed, cfg.eps_tiebreak, cfg.fallback,
                        struct.history)


@dataclass
class EmResult:
    bundle: PolicyBundle
    iterations: list  # per-iteration summary dicts
    structure: StructureResult


def em_train(ds: Dataset, init_enc: EncoderParams | None, K: int, cfg: PipelineConfig) -> EmResult:
    """Alternate structure extraction and residual fitting K times.

    The residual net is warm-started across iterations and state embeddings are
    carried over by majority vote of the per-step state labels.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    enc = init_enc or make_feature_encoder(ds, cfg.feature_encoder)
    residual = prev_states = prev_embed = None
    iters = []
    for it in range(K):
        struct = extract_structure(ds, enc, cfg)
        bundle = new_bundle(struct, enc, cfg, residual, it)
        batch = training_batch(struct.mined.pmm, struct.annotated, cfg.eps_err)
        if prev_states is not None:
            bundle.state_embed = carry_state_embed(batch.states, prev_states, prev_embed, bundle.state_embed)
        bundle, curve = fit_residual(bundle, batch, cfg.lambda_reg, cfg.residual_lr, cfg.residual_epochs,
                                     cfg.residual_batch, cfg.residual_tol, stage_seed(cfg.seed, f"mstep/{it}"))
        enc, residual = bundle.encoder, bundle.residual
        prev_states, prev_embed = batch.states, bundle.state_embed
        iters.append({"iteration": it, "symbols": len(struct.codebook), "states": struct.mined.pmm.n_states,
                      "eq_rounds": len(struct.mined.rounds), "mstep_epochs": len(curve) - 1,
                      "loss_start": curve[0], "loss_end": curve[-1], "train_mse": action_mse(bundle, batch)})
        log.info("EM iteration %d: %d symbols, %d states, action mse %.5f", it, len(struct.codebook),
                 struct.mined.pmm.n_states, iters[-1]["train_mse"])
    return EmResult(bundle, iters, struct)


# ---------------------------------------------------------------------------
# behaviour-cloning baseline


@dataclass
class BcPolicy:
    params: Params

    def __call__(self, obs) -> np.ndarray:
        return mlp_forward(self.params, np.asarray(obs, dtype=float))


def train_bc(ds: Dataset, hidden=(64, 64), lr: float = 1e-3, epochs: int = 200, batch_size: int = 256,
             seed: int = 0, tol: float = 1e-6) -> tuple[BcPolicy, list]:
    from .nnkit import mlp_grads

    rng = np.random.default_rng(seed)
    X = np.concatenate([t.obs for t in ds])
    Y = np.concatenate([t.actions for t in ds])
    p = init_mlp([X.shape[1], *hidden, Y.shape[1]], rng)
    opt = Optimizer(lr=lr)
    curve = [mlp_grads(p, X, Y)[0]]
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            p = opt.step(p, mlp_grads(p, X[idx], Y[idx])[1])
        curve.append(mlp_grads(p, X, Y)[0])
        if abs(curve[-2] - curve[-1]) < tol:
            break
    return BcPolicy(p), curve


def run_bc_episode(env, policy: BcPolicy, max_steps: int, seed=None) -> bool:
    obs = env.reset(seed)
    for _ in range(max_steps):
        if env.done:
            break
        obs, _, _ = env.step(policy(obs))
    return bool(env.success)


# ---------------------------------------------------------------------------
# persistence


def save_bundle(bundle: PolicyBundle, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_pmm(bundle.pmm, os.path.join(directory, "pmm.json"))
    save_codebook(bundle.codebook, os.path.join(directory, "codebook.json"))
    _dump(bundle.encoder.to_dict(), os.path.join(directory, "encoder.json"))
    _dump(params_to_dict({**bundle.residual, "state_embed": bundle.state_embed}, {"kind": "residual"}),
          os.path.join(directory, "residual.json"))
    files = ["pmm.json", "codebook.json", "encoder.json", "residual.json"]
    if bundle.history is not None:
        save_history_encoder(bundle.history, os.path.join(directory, "history.json"))
        files.append("history.json")
    _dump({"eps_tiebreak": bundle.eps_tiebreak, "fallback": bundle.fallback, "files": files,
           "versions": {"bundle": BUNDLE_VERSION, "params": "nnkit_v1"}}, os.path.join(directory, "bundle.json"))


def load_bundle(directory) -> PolicyBundle:
    with open(os.path.join(directory, "bundle.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, "encoder.json"), encoding="utf-8") as fh:
        enc = EncoderParams.from_dict(json.load(fh))
    with open(os.path.join(directory, "residual.json"), encoding="utf-8") as fh:
        res = params_from_dict(json.load(fh))
    se = res.pop("state_embed")
    hist_path = os.path.join(directory, "history.json")
    hist = load_history_encoder(hist_path) if os.path.exists(hist_path) else None
    return PolicyBundle(load_pmm(os.path.join(directory, "pmm.json")),
                        load_codebook(os.path.join(directory, "codebook.json")), enc, res, se,
                        manifest["eps_tiebreak"], manifest["fallback"], hist)


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh)
        fh.write("\n")
