"""Mining a probabilistic Mealy machine from embedded demonstrations.

The extended L* loop: membership queries retrieve every recorded step whose
history embedding is similar to a prefix-set member; the prefix set grows until
every retrieved next-history is covered (closedness); a hypothesis machine is
read off by frequency counting; an equivalence query follows each trajectory
non-deterministically through the machine with an action tolerance and
returns the first failing step, whose prefixes join the prefix set.  A final
pass merges stable phases (self-looping states absorb their same-input
successors).
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    PMM,
    Dataset,
    EmptyDataset,
    EnapError,
    PmmEdge,
    PmmState,
    make_pmm,
    nd_trace,
)
from .history import HistoryEncoder, UnannotatedDataset, embed_trajectory

log = logging.getLogger(__name__)


class BudgetExceeded(EnapError, RuntimeError):
    pass


class MaxRoundsExceeded(EnapError, RuntimeError):
    pass


class MiningStalled(EnapError, RuntimeError):
    """A counterexample whose prefixes are all already covered: the loop cannot make progress."""


class NotClosed(EnapError, ValueError):
    pass


def _unit_rows(X: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


@dataclass
class MineConfig:
    tau_sim: float = 0.9
    eps_err: float = 0.1
    max_eq_rounds: int = 50
    prune: bool = True
    eq_on_holdout: bool = False
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_sim <= 1.0:
            raise ValueError(f"tau_sim must lie in (0, 1], got {self.tau_sim}")
        if self.eps_err <= 0:
            raise ValueError("eps_err must be positive")


# ---------------------------------------------------------------------------
# database and prefix set


@dataclass
class EmbeddedDb:
    """One row per recorded step: (h(tau[:t]), a_t, c_t, h(tau[:t+1])) with provenance (traj_id, t)."""

    traj_ids: list
    prefixes: list  # per trajectory (T+1, d) unit-normalised prefix embeddings
    actions: list
    symbols: list
    src: np.ndarray
    act: np.ndarray
    sym: np.ndarray
    nxt: np.ndarray
    prov: np.ndarray  # (N, 2): trajectory index, step

    def __len__(self):
        return len(self.sym)

    @property
    def dim(self) -> int:
        return self.src.shape[1]


def build_db(ds: Dataset, enc: HistoryEncoder) -> EmbeddedDb:
    if len(ds) == 0:
        raise EmptyDataset("cannot mine an empty dataset")
    if not ds.annotated:
        raise UnannotatedDataset("mining needs a symbol-annotated dataset")
    order = sorted(range(len(ds)), key=lambda i: ds[i].traj_id)
    trajs = [ds[i] for i in order]
    prefixes = [_unit_rows(embed_trajectory(enc, t)) for t in trajs]
    src = np.concatenate([H[:-1] for H in prefixes])
    nxt = np.concatenate([H[1:] for H in prefixes])
    act = np.concatenate([t.actions for t in trajs])
    sym = np.concatenate([t.symbols for t in trajs]).astype(np.int64)
    prov = np.concatenate([np.stack([np.full(len(t), i), np.arange(len(t))], axis=1) for i, t in enumerate(trajs)])
    return EmbeddedDb([t.traj_id for t in trajs], prefixes, [t.actions for t in trajs],
                      [t.symbols for t in trajs], src, act, sym, nxt, prov)


class PrefixSet:
    """Ordered, frozen centroids; a new member must be below tau_sim to every existing one."""

    def __init__(self, dim: int, tau_sim: float):
        self.tau_sim = tau_sim
        self._M = np.zeros((16, dim))
        self.n = 0
        self.provenance: list = []
        self.closed_upto = 0  # members before this index have been expanded

    def __len__(self):
        return self.n

    @property
    def matrix(self) -> np.ndarray:
        return self._M[: self.n]

    def __getitem__(self, i) -> np.ndarray:
        return self._M[i]

    def max_similarity(self, h: np.ndarray) -> float:
        return float(np.max(self.matrix @ h)) if self.n else -np.inf

    def nearest(self, H: np.ndarray) -> np.ndarray:
        """Index of the most similar member for each row; ties go to the earliest member."""
        return np.argmax(np.atleast_2d(H) @ self.matrix.T, axis=1)

    def add(self, h: np.ndarray, provenance) -> bool:
        h = h / np.linalg.norm(h)
        if self.max_similarity(h) >= self.tau_sim:
            return False
        if self.n == len(self._M):
            self._M = np.concatenate([self._M, np.zeros_like(self._M)])
        self._M[self.n] = h
        self.n += 1
        self.provenance.append(provenance)
        return True


def initial_prefix_set(db: EmbeddedDb, tau_sim: float) -> PrefixSet:
    U = PrefixSet(db.dim, tau_sim)
    U.add(db.prefixes[0][0], (db.traj_ids[0], 0))
    return U


# ---------------------------------------------------------------------------
# queries


def mq_indices(db: EmbeddedDb, u: np.ndarray, tau_sim: float) -> np.ndarray:
    return np.flatnonzero(db.src @ (u / np.linalg.norm(u)) >= tau_sim)


@dataclass(frozen=True)
class MqAnswer:
    action: np.ndarray
    next_embedding: np.ndarray
    symbol: int
    provenance: tuple


def generalized_mq(db: EmbeddedDb, u, tau_sim: float) -> list[MqAnswer]:
    """Every recorded step whose history is within tau_sim of u, in (traj_id, t) order."""
    out = []
    for j in mq_indices(db, np.asarray(u, dtype=float), tau_sim):
        i, t = db.prov[j]
        out.append(MqAnswer(db.act[j], db.nxt[j], int(db.sym[j]), (db.traj_ids[i], int(t))))
    return out


def expand_until_closed(U: PrefixSet, db: EmbeddedDb, tau_sim: float | None = None) -> PrefixSet:
    """Grow U until every next-history retrieved from any member is covered."""
    tau = U.tau_sim if tau_sim is None else tau_sim
    if len(U) == 0:
        raise ValueError("prefix set is empty")
    while U.closed_upto < len(U):
        for j in mq_indices(db, U[U.closed_upto], tau):
            i, t = db.prov[j]
            U.add(db.nxt[j], (db.traj_ids[i], int(t) + 1))
            if len(U) > len(db) + 1:
                raise BudgetExceeded(f"prefix set grew past {len(db) + 1} members")
        U.closed_upto += 1
    return U


def is_closed(U: PrefixSet, db: EmbeddedDb) -> bool:
    for k in range(len(U)):
        for j in mq_indices(db, U[k], U.tau_sim):
            if U.max_similarity(db.nxt[j]) < U.tau_sim:
                return False
    return True


@dataclass
class Hypothesis:
    pmm: PMM
    member_of_state: list  # state id -> prefix-set index


def build_hypothesis(U: PrefixSet, db: EmbeddedDb, alphabet_size: int | None = None,
                     check_closed: bool = True) -> Hypothesis:
    """One state per reachable member; edges grouped by (input, nearest member of next history).

    Members are renumbered densely in prefix-set order after dropping those that
    no retrieved step leads to.
    """
    if check_closed and not is_closed(U, db):
        raise NotClosed("prefix set is not closed with respect to the database")
    alphabet_size = int(db.sym.max()) + 1 if alphabet_size is None else alphabet_size
    dest = U.nearest(db.nxt)
    groups: dict = {}
    for k in range(len(U)):
        idx = mq_indices(db, U[k], U.tau_sim)
        by = defaultdict(list)
        for j in idx:
            by[(int(db.sym[j]), int(dest[j]))].append(j)
        groups[k] = by

    # keep members reachable from member 0
    seen, stack = {0}, [0]
    while stack:
        k = stack.pop()
        for (_, d) in groups[k]:
            if d not in seen:
                seen.add(d)
                stack.append(d)
    members = sorted(seen)
    sid = {k: i for i, k in enumerate(members)}

    edges = []
    for k in members:
        totals = defaultdict(int)
        for (c, _), js in groups[k].items():
            totals[c] += len(js)
        for (c, d), js in sorted(groups[k].items()):
            edges.append(PmmEdge(sid[k], c, sid[d], len(js) / totals[c], db.act[js].mean(axis=0), len(js)))
    states = [PmmState(sid[k], U[k].copy(), frozenset(), k == 0) for k in members]
    return Hypothesis(make_pmm(states, edges, alphabet_size, db.act.shape[1]), members)


def nd_equivalence_query(pmm: PMM, symbols, actions, eps_err: float) -> int | None:
    """None when some machine path reproduces the trajectory, else the first failing step index."""
    return nd_trace(pmm, symbols, actions, eps_err).failed_at


def add_counterexample(U: PrefixSet, prefixes: np.ndarray, t: int, traj_id: str = "") -> int:
    """Insert h(tau[:j]) for j = 1..t unless already covered; returns the number added."""
    if t > len(prefixes) - 1:
        raise ValueError(f"counterexample step {t} beyond trajectory length {len(prefixes) - 1}")
    return sum(U.add(prefixes[j], (traj_id, j)) for j in range(1, t + 1))


# ---------------------------------------------------------------------------
# stable-phase pruning


def _merge(pmm: PMM, keep: int, gone: int) -> PMM:
    def r(q):
        return keep if q == gone else q

    pooled: dict = {}
    for e in pmm.edges:
        key = (r(e.src), e.input, r(e.dst))
        n, s = pooled.get(key, (0, 0.0))
        pooled[key] = (n + e.action_samples, s + e.action_samples * np.asarray(e.action_mean))
    totals = defaultdict(int)
    for (q, c, _), (n, _) in pooled.items():
        totals[(q, c)] += n
    edges = [PmmEdge(q, c, d, n / totals[(q, c)], s / n, n) for (q, c, d), (n, s) in pooled.items()]
    init = pmm.initial
    states = [PmmState(s.id, s.centroid, frozenset(), s.id == r(init)) for s in pmm.states if s.id != gone]
    return make_pmm(states, edges, pmm.alphabet_size, pmm.action_dim)


def stable_phase_prune(pmm: PMM, verifier: Callable[[PMM], bool] | None = None) -> PMM:
    """Merge q' into q whenever q self-loops on c and has a c-edge to q', until nothing changes.

    Candidates are visited in ascending (src, input, dst) order and the scan
    restarts after every merge.  A ``verifier`` may veto a merge (e.g. one that
    would make a training trajectory untraceable); vetoed pairs are skipped.
    State ids of survivors are kept; call ``renumber`` for a dense numbering.
    """
    refused = set()
    while True:
        loops = {(e.src, e.input) for e in pmm.edges if e.src == e.dst}
        merged = False
        for e in pmm.edges:  # already sorted by (src, input, dst)
            if e.src == e.dst or (e.src, e.input) not in loops or (e.src, e.dst) in refused:
                continue
            cand = _merge(pmm, e.src, e.dst)
            if verifier is not None and not verifier(cand):
                refused.add((e.src, e.dst))
                continue
            pmm = cand
            merged = True
            break
        if not merged:
            return pmm


def renumber(pmm: PMM) -> PMM:
    ids = {s.id: i for i, s in enumerate(sorted(pmm.states, key=lambda s: s.id))}
    states = [PmmState(ids[s.id], s.centroid, frozenset(), s.is_initial) for s in pmm.states]
    edges = [PmmEdge(ids[e.src], e.input, ids[e.dst], e.prob, e.action_mean, e.action_samples) for e in pmm.edges]
    return make_pmm(sorted(states, key=lambda s: s.id), edges, pmm.alphabet_size, pmm.action_dim)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class MineResult:
    pmm: PMM
    unpruned: PMM
    prefix_set: PrefixSet
    db: EmbeddedDb
    rounds: list = field(default_factory=list)
    counterexamples: list = field(default_factory=list)  # (traj_id, t, symbol prefix)

    def diagnostics_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.rounds)


def _split(ds: Dataset, cfg: MineConfig) -> tuple[Dataset, Dataset]:
    if not cfg.eq_on_holdout:
        return ds, ds
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(ds))
    n_test = max(1, int(round(cfg.holdout_fraction * len(ds))))
    if n_test >= len(ds):
        raise ValueError("holdout leaves no training trajectories")
    return ds.subset(sorted(perm[n_test:])), ds.subset(sorted(perm[:n_test]))


def traces_all(pmm: PMM, ds: Dataset, eps_err: float) -> bool:
    return all(nd_trace(pmm, t.symbols, t.actions, eps_err).ok for t in ds)


def mine(ds: Dataset, enc: HistoryEncoder, cfg: MineConfig | None = None, alphabet_size: int | None = None) -> MineResult:
    """Alternate closedness expansion, hypothesis construction and equivalence queries until EQ passes."""
    cfg = cfg or MineConfig()
    if len(ds) == 0:
        raise EmptyDataset("cannot mine an empty dataset")
    train, test = _split(ds, cfg)
    db = build_db(train, enc)
    alphabet_size = max(int(ds.max_symbol()) + 1, alphabet_size or 0)
    tests = sorted(test, key=lambda t: t.traj_id)
    test_prefixes = [_unit_rows(embed_trajectory(enc, t)) for t in tests]
    U = initial_prefix_set(db, cfg.tau_sim)
    rounds, cexs = [], []
    for rnd in range(1, cfg.max_eq_rounds + 1):
        expand_until_closed(U, db)
        hyp = build_hypothesis(U, db, alphabet_size, check_closed=False)
        cex = None
        for traj, H in zip(tests, test_prefixes):
            t = nd_equivalence_query(hyp.pmm, traj.symbols, traj.actions, cfg.eps_err)
            if t is not None:
                cex = (traj, H, t)
                break
        size = len(U)
        if cex is None:
            rounds.append({"round": rnd, "|U|": size, "states": hyp.pmm.n_states, "counterexample": None})
            log.info("round %d: |U|=%d, EQ passed with %d states", rnd, size, hyp.pmm.n_states)
            break
        traj, H, t = cex
        rounds.append({"round": rnd, "|U|": size, "states": hyp.pmm.n_states,
                       "counterexample": {"traj_id": traj.traj_id, "t": int(t)}})
        cexs.append((traj.traj_id, int(t), tuple(int(c) for c in traj.symbols[: t])))
        log.info("round %d: |U|=%d, counterexample %s at step %d", rnd, size, traj.traj_id, t)
        if add_counterexample(U, H, t, traj.traj_id) == 0:
            raise MiningStalled(
                f"counterexample {traj.traj_id}@{t} adds no prefix at tau_sim={cfg.tau_sim}; "
                f"the action pooled on some edge differs from the demo by more than eps_err={cfg.eps_err}")
    else:
        raise MaxRoundsExceeded(f"EQ still failing after {cfg.max_eq_rounds} rounds")

    unpruned = hyp.pmm
    pmm = unpruned
    if cfg.prune:
        pmm = renumber(stable_phase_prune(unpruned, lambda m: traces_all(m, test, cfg.eps_err)))
    return MineResult(pmm, unpruned, U, db, rounds, cexs)
