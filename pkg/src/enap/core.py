"""Shared domain types: trajectories, datasets and the probabilistic Mealy machine.

A :class:`PMM` is the mined high-level controller.  States carry a unit-norm
history centroid and their next-input set (NIS); edges carry the empirical
transition probability and the mean action observed along them.  Everything
here is plain data plus validation, tracing and (de)serialization.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

NORM_TOL = 1e-6
PROB_TOL = 1e-9


class EnapError(Exception):
    """Base class for all library errors."""


class ZeroVector(EnapError, ValueError):
    pass


class SymbolOutOfRange(EnapError, ValueError):
    pass


class DimensionMismatch(EnapError, ValueError):
    pass


class EmptyDataset(EnapError, ValueError):
    pass


def cosine_sim(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x)
    if n == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return x / n


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Step:
    obs: np.ndarray
    action: np.ndarray
    symbol: int | None = None


@dataclass(frozen=True)
class Trajectory:
    """One demonstration, stored column-wise.

    ``obs`` is (T, obs_dim), ``actions`` is (T, action_dim) and ``symbols`` is
    either None (before abstraction) or an int array of length T.
    """

    traj_id: str
    obs: np.ndarray
    actions: np.ndarray
    symbols: np.ndarray | None = None

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if len(obs) == 0:
            raise EmptyDataset(f"trajectory {self.traj_id!r} has no steps")
        if len(obs) != len(actions):
            raise DimensionMismatch(f"trajectory {self.traj_id!r}: {len(obs)} observations vs {len(actions)} actions")
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(actions))):
            raise ValueError(f"trajectory {self.traj_id!r} has non-finite entries")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "actions", actions)
        if self.symbols is not None:
            symbols = np.asarray(self.symbols, dtype=np.int64).reshape(-1)
            if len(symbols) != len(obs):
                raise DimensionMismatch(f"trajectory {self.traj_id!r}: symbol count differs from step count")
            if np.any(symbols < 0):
                raise SymbolOutOfRange(f"trajectory {self.traj_id!r} has negative symbols")
            object.__setattr__(self, "symbols", symbols)

    def __len__(self):
        return len(self.obs)

    @property
    def annotated(self) -> bool:
        return self.symbols is not None

    @property
    def steps(self) -> list[Step]:
        syms = [None] * len(self) if self.symbols is None else [int(s) for s in self.symbols]
        return [Step(o, a, s) for o, a, s in zip(self.obs, self.actions, syms)]

    def with_symbols(self, symbols) -> "Trajectory":
        return Trajectory(self.traj_id, self.obs, self.actions, symbols)


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if trajs:
            od, ad = trajs[0].obs.shape[1], trajs[0].actions.shape[1]
            for tr in trajs:
                if tr.obs.shape[1] != od or tr.actions.shape[1] != ad:
                    raise DimensionMismatch(f"trajectory {tr.traj_id!r} dimensions differ from the dataset")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].obs.shape[1] if self.trajectories else 0

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1] if self.trajectories else 0

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def annotated(self) -> bool:
        return bool(self.trajectories) and all(t.annotated for t in self.trajectories)

    def max_symbol(self) -> int:
        return max(int(t.symbols.max()) for t in self.trajectories)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.trajectories[i] for i in indices))


def _num(x) -> float | int:
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def write_trajectories(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in ds:
            syms = [None] * len(tr) if tr.symbols is None else tr.symbols.tolist()
            steps = [
                {"obs": [float(v) for v in o], "action": [float(v) for v in a], "symbol": s}
                for o, a, s in zip(tr.obs, tr.actions, syms)
            ]
            fh.write(json.dumps({"traj_id": tr.traj_id, "steps": steps}) + "\n")


def read_trajectories(path) -> Dataset:
    trajs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps = rec["steps"]
            syms = [s["symbol"] for s in steps]
            if all(s is None for s in syms):
                symbols = None
            elif any(s is None for s in syms):
                raise ValueError(f"trajectory {rec['traj_id']!r} is partially annotated")
            else:
                symbols = syms
            trajs.append(
                Trajectory(
                    str(rec["traj_id"]),
                    [s["obs"] for s in steps],
                    [s["action"] for s in steps],
                    symbols,
                )
            )
    return Dataset(tuple(trajs))


# ---------------------------------------------------------------------------
# probabilistic Mealy machine


@dataclass(frozen=True)
class PmmState:
    id: int
    centroid: np.ndarray
    nis: frozenset = frozenset()
    is_initial: bool = False


@dataclass(frozen=True)
class PmmEdge:
    src: int
    input: int
    dst: int
    prob: float
    action_mean: np.ndarray
    action_samples: int = 1


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


@dataclass(frozen=True)
class PMM:
    states: tuple[PmmState, ...]
    edges: tuple[PmmEdge, ...]
    alphabet_size: int
    action_dim: int

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @cached_property
    def initial(self) -> int:
        inits = [s.id for s in self.states if s.is_initial]
        if len(inits) != 1:
            raise ValueError(f"machine has {len(inits)} initial states")
        return inits[0]

    @cached_property
    def _out(self) -> dict[tuple[int, int], tuple[PmmEdge, ...]]:
        out = defaultdict(list)
        for e in self.edges:
            out[(e.src, e.input)].append(e)
        return {k: tuple(sorted(v, key=lambda e: e.dst)) for k, v in out.items()}

    @cached_property
    def _state_by_id(self) -> dict[int, PmmState]:
        return {s.id: s for s in self.states}

    def state(self, q: int) -> PmmState:
        return self._state_by_id[q]

    def out_edges(self, q: int, c: int) -> tuple[PmmEdge, ...]:
        return self._out.get((q, c), ())

    def successors(self, q: int) -> set[int]:
        return {e.dst for e in self.edges if e.src == q}

    def reachable(self, start: int | None = None) -> set[int]:
        start = self.initial if start is None else start
        adj = defaultdict(set)
        for e in self.edges:
            adj[e.src].add(e.dst)
        seen, stack = {start}, [start]
        while stack:
            q = stack.pop()
            for r in adj[q]:
                if r not in seen:
                    seen.add(r)
                    stack.append(r)
        return seen

    @cached_property
    def centroid_matrix(self) -> np.ndarray:
        return np.stack([s.centroid for s in self.states]) if self.states else np.zeros((0, 0))


def make_pmm(states, edges, alphabet_size: int, action_dim: int) -> PMM:
    """Build a machine from loose inputs, deriving each state's NIS from its edges."""
    nis = defaultdict(set)
    for e in edges:
        nis[e.src].add(int(e.input))
    fixed = tuple(
        PmmState(int(s.id), np.asarray(s.centroid, dtype=float), frozenset(nis[s.id]), bool(s.is_initial))
        for s in states
    )
    edges = tuple(
        PmmEdge(int(e.src), int(e.input), int(e.dst), float(e.prob), np.asarray(e.action_mean, dtype=float),
                int(e.action_samples))
        for e in sorted(edges, key=lambda e: (e.src, e.input, e.dst))
    )
    return PMM(fixed, edges, int(alphabet_size), int(action_dim))


def pmm_validate(pmm: PMM) -> list[Violation]:
    """Return every well-formedness violation; an empty list means the machine is valid."""
    out: list[Violation] = []
    ids = [s.id for s in pmm.states]
    if len(set(ids)) != len(ids):
        out.append(Violation("duplicate_state", f"state ids {ids}"))
    idset = set(ids)

    inits = [s.id for s in pmm.states if s.is_initial]
    if len(inits) != 1:
        out.append(Violation("initial_count", f"{len(inits)} initial states {inits}"))

    for s in pmm.states:
        c = np.asarray(s.centroid, dtype=float)
        if c.size == 0 or not np.all(np.isfinite(c)) or abs(np.linalg.norm(c) - 1.0) > NORM_TOL:
            out.append(Violation("centroid_norm", f"q{s.id} centroid is not unit norm"))

    seen = set()
    groups = defaultdict(float)
    labels = defaultdict(set)
    for e in pmm.edges:
        key = (e.src, e.input, e.dst)
        if key in seen:
            out.append(Violation("duplicate_edge", f"q{e.src} -c{e.input}-> q{e.dst}"))
        seen.add(key)
        if e.src not in idset or e.dst not in idset:
            out.append(Violation("dangling_edge", f"q{e.src} -c{e.input}-> q{e.dst}"))
        if not 0 <= e.input < pmm.alphabet_size:
            out.append(Violation("symbol_range", f"edge input c{e.input} outside alphabet of {pmm.alphabet_size}"))
        if not (0.0 < e.prob <= 1.0 + PROB_TOL):
            out.append(Violation("bad_probability", f"q{e.src} -c{e.input}-> q{e.dst} has p={e.prob}"))
        am = np.asarray(e.action_mean, dtype=float)
        if am.shape != (pmm.action_dim,) or not np.all(np.isfinite(am)):
            out.append(Violation("bad_action", f"q{e.src} -c{e.input}-> q{e.dst} action mean {am.tolist()}"))
        if e.action_samples < 1:
            out.append(Violation("bad_action", f"q{e.src} -c{e.input}-> q{e.dst} has no samples"))
        groups[(e.src, e.input)] += e.prob
        labels[e.src].add(e.input)

    for (q, c), total in sorted(groups.items()):
        if abs(total - 1.0) > PROB_TOL:
            out.append(Violation("normalization", f"q{q} on c{c} sums to {total!r}"))

    for s in pmm.states:
        if set(s.nis) != labels.get(s.id, set()):
            out.append(Violation("nis_mismatch", f"q{s.id} nis={sorted(s.nis)} edges={sorted(labels.get(s.id, ()))}"))

    if len(inits) == 1:
        unreachable = idset - pmm.reachable(inits[0])
        for q in sorted(unreachable):
            out.append(Violation("unreachable", f"q{q}"))
    return out


def _check_symbols(pmm: PMM, symbols: Sequence[int]) -> list[int]:
    syms = [int(c) for c in symbols]
    for c in syms:
        if not 0 <= c < pmm.alphabet_size:
            raise SymbolOutOfRange(f"symbol {c} outside alphabet of size {pmm.alphabet_size}")
    return syms


def pmm_trace(pmm: PMM, symbols: Sequence[int]) -> set[tuple[int, ...]]:
    """All state sequences from the initial state consistent with ``symbols``."""
    syms = _check_symbols(pmm, symbols)
    paths = {(pmm.initial,)}
    for c in syms:
        paths = {p + (e.dst,) for p in paths for e in pmm.out_edges(p[-1], c)}
        if not paths:
            break
    return paths


@dataclass
class TraceResult:
    """Outcome of following one trajectory through a machine.

    ``failed_at`` is the index of the first step with no surviving path (None on
    success).  ``path`` is the lexicographically smallest surviving state
    sequence (length T+1 on success) and ``n_paths`` counts surviving paths.
    """

    failed_at: int | None
    path: tuple[int, ...] = ()
    n_paths: int = 0

    @property
    def ok(self) -> bool:
        return self.failed_at is None


def nd_trace(pmm: PMM, symbols, actions=None, eps_err: float | None = None) -> TraceResult:
    """Frontier tracking of a symbol (and optionally action) sequence.

    When ``actions`` is given, an edge is usable at step t only if
    ``max|a_t - action_mean| <= eps_err``.
    """
    syms = _check_symbols(pmm, symbols)
    check = actions is not None
    if check:
        actions = np.asarray(actions, dtype=float)
    q0 = pmm.initial
    best = {q0: (q0,)}
    count = {q0: 1}
    for t, c in enumerate(syms):
        nbest: dict[int, tuple[int, ...]] = {}
        ncount: dict[int, int] = defaultdict(int)
        for q in sorted(best):
            for e in pmm.out_edges(q, c):
                if check and np.max(np.abs(actions[t] - e.action_mean)) > eps_err:
                    continue
                cand = best[q] + (e.dst,)
                if e.dst not in nbest or cand < nbest[e.dst]:
                    nbest[e.dst] = cand
                ncount[e.dst] += count[q]
        if not nbest:
            return TraceResult(failed_at=t)
        best, count = nbest, dict(ncount)
    return TraceResult(None, min(best.values()), sum(count.values()))


def pmm_isomorphic(a: PMM, b: PMM) -> bool:
    """Structural isomorphism: a state bijection preserving the initial state and labelled edges."""
    if a.n_states != b.n_states or len(a.edges) != len(b.edges):
        return False

    def sig(m: PMM, q):
        outs = sorted((e.input, e.dst == q) for e in m.edges if e.src == q)
        ins = sorted((e.input, e.src == q) for e in m.edges if e.dst == q)
        return tuple(outs), tuple(ins)

    sig_a = {s.id: sig(a, s.id) for s in a.states}
    sig_b = {s.id: sig(b, s.id) for s in b.states}
    edges_b = {(e.src, e.input, e.dst) for e in b.edges}
    order = sorted(sig_a, key=lambda q: (q != a.initial, q))

    def consistent(mapping):
        for e in a.edges:
            if e.src in mapping and e.dst in mapping:
                if (mapping[e.src], e.input, mapping[e.dst]) not in edges_b:
                    return False
        return True

    def search(i, mapping, used):
        if i == len(order):
            return True
        q = order[i]
        cands = [b.initial] if q == a.initial else [r for r in sig_b if r not in used and r != b.initial]
        for r in cands:
            if sig_b[r] != sig_a[q]:
                continue
            mapping[q] = r
            used.add(r)
            if consistent(mapping) and search(i + 1, mapping, used):
                return True
            del mapping[q]
            used.discard(r)
        return False

    return search(0, {}, set())


# ---------------------------------------------------------------------------
# serialization


def pmm_to_dict(pmm: PMM) -> dict:
    return {
        "alphabet_size": int(pmm.alphabet_size),
        "action_dim": int(pmm.action_dim),
        "initial": int(pmm.initial),
        "states": [
            {"id": s.id, "nis": sorted(int(c) for c in s.nis), "centroid": [float(v) for v in s.centroid]}
            for s in sorted(pmm.states, key=lambda s: s.id)
        ],
        "edges": [
            {
                "src": e.src,
                "input": e.input,
                "dst": e.dst,
                "prob": float(e.prob),
                "action_mean": [float(v) for v in e.action_mean],
                "action_samples": int(e.action_samples),
            }
            for e in sorted(pmm.edges, key=lambda e: (e.src, e.input, e.dst))
        ],
    }


def pmm_to_json(pmm: PMM) -> str:
    return json.dumps(pmm_to_dict(pmm), indent=1) + "\n"


def pmm_from_dict(d: dict) -> PMM:
    init = int(d["initial"])
    states = [
        PmmState(int(s["id"]), np.asarray(s["centroid"], dtype=float), frozenset(int(c) for c in s["nis"]),
                 int(s["id"]) == init)
        for s in d["states"]
    ]
    edges = [
        PmmEdge(int(e["src"]), int(e["input"]), int(e["dst"]), float(e["prob"]),
                np.asarray(e["action_mean"], dtype=float), int(e["action_samples"]))
        for e in d["edges"]
    ]
    return PMM(tuple(states), tuple(edges), int(d["alphabet_size"]), int(d["action_dim"]))


def pmm_from_json(text: str) -> PMM:
    return pmm_from_dict(json.loads(text))


def save_pmm(pmm: PMM, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(pmm_to_json(pmm))


def load_pmm(path) -> PMM:
    with open(path, encoding="utf-8") as fh:
        return pmm_from_json(fh.read())


def pmm_to_dot(pmm: PMM, name: str = "pmm") -> str:
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for s in sorted(pmm.states, key=lambda s: s.id):
        shape = "doublecircle" if s.is_initial else "circle"
        lines.append(f'  q{s.id} [label="q{s.id}", shape={shape}];')
    for e in sorted(pmm.edges, key=lambda e: (e.src, e.input, e.dst)):
        mean = ", ".join(f"{v:.2f}" for v in e.action_mean)
        lines.append(f'  q{e.src} -> q{e.dst} [label="c{e.input} | p={e.prob:.2f} | a=[{mean}]"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
