"""Textbook L* over a finite alphabet with a minimally adequate teacher.

Words are plain strings whose characters are the alphabet letters.  The
learner keeps an observation table (U, E, T), restores closedness and
consistency, proposes a DFA, and folds every counterexample and its prefixes
into U.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .core import EnapError


class UnfilledTable(EnapError, ValueError):
    pass


class NotClosed(EnapError, ValueError):
    pass


class NotConsistent(EnapError, ValueError):
    pass


class TeacherInconsistent(EnapError, RuntimeError):
    pass


class Teacher(Protocol):
    def membership(self, word: str) -> int: ...

    def equivalence(self, dfa: "DFA") -> str | None: ...


@dataclass
class DFA:
    alphabet: tuple
    n_states: int
    initial: int
    accepting: frozenset
    delta: dict  # (state, letter) -> state

    def run(self, word: str) -> int:
        q = self.initial
        for ch in word:
            q = self.delta[(q, ch)]
        return q

    def accepts(self, word: str) -> bool:
        return self.run(word) in self.accepting

    def to_dict(self) -> dict:
        return {
            "alphabet": list(self.alphabet),
            "n_states": self.n_states,
            "initial": self.initial,
            "accepting": sorted(self.accepting),
            "transitions": [{"src": q, "input": a, "dst": d} for (q, a), d in sorted(self.delta.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DFA":
        delta = {(t["src"], t["input"]): t["dst"] for t in d["transitions"]}
        return cls(tuple(d["alphabet"]), d["n_states"], d["initial"], frozenset(d["accepting"]), delta)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_dot(self, name: str = "dfa") -> str:
        lines = [f"digraph {name} {{", "  rankdir=LR;"]
        for q in range(self.n_states):
            shape = "doublecircle" if q in self.accepting else "circle"
            lines.append(f'  q{q} [label="q{q}", shape={shape}];')
        lines.append(f"  start [shape=point]; start -> q{self.initial};")
        for (q, a), d in sorted(self.delta.items()):
            lines.append(f'  q{q} -> q{d} [label="{a}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def words_upto(alphabet, max_len: int):
    """All words of length <= max_len in shortlex order following the given letter order."""
    for n in range(max_len + 1):
        for w in itertools.product(alphabet, repeat=n):
            yield "".join(w)


@dataclass
class BruteForceTeacher:
    """Membership from a predicate; equivalence by exhaustive comparison up to ``max_len``.

    ``order`` fixes the letter order of the enumeration, which decides which
    counterexample is reported first.
    """

    predicate: Callable[[str], bool]
    alphabet: tuple
    max_len: int = 8
    order: tuple | None = None
    mq_count: int = 0

    def membership(self, word: str) -> int:
        self.mq_count += 1
        return int(bool(self.predicate(word)))

    def equivalence(self, dfa: DFA) -> str | None:
        for w in words_upto(self.order or self.alphabet, self.max_len):
            if dfa.accepts(w) != bool(self.predicate(w)):
                return w
        return None


@dataclass
class ObservationTable:
    alphabet: tuple
    U: list = field(default_factory=lambda: [""])
    E: list = field(default_factory=lambda: [""])
    T: dict = field(default_factory=dict)

    @property
    def lower(self) -> list[str]:
        upper = set(self.U)
        out = []
        for u in self.U:
            for a in self.alphabet:
                if u + a not in upper and u + a not in out:
                    out.append(u + a)
        return out

    def fill(self, mq: Callable[[str], int]) -> None:
        for s in self.U + self.lower:
            for e in self.E:
                if s + e not in self.T:
                    self.T[s + e] = mq(s + e)

    def row(self, s: str) -> tuple:
        try:
            return tuple(self.T[s + e] for e in self.E)
        except KeyError as exc:
            raise UnfilledTable(f"missing entry {exc.args[0]!r}") from None

    def render(self) -> str:
        cols = ["eps" if e == "" else e for e in self.E]
        lines = ["\t".join(["T"] + cols)]
        for s in self.U:
            lines.append("\t".join([s or "eps"] + [str(v) for v in self.row(s)]))
        lines.append("-" * 8)
        for s in self.lower:
            lines.append("\t".join([s] + [str(v) for v in self.row(s)]))
        return "\n".join(lines)


def is_closed(tbl: ObservationTable) -> str | None:
    """None when closed, else the lexicographically first lower row matching no upper row."""
    upper = {tbl.row(u) for u in tbl.U}
    for s in sorted(tbl.lower):
        if tbl.row(s) not in upper:
            return s
    return None


def is_consistent(tbl: ObservationTable) -> str | None:
    """None when consistent, else the distinguishing suffix a.e (shortest, then lexicographic)."""
    found = []
    for u1, u2 in itertools.combinations(tbl.U, 2):
        if tbl.row(u1) != tbl.row(u2):
            continue
        for a in tbl.alphabet:
            for e in tbl.E:
                if tbl.T[u1 + a + e] != tbl.T[u2 + a + e]:
                    found.append(a + e)
    if not found:
        return None
    return min(found, key=lambda w: (len(w), w))


def build_hypothesis(tbl: ObservationTable) -> DFA:
    if is_closed(tbl) is not None:
        raise NotClosed("table is not closed")
    if is_consistent(tbl) is not None:
        raise NotConsistent("table is not consistent")
    ids: dict[tuple, int] = {}
    for u in tbl.U:
        ids.setdefault(tbl.row(u), len(ids))
    delta = {}
    accepting = set()
    for u in tbl.U:
        q = ids[tbl.row(u)]
        if tbl.T[u]:
            accepting.add(q)
        for a in tbl.alphabet:
            delta[(q, a)] = ids[tbl.row(u + a)]
    return DFA(tuple(tbl.alphabet), len(ids), ids[tbl.row("")], frozenset(accepting), delta)


@dataclass
class LearnResult:
    dfa: DFA
    table: ObservationTable
    events: list


def learn(teacher: Teacher, alphabet, max_rounds: int = 100) -> DFA:
    return run_lstar(teacher, alphabet, max_rounds).dfa


def run_lstar(teacher: Teacher, alphabet, max_rounds: int = 100) -> LearnResult:
    """Run L* to completion, keeping the final table and a log of every table change."""
    alphabet = tuple(alphabet)
    events = []
    cache: dict[str, int] = {}

    def mq(w: str) -> int:
        if w not in cache:
            cache[w] = teacher.membership(w)
        return cache[w]

    tbl = ObservationTable(alphabet)
    for round_no in range(1, max_rounds + 1):
        while True:
            tbl.fill(mq)
            r = is_closed(tbl)
            if r is not None:
                tbl.U.append(r)
                events.append({"round": round_no, "event": "promote", "row": r})
                continue
            s = is_consistent(tbl)
            if s is not None:
                tbl.E.append(s)
                events.append({"round": round_no, "event": "add_suffix", "suffix": s})
                continue
            break
        hyp = build_hypothesis(tbl)
        events.append({"round": round_no, "event": "hypothesis", "states": hyp.n_states})
        cex = teacher.equivalence(hyp)
        if cex is None:
            events.append({"round": round_no, "event": "accepted", "states": hyp.n_states})
            return LearnResult(hyp, tbl, events)
        if hyp.accepts(cex) == bool(mq(cex)):
            raise TeacherInconsistent(f"counterexample {cex!r} agrees with the hypothesis")
        events.append({"round": round_no, "event": "counterexample", "word": cex})
        for i in range(1, len(cex) + 1):
            if cex[:i] not in tbl.U:
                tbl.U.append(cex[:i])
    raise RuntimeError(f"no accepted hypothesis within {max_rounds} rounds")


def even_ab(word: str) -> bool:
    return word.count("a") % 2 == 0 and word.count("b") % 2 == 0
