"""Small builders shared by the test modules."""

import numpy as np

from enap.core import PmmEdge, PmmState, make_pmm


def basis(i, d=4):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def machine(n_states, edges, alphabet_size=4, action_dim=2, initial=0):
    """edges: tuples (src, input, dst, prob[, action_mean[, samples]])."""
    states = [PmmState(q, basis(q % 8, 8), frozenset(), q == initial) for q in range(n_states)]
    out = []
    for e in edges:
        src, c, dst, p = e[:4]
        mean = np.asarray(e[4], dtype=float) if len(e) > 4 else np.zeros(action_dim)
        n = e[5] if len(e) > 5 else 1
        out.append(PmmEdge(src, c, dst, p, mean, n))
    return make_pmm(states, out, alphabet_size, action_dim)


# acceptance results keyed by criterion number: (passed, detail); printed in the terminal summary
ACCEPTANCE: dict = {}
PRODUCED_COUNT = [0]


def report(n: int, checks: dict, detail: str = ""):
    """Record and print one line for criterion n, then fail with the names of unmet checks."""
    failed = [k for k, ok in checks.items() if not ok]
    line = detail + ("" if not failed else f" | unmet: {', '.join(failed)}")
    ACCEPTANCE[n] = (not failed, line)
    print(f"criterion {n}: {'PASS' if not failed else 'FAIL'}  {line}")
    assert not failed, f"criterion {n} unmet: {failed}"
