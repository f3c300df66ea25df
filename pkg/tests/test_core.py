import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enap.core import (
    Dataset,
    DimensionMismatch,
    EmptyDataset,
    PmmEdge,
    PmmState,
    SymbolOutOfRange,
    Trajectory,
    ZeroVector,
    cosine_sim,
    nd_trace,
    pmm_from_json,
    pmm_isomorphic,
    pmm_to_dot,
    pmm_to_json,
    pmm_trace,
    pmm_validate,
    read_trajectories,
    unit,
    write_trajectories,
)
from helpers import basis, machine


def kinds(violations):
    return sorted(v.kind for v in violations)


def test_validate_normalized_split_is_clean():
    pmm = machine(3, [(0, 1, 1, 0.6), (0, 1, 2, 0.4)])
    assert pmm_validate(pmm) == []


def test_validate_reports_normalization():
    pmm = machine(3, [(0, 1, 1, 0.6), (0, 1, 2, 0.3)])
    assert kinds(pmm_validate(pmm)) == ["normalization"]


def test_validate_reports_nis_mismatch():
    states = [PmmState(0, basis(0), frozenset({1}), True), PmmState(1, basis(1), frozenset())]
    edges = [PmmEdge(0, 2, 1, 1.0, np.zeros(2), 1)]
    from enap.core import PMM

    pmm = PMM(states, edges, 4, 2)
    assert "nis_mismatch" in kinds(pmm_validate(pmm))


def test_validate_reports_structural_problems():
    states = [PmmState(0, basis(0), frozenset({0}), True), PmmState(1, basis(1), frozenset(), True),
              PmmState(2, basis(2) * 2, frozenset())]
    edges = [PmmEdge(0, 0, 7, 1.0, np.zeros(2), 1)]
    from enap.core import PMM

    found = set(kinds(pmm_validate(PMM(states, edges, 4, 2))))
    assert {"initial_count", "centroid_norm", "dangling_edge"} <= found


def test_validate_reports_unreachable_state():
    pmm = machine(3, [(0, 0, 1, 1.0)])
    assert kinds(pmm_validate(pmm)) == ["unreachable"]


def test_make_pmm_derives_nis_and_sorts_edges():
    pmm = machine(2, [(1, 3, 1, 1.0), (0, 2, 1, 1.0), (0, 0, 0, 1.0)])
    assert pmm.state(0).nis == frozenset({0, 2})
    assert [(e.src, e.input) for e in pmm.edges] == [(0, 0), (0, 2), (1, 3)]


def test_trace_follows_all_paths():
    pmm = machine(3, [(0, 1, 1, 0.5), (0, 1, 2, 0.5), (1, 2, 1, 1.0), (2, 2, 2, 1.0)])
    assert pmm_trace(pmm, [1, 2]) == {(0, 1, 1), (0, 2, 2)}
    res = nd_trace(pmm, [1, 2])
    assert res.ok and res.path == (0, 1, 1) and res.n_paths == 2


def test_trace_reports_first_failing_step():
    pmm = machine(2, [(0, 1, 1, 1.0)])
    assert nd_trace(pmm, [1, 1]).failed_at == 1
    with pytest.raises(SymbolOutOfRange):
        nd_trace(pmm, [9])


def test_trace_applies_action_tolerance():
    pmm = machine(2, [(0, 1, 1, 1.0, [1.0, 0.0])])
    assert nd_trace(pmm, [1], [[1.05, 0.0]], 0.1).ok
    assert nd_trace(pmm, [1], [[1.2, 0.0]], 0.1).failed_at == 0


def test_json_round_trip_is_exact():
    pmm = machine(3, [(0, 1, 1, 0.25, [0.1, 1 / 3], 1), (0, 1, 2, 0.75, [2.0, -1.0], 3), (2, 0, 2, 1.0)])
    text = pmm_to_json(pmm)
    assert pmm_to_json(pmm_from_json(text)) == text
    assert list(json.loads(text)) == ["alphabet_size", "action_dim", "initial", "states", "edges"]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.data())
def test_json_round_trip_random_machines(n, data):
    edges = []
    for q in range(n):
        dst = data.draw(st.integers(0, n - 1))
        mean = data.draw(st.lists(st.floats(-5, 5), min_size=2, max_size=2))
        edges.append((q, data.draw(st.integers(0, 3)), dst, 1.0, mean, data.draw(st.integers(1, 9))))
    pmm = machine(n, edges)
    back = pmm_from_json(pmm_to_json(pmm))
    assert pmm_to_json(back) == pmm_to_json(pmm)
    assert pmm_isomorphic(back, pmm)


def test_isomorphism_ignores_state_numbering():
    a = machine(3, [(0, 0, 1, 1.0), (1, 1, 2, 1.0), (2, 2, 2, 1.0)])
    b = machine(3, [(2, 0, 0, 1.0), (0, 1, 1, 1.0), (1, 2, 1, 1.0)], initial=2)
    c = machine(3, [(0, 0, 1, 1.0), (1, 1, 2, 1.0), (2, 1, 2, 1.0)])
    assert pmm_isomorphic(a, b)
    assert not pmm_isomorphic(a, c)


def test_dot_has_one_line_per_state_and_edge():
    dot = pmm_to_dot(machine(1, [(0, 2, 0, 1.0, [1.0, 0.5])]))
    node_lines = [l for l in dot.splitlines() if l.strip().startswith("q") and "->" not in l]
    edge_lines = [l for l in dot.splitlines() if "->" in l]
    assert len(node_lines) == 1 and len(edge_lines) == 1
    assert "c2 | p=1.00 | a=[1.00, 0.50]" in edge_lines[0]


def test_trajectory_invariants():
    with pytest.raises(EmptyDataset):
        Trajectory("t", np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(DimensionMismatch):
        Trajectory("t", np.zeros((3, 2)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        Trajectory("t", [[np.nan, 0.0]], [[0.0]])
    with pytest.raises(DimensionMismatch):
        Dataset((Trajectory("a", np.zeros((2, 2)), np.zeros((2, 1))), Trajectory("b", np.zeros((2, 3)), np.zeros((2, 1)))))


def test_trajectory_steps_carry_symbols():
    tr = Trajectory("t", np.eye(3), np.ones((3, 2)), [2, 0, 1])
    assert [s.symbol for s in tr.steps] == [2, 0, 1]
    assert Trajectory("u", np.eye(2), np.ones((2, 1))).steps[0].symbol is None


def test_jsonl_round_trip(tmp_path):
    ds = Dataset((Trajectory("a", np.eye(2), [[0.5], [-1.25]], [1, 0]), Trajectory("b", np.ones((1, 2)), [[3.0]], [1])))
    path = tmp_path / "d.jsonl"
    write_trajectories(ds, path)
    back = read_trajectories(path)
    assert [t.traj_id for t in back] == ["a", "b"]
    for x, y in zip(ds, back):
        np.testing.assert_array_equal(x.obs, y.obs)
        np.testing.assert_array_equal(x.actions, y.actions)
        np.testing.assert_array_equal(x.symbols, y.symbols)


def test_cosine_helpers():
    assert cosine_sim([1, 0], [0, 2]) == 0.0
    assert cosine_sim([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(ZeroVector):
        cosine_sim([0, 0], [1, 0])
    assert np.linalg.norm(unit([3, 4])) == pytest.approx(1.0)
