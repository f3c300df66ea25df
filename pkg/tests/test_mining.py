import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enap.core import Dataset, EmptyDataset, Trajectory, pmm_to_json, pmm_validate
from enap.envs import gridworld_demos
from enap.history import HistoryConfig, exact_history_encoder, train_history_encoder
from enap.mining import (
    MineConfig,
    add_counterexample,
    build_db,
    build_hypothesis,
    expand_until_closed,
    generalized_mq,
    initial_prefix_set,
    is_closed,
    mine,
    nd_equivalence_query,
    stable_phase_prune,
    traces_all,
)
from helpers import machine

D, R = np.eye(4)[1], np.eye(4)[3]


def exact(ds):
    return exact_history_encoder(ds.max_symbol() + 1, ds.action_dim)


def fl():
    ds = gridworld_demos()
    return ds, build_db(ds, exact(ds))


def test_mq_retrieves_own_step():
    t = Trajectory("a", np.zeros((3, 1)), [[0.1], [0.2], [0.3]], [0, 1, 2])
    db = build_db(Dataset((t,)), exact_history_encoder(3, 1))
    res = generalized_mq(db, db.prefixes[0][1], 0.99)
    assert len(res) == 1
    assert res[0].provenance == ("a", 1) and res[0].symbol == 1
    np.testing.assert_array_equal(res[0].action, [0.2])
    np.testing.assert_array_equal(res[0].next_embedding, db.prefixes[0][2])


def test_mq_with_impossible_threshold_is_empty():
    _, db = fl()
    assert generalized_mq(db, db.prefixes[0][2], 1.0 + 1e-9) == []


def test_mq_at_the_decision_cell():
    _, db = fl()
    res = generalized_mq(db, db.prefixes[0][3], 0.9)  # history c0 -> c4 -> c8, now at c9
    assert len(res) == 2
    assert {r.symbol for r in res} == {9}
    acts = sorted(tuple(r.action) for r in res)
    assert acts == sorted([tuple(D), tuple(R)])
    nxt = {tuple(np.round(r.next_embedding, 12)) for r in res}
    assert len(nxt) == 2


def test_single_trajectory_closes_with_every_prefix():
    t = Trajectory("a", np.zeros((5, 1)), np.zeros((5, 1)), [0, 1, 0, 1, 0])
    db = build_db(Dataset((t,)), exact_history_encoder(2, 1))
    U = expand_until_closed(initial_prefix_set(db, 0.9), db)
    assert len(U) == len(t) + 1  # one member per prefix, empty prefix included
    assert is_closed(U, db)


def test_identical_embeddings_close_with_one_member(monkeypatch):
    class Constant:
        def embed_prefixes(self, actions, symbols):
            return np.ones((len(symbols) + 1, 3))

    from enap import mining

    t = Trajectory("a", np.zeros((4, 1)), np.zeros((4, 1)), [0, 1, 0, 1])
    monkeypatch.setattr(mining, "embed_trajectory", lambda enc, traj: enc.embed_prefixes(traj.actions, traj.symbols))
    db = build_db(Dataset((t,)), Constant())
    U = expand_until_closed(initial_prefix_set(db, 0.9), db)
    assert len(U) == 1


def test_counterexample_insertion_and_dedup():
    ds, db = fl()
    U = initial_prefix_set(db, 0.9)
    assert add_counterexample(U, db.prefixes[0], 3, "tau1") == 3
    # members now cover c0, c0c4 and c0c4c8
    for k in range(4):
        assert U.max_similarity(db.prefixes[0][k]) >= 0.999
    assert add_counterexample(U, db.prefixes[0], 3, "tau1") == 0
    with pytest.raises(ValueError):
        add_counterexample(U, db.prefixes[0], 7)


def test_hypothesis_of_one_trajectory_is_a_chain():
    t = Trajectory("a", np.zeros((4, 1)), [[0.0], [1.0], [2.0], [3.0]], [0, 1, 2, 1])
    db = build_db(Dataset((t,)), exact_history_encoder(3, 1))
    hyp = build_hypothesis(expand_until_closed(initial_prefix_set(db, 0.9), db), db)
    pmm = hyp.pmm
    assert pmm.n_states == 5
    assert [(e.src, e.input, e.dst) for e in pmm.edges] == [(0, 0, 1), (1, 1, 2), (2, 2, 3), (3, 1, 4)]
    assert all(e.prob == 1.0 for e in pmm.edges)
    assert pmm_validate(pmm) == []


def test_split_frequencies():
    trajs = [Trajectory(f"x{i}", np.zeros((2, 1)), [[0.0 if i < 7 else 1.0], [0.0]], [0, 1]) for i in range(10)]
    db = build_db(Dataset(tuple(trajs)), exact_history_encoder(2, 1))
    pmm = build_hypothesis(expand_until_closed(initial_prefix_set(db, 0.9), db), db).pmm
    first = sorted(pmm.out_edges(pmm.initial, 0), key=lambda e: -e.prob)
    assert len(first) == 2
    assert first[0].prob == pytest.approx(0.7, abs=1e-9)
    assert first[1].prob == pytest.approx(0.3, abs=1e-9)
    assert first[0].action_samples == 7 and first[1].action_samples == 3


def test_unclosed_prefix_set_is_rejected():
    from enap.mining import NotClosed

    _, db = fl()
    with pytest.raises(NotClosed):
        build_hypothesis(initial_prefix_set(db, 0.9), db)


def test_branching_state_has_two_successors():
    ds, db = fl()
    U = expand_until_closed(initial_prefix_set(db, 0.9), db)
    hyp = build_hypothesis(U, db)
    q = hyp.member_of_state.index(int(U.nearest(db.prefixes[0][3])[0]))
    out = hyp.pmm.out_edges(q, 9)
    assert len(out) == 2 and len({e.dst for e in out}) == 2
    assert [e.prob for e in out] == [0.5, 0.5]


def test_equivalence_query_flags_perturbed_action():
    acts = np.array([[0.0], [0.5], [1.0], [0.5]])
    t = Trajectory("a", np.zeros((4, 1)), acts, [0, 1, 1, 0])
    res = mine(Dataset((t,)), exact_history_encoder(2, 1), MineConfig(eps_err=0.1, prune=False))
    assert nd_equivalence_query(res.pmm, t.symbols, acts, 0.1) is None
    bad = acts.copy()
    bad[2] += 0.2
    assert nd_equivalence_query(res.pmm, t.symbols, bad, 0.1) == 2


def test_pruning_rules():
    one = machine(2, [(0, 1, 0, 0.5), (0, 1, 1, 0.5)])
    assert stable_phase_prune(one).n_states == 1
    no_loops = machine(3, [(0, 0, 1, 1.0), (1, 1, 2, 1.0)])
    assert pmm_to_json(stable_phase_prune(no_loops)) == pmm_to_json(no_loops)
    chain = machine(4, [(q, 0, q, 0.5) for q in range(3)] + [(q, 0, q + 1, 0.5) for q in range(3)] + [(3, 0, 3, 1.0)])
    pruned = stable_phase_prune(chain)
    assert pruned.n_states == 1
    assert pmm_validate(pruned) == []
    e = pruned.edges[0]
    assert (e.src, e.dst, e.prob) == (0, 0, 1.0)


def test_pruning_pools_action_means_by_count():
    m = machine(2, [(0, 1, 0, 0.75, [0.0, 0.0], 3), (0, 1, 1, 0.25, [4.0, 0.0], 1), (1, 1, 1, 1.0, [2.0, 0.0], 2)])
    e = stable_phase_prune(m).edges[0]
    assert e.action_samples == 6
    np.testing.assert_allclose(e.action_mean, [(0 * 3 + 4 + 2 * 2) / 6, 0.0])


def test_constant_trajectory_collapses_to_a_self_loop():
    t = Trajectory("c", np.zeros((30, 1)), np.full((30, 1), 0.5), [0] * 30)
    ds = Dataset((t,))
    for seed in range(3):
        enc = train_history_encoder(ds, HistoryConfig(hidden=16, embed=4, epochs=30, lr=1e-2, seed=seed))
        pmm = mine(ds, enc, MineConfig(tau_sim=0.9)).pmm
        loops = [e for e in pmm.edges if e.src == e.dst]
        assert pmm.n_states <= 3
        assert len(loops) == 1 and loops[0].action_samples >= 28


def test_empty_dataset_is_rejected():
    with pytest.raises(EmptyDataset):
        mine(Dataset(()), exact_history_encoder(2, 1))


def test_mining_is_deterministic():
    ds = gridworld_demos()
    a = mine(ds, exact(ds))
    b = mine(ds, exact(ds))

    assert pmm_to_json(a.pmm) == pmm_to_json(b.pmm)
    assert a.diagnostics_jsonl() == b.diagnostics_jsonl()


def test_holdout_mode_mines_on_the_rest():
    from enap.envs import gridworld_demo_set

    ds = gridworld_demo_set(10, seed=1)
    res = mine(ds, exact(ds), MineConfig(eq_on_holdout=True, holdout_fraction=0.2))
    assert len(set(res.db.traj_ids)) == 8
    assert pmm_validate(res.pmm) == []


@st.composite
def symbolic_datasets(draw):
    n = draw(st.integers(1, 5))
    trajs = []
    for i in range(n):
        T = draw(st.integers(1, 8))
        syms = draw(st.lists(st.integers(0, 2), min_size=T, max_size=T))
        acts = [[float(draw(st.sampled_from([0.0, 0.5, 1.0])))] for _ in range(T)]
        trajs.append(Trajectory(f"t{i}", np.zeros((T, 1)), acts, syms))
    return Dataset(tuple(trajs))


@settings(max_examples=40, deadline=None)
@given(symbolic_datasets(), st.sampled_from([0.5, 0.9, 0.99]))
def test_mined_machines_are_valid_and_trace_their_data(ds, tau):
    res = mine(ds, exact_history_encoder(3, 1), MineConfig(tau_sim=tau, eps_err=0.1))
    for pmm in (res.unpruned, res.pmm):
        assert pmm_validate(pmm) == []
        assert traces_all(pmm, ds, 0.1)
    assert res.pmm.n_states <= res.unpruned.n_states


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.data())
def test_prune_reaches_a_fixed_point(n, data):
    edges = []
    for q in range(n):
        c = data.draw(st.integers(0, 1))
        if data.draw(st.booleans()):
            edges += [(q, c, q, 0.5), (q, c, (q + 1) % n, 0.5)]
        else:
            edges.append((q, c, (q + 1) % n, 1.0))
    pruned = stable_phase_prune(machine(n, edges, alphabet_size=2))
    assert pmm_validate(pruned) == []
    assert pmm_to_json(stable_phase_prune(pruned)) == pmm_to_json(pruned)
    loops = {(e.src, e.input) for e in pruned.edges if e.src == e.dst}
    assert not any((e.src, e.input) in loops and e.src != e.dst for e in pruned.edges)
