import numpy as np
import pytest

from enap.envs import (
    HOLES,
    TAU1,
    TAU2,
    GridWorld,
    MultiPhase2D,
    SteppedAfterTerminal,
    cells_to_actions,
    gridworld_demo_set,
    gridworld_demos,
    gridworld_step,
    multiphase2d_demos,
)


def test_gridworld_moves():
    assert gridworld_step(GridWorld(), "D") == (4, "none")
    assert gridworld_step(GridWorld(), "U") == (0, "none")
    assert gridworld_step(GridWorld(agent=4), "R") == (5, "hole")


def test_stepping_after_terminal_raises():
    env = GridWorld(agent=4)
    env.step("R")
    with pytest.raises(SteppedAfterTerminal):
        env.step("L")


def test_walkthrough_demos_shape():
    ds = gridworld_demos()
    t1, t2 = ds
    assert len(t1) == 6 and len(t2) == 6
    assert t1.obs.shape == (6, 16) and t1.actions.shape == (6, 4)
    assert list(t1.symbols) == list(TAU1[:-1])
    diverge = next(k for k, (a, b) in enumerate(zip(TAU1, TAU2)) if a != b)
    assert TAU1[diverge - 1] == 9


@pytest.mark.parametrize("cells", [TAU1, TAU2])
def test_walkthrough_routes_replay_to_goal(cells):
    env = GridWorld()
    env.reset()
    visited = [0]
    for a in cells_to_actions(cells):
        cell, status = gridworld_step(env, a)
        visited.append(cell)
    assert status == "goal"
    assert not set(visited) & HOLES
    assert tuple(visited) == cells


def test_demo_set_contains_both_routes():
    ds = gridworld_demo_set(20, seed=3)
    routes = {tuple(t.symbols) for t in ds}
    assert routes == {TAU1[:-1], TAU2[:-1]}
    assert [t.traj_id for t in ds] == [t.traj_id for t in gridworld_demo_set(20, seed=3)]


def test_single_noise_free_demo_reaches_a_goal():
    ds = multiphase2d_demos(1, seed=0, noise=0.0)
    env = MultiPhase2D()
    t = ds[0]
    last = t.obs[-1, :2] + env.dt * t.actions[-1]
    assert min(np.linalg.norm(last - np.asarray(g)) for g in env.goals) <= env.success_radius


def test_bimodal_demos_cover_both_goals():
    ds = multiphase2d_demos(200, seed=0)
    cues = [int(np.argmax(t.obs[-1, 2:])) for t in ds]
    assert cues.count(0) >= 80 and cues.count(1) >= 80


def test_multiphase_demos_are_deterministic():
    a = multiphase2d_demos(5, seed=4)
    b = multiphase2d_demos(5, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.obs, y.obs)
        np.testing.assert_array_equal(x.actions, y.actions)


def test_goal_before_waypoint_fails():
    env = MultiPhase2D()
    env.reset(0, goal_index=0)
    env.pos = np.array(env.goals[1], dtype=float)
    env.step([0.0, 0.0])
    assert env.status == "failed" and not env.success


def test_expert_solves_every_seed():
    env = MultiPhase2D()
    for seed in range(10):
        env.reset(seed)
        while not env.done:
            env.step(env.expert_action())
        assert env.success
