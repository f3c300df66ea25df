"""Deterministic desk-scale environments and their scripted demonstrators.

``GridWorld`` is the 4x4 FrozenLake map used for the discrete walkthrough;
``MultiPhase2D`` is a point mass that must touch a waypoint and then reach one
of two goals, whose identity is revealed only once the waypoint is reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, EnapError, Trajectory

ACTIONS = ("U", "D", "L", "R")
_MOVES = {"U": (-1, 0), "D": (1, 0), "L": (0, -1), "R": (0, 1)}

# hole layout of the standard 4x4 map; consistent with both walkthrough demos
HOLES = frozenset({5, 7, 11, 12})
GOAL = 15

TAU1 = (0, 4, 8, 9, 13, 14, 15)
TAU2 = (0, 4, 8, 9, 10, 14, 15)


class SteppedAfterTerminal(EnapError, RuntimeError):
    pass


def one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def action_vector(name: str) -> np.ndarray:
    return one_hot(ACTIONS.index(name), len(ACTIONS))


@dataclass
class GridWorld:
    width: int = 4
    height: int = 4
    holes: frozenset = HOLES
    goal: int = GOAL
    agent: int = 0
    status: str = "none"

    @property
    def obs_dim(self) -> int:
        return self.width * self.height

    @property
    def action_dim(self) -> int:
        return len(ACTIONS)

    def observe(self) -> np.ndarray:
        return one_hot(self.agent, self.obs_dim)

    def reset(self, seed=None) -> np.ndarray:
        self.agent = 0
        self.status = "none"
        return self.observe()

    @property
    def done(self) -> bool:
        return self.status != "none"

    @property
    def success(self) -> bool:
        return self.status == "goal"

    def move(self, cell: int, action) -> int:
        name = action if isinstance(action, str) else ACTIONS[int(np.argmax(action))]
        dr, dc = _MOVES[name]
        r, c = divmod(cell, self.width)
        r2, c2 = r + dr, c + dc
        if not (0 <= r2 < self.height and 0 <= c2 < self.width):
            return cell
        return r2 * self.width + c2

    def step(self, action):
        """Apply one move; returns (observation, done, success)."""
        if self.done:
            raise SteppedAfterTerminal(f"episode already ended ({self.status})")
        self.agent = self.move(self.agent, action)
        if self.agent in self.holes:
            self.status = "hole"
        elif self.agent == self.goal:
            self.status = "goal"
        return self.observe(), self.done, self.success


def gridworld_step(env: GridWorld, action) -> tuple[int, str]:
    env.step(action)
    return env.agent, env.status


def cells_to_actions(cells) -> list[str]:
    out = []
    for a, b in zip(cells[:-1], cells[1:]):
        r1, c1 = divmod(a, 4)
        r2, c2 = divmod(b, 4)
        for name, (dr, dc) in _MOVES.items():
            if (r2 - r1, c2 - c1) == (dr, dc):
                out.append(name)
                break
        else:
            raise ValueError(f"cells {a} and {b} are not adjacent")
    return out


def gridworld_trajectory(cells, traj_id: str) -> Trajectory:
    """Steps are the non-terminal cells; the final cell is only reached, never acted in."""
    acts = cells_to_actions(cells)
    obs = [one_hot(c, 16) for c in cells[:-1]]
    return Trajectory(traj_id, obs, [action_vector(a) for a in acts], list(cells[:-1]))


def gridworld_demos() -> Dataset:
    return Dataset((gridworld_trajectory(TAU1, "tau1"), gridworld_trajectory(TAU2, "tau2")))


def gridworld_demo_set(n: int, seed: int = 0) -> Dataset:
    """``n`` noise-free copies of the two walkthrough routes, mode chosen per demo by seed."""
    rng = np.random.default_rng(seed)
    modes = rng.integers(0, 2, size=n)
    return Dataset(tuple(gridworld_trajectory(TAU1 if m == 0 else TAU2, f"demo-{i:04d}") for i, m in enumerate(modes)))


# ---------------------------------------------------------------------------
# continuous multi-phase task


@dataclass
class MultiPhase2D:
    """Point mass: reach the waypoint, then the goal whose cue appears there.

    Observation is ``[x, y, cue_1, cue_2]``; the cue is all-zero until the
    waypoint has been visited.  Actions are velocities clipped to [-1, 1]^2.
    """

    start: tuple = (0.0, 0.0)
    waypoint: tuple = (1.5, 0.0)
    goals: tuple = ((3.0, 1.2), (3.0, -1.2))
    start_radius: float = 0.3
    waypoint_radius: float = 0.2
    success_radius: float = 0.15
    dt: float = 0.1
    max_steps: int = 120
    pos: np.ndarray = field(default_factory=lambda: np.zeros(2))
    goal_index: int = 0
    visited: bool = False
    status: str = "none"
    t: int = 0

    obs_dim = 4
    action_dim = 2

    def observe(self) -> np.ndarray:
        cue = one_hot(self.goal_index, 2) if self.visited else np.zeros(2)
        return np.concatenate([self.pos, cue])

    def reset(self, seed=None, goal_index: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0, 2 * np.pi)
        rad = self.start_radius * np.sqrt(rng.uniform())
        self.pos = np.asarray(self.start, dtype=float) + rad * np.array([np.cos(ang), np.sin(ang)])
        self.goal_index = int(rng.integers(0, 2)) if goal_index is None else int(goal_index)
        self.visited = False
        self.status = "none"
        self.t = 0
        self._update()
        return self.observe()

    @property
    def done(self) -> bool:
        return self.status != "none"

    @property
    def success(self) -> bool:
        return self.status == "goal"

    def _update(self):
        if not self.visited and np.linalg.norm(self.pos - np.asarray(self.waypoint)) <= self.waypoint_radius:
            self.visited = True
        for g in self.goals:
            if np.linalg.norm(self.pos - np.asarray(g)) <= self.success_radius:
                self.status = "goal" if self.visited else "failed"
                return
        if self.t >= self.max_steps:
            self.status = "timeout"

    def step(self, action):
        if self.done:
            raise SteppedAfterTerminal(f"episode already ended ({self.status})")
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        self.pos = self.pos + self.dt * a
        self.t += 1
        self._update()
        return self.observe(), self.done, self.success

    def expert_action(self, speed: float = 1.0, gain: float = 4.0) -> np.ndarray:
        target = np.asarray(self.goals[self.goal_index] if self.visited else self.waypoint, dtype=float)
        d = target - self.pos
        dist = np.linalg.norm(d)
        if dist == 0.0:
            return np.zeros(2)
        return d / dist * min(speed, gain * dist)


def multiphase2d_demos(n: int, seed: int = 0, mode: str = "bimodal", noise: float = 0.01) -> Dataset:
    """Scripted expert demonstrations; the bimodal mode alternates the two goals."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    if mode not in ("bimodal", "single-goal"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    env = MultiPhase2D()
    trajs = []
    for i in range(n):
        ep_seed = int(rng.integers(2**31))
        obs = env.reset(ep_seed, goal_index=0)
        if mode == "bimodal":
            env.goal_index = i % 2
        else:
            # nearest goal from the waypoint; ties resolve to the first goal
            w = np.asarray(env.waypoint)
            env.goal_index = int(np.argmin([np.linalg.norm(np.asarray(g) - w) for g in env.goals]))
        obs = env.observe()
        O, A = [], []
        while not env.done:
            a = env.expert_action() + noise * rng.standard_normal(2)
            a = np.clip(a, -1.0, 1.0)
            O.append(obs)
            A.append(a)
            obs, _, _ = env.step(a)
        if not env.success:
            raise RuntimeError(f"scripted demo {i} ended with {env.status}")
        trajs.append(Trajectory(f"demo-{i:04d}", O, A))
    return Dataset(tuple(trajs))
