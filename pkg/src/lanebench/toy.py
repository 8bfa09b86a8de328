"""Three-state corridor MDP used to sanity-check the trainers.

States 0, 1, 2 sit in a row. ``RIGHT`` moves right and, from state 2,
exits with reward +1. ``LEFT`` moves left and, from state 0, exits with a
small reward. ``KEEP`` stays put. Every other transition pays nothing, so
with discounting the best policy is to head right from everywhere even
though exiting left from state 0 pays something immediately.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lanebench.actions import N_ACTIONS, Action
from lanebench.scenarios import make_rng

N_STATES = 3
RIGHT_EXIT_REWARD = 1.0
LEFT_EXIT_REWARD = 0.1
TOY_GAMMA = 0.9
STEP_LIMIT = 20


def transition(state: int, action: int):
    """``(next_state, reward, terminal)``; next_state is None on exit."""
    action = Action(action)
    if action == Action.RIGHT:
        if state == N_STATES - 1:
            return None, RIGHT_EXIT_REWARD, True
        return state + 1, 0.0, False
    if action == Action.LEFT:
        if state == 0:
            return None, LEFT_EXIT_REWARD, True
        return state - 1, 0.0, False
    return state, 0.0, False


def value_iteration(gamma: float = TOY_GAMMA, tol: float = 1e-12):
    """Optimal state values and action values of the corridor."""
    v = np.zeros(N_STATES)
    while True:
        q = np.zeros((N_STATES, N_ACTIONS))
        for s in range(N_STATES):
            for a in range(N_ACTIONS):
                nxt, r, term = transition(s, a)
                q[s, a] = r + (0.0 if term else gamma * v[nxt])
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new, q
        v = v_new


def optimal_policy(gamma: float = TOY_GAMMA) -> np.ndarray:
    return value_iteration(gamma)[1].argmax(axis=1)


@dataclass(frozen=True)
class ToyStep:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class CorridorEnv:
    """Gym-style wrapper with one-hot observations and a random start state."""

    n_actions = N_ACTIONS
    observation_shape = (N_STATES,)

    def __init__(self, step_limit: int = STEP_LIMIT):
        self.step_limit = step_limit
        self.state = 0
        self.t = 0
        self.done = True

    @staticmethod
    def encode(state: int) -> np.ndarray:
        obs = np.zeros(N_STATES)
        obs[state] = 1.0
        return obs

    def reset(self, seed: int) -> np.ndarray:
        self.state = int(make_rng(seed, 0).integers(N_STATES))
        self.t = 0
        self.done = False
        return self.encode(self.state)

    def step(self, action) -> ToyStep:
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        nxt, r, term = transition(self.state, int(action))
        self.t += 1
        if not term:
            self.state = nxt
        self.done = term or self.t >= self.step_limit
        return ToyStep(self.encode(self.state), r, self.done, {"state": self.state, "exit": term})
