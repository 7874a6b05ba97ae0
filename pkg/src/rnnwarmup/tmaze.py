"""T-shaped corridor POMDP with a treasure behind the junction.

The agent starts at the corridor entrance of one of two layouts (treasure
up or treasure down, each with probability 1/2), only learns the layout
from its very first observation, walks a corridor of length L, and must
turn the right way at the junction. Moves that would leave the maze
bounce (state unchanged, reward -0.1); reaching the treasure cell pays
+4, the opposite cell -0.1; both junction arms are terminal. Observations
are deterministic: the layout name at the entrance cell, "corridor"
strictly inside, "junction" at the junction column.

Network encodings are fixed one-hots in the orders below: observations
[up, down, corridor, junction], actions [right, up, left, down].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

LAYOUT_UP = "up"
LAYOUT_DOWN = "down"

ACTIONS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # right, up, left, down
RIGHT, UP, LEFT, DOWN = range(4)

OBS_UP, OBS_DOWN, OBS_CORRIDOR, OBS_JUNCTION = range(4)
OBS_NAMES = ("up", "down", "corridor", "junction")

NUM_ACTIONS = 4
NUM_OBSERVATIONS = 4


@dataclass(frozen=True)
class TMazeConfig:
    length: int
    discount: float = 0.98

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("corridor length must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")


@dataclass(frozen=True)
class MazeState:
    layout: str
    position: tuple


def valid_positions(length):
    cells = {(x, 0) for x in range(length + 1)}
    cells.add((length, 1))
    cells.add((length, -1))
    return cells


def is_terminal(config, state):
    return state.position in ((config.length, 1), (config.length, -1))


def observe(config, state):
    x, y = state.position
    if (x, y) == (0, 0):
        return OBS_UP if state.layout == LAYOUT_UP else OBS_DOWN
    if y == 0 and 1 <= x <= config.length - 1:
        return OBS_CORRIDOR
    return OBS_JUNCTION


def reset(config, rng):
    layout = LAYOUT_UP if rng.random() < 0.5 else LAYOUT_DOWN
    state = MazeState(layout, (0, 0))
    return state, observe(config, state)


def step(config, state, action_index):
    """Deterministic transition; terminal states absorb with zero reward."""
    if not 0 <= action_index < NUM_ACTIONS:
        raise ValueError(f"action index must be in 0..3, got {action_index}")
    if is_terminal(config, state):
        return state, 0.0, observe(config, state), True
    dx, dy = ACTIONS[action_index]
    x, y = state.position
    target = (x + dx, y + dy)
    moved = target in valid_positions(config.length)
    nxt = MazeState(state.layout, target if moved else state.position)
    if is_terminal(config, nxt):
        treasure = (config.length, 1) if nxt.layout == LAYOUT_UP else (config.length, -1)
        reward = 4.0 if nxt.position == treasure else -0.1
    else:
        reward = -0.1 if nxt.position == state.position else 0.0
    return nxt, reward, observe(config, nxt), is_terminal(config, nxt)


def exploration_action(rng):
    """Right with probability 1/2, each other action with probability 1/6."""
    r = rng.random()
    if r < 0.5:
        return RIGHT
    return UP + int((r - 0.5) * 6.0)


def truncation_horizon(length, right=0.5, left=1 / 6):
    """Episode cap: corridor length over the expected rightward drift."""
    r, l = Fraction(right), Fraction(left)
    if r <= l:
        raise ValueError("rightward probability must exceed leftward probability")
    return int(math.ceil(Fraction(length) / (r - l)))


def encode_observation(obs_index):
    vec = np.zeros(NUM_OBSERVATIONS)
    vec[obs_index] = 1.0
    return vec


def encode_action(action_index):
    vec = np.zeros(NUM_ACTIONS)
    vec[action_index] = 1.0
    return vec
