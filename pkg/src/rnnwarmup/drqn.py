"""Recurrent Q-learning over observation/action histories.

The Q-network consumes one step input per timestep, the concatenation
[previous action one-hot (4) | observation one-hot (4)] with a zero
action slot at the first step, and reads Q-values for the four moves off
a linear head on the final recurrent state. Episodes are generated
epsilon-greedily (exploration draws go through the maze's exploration
policy) and cut at the truncation horizon; transitions keep the full
history prefix so training always unrolls from the episode start.
Targets come from a periodically synced snapshot of the online network
and bootstrap everywhere except environment-terminal successors — a
truncation cut is not terminal and still bootstraps.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tmaze
from .cells import Network
from .training import Adam
from .vaa import VaaConfig, estimate_vaa_mean
from .warmup import WarmupConfig, warmup

INPUT_DIM = tmaze.NUM_ACTIONS + tmaze.NUM_OBSERVATIONS


@dataclass(frozen=True)
class DrqnConfig:
    episodes: int
    buffer_capacity: int = 50_000
    target_period: int = 25  # episodes between target syncs
    grad_steps: int = 10  # updates after each episode
    batch_size: int = 32
    exploration_rate: float = 0.1
    learning_rate: float = 1e-3
    prefill_fraction: float = 0.1
    warmup_enabled: bool = False
    warmup_config: WarmupConfig | None = None  # None -> defaults
    horizon: int | None = None  # None -> derived from the maze length
    eval_period: int = 1
    optimal_window: int = 50
    stop_when_optimal: bool = False
    probe_period: int = 0  # episodes between buffer-based attractor probes
    probe_stabilization: int = 10_000
    probe_batch: int = 32
    smoothing_window: int = 50

    def __post_init__(self):
        for field in ("episodes",):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0")
        for field in ("buffer_capacity", "target_period", "grad_steps", "batch_size"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration rate must lie in [0, 1]")


@dataclass(frozen=True)
class HistoryTransition:
    """One step of interaction plus the history that led to it.

    ``observations`` is o_0..o_t and ``actions`` a_0..a_{t-1}; together
    with ``action`` (a_t) and ``next_observation`` they reconstruct the
    successor history.
    """

    observations: tuple
    actions: tuple
    action: int
    reward: float
    next_observation: int
    terminal: bool

    def next_history(self):
        return self.observations + (self.next_observation,), self.actions + (self.action,)


class ReplayBuffer:
    """FIFO ring of transitions: once full, inserting evicts the oldest."""

    def __init__(self, capacity):
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def add(self, transition):
        self._items.append(transition)

    def sample(self, rng, batch_size):
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[int(i)] for i in idx]

    def histories(self):
        """Every stored history prefix, encoded as network input sequences."""
        return [encode_history(t.observations, t.actions) for t in self._items]


def encode_history(observations, actions):
    """(T, 8) input sequence for a history of T observations."""
    T = len(observations)
    arr = np.zeros((T, INPUT_DIM))
    arr[np.arange(T), tmaze.NUM_ACTIONS + np.asarray(observations, dtype=int)] = 1.0
    if T > 1:
        arr[np.arange(1, T), np.asarray(actions, dtype=int)] = 1.0
    return arr


def q_forward(network, observations, actions):
    """Q-values over the four actions for one full history."""
    if len(observations) < 1:
        raise ValueError("history must contain at least the initial observation")
    encoded = encode_history(observations, actions)
    with ad.no_grad():
        _, outputs = network.unroll(ad.Tensor(encoded[:, None, :]))
        q = network.head(outputs[-1])
    return q.data[0].copy()


def q_batch(network, encoded_histories):
    """Batched Q-values (B, 4) for variable-length encoded histories."""
    lengths = np.array([h.shape[0] for h in encoded_histories])
    t_max = int(lengths.max())
    batch = len(encoded_histories)
    padded = np.zeros((t_max, batch, INPUT_DIM))
    for i, h in enumerate(encoded_histories):
        padded[: lengths[i], i] = h
    _, outputs = network.unroll(ad.Tensor(padded))
    last = outputs[(lengths - 1, np.arange(batch))]
    return network.head(last)


def act_epsilon_greedy(network, observations, actions, exploration_rate, rng):
    """Exploration-policy draw with probability eps, else greedy argmax."""
    if rng.random() < exploration_rate:
        return tmaze.exploration_action(rng)
    return int(np.argmax(q_forward(network, observations, actions)))


def compute_targets(transitions, target_network, discount):
    """r for terminal successors, else r + discount * max_a Q'(eta', a)."""
    rewards = np.array([t.reward for t in transitions])
    terminal = np.array([t.terminal for t in transitions])
    targets = rewards.copy()
    live = [i for i, t in enumerate(transitions) if not t.terminal]
    if live and discount != 0.0:
        encoded = [encode_history(*transitions[i].next_history()) for i in live]
        with ad.no_grad():
            q_next = q_batch(target_network, encoded).data
        targets[live] += discount * q_next.max(axis=1)
    return targets, terminal


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    return_: float
    smoothed_return: float
    eval_return: float | None
    vaa: float | None
    epsilon: float
    buffer_size: int


@dataclass
class DrqnResult:
    trace: list
    optimal_episode: int | None
    episodes_run: int


class _IncrementalActor:
    """Carries the recurrent state across one episode's steps."""

    def __init__(self, network):
        self.network = network
        self.states = network.initial_states(1)

    def q_values(self, obs_index, prev_action):
        step_input = np.zeros((1, INPUT_DIM))
        step_input[0, tmaze.NUM_ACTIONS + obs_index] = 1.0
        if prev_action is not None:
            step_input[0, prev_action] = 1.0
        with ad.no_grad():
            self.states, out = self.network.step(self.states, ad.Tensor(step_input))
            return self.network.head(out).data[0]


def _run_episode(network, config, env, horizon, rng, buffer, exploration_rate):
    state, obs = tmaze.reset(env, rng)
    observations = (obs,)
    actions = ()
    actor = _IncrementalActor(network) if network is not None else None
    total = 0.0
    prev_action = None
    for _ in range(horizon):
        if actor is not None:
            q = actor.q_values(observations[-1], prev_action)
            if rng.random() < exploration_rate:
                action = tmaze.exploration_action(rng)
            else:
                action = int(np.argmax(q))
        else:
            action = tmaze.exploration_action(rng)
        state, reward, next_obs, terminal = tmaze.step(env, state, action)
        total += reward
        if buffer is not None:
            buffer.add(
                HistoryTransition(
                    observations=observations,
                    actions=actions,
                    action=action,
                    reward=reward,
                    next_observation=next_obs,
                    terminal=terminal,
                )
            )
        observations += (next_obs,)
        actions += (action,)
        prev_action = action
        if terminal:
            break
    return total


def greedy_evaluation(network, env, horizon):
    """Greedy rollout on each layout; 4.0 means both found the treasure."""
    returns = []
    for layout in (tmaze.LAYOUT_UP, tmaze.LAYOUT_DOWN):
        state = tmaze.MazeState(layout, (0, 0))
        obs = tmaze.observe(env, state)
        actor = _IncrementalActor(network)
        total = 0.0
        prev_action = None
        for _ in range(horizon):
            q = actor.q_values(obs, prev_action)
            action = int(np.argmax(q))
            state, reward, obs, terminal = tmaze.step(env, state, action)
            total += reward
            prev_action = action
            if terminal:
                break
        returns.append(total)
    return float(np.mean(returns))


def sync_parameters(dst_network, src_network):
    for d, s in zip(dst_network.parameters(), src_network.parameters()):
        d.data = s.data.copy()


def train_drqn(env, network, config, rng):
    """Interleave episode generation and Q-updates; returns the trace.

    The replay buffer is pre-filled with exploration-policy transitions;
    optionally the network is warmed up on those buffered histories before
    any Q-update. The optimal-policy episode is the first index from which
    ``optimal_window`` consecutive greedy evaluations all return exactly 4.
    """
    horizon = config.horizon or tmaze.truncation_horizon(env.length)
    buffer = ReplayBuffer(config.buffer_capacity)
    prefill_target = max(1, int(round(config.buffer_capacity * config.prefill_fraction)))
    while len(buffer) < prefill_target:
        _run_episode(None, config, env, horizon, rng, buffer, exploration_rate=1.0)

    if config.warmup_enabled:
        histories = buffer.histories()
        wcfg = config.warmup_config or WarmupConfig()
        if wcfg.batch_size > len(histories):
            wcfg = dataclasses.replace(wcfg, batch_size=len(histories))
        warmup(histories, network, wcfg, rng)

    target_network = Network(network.specs, network.input_dim, network.output_dim, seed=0)
    sync_parameters(target_network, network)
    params = network.parameters()
    opt = Adam(params, learning_rate=config.learning_rate)

    trace = []
    returns = deque(maxlen=config.smoothing_window)
    streak = 0
    optimal_episode = None
    episodes_run = 0
    for episode in range(config.episodes):
        if episode % config.target_period == 0:
            sync_parameters(target_network, network)
        ep_return = _run_episode(
            network, config, env, horizon, rng, buffer, config.exploration_rate
        )
        returns.append(ep_return)
        for _ in range(config.grad_steps):
            batch = buffer.sample(rng, config.batch_size)
            targets, _ = compute_targets(batch, target_network, env.discount)
            q = q_batch(network, [encode_history(t.observations, t.actions) for t in batch])
            onehot = np.zeros((len(batch), tmaze.NUM_ACTIONS))
            onehot[np.arange(len(batch)), [t.action for t in batch]] = 1.0
            q_taken = ad.tsum(ad.mul(q, ad.constant(onehot)), axis=1)
            loss = ad.tsum(ad.square(ad.sub(ad.constant(targets), q_taken)))
            ad.zero_grads(params)
            ad.backward(loss, params=params)
            opt.step()

        eval_return = None
        if config.eval_period and episode % config.eval_period == 0:
            eval_return = greedy_evaluation(network, env, horizon)
            if eval_return == 4.0:
                streak += 1
                if streak >= config.optimal_window and optimal_episode is None:
                    optimal_episode = episode - config.optimal_window + 1
            else:
                streak = 0

        probe_value = None
        if config.probe_period and episode % config.probe_period == 0 and len(buffer) > 1:
            probe_value = estimate_vaa_mean(
                buffer.histories(),
                network,
                VaaConfig(config.probe_stabilization),
                config.probe_batch,
                rng,
            )

        trace.append(
            EpisodeRecord(
                episode=episode,
                return_=ep_return,
                smoothed_return=float(np.mean(returns)),
                eval_return=eval_return,
                vaa=probe_value,
                epsilon=config.exploration_rate,
                buffer_size=len(buffer),
            )
        )
        episodes_run = episode + 1
        if config.stop_when_optimal and optimal_episode is not None:
            break
    return DrqnResult(trace=trace, optimal_episode=optimal_episode, episodes_run=episodes_run)
