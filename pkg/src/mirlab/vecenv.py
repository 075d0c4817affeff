"""Episode management and synchronous vectorized stepping.

Each env instance owns a deterministic seed stream; every reset draws the
next map seed from it, so a (config seed, episode index) pair always yields
the same layout regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import gridworld as gw


class MultiGridEnv:
    """Single environment instance with per-episode reseeding."""

    def __init__(self, config: gw.EnvConfig, reseed_each_episode: bool = True):
        self.config = config
        self.reseed_each_episode = reseed_each_episode
        self._seed_rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self.state: gw.GridState | None = None
        self.episode_seed = config.seed
        self.episode_index = -1
        self.action_log: list[tuple[int, ...]] = []

    def reset(self) -> gw.GridState:
        self.episode_index += 1
        if self.reseed_each_episode:
            self.episode_seed = int(self._seed_rng.integers(0, 2**63 - 1))
        cfg = replace(self.config, seed=self.episode_seed)
        self.state = gw.generate_map(cfg)
        self.action_log = []
        return self.state

    def step(self, joint_action) -> tuple[gw.GridState, gw.StepOutcome]:
        if self.state is None:
            raise gw.UsageError("reset() before step()")
        self.action_log.append(tuple(int(a) for a in joint_action))
        self.state, outcome = gw.step(self.state, joint_action)
        return self.state, outcome

    def observations(self) -> list[gw.Observation]:
        return [gw.observe(self.state, k) for k in range(self.config.num_agents)]

    def replay_header_config(self) -> gw.EnvConfig:
        return replace(self.config, seed=self.episode_seed)


def stack_observations(obs_lists) -> dict[str, np.ndarray]:
    """obs_lists: [env][agent] Observation -> dict of batched arrays."""
    views = np.stack([[o.view for o in per_env] for per_env in obs_lists])
    dirs = np.array([[o.direction for o in per_env] for per_env in obs_lists], dtype=np.int64)
    carrying = np.array(
        [[o.carrying_kind for o in per_env] for per_env in obs_lists], dtype=np.int64
    )
    return {"view": views, "direction": dirs, "carrying": carrying}


class VecEnv:
    """Synchronous batch of envs with auto-reset on termination.

    step() reports, per env: the outcome of the step, whether the episode
    ended there (`episode_end`), the terminal team reward and length, and
    fresh observations (post-reset observations when the episode ended).
    The pre-reset terminal observations are exposed separately because the
    novelty pipeline needs them.
    """

    def __init__(self, config: gw.EnvConfig, num_envs: int, reseed_each_episode=True):
        root = np.random.SeedSequence(config.seed)
        children = root.spawn(num_envs)
        self.envs = []
        for child in children:
            sub_seed = int(np.random.default_rng(child).integers(0, 2**63 - 1))
            self.envs.append(
                MultiGridEnv(replace(config, seed=sub_seed), reseed_each_episode)
            )
        self.num_envs = num_envs
        self.config = config

    def reset(self) -> dict[str, np.ndarray]:
        for env in self.envs:
            env.reset()
        return stack_observations([env.observations() for env in self.envs])

    def step(self, joint_actions):
        """joint_actions: (E, K) ints."""
        rewards = np.zeros(self.num_envs, dtype=np.float64)
        episode_end = np.zeros(self.num_envs, dtype=bool)
        completed = np.zeros(self.num_envs, dtype=bool)
        done_agents = np.zeros((self.num_envs, self.config.num_agents), dtype=bool)
        ep_lens = np.zeros(self.num_envs, dtype=np.int64)
        terminal_obs: list[list[gw.Observation] | None] = [None] * self.num_envs
        for e, env in enumerate(self.envs):
            _, out = env.step(joint_actions[e])
            rewards[e] = out.reward
            done_agents[e] = out.done
            if out.terminated:
                episode_end[e] = True
                completed[e] = out.completed
                ep_lens[e] = env.state.t
                terminal_obs[e] = env.observations()
                env.reset()
        obs = stack_observations([env.observations() for env in self.envs])
        return obs, rewards, done_agents, episode_end, completed, ep_lens, terminal_obs
