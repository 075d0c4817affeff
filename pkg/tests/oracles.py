"""Independent reference implementations used to check the library.

These deliberately avoid the library's own shortcuts: the solvability
search drives the public step() API one agent at a time, and the reward
oracles are plain exhaustive scans.
"""

from __future__ import annotations

import numpy as np

from mirlab import gridworld as gw


def _turns_to(direction, target):
    """Action list rotating from `direction` to `target`."""
    diff = (target - direction) % 4
    if diff == 0:
        return []
    if diff == 1:
        return [gw.ACT_RIGHT]
    if diff == 3:
        return [gw.ACT_LEFT]
    return [gw.ACT_RIGHT, gw.ACT_RIGHT]


def _macro_actions(state, agent_id):
    """Candidate macros for one agent: face each direction then move or
    interact with the faced cell. Every macro is a list of joint noop
    actions with only `agent_id` acting."""
    agent = state.agents[agent_id]
    if agent.done:
        return
    n = state.config.grid_size
    for d in range(4):
        dx, dy = gw.DIR_VEC[d]
        tx, ty = agent.pos[0] + dx, agent.pos[1] + dy
        if not (0 <= tx < n and 0 <= ty < n):
            continue
        kind = int(state.cells[tx, ty, 0])
        cstate = int(state.cells[tx, ty, 2])
        turns = _turns_to(agent.direction, d)
        if kind in (gw.KIND_EMPTY, gw.KIND_GOAL) or (
            kind == gw.KIND_DOOR and cstate == gw.DOOR_OPEN
        ):
            if all(a.pos != (tx, ty) for a in state.agents):
                yield turns + [gw.ACT_FORWARD]
        if kind == gw.KIND_KEY and agent.carrying is None:
            yield turns + [gw.ACT_PICKUP]
        if kind == gw.KIND_SWITCH:
            yield turns + [gw.ACT_TOGGLE]
        if kind == gw.KIND_DOOR and cstate == gw.DOOR_LOCKED:
            carrying = state.agents[agent_id].carrying
            if carrying is not None and carrying.color == state.cells[tx, ty, 1]:
                yield turns + [gw.ACT_TOGGLE]


def _oracle_key(state):
    doors = tuple(
        int(state.cells[x, y, 2])
        for x, y in zip(*np.nonzero(state.cells[:, :, 0] == gw.KIND_DOOR))
    )
    keys = tuple(sorted(map(tuple, zip(*np.nonzero(state.cells[:, :, 0] == gw.KIND_KEY)))))
    agents = tuple(
        (a.pos, a.carrying.color if a.carrying else -1, a.done) for a in state.agents
    )
    return agents, doors, keys


def cooperative_solvable(initial: gw.GridState, max_nodes=400_000):
    """Breadth-first search over real env states, one agent acting per
    macro (others noop). Returns the macro-plan length on success, None on
    exhaustion. Every transition goes through the public step()."""
    start = initial.copy()
    start.t = 0
    seen = {_oracle_key(start)}
    frontier = [start]
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for state in frontier:
            for agent_id in range(state.config.num_agents):
                for macro in _macro_actions(state, agent_id):
                    cur = state
                    completed = False
                    for act in macro:
                        joint = [gw.ACT_NOOP] * cur.config.num_agents
                        joint[agent_id] = act
                        cur, out = gw.step(cur, joint)
                        if out.completed:
                            completed = True
                            break
                    if completed:
                        return depth
                    key = _oracle_key(cur)
                    if key not in seen:
                        seen.add(key)
                        if len(seen) > max_nodes:
                            return None
                        cur = cur.copy()
                        cur.t = 0
                        nxt.append(cur)
        frontier = nxt
    return None


# ---------------------------------------------------------------------------
# Reward oracles: direct transcriptions evaluated with plain loops.


def deir_intrinsic_bruteforce(mem_obs, mem_trj, e_obs_next, e_trj_t, eps):
    if len(mem_obs) == 0:
        return 0.0
    best = np.inf
    for i in range(len(mem_obs)):
        num = float(np.sum((np.asarray(mem_obs[i]) - np.asarray(e_obs_next)) ** 2))
        den = float(np.linalg.norm(np.asarray(mem_trj[i]) - np.asarray(e_trj_t))) + eps
        best = min(best, num / den)
    return best


def deir_mutual_bruteforce(team_obs_t, team_obs_next, k):
    vals = []
    for j in range(len(team_obs_t)):
        if j == k:
            continue
        vals.append(
            float(np.sum((np.asarray(team_obs_t[j]) - np.asarray(team_obs_next[j])) ** 2))
        )
    return max(vals) if vals else 0.0


def noveld_intrinsic_bruteforce(nov_t, nov_prev, alpha):
    return max(nov_t - alpha * nov_prev, 0.0)


def noveld_mutual_bruteforce(team_nov_t, team_nov_prev, alpha, k):
    vals = []
    for j in range(len(team_nov_t)):
        if j == k:
            continue
        vals.append(team_nov_t[j] - alpha * team_nov_prev[j])
    if not vals:
        return 0.0
    return max(max(vals), 0.0)


def mix_weights_bruteforce(team_r_i, tau):
    team_r_i = np.asarray(team_r_i, dtype=np.float64)
    m = team_r_i.max()
    e = np.exp((team_r_i - m) / tau)
    return e / e.sum()


def gae_double_sum(rewards, values, bootstrap, dones, gamma, lam):
    """A_t = sum_l (gamma*lam)^l * delta_{t+l}, truncated at episode ends."""
    T = len(rewards)
    vals = list(values) + [bootstrap]
    deltas = [
        rewards[t] + gamma * vals[t + 1] * (1.0 - dones[t]) - vals[t] for t in range(T)
    ]
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for l in range(t, T):
            adv[t] += coef * deltas[l]
            if dones[l]:
                break
            coef *= gamma * lam
    return adv


# ---------------------------------------------------------------------------
# finite differences for gradient checks


def finite_difference_grads(loss_fn, params, step=1e-5):
    """Central finite differences of loss_fn(params) wrt every element."""
    grads = []
    for i, layer in enumerate(params):
        g = {}
        for name, arr in layer.items():
            ga = np.zeros_like(arr, dtype=np.float64)
            flat = arr.reshape(-1)
            gflat = ga.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = loss_fn(params)
                flat[j] = orig - step
                dn = loss_fn(params)
                flat[j] = orig
                gflat[j] = (up - dn) / (2.0 * step)
            g[name] = ga
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        for k in a:
            denom = np.maximum(np.abs(a[k]) + np.abs(n[k]), floor)
            worst = max(worst, float(np.max(np.abs(a[k] - n[k]) / denom)))
    return worst
