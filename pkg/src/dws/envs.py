"""Deterministic 16x16 pixel environments.

GridPush: discrete 5-action coin collection on a walled grid, +1 per coin,
episode ends when all 3 coins are collected or after 100 steps.
BlockPush: continuous 2-d pushing of a block toward a target cell.

Both render observations as exact palette lookups, so frames tokenize
losslessly to palette indices.
"""

from dataclasses import dataclass, field

import numpy as np

GRID = 16
EPISODE_CAP = 100
N_COINS = 3

# palette index -> 8-bit RGB
GRIDPUSH_PALETTE = np.array(
    [
        (24, 24, 32),     # 0 background
        (96, 104, 120),   # 1 wall
        (250, 200, 40),   # 2 coin
        (240, 243, 245),  # 3 agent
    ],
    dtype=np.uint8,
)
GRIDPUSH_AGENT = 3
GRIDPUSH_COIN = 2

BLOCKPUSH_PALETTE = np.array(
    [
        (24, 24, 32),     # 0 background
        (70, 130, 235),   # 1 block
        (220, 80, 70),    # 2 target
    ],
    dtype=np.uint8,
)

ACTION_NAMES = {0: "noop", 1: "up", 2: "down", 3: "left", 4: "right"}
_MOVES = {0: (0, 0), 1: (-1, 0), 2: (1, 0), 3: (0, -1), 4: (0, 1)}


class EnvError(Exception):
    pass


@dataclass
class EnvState:
    grid: np.ndarray                 # palette indices without agent overlay
    agent: tuple
    coins: set
    steps: int
    seed: int
    done: bool = False
    # BlockPush only
    block: np.ndarray = None
    target: tuple = None


def palette_for(env_id):
    if env_id == "gridpush":
        return GRIDPUSH_PALETTE
    if env_id == "blockpush":
        return BLOCKPUSH_PALETTE
    raise EnvError(f"unknown env id {env_id!r}")


def _render_indices(state, env_id):
    idx = state.grid.copy()
    if env_id == "gridpush":
        for c in state.coins:
            idx[c] = GRIDPUSH_COIN
        idx[state.agent] = GRIDPUSH_AGENT
    else:
        idx[state.target] = 2
        br, bc = int(round(state.block[0])), int(round(state.block[1]))
        idx[br, bc] = 1
    return idx


def render(state, env_id):
    """Observation frame: 16x16x3 float32 in [0, 1]."""
    idx = _render_indices(state, env_id)
    return palette_for(env_id)[idx].astype(np.float32) / 255.0


def frame_to_indices(frame, palette):
    """Map an RGB frame to nearest palette indices (ties to lower index)."""
    pal = palette.astype(np.float32) / 255.0
    d = ((frame[..., None, :] - pal[None, None]) ** 2).sum(axis=-1)
    return d.argmin(axis=-1).astype(np.uint8)


def env_reset(env_id, seed):
    """Deterministic initial state and observation for the given seed."""
    rng = np.random.default_rng(np.uint64(seed))
    if env_id == "gridpush":
        grid = np.zeros((GRID, GRID), dtype=np.uint8)
        grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = 1
        interior = [(r, c) for r in range(1, GRID - 1) for c in range(1, GRID - 1)]
        picks = rng.choice(len(interior), size=N_COINS + 1, replace=False)
        agent = interior[picks[0]]
        coins = {interior[p] for p in picks[1:]}
        state = EnvState(grid=grid, agent=agent, coins=coins, steps=0, seed=int(np.uint64(seed)))
    elif env_id == "blockpush":
        grid = np.zeros((GRID, GRID), dtype=np.uint8)
        while True:
            block = rng.uniform(2.0, GRID - 3.0, size=2)
            target = (int(rng.integers(2, GRID - 2)), int(rng.integers(2, GRID - 2)))
            if np.hypot(block[0] - target[0], block[1] - target[1]) > 3.0:
                break
        state = EnvState(grid=grid, agent=(0, 0), coins=set(), steps=0,
                         seed=int(np.uint64(seed)), block=block.astype(np.float64), target=target)
    else:
        raise EnvError(f"unknown env id {env_id!r}")
    return state, render(state, env_id)


def env_step(state, action, env_id):
    """Advance one step. Returns (next observation, reward, done)."""
    if state.done:
        raise EnvError("stepping a finished episode; reset first")
    if env_id == "gridpush":
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) <= 4:
            raise EnvError(f"invalid action {action!r}; GridPush takes ids 0..4")
        dr, dc = _MOVES[int(action)]
        nr, nc = state.agent[0] + dr, state.agent[1] + dc
        reward = 0.0
        if state.grid[nr, nc] != 1:  # walls block
            state.agent = (nr, nc)
            if state.agent in state.coins:
                state.coins.discard(state.agent)
                reward = 1.0
        state.steps += 1
        state.done = (not state.coins) or state.steps >= EPISODE_CAP
        return render(state, env_id), reward, state.done
    if env_id == "blockpush":
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or np.any(np.abs(a) > 1.0):
            raise EnvError(f"invalid action {action!r}; BlockPush takes a 2-vector in [-1, 1]")
        state.block = np.clip(state.block + a, 1.0, GRID - 2.0)
        state.steps += 1
        dist = np.hypot(state.block[0] - state.target[0], state.block[1] - state.target[1])
        reward = 1.0 if dist <= 1.0 else 0.0
        state.done = reward > 0 or state.steps >= EPISODE_CAP
        return render(state, env_id), reward, state.done
    raise EnvError(f"unknown env id {env_id!r}")


# ---------------------------------------------------------------------------
# policies


def random_policy(env_id, rng, state=None):
    if env_id == "gridpush":
        return int(rng.integers(0, 5))
    return rng.uniform(-1.0, 1.0, size=2).astype(np.float32)


def scripted_policy(env_id, rng, state):
    """Greedy coin seeking (GridPush) / straight push to target (BlockPush)."""
    if env_id == "gridpush":
        if not state.coins:
            return 0
        ar, ac = state.agent
        coin = min(state.coins, key=lambda p: (abs(p[0] - ar) + abs(p[1] - ac), p))
        if coin[0] != ar:
            return 1 if coin[0] < ar else 2
        if coin[1] != ac:
            return 3 if coin[1] < ac else 4
        return 0
    delta = np.asarray(state.target, dtype=np.float64) - state.block
    return np.clip(delta, -1.0, 1.0).astype(np.float32)


def scripted_from_frame(frame):
    """GridPush scripted action computed from a rendered frame alone."""
    idx = frame_to_indices(frame, GRIDPUSH_PALETTE)
    agents = np.argwhere(idx == GRIDPUSH_AGENT)
    coins = np.argwhere(idx == GRIDPUSH_COIN)
    if len(agents) != 1 or len(coins) == 0:
        return 0
    ar, ac = agents[0]
    order = np.lexsort((coins[:, 1], coins[:, 0], np.abs(coins - agents[0]).sum(axis=1)))
    cr, cc = coins[order[0]]
    if cr != ar:
        return 1 if cr < ar else 2
    if cc != ac:
        return 3 if cc < ac else 4
    return 0


def state_from_frame(frame, steps=0):
    """Reconstruct a GridPush EnvState from an exact palette frame."""
    idx = frame_to_indices(frame, GRIDPUSH_PALETTE)
    agents = np.argwhere(idx == GRIDPUSH_AGENT)
    if len(agents) != 1:
        raise EnvError(f"frame has {len(agents)} agent cells, expected 1")
    grid = np.where(idx == 1, 1, 0).astype(np.uint8)
    coins = {tuple(map(int, p)) for p in np.argwhere(idx == GRIDPUSH_COIN)}
    return EnvState(grid=grid, agent=tuple(map(int, agents[0])), coins=coins,
                    steps=steps, seed=0)


def agent_cell(frame):
    """Agent position in a GridPush frame, or None if zero/multiple cells."""
    idx = frame_to_indices(frame, GRIDPUSH_PALETTE)
    agents = np.argwhere(idx == GRIDPUSH_AGENT)
    if len(agents) != 1:
        return None
    return int(agents[0][0]), int(agents[0][1])
