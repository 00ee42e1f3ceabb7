"""Binary dataset files of environment episodes.

Layout (all integers little-endian):

  header:  magic "DWS1" | u16 version | u8 env-id length + utf8 env id
           | u8 action kind (0 discrete, 1 continuous) | u8 action arity
           | u8 palette size + palette entries (3 bytes RGB each)
           | u8 height | u8 width | u8 channels
           | u8 frame encoding (0 palette indices, 1 raw rgb8)
  episode: u32 blob length, then blob:
           u64 seed | u32 T | (T+1) frames | T actions | T f32 rewards
           | T flag bytes (bit0 done, bit1 synthetic)

Frames are palette indices (1 byte/cell) for discrete-palette envs and
8-bit RGB for BlockPush. Discrete actions are 1 byte; continuous actions
are two f32.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import envs

MAGIC = b"DWS1"
VERSION = 1


class DatasetError(Exception):
    pass


@dataclass
class EpisodeRecord:
    seed: int
    frames: np.ndarray    # (T+1, 16, 16) uint8 palette idx, or (T+1, 16, 16, 3) uint8 rgb
    actions: np.ndarray   # (T,) uint8 or (T, 2) float32
    rewards: np.ndarray   # (T,) float32
    flags: np.ndarray     # (T,) uint8

    @property
    def length(self):
        return len(self.actions)

    def dones(self):
        return (self.flags & 1).astype(bool)

    def synthetic(self):
        return (self.flags & 2).astype(bool)


@dataclass
class Dataset:
    env_id: str
    action_kind: int      # 0 discrete, 1 continuous
    action_arity: int
    palette: np.ndarray   # (n, 3) uint8
    frame_encoding: int   # 0 palette indices, 1 rgb8
    episodes: list

    @property
    def n_transitions(self):
        return sum(ep.length for ep in self.episodes)

    def frames_float(self, ep):
        """Episode frames as (T+1, 16, 16, 3) float32 in [0, 1]."""
        if self.frame_encoding == 0:
            return self.palette[ep.frames].astype(np.float32) / 255.0
        return ep.frames.astype(np.float32) / 255.0


def _header_bytes(ds):
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    env = ds.env_id.encode()
    out += struct.pack("<B", len(env)) + env
    out += struct.pack("<BB", ds.action_kind, ds.action_arity)
    out += struct.pack("<B", len(ds.palette)) + ds.palette.astype(np.uint8).tobytes()
    h, w = 16, 16
    out += struct.pack("<BBBB", h, w, 3, ds.frame_encoding)
    return bytes(out)


def _episode_bytes(ds, ep):
    out = bytearray()
    out += struct.pack("<Q", np.uint64(ep.seed))
    out += struct.pack("<I", ep.length)
    out += np.ascontiguousarray(ep.frames, dtype=np.uint8).tobytes()
    if ds.action_kind == 0:
        out += np.ascontiguousarray(ep.actions, dtype=np.uint8).tobytes()
    else:
        out += np.ascontiguousarray(ep.actions, dtype="<f4").tobytes()
    out += np.ascontiguousarray(ep.rewards, dtype="<f4").tobytes()
    out += np.ascontiguousarray(ep.flags, dtype=np.uint8).tobytes()
    return bytes(out)


def write_dataset(path, ds):
    with open(path, "wb") as f:
        f.write(_header_bytes(ds))
        for ep in ds.episodes:
            blob = _episode_bytes(ds, ep)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)


def read_dataset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    n = raw[pos]
    pos += 1
    env_id = raw[pos:pos + n].decode()
    pos += n
    action_kind, action_arity = struct.unpack_from("<BB", raw, pos)
    pos += 2
    ncol = raw[pos]
    pos += 1
    palette = np.frombuffer(raw, dtype=np.uint8, count=ncol * 3, offset=pos).reshape(ncol, 3).copy()
    pos += ncol * 3
    h, w, ch, frame_enc = struct.unpack_from("<BBBB", raw, pos)
    pos += 4
    frame_shape = (h, w) if frame_enc == 0 else (h, w, ch)
    frame_nbytes = int(np.prod(frame_shape))

    episodes = []
    while pos < len(raw):
        (blob_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blob = raw[pos:pos + blob_len]
        if len(blob) != blob_len:
            raise DatasetError(f"{path}: truncated episode at byte {pos}")
        pos += blob_len
        off = 0
        (seed,) = struct.unpack_from("<Q", blob, off)
        off += 8
        (t,) = struct.unpack_from("<I", blob, off)
        off += 4
        frames = np.frombuffer(blob, dtype=np.uint8, count=(t + 1) * frame_nbytes,
                               offset=off).reshape((t + 1,) + frame_shape).copy()
        off += (t + 1) * frame_nbytes
        if action_kind == 0:
            actions = np.frombuffer(blob, dtype=np.uint8, count=t, offset=off).copy()
            off += t
        else:
            actions = np.frombuffer(blob, dtype="<f4", count=2 * t, offset=off).reshape(t, 2).copy()
            off += 8 * t
        rewards = np.frombuffer(blob, dtype="<f4", count=t, offset=off).copy()
        off += 4 * t
        flags = np.frombuffer(blob, dtype=np.uint8, count=t, offset=off).copy()
        off += t
        if off != blob_len:
            raise DatasetError(f"{path}: episode blob length mismatch ({off} != {blob_len})")
        episodes.append(EpisodeRecord(seed=int(seed), frames=frames, actions=actions,
                                      rewards=rewards, flags=flags))
    return Dataset(env_id=env_id, action_kind=action_kind, action_arity=action_arity,
                   palette=palette, frame_encoding=frame_enc, episodes=episodes)


def empty_dataset(env_id):
    if env_id == "gridpush":
        return Dataset(env_id=env_id, action_kind=0, action_arity=5,
                       palette=envs.GRIDPUSH_PALETTE.copy(), frame_encoding=0, episodes=[])
    if env_id == "blockpush":
        return Dataset(env_id=env_id, action_kind=1, action_arity=2,
                       palette=envs.BLOCKPUSH_PALETTE.copy(), frame_encoding=1, episodes=[])
    raise DatasetError(f"unknown env id {env_id!r}")


def collect_episode(env_id, policy_fn, env_seed, policy_rng, max_steps=envs.EPISODE_CAP):
    """Roll one episode; returns an EpisodeRecord with exact frames."""
    state, obs = envs.env_reset(env_id, env_seed)
    frames, actions, rewards, flags = [], [], [], []
    frames.append(_encode_frame(state, env_id))
    while not state.done and len(actions) < max_steps:
        a = policy_fn(env_id, policy_rng, state, obs)
        obs, r, done = envs.env_step(state, a, env_id)
        frames.append(_encode_frame(state, env_id))
        actions.append(a)
        rewards.append(r)
        flags.append(1 if done else 0)
    if env_id == "gridpush":
        act = np.asarray(actions, dtype=np.uint8)
    else:
        act = np.asarray(actions, dtype=np.float32).reshape(-1, 2)
    return EpisodeRecord(seed=int(np.uint64(env_seed)), frames=np.stack(frames),
                         actions=act, rewards=np.asarray(rewards, dtype=np.float32),
                         flags=np.asarray(flags, dtype=np.uint8))


def _encode_frame(state, env_id):
    idx = envs._render_indices(state, env_id)
    if env_id == "gridpush":
        return idx
    return envs.palette_for(env_id)[idx]


_POLICIES = {
    "random": lambda env_id, rng, state, obs: envs.random_policy(env_id, rng, state),
    "scripted": lambda env_id, rng, state, obs: envs.scripted_policy(env_id, rng, state),
}


def collect_dataset(env_id, policy, n_transitions, seed, path, actor_fn=None):
    """Collect at least n_transitions transitions and write them to path.

    policy is "random", "scripted", or "actor" (with actor_fn a callable
    frame -> action). Deterministic for a fixed (policy, seed).
    """
    if n_transitions < 1:
        raise DatasetError("n_transitions must be >= 1")
    if policy == "actor":
        if actor_fn is None:
            raise DatasetError("policy 'actor' requires actor_fn")
        policy_fn = lambda env_id, rng, state, obs: actor_fn(obs, rng)
    elif policy in _POLICIES:
        policy_fn = _POLICIES[policy]
    else:
        raise DatasetError(f"unknown policy {policy!r}")
    ds = empty_dataset(env_id)
    master = np.random.SeedSequence(seed)
    count = 0
    while count < n_transitions:
        ep_ss = master.spawn(1)[0]
        s_env, s_pol = ep_ss.spawn(2)
        env_seed = int(s_env.generate_state(1, np.uint64)[0])
        ep = collect_episode(env_id, policy_fn, env_seed, np.random.default_rng(s_pol))
        ds.episodes.append(ep)
        count += ep.length
    write_dataset(path, ds)
    return ds
