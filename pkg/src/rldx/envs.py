"""Synthetic capability-probe environments, scripted experts, episode files.

Each environment makes exactly one functional capability decisive:

* ``ConveyorGrid``  -- target speed is invisible in any single frame, so
  tracking it needs multi-frame motion awareness.
* ``ShellGame``     -- the cue disappears long before the commit window,
  so picking the right slot needs long-term memory.
* ``ContactProbe``  -- the hidden surface height is revealed only through
  the force channel, so stopping in the force band needs physical sensing.

Episodes serialize to a small binary format (magic ``RLDX``) with a JSON
header followed by raw little-endian float32 arrays.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

FORMAT_MAGIC = b"RLDX"
FORMAT_VERSION = 1


class EnvError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class EpisodeRecord:
    """One rolled-out episode; channel arrays share the step axis."""

    frames: np.ndarray    # [T, C, H, W] float32, observation before the action
    states: np.ndarray    # [T, state_dim]
    actions: np.ndarray   # [T, action_dim]
    physics: np.ndarray   # [T, physics_dim] (physics_dim may be 0)
    rewards: np.ndarray   # [T], 1.0 exactly at the success step
    success: bool
    task_id: int
    embodiment: str

    def __post_init__(self):
        t = self.frames.shape[0]
        if not (self.states.shape[0] == self.actions.shape[0]
                == self.physics.shape[0] == self.rewards.shape[0] == t):
            raise EnvError("episode channel lengths disagree")
        if self.rewards.sum() > 1.0 + 1e-9:
            raise EnvError("reward must fire at most once")

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    def __eq__(self, other) -> bool:
        return (isinstance(other, EpisodeRecord)
                and self.success == other.success
                and self.task_id == other.task_id
                and self.embodiment == other.embodiment
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("frames", "states", "actions", "physics", "rewards")))


_ARRAY_FIELDS = ("frames", "states", "actions", "physics", "rewards")


def save_episode(path: str, ep: EpisodeRecord) -> None:
    header = {
        "version": FORMAT_VERSION,
        "embodiment": ep.embodiment,
        "task_id": ep.task_id,
        "success": bool(ep.success),
        "steps": ep.length,
        "arrays": [{"name": n, "shape": list(getattr(ep, n).shape)}
                   for n in _ARRAY_FIELDS],
        "header_len": 0,
    }
    # header records its own byte length; iterate until stable
    for _ in range(4):
        blob = json.dumps(header, sort_keys=True).encode()
        if header["header_len"] == len(blob):
            break
        header["header_len"] = len(blob)
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(blob)
    for n in _ARRAY_FIELDS:
        buf.write(np.ascontiguousarray(getattr(ep, n), dtype="<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_episode(path: str) -> EpisodeRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != FORMAT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        header, end = json.JSONDecoder().raw_decode(raw[8:].decode("utf-8", "replace"))
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    if header.get("header_len") != end:
        raise FormatError(f"{path}: header length mismatch")
    off = 8 + end
    fields = {}
    for spec in header["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = raw[off:off + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated array {spec['name']}")
        fields[spec["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return EpisodeRecord(success=bool(header["success"]), task_id=int(header["task_id"]),
                         embodiment=header["embodiment"], **fields)


# ---------------------------------------------------------------------------
# environments


class ConveyorGrid:
    """Wrap-around track; the picker must match the moving target twice in a row."""

    kind = "conveyor"
    embodiment = "conveyor"
    width = 24
    frame_shape = (3, 1, 24)
    action_dim = 1
    state_dim = 1
    physics_dim = 0
    horizon = 40

    def __init__(self, speeds=(1, 3)):
        self.speeds = tuple(int(s) for s in speeds)
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.target = int(rng.integers(0, self.width))
        self.speed = int(self.speeds[rng.integers(0, len(self.speeds))])
        self.picker = self.width // 2
        self.t = 0
        self.consec = 0
        self.done = False
        self.success = False
        return self.frame()

    def frame(self) -> np.ndarray:
        f = np.zeros(self.frame_shape, dtype=np.float32)
        f[0, 0, self.target] = 1.0
        f[1, 0, self.picker] = 1.0
        f[2, 0, :] = 1.0
        return f

    def state(self) -> np.ndarray:
        return np.array([self.picker], dtype=np.float32)

    def physics(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)

    def _wrap_delta(self, frm: int, to: int) -> int:
        d = (to - frm) % self.width
        return d - self.width if d > self.width // 2 else d

    def step(self, action) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, bool]:
        if self.done:
            raise EnvError("step after done")
        a = int(np.clip(np.rint(np.asarray(action).reshape(-1)[0]), -3, 3))
        self.target = (self.target + self.speed) % self.width
        self.picker = (self.picker + a) % self.width
        self.t += 1
        self.consec = self.consec + 1 if self.picker == self.target else 0
        r = 0.0
        if self.consec >= 2:
            self.success, self.done, r = True, True, 1.0
        elif self.t >= self.horizon:
            self.done = True
        return self.frame(), self.state(), self.physics(), r, self.done

    def expert_action(self) -> np.ndarray:
        predicted = (self.target + self.speed) % self.width
        r = (predicted - self.picker) % self.width
        if r <= 3:
            a = r
        elif r >= self.width - 3:
            a = r - self.width
        else:
            # not in reach: intercept along the faster loop direction
            t_fwd = (r - 3) / (3 - self.speed) if self.speed < 3 else np.inf
            t_back = (self.width - 3 - r) / (3 + self.speed)
            a = 3 if t_fwd <= t_back else -3
        return np.array([float(a)], dtype=np.float32)


class ShellGame:
    """Cue shows the token slot briefly; commit after a long blind delay."""

    kind = "shell"
    embodiment = "shell"
    frame_shape = (3, 1, 9)
    slot_cells = (1, 4, 7)
    action_dim = 2          # (pointer move, commit flag)
    state_dim = 1
    physics_dim = 0
    cue_steps = 3           # cue visible at steps 0..2
    hide_steps = 24         # blind window; commits allowed from step 27
    horizon = 36

    def __init__(self):
        self.done = True

    @property
    def reveal_step(self) -> int:
        return self.cue_steps + self.hide_steps

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.token = int(rng.integers(0, 3))
        self.pointer = 1
        self.t = 0
        self.done = False
        self.success = False
        return self.frame()

    def frame(self) -> np.ndarray:
        f = np.zeros(self.frame_shape, dtype=np.float32)
        for c in self.slot_cells:
            f[0, 0, c] = 1.0
        f[1, 0, self.slot_cells[self.pointer]] = 1.0
        if self.t < self.cue_steps:
            f[2, 0, self.slot_cells[self.token]] = 1.0
        return f

    def state(self) -> np.ndarray:
        return np.array([self.pointer], dtype=np.float32)

    def physics(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)

    def step(self, action):
        if self.done:
            raise EnvError("step after done")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        move = int(np.clip(np.rint(a[0]), -1, 1))
        commit = bool(a[1] > 0.5)
        commit_legal = self.t >= self.reveal_step
        self.pointer = int(np.clip(self.pointer + move, 0, 2))
        self.t += 1
        r = 0.0
        if commit and commit_legal:
            self.done = True
            self.success = self.pointer == self.token
            r = 1.0 if self.success else 0.0
        elif self.t >= self.horizon:
            self.done = True
        return self.frame(), self.state(), self.physics(), r, self.done

    def expert_action(self) -> np.ndarray:
        if self.t < self.reveal_step:
            return np.zeros(2, dtype=np.float32)
        if self.pointer != self.token:
            return np.array([float(np.sign(self.token - self.pointer)), 0.0],
                            dtype=np.float32)
        return np.array([0.0, 1.0], dtype=np.float32)


class ContactProbe:
    """Push a probe to a hidden surface and hold force inside [2, 4].

    The hidden height appears only through the force reading. Holding
    (action <= 0.1) with in-band force on two consecutive steps succeeds;
    driving the force above the band ends the episode as a failure, so a
    force-blind policy cannot ride through the band.
    """

    kind = "probe"
    embodiment = "probe"
    frame_shape = (2, 1, 16)
    action_dim = 1
    state_dim = 1
    physics_dim = 1
    heights = (10, 11, 12, 13, 14)
    band = (2.0, 4.0)
    hold_eps = 0.1
    horizon = 30

    def __init__(self):
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.height = int(self.heights[rng.integers(0, len(self.heights))])
        self.kappa = 1.0
        self.depth = 0.0
        self.t = 0
        self.consec = 0
        self.done = False
        self.success = False
        # per-episode expert style: target force inside the band, push cap
        self._target_force = float(rng.uniform(2.4, 3.6))
        self._cap = float(rng.uniform(0.7, 1.0))
        return self.frame()

    def frame(self) -> np.ndarray:
        f = np.zeros(self.frame_shape, dtype=np.float32)
        f[0, 0, :] = np.clip(self.depth - np.arange(16), 0.0, 1.0)
        f[1, 0, :] = 1.0
        return f

    def state(self) -> np.ndarray:
        return np.array([self.depth], dtype=np.float32)

    def force(self) -> float:
        return max(0.0, self.kappa * (self.depth - self.height))

    def physics(self) -> np.ndarray:
        return np.array([self.force()], dtype=np.float32)

    def step(self, action):
        if self.done:
            raise EnvError("step after done")
        a = float(np.clip(np.asarray(action).reshape(-1)[0], 0.0, 1.0))
        self.depth += a
        self.t += 1
        p = self.force()
        r = 0.0
        lo, hi = self.band
        if p > hi:
            self.done = True        # overshoot is unrecoverable: fail now
            self.consec = 0
        else:
            holding = a <= self.hold_eps
            self.consec = self.consec + 1 if (lo <= p <= hi and holding) else 0
            if self.consec >= 2:
                self.success, self.done, r = True, True, 1.0
            elif self.t >= self.horizon:
                self.done = True
        return self.frame(), self.state(), self.physics(), r, self.done

    def expert_action(self) -> np.ndarray:
        p = self.force()
        if p <= 0.0:
            a = self._cap
        else:
            a = float(np.clip(self._target_force - p, 0.0, self._cap))
        return np.array([a], dtype=np.float32)


ENV_KINDS = {"conveyor": ConveyorGrid, "shell": ShellGame, "probe": ContactProbe}


def make_env(kind: str, **kwargs):
    if kind not in ENV_KINDS:
        raise EnvError(f"unknown environment kind {kind!r}")
    return ENV_KINDS[kind](**kwargs)


# ---------------------------------------------------------------------------
# rollouts and datasets


def rollout_expert(env, seed: int, dither: float = 0.0) -> EpisodeRecord:
    """Roll one expert episode; `dither` mixes in random detour actions."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    frame = env.reset(seed)
    frames, states, actions, physics, rewards = [], [], [], [], []
    while not env.done:
        frames.append(frame)
        states.append(env.state())
        physics.append(env.physics())
        if dither > 0.0 and rng.random() < dither:
            a = _random_action(env, rng)
        else:
            a = env.expert_action()
        actions.append(np.asarray(a, dtype=np.float32))
        frame, _, _, r, _ = env.step(a)
        rewards.append(r)
    return EpisodeRecord(
        frames=np.stack(frames).astype(np.float32),
        states=np.stack(states).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        physics=np.stack(physics).astype(np.float32)
        if env.physics_dim else np.zeros((len(frames), 0), np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        success=env.success, task_id=0, embodiment=env.embodiment)


def _random_action(env, rng: np.random.Generator) -> np.ndarray:
    if env.kind == "conveyor":
        return np.array([rng.integers(-3, 4)], dtype=np.float32)
    if env.kind == "shell":
        return np.array([rng.integers(-1, 2), 0.0], dtype=np.float32)
    return np.array([rng.uniform(0.0, 1.0)], dtype=np.float32)


@dataclass
class DatasetManifest:
    env: str
    episodes: int
    seed: int
    dims: dict
    format_version: int = FORMAT_VERSION
    files: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def path(self, out_dir: str) -> str:
        return os.path.join(out_dir, "manifest.json")

    def save(self, out_dir: str) -> None:
        with open(self.path(out_dir), "w") as fh:
            json.dump(self.__dict__, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(out_dir: str) -> "DatasetManifest":
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            doc = json.load(fh)
        m = DatasetManifest(**doc)
        for f in m.files:
            p = os.path.join(out_dir, f)
            if not os.path.exists(p):
                raise FormatError(f"manifest lists missing file {f}")
        return m


def gen_dataset(kind: str, n_episodes: int, seed: int, out_dir: str,
                dither: float = 0.0, **env_kwargs) -> DatasetManifest:
    env = make_env(kind, **env_kwargs)
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(
        env=kind, episodes=n_episodes, seed=seed,
        dims={"frame": list(env.frame_shape), "state": env.state_dim,
              "action": env.action_dim, "physics": env.physics_dim},
        options={"dither": dither, **{k: list(v) if isinstance(v, tuple) else v
                                      for k, v in env_kwargs.items()}})
    for i in range(n_episodes):
        ep = rollout_expert(env, seed + i, dither=dither)
        name = f"ep_{i:05d}.rldx"
        save_episode(os.path.join(out_dir, name), ep)
        manifest.files.append(name)
    manifest.save(out_dir)
    return manifest


def load_dataset(out_dir: str) -> list[EpisodeRecord]:
    manifest = DatasetManifest.load(out_dir)
    return [load_episode(os.path.join(out_dir, f)) for f in manifest.files]
