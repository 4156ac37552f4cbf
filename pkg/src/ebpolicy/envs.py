"""Desk-scale 2D behavior-cloning tasks with scripted experts.

Point-mass kinematics in the unit box: position += action (clipped). Two
tasks cover the claims under test. ``fork`` starts near the bottom and must
reach one of two symmetric goals (multimodal demonstrations, the mode label
is hidden from the learner). ``hang`` must thread a narrow slot in a wall
and then reach a hang point on the far side (precision phase, then
traverse), with the wall making failed slot attempts physically blocking,
so retries are possible and observable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

A_MAX = 0.2            # per-step action magnitude cap (per component)
WORKSPACE = 1.0        # box is [-WORKSPACE, WORKSPACE]^2
EXPERT_SPEED = 0.12
EXPERT_NOISE = 0.02
GOAL_RADIUS = 0.1
HORIZON = 8            # actions per chunk
WINDOW = 2             # observation history length
D_OBS = 6
MAX_EPISODE_STEPS = 64


class EnvError(ValueError):
    pass


@dataclass
class NormStats:
    lo: np.ndarray     # per-dimension action minimum over the dataset
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if not np.all(self.hi > self.lo):
            raise EnvError("NormStats requires hi > lo per dimension")


def _clip_box(p: np.ndarray) -> np.ndarray:
    return np.clip(p, -WORKSPACE, WORKSPACE)


class ForkEnv:
    """Two goals mirrored about x=0; success is reaching either one."""

    name = "fork"
    goal_left = np.array([-0.7, 0.8])
    goal_right = np.array([0.7, 0.8])

    def __init__(self):
        self.pos = np.zeros(2)
        self.t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.pos = np.array([rng.uniform(-0.15, 0.15), -0.8 + rng.uniform(-0.05, 0.05)])
        self.t = 0
        return self.pos.copy()

    def set_state(self, pos: np.ndarray) -> None:
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.t = 0

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal_left - self.pos, self.goal_right - self.pos])

    def step(self, action: np.ndarray) -> None:
        a = np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)
        self.pos = _clip_box(self.pos + a)
        self.t += 1

    def teleport(self, displacement: np.ndarray) -> None:
        self.pos = _clip_box(self.pos + np.asarray(displacement, dtype=np.float64))

    def is_success(self) -> bool:
        return bool(
            np.linalg.norm(self.pos - self.goal_left) <= GOAL_RADIUS
            or np.linalg.norm(self.pos - self.goal_right) <= GOAL_RADIUS
        )


class HangEnv:
    """Slot-then-hang task: pass a narrow gap in a wall, then reach the hook.

    The wall spans the band y in [0, 0.2] except for the slot |x| <= 0.05;
    moves ending inside the wall are blocked (the agent stays put). Success
    requires having crossed the band by movement (teleports don't count)
    and being within the goal radius of the hang point.
    """

    name = "hang"
    wall_lo = 0.0
    wall_hi = 0.2
    slot_half = 0.05
    approach = np.array([0.0, -0.15])
    exit_point = np.array([0.0, 0.35])
    hang_point = np.array([0.55, 0.75])

    def __init__(self, slot_half: float | None = None):
        if slot_half is not None:
            self.slot_half = slot_half
        self.pos = np.zeros(2)
        self.t = 0
        self.crossed = False

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.pos = np.array([-0.5 + rng.uniform(-0.05, 0.05), -0.7 + rng.uniform(-0.05, 0.05)])
        self.t = 0
        self.crossed = False
        return self.pos.copy()

    def set_state(self, pos: np.ndarray) -> None:
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.t = 0
        self.crossed = False

    def _in_wall(self, p: np.ndarray) -> bool:
        return bool(self.wall_lo <= p[1] <= self.wall_hi and abs(p[0]) > self.slot_half)

    def observe(self) -> np.ndarray:
        slot_center = np.array([0.0, 0.5 * (self.wall_lo + self.wall_hi)])
        return np.concatenate([self.pos, slot_center - self.pos, self.hang_point - self.pos])

    def step(self, action: np.ndarray) -> None:
        a = np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)
        nxt = _clip_box(self.pos + a)
        if self._in_wall(nxt):
            nxt = self.pos.copy()  # blocked
        if self.pos[1] <= self.wall_hi < nxt[1]:
            self.crossed = True
        self.pos = nxt
        self.t += 1

    def teleport(self, displacement: np.ndarray) -> None:
        nxt = _clip_box(self.pos + np.asarray(displacement, dtype=np.float64))
        if self._in_wall(nxt):
            # project out of the wall band, toward the nearer edge
            if abs(nxt[1] - self.wall_lo) < abs(nxt[1] - self.wall_hi):
                nxt[1] = self.wall_lo - 0.02
            else:
                nxt[1] = self.wall_hi + 0.02
        self.pos = nxt

    def is_success(self) -> bool:
        return bool(self.crossed and np.linalg.norm(self.pos - self.hang_point) <= GOAL_RADIUS)


def make_env(env_id: str):
    if env_id == "fork":
        return ForkEnv()
    if env_id == "hang":
        return HangEnv()
    raise EnvError(f"unknown env {env_id!r}")


# ---------------------------------------------------------------------------
# scripted experts


def _greedy_action(pos: np.ndarray, target: np.ndarray, rng, noise_std: float) -> np.ndarray:
    d = target - pos
    dist = np.linalg.norm(d)
    a = d if dist <= EXPERT_SPEED else d * (EXPERT_SPEED / dist)
    if noise_std > 0 and rng is not None:
        a = a + rng.normal(0.0, noise_std, size=2)
    return np.clip(a, -A_MAX, A_MAX)


def _fork_target(pos: np.ndarray, mode: str) -> np.ndarray:
    return ForkEnv.goal_left if mode == "left" else ForkEnv.goal_right


def _hang_target(pos: np.ndarray) -> np.ndarray:
    if pos[1] > HangEnv.wall_hi + 0.1:
        return HangEnv.hang_point
    if abs(pos[0]) <= 0.03 and pos[1] >= HangEnv.approach[1] - 0.02:
        return HangEnv.exit_point   # centered on the slot line: go straight up
    return HangEnv.approach


def fork_expert(pos: np.ndarray, mode: str, rng=None, noise_std: float = EXPERT_NOISE) -> np.ndarray:
    """Plan an action chunk toward the mode's goal from the given position."""
    if mode not in ("left", "right"):
        raise EnvError(f"fork mode must be left or right, got {mode!r}")
    p = np.asarray(pos, dtype=np.float64).copy()
    chunk = np.zeros((HORIZON, 2))
    for i in range(HORIZON):
        target = _fork_target(p, mode)
        if np.linalg.norm(target - p) <= 1e-9:
            break
        chunk[i] = _greedy_action(p, target, rng, noise_std)
        p = _clip_box(p + chunk[i])
    return chunk


def hang_expert(pos: np.ndarray, rng=None, noise_std: float = EXPERT_NOISE) -> np.ndarray:
    """Plan a chunk through the slot and on toward the hang point."""
    p = np.asarray(pos, dtype=np.float64).copy()
    chunk = np.zeros((HORIZON, 2))
    for i in range(HORIZON):
        target = _hang_target(p)
        if np.linalg.norm(HangEnv.hang_point - p) <= 1e-9:
            break
        chunk[i] = _greedy_action(p, target, rng, noise_std)
        p = _clip_box(p + chunk[i])
    return chunk


def expert_policy(env_id: str, mode: str | None = None, noise_std: float = 0.0):
    """Expert as a rollout policy: maps an observation window to a chunk."""

    def plan(window: np.ndarray, rng: np.random.Generator):
        pos = window[-1, :2]  # most recent observation row
        if env_id == "fork":
            m = mode
            if m is None:
                # pick the nearer goal when no mode is pinned
                dl = np.linalg.norm(ForkEnv.goal_left - pos)
                dr = np.linalg.norm(ForkEnv.goal_right - pos)
                m = "left" if dl <= dr else "right"
            chunk = fork_expert(pos, m, rng, noise_std)
        else:
            chunk = hang_expert(pos, rng, noise_std)
        return chunk

    return plan


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    env_id: str
    windows: np.ndarray      # (S, WINDOW, D_OBS)
    chunks: np.ndarray       # (S, HORIZON, 2) raw environment units
    modes: np.ndarray        # (S,) uint8; fork: 0=left 1=right, hang: 0
    episode_ids: np.ndarray  # (S,)
    t_index: np.ndarray      # (S,)
    stats: NormStats
    episodes: int = 0
    seed: int = 0

    @property
    def num_samples(self) -> int:
        return int(self.windows.shape[0])

    def normalized_chunks(self) -> np.ndarray:
        flat = self.chunks.reshape(self.num_samples, -1)
        lo = np.tile(self.stats.lo, HORIZON)
        hi = np.tile(self.stats.hi, HORIZON)
        return 2.0 * (flat - lo) / (hi - lo) - 1.0


DATASET_MAGIC = b"EBPD"
DATASET_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    meta = {
        "env": ds.env_id, "episodes": ds.episodes, "seed": ds.seed,
        "window": WINDOW, "horizon": HORIZON, "d_obs": D_OBS, "d_action": 2,
        "num_samples": ds.num_samples,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr, dtype in (
            (ds.windows, "<f8"), (ds.chunks, "<f8"),
            (ds.modes, "<u1"), (ds.episode_ids, "<u4"), (ds.t_index, "<u4"),
            (ds.stats.lo, "<f8"), (ds.stats.hi, "<f8"),
        ):
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise EnvError(f"bad dataset magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != DATASET_VERSION:
            raise EnvError(f"unsupported dataset version {version}")
        (jlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(jlen).decode())
        s = meta["num_samples"]
        windows = np.frombuffer(f.read(8 * s * WINDOW * D_OBS), "<f8").reshape(s, WINDOW, D_OBS)
        chunks = np.frombuffer(f.read(8 * s * HORIZON * 2), "<f8").reshape(s, HORIZON, 2)
        modes = np.frombuffer(f.read(s), "<u1").copy()
        episode_ids = np.frombuffer(f.read(4 * s), "<u4").copy()
        t_index = np.frombuffer(f.read(4 * s), "<u4").copy()
        lo = np.frombuffer(f.read(16), "<f8").copy()
        hi = np.frombuffer(f.read(16), "<f8").copy()
    return Dataset(
        env_id=meta["env"], windows=windows.copy(), chunks=chunks.copy(),
        modes=modes, episode_ids=episode_ids, t_index=t_index,
        stats=NormStats(lo, hi), episodes=meta["episodes"], seed=meta["seed"],
    )


def _window_stack(history: list[np.ndarray]) -> np.ndarray:
    rows = history[-WINDOW:]
    while len(rows) < WINDOW:
        rows = [rows[0]] + rows
    return np.stack(rows)


def generate_dataset(env_id: str, episodes: int, seed: int) -> Dataset:
    """Roll the scripted expert and slice overlapping windowed samples."""
    if episodes < 1:
        raise EnvError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    env = make_env(env_id)
    windows, chunks, modes, ep_ids, t_idx = [], [], [], [], []
    for ep in range(episodes):
        if env_id == "fork":
            mode = "left" if rng.random() < 0.5 else "right"
        else:
            mode = None
        env.reset(rng)
        obs_hist = [env.observe()]
        actions: list[np.ndarray] = []
        for _ in range(MAX_EPISODE_STEPS):
            if env.is_success():
                break
            if env_id == "fork":
                a = fork_expert(env.pos, mode, rng, EXPERT_NOISE)[0]
            else:
                a = hang_expert(env.pos, rng, EXPERT_NOISE)[0]
            env.step(a)
            actions.append(a)
            obs_hist.append(env.observe())
        T = len(actions)
        acts = np.array(actions) if T else np.zeros((0, 2))
        for t in range(T):
            windows.append(_window_stack(obs_hist[: t + 1]))
            chunk = np.zeros((HORIZON, 2))
            avail = min(HORIZON, T - t)
            chunk[:avail] = acts[t: t + avail]
            chunks.append(chunk)
            modes.append(1 if mode == "right" else 0)
            ep_ids.append(ep)
            t_idx.append(t)
    windows = np.array(windows)
    chunks = np.array(chunks)
    flat = chunks.reshape(-1, 2)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    pad = 1e-6  # guard degenerate dims
    stats = NormStats(lo - pad, hi + pad)
    return Dataset(
        env_id=env_id, windows=windows, chunks=chunks,
        modes=np.array(modes, dtype=np.uint8),
        episode_ids=np.array(ep_ids, dtype=np.uint32),
        t_index=np.array(t_idx, dtype=np.uint32),
        stats=stats, episodes=episodes, seed=seed,
    )


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EpisodeRecord:
    env_id: str
    seed: int
    start_pos: np.ndarray
    frames: list[dict] = field(default_factory=list)   # frame, x, y, energy, steps_used
    actions: list[np.ndarray] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    perturb_step: int | None = None
    perturb_displacement: np.ndarray | None = None
    success: bool = False
    failure_cause: str | None = None

    def to_csv(self, path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(["frame", "x", "y", "energy", "steps_used", "perturbed"])
            for row in self.frames:
                w.writerow([row["frame"], repr(row["x"]), repr(row["y"]),
                            repr(row["energy"]), row["steps_used"],
                            int(row["frame"] == self.perturb_step)])


def rollout(
    policy,
    env_id: str,
    max_steps: int = MAX_EPISODE_STEPS,
    perturbation: tuple[int, np.ndarray] | None = None,
    seed: int = 0,
    exec_horizon: int = 4,
) -> EpisodeRecord:
    """Receding-horizon episode: plan a chunk, execute a prefix, re-plan.

    ``policy(window, rng)`` returns either a raw (HORIZON, 2) chunk or an
    object with ``.trajectory`` / ``.final_energy`` / ``.steps_used``.
    A perturbation (step k, displacement) teleports the agent right before
    frame k executes.
    """
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    env.reset(rng)
    rec = EpisodeRecord(env_id=env_id, seed=seed, start_pos=env.pos.copy())
    if perturbation is not None:
        rec.perturb_step = int(perturbation[0])
        rec.perturb_displacement = np.asarray(perturbation[1], dtype=np.float64)
    obs_hist = [env.observe()]
    rec.states.append(env.pos.copy())
    frame = 0
    while frame < max_steps and not env.is_success():
        window = _window_stack(obs_hist)
        try:
            out = policy(window, rng)
        except Exception as e:  # policy abort is a recorded failure, not a crash
            rec.failure_cause = f"policy abort: {e}"
            break
        if hasattr(out, "trajectory"):
            chunk = np.asarray(out.trajectory, dtype=np.float64)
            energy = float(out.final_energy)
            steps_used = int(out.steps_used)
        else:
            chunk = np.asarray(out, dtype=np.float64)
            energy = float("nan")
            steps_used = 0
        for a in chunk[:exec_horizon]:
            if rec.perturb_step is not None and frame == rec.perturb_step:
                env.teleport(rec.perturb_displacement)
                obs_hist.append(env.observe())
                rec.states.append(env.pos.copy())
            env.step(a)
            frame += 1
            obs_hist.append(env.observe())
            rec.states.append(env.pos.copy())
            rec.actions.append(np.asarray(a, dtype=np.float64).copy())
            rec.frames.append({
                "frame": frame, "x": float(env.pos[0]), "y": float(env.pos[1]),
                "energy": energy, "steps_used": steps_used,
            })
            if frame >= max_steps or env.is_success():
                break
    rec.success = env.is_success()
    if not rec.success and rec.failure_cause is None:
        rec.failure_cause = "step limit"
    return rec


def replay(rec: EpisodeRecord) -> list[np.ndarray]:
    """Re-execute a record's actions from its start state; returns positions."""
    env = make_env(rec.env_id)
    env.set_state(rec.start_pos)
    states = [env.pos.copy()]
    frame = 0
    for a in rec.actions:
        if rec.perturb_step is not None and frame == rec.perturb_step:
            env.teleport(rec.perturb_displacement)
            states.append(env.pos.copy())
        env.step(a)
        frame += 1
        states.append(env.pos.copy())
    return states
