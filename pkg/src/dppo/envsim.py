"""Reduced-order biped on a heightmap, batched over environments.

Joint layout: 0-5 left leg (hip yaw, hip roll, hip pitch, knee, ankle pitch,
ankle roll), 6-11 right leg in the same order, 12-14 left arm, 15-17 right arm.

Every function works on a batch; a single environment is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .rewards import HIP_PITCH, HIP_ROLL, HIP_YAW, KNEE
from .terrain import SCAN_SIZE, ConfigError, Heightmap, bilinear, scan_points

N_JOINTS = 18
PROPRIO_DIM = 66
COMMAND_DIM = 3
PERIODIC_DIM = 3
HISTORY_LEN = 50

# slices of a proprio frame
LINVEL = slice(0, 3)
ANGVEL = slice(3, 6)
AVGVEL = slice(6, 9)
GRAVITY = slice(9, 12)
JOINTS = slice(12, 30)
JOINT_VEL = slice(30, 48)
PREV_ACTION = slice(48, 66)

_LEG_LIMITS = ((-0.5, 0.5), (-0.5, 0.5), (-1.0, 1.0), (0.0, 1.5), (-0.8, 0.8), (-0.4, 0.4))
_ARM_LIMITS = ((-1.0, 1.0),) * 3
DEFAULT_LOWER = tuple(lo for lo, _ in _LEG_LIMITS * 2 + _ARM_LIMITS * 2)
DEFAULT_UPPER = tuple(hi for _, hi in _LEG_LIMITS * 2 + _ARM_LIMITS * 2)


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    gait_freq: float = 1.25
    rho: float = 0.5
    theta_left: float = 0.0
    theta_right: float = 0.5
    joint_lower: tuple = DEFAULT_LOWER
    joint_upper: tuple = DEFAULT_UPPER
    kp: float = 40.0
    kd: float = 1.0
    tau_lag: float = 0.04
    vel_limit: float = 10.0
    k_x: float = 1.0
    k_y: float = 0.5
    k_yaw: float = 1.0
    c_knee: float = 0.25
    k_trip: float = 2.0
    k_f: float = 10.0
    f_nominal: float = 1.0
    leg_length: float = 0.5
    foot_lateral: float = 0.1
    foot_lead: float = 0.15
    nominal_height: float = 0.9
    att_relax: float = 2.0
    max_roll: float = 0.6
    max_pitch: float = 0.6
    trip_max: int = 8
    episode_len: int = 500
    vx_range: tuple = (0.0, 0.5)
    vy_range: tuple = (-0.2, 0.2)
    wyaw_range: tuple = (-0.3, 0.3)
    start_x: float = 2.0
    start_y: float = 0.0
    scan_spacing: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must be in (0, 1)")
        for name in ("theta_left", "theta_right"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        if len(self.joint_lower) != N_JOINTS or len(self.joint_upper) != N_JOINTS:
            raise ConfigError("joint_lower/joint_upper need 18 entries")
        if any(lo > hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ConfigError("joint_lower must not exceed joint_upper")
        if not self.tau_lag > 0:
            raise ConfigError("tau_lag must be > 0")
        if self.episode_len < 1:
            raise ConfigError("episode_len must be >= 1")
        for name in ("vx_range", "vy_range", "wyaw_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be (low, high) with low <= high")
        if not self.scan_spacing > 0:
            raise ConfigError("scan_spacing must be > 0")

    def lower_array(self) -> np.ndarray:
        return np.asarray(self.joint_lower, dtype=np.float64)

    def upper_array(self) -> np.ndarray:
        return np.asarray(self.joint_upper, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-group observation noise std. All zero is the clean teacher view."""

    linvel: float = 0.0
    angvel: float = 0.0
    avg_vel: float = 0.0
    gravity: float = 0.0
    joints: float = 0.0
    joint_vel: float = 0.0
    prev_action: float = 0.0
    grid: float = 0.0
    persistent: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.name != "persistent" and not getattr(self, f.name) >= 0:
                raise ConfigError(f"noise '{f.name}' must be >= 0")

    def proprio_sigma(self) -> np.ndarray:
        s = np.zeros(PROPRIO_DIM)
        s[LINVEL] = self.linvel
        s[ANGVEL] = self.angvel
        s[AVGVEL] = self.avg_vel
        s[GRAVITY] = self.gravity
        s[JOINTS] = self.joints
        s[JOINT_VEL] = self.joint_vel
        s[PREV_ACTION] = self.prev_action
        return s

    @property
    def enabled(self) -> bool:
        return bool(np.any(self.proprio_sigma() > 0))


@dataclass(frozen=True, eq=False)
class TerrainBatch:
    """Stack of same-geometry heightmaps, one per environment."""

    heights: np.ndarray  # (N, rows, cols)
    resolution: float
    origin: tuple

    @classmethod
    def of(cls, maps) -> "TerrainBatch":
        if isinstance(maps, Heightmap):
            maps = [maps]
        first = maps[0]
        return cls(np.stack([m.heights for m in maps]), first.resolution, first.origin)

    def ground(self, x, y) -> np.ndarray:
        return bilinear(self.heights, self.resolution, self.origin, x, y)


@dataclass
class RobotState:
    base_pos: np.ndarray
    base_rpy: np.ndarray
    base_linvel: np.ndarray
    base_angvel: np.ndarray
    joints: np.ndarray
    joint_vel: np.ndarray
    prev_joint_vel: np.ndarray
    joint_acc: np.ndarray
    foot_pos: np.ndarray  # (N, 2, 3)
    foot_vel: np.ndarray  # (N, 2)
    foot_force: np.ndarray  # (N, 2)
    in_contact: np.ndarray  # (N, 2)
    foot_ref: np.ndarray  # (N, 2) ground height the swing foot clears from
    phase: np.ndarray
    prev_action: np.ndarray
    trip_count: np.ndarray
    vel_sum: np.ndarray
    avg_vel: np.ndarray
    command: np.ndarray
    step: np.ndarray
    history: np.ndarray  # (N, HISTORY_LEN, PROPRIO_DIM), newest last
    obs_bias: np.ndarray  # (N, PROPRIO_DIM) persistent per-episode offsets

    @property
    def n(self) -> int:
        return self.base_pos.shape[0]

    def copy(self) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other: "RobotState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


@dataclass
class Observation:
    proprio: np.ndarray  # (N, 66)
    command: np.ndarray  # (N, 3)
    periodic: np.ndarray  # (N, 3)
    scan: np.ndarray  # (N, 441)
    history: np.ndarray  # (N, 50, 66)

    def flat(self) -> np.ndarray:
        n = self.proprio.shape[0]
        return np.concatenate([self.proprio, self.command, self.periodic, self.scan,
                               self.history.reshape(n, -1)], axis=1)


OBS_DIM = PROPRIO_DIM + COMMAND_DIM + PERIODIC_DIM + SCAN_SIZE + HISTORY_LEN * PROPRIO_DIM


def gravity_in_base(roll, pitch) -> np.ndarray:
    return np.stack([np.sin(pitch), -np.sin(roll) * np.cos(pitch),
                     -np.cos(roll) * np.cos(pitch)], axis=-1)


def proprio_frame(state: RobotState) -> np.ndarray:
    return np.concatenate([
        state.base_linvel, state.base_angvel, state.avg_vel,
        gravity_in_base(state.base_rpy[:, 0], state.base_rpy[:, 1]),
        state.joints, state.joint_vel, state.prev_action], axis=1)


def _feet_xy(x, y, yaw, swing, cfg: EnvConfig):
    """World xy of both feet (N, 2). Swing feet lead the base."""
    side = np.array([cfg.foot_lateral, -cfg.foot_lateral])
    lead = np.where(swing, cfg.foot_lead, 0.0)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    fx = x[:, None] + c * lead - s * side
    fy = y[:, None] + s * lead + c * side
    return fx, fy


def swing_mask(phase, cfg: EnvConfig) -> np.ndarray:
    foot_phase = np.mod(np.asarray(phase)[:, None] + np.array([cfg.theta_left, cfg.theta_right]), 1.0)
    return foot_phase < cfg.rho


def sample_command(rng, cfg: EnvConfig) -> np.ndarray:
    return np.array([rng.uniform(*cfg.vx_range), rng.uniform(*cfg.vy_range),
                     rng.uniform(*cfg.wyaw_range)])


def reset_batch(rngs, terrain: TerrainBatch, cfg: EnvConfig, noise: NoiseSpec | None = None) -> RobotState:
    """Fresh states for ``len(rngs)`` environments on ``terrain``."""
    n = len(rngs)
    x = np.full(n, cfg.start_x)
    y = np.full(n, cfg.start_y)
    yaw = np.zeros(n)
    phase = np.zeros(n)
    swing = swing_mask(phase, cfg)
    fx, fy = _feet_xy(x, y, yaw, swing, cfg)
    fground = terrain.ground(fx, fy)
    stance = ~swing
    wts = np.where(stance.any(axis=1, keepdims=True), stance, True).astype(np.float64)
    z = (fground * wts).sum(1) / wts.sum(1) + cfg.nominal_height
    commands = np.stack([sample_command(r, cfg) for r in rngs])
    bias = np.zeros((n, PROPRIO_DIM))
    if noise is not None and noise.persistent:
        sig = noise.proprio_sigma()
        bias = np.stack([r.normal(0.0, 1.0, PROPRIO_DIM) for r in rngs]) * sig
    st = RobotState(
        base_pos=np.stack([x, y, z], axis=1),
        base_rpy=np.zeros((n, 3)),
        base_linvel=np.zeros((n, 3)),
        base_angvel=np.zeros((n, 3)),
        joints=np.zeros((n, N_JOINTS)),
        joint_vel=np.zeros((n, N_JOINTS)),
        prev_joint_vel=np.zeros((n, N_JOINTS)),
        joint_acc=np.zeros((n, N_JOINTS)),
        foot_pos=np.stack([fx, fy, fground], axis=2),
        foot_vel=np.zeros((n, 2)),
        foot_force=np.where(stance, cfg.f_nominal, 0.0),
        in_contact=stance.copy(),
        foot_ref=fground.copy(),
        phase=phase,
        prev_action=np.zeros((n, N_JOINTS)),
        trip_count=np.zeros(n, dtype=np.int64),
        vel_sum=np.zeros((n, 3)),
        avg_vel=np.zeros((n, 3)),
        command=commands,
        step=np.zeros(n, dtype=np.int64),
        history=np.zeros((n, HISTORY_LEN, PROPRIO_DIM)),
        obs_bias=bias,
    )
    st.joints = np.clip(st.joints, cfg.lower_array(), cfg.upper_array())
    st.history[:, -1] = proprio_frame(st)
    return st


def reset(seed, terrain: Heightmap, cfg: EnvConfig, noise: NoiseSpec | None = None):
    """Single-environment reset returning (state, clean observation)."""
    rng = np.random.default_rng(seed)
    tb = TerrainBatch.of(terrain)
    st = reset_batch([rng], tb, cfg, noise)
    return st, build_observation(st, true_scan_batch(tb, st, cfg), cfg)


def true_scan_batch(terrain: TerrainBatch, state: RobotState, cfg: EnvConfig) -> np.ndarray:
    x, y, z = state.base_pos.T
    px, py = scan_points(x, y, state.base_rpy[:, 2], cfg.scan_spacing)
    return terrain.ground(px, py) - z[:, None]


def step(state: RobotState, action, terrain, cfg: EnvConfig):
    """Advance every environment by one control step.

    Returns (new_state, reward_inputs, done, timeout). ``done`` marks failure
    terminations (falls, too many trips, non-finite actions); ``timeout`` marks
    episodes reaching ``episode_len`` without failing.
    """
    if isinstance(terrain, Heightmap):
        terrain = TerrainBatch.of(terrain)
    dt = cfg.dt
    lo, hi = cfg.lower_array(), cfg.upper_array()
    a = np.asarray(action, dtype=np.float64).reshape(state.n, N_JOINTS)
    fault = ~np.all(np.isfinite(a), axis=1)
    a = np.where(fault[:, None], state.joints, a)
    b = state.joints

    # (1) first-order joint lag toward the position targets
    qd_target = (a - b) / cfg.tau_lag
    proposal = b + qd_target * dt
    qd = np.clip(qd_target, -cfg.vel_limit, cfg.vel_limit)
    b_new = np.clip(b + qd * dt, lo, hi)
    qd = (b_new - b) / dt
    qdd = (qd - state.joint_vel) / dt
    torque = cfg.kp * (a - b) - cfg.kd * qd

    # (2) gait clock
    phase = np.mod(state.phase + cfg.gait_freq * dt, 1.0)
    swing = swing_mask(phase, cfg)
    was_swing = ~state.in_contact

    # (3) planar velocity read out from the hip lean angles, in the yaw frame
    vx = cfg.k_x * b_new[:, list(HIP_PITCH)].mean(axis=1)
    vy = cfg.k_y * b_new[:, list(HIP_ROLL)].mean(axis=1)
    wz = cfg.k_yaw * b_new[:, list(HIP_YAW)].mean(axis=1)
    x, y, z = state.base_pos.T
    roll, pitch, yaw = state.base_rpy.T
    c, s = np.cos(yaw), np.sin(yaw)
    x_try = x + (c * vx - s * vy) * dt
    y_try = y + (s * vx + c * vy) * dt

    # (4) swing clearance and trips
    clearance = np.maximum(0.0, cfg.c_knee * b_new[:, list(KNEE)])
    fx, fy = _feet_xy(x_try, y_try, yaw, swing, cfg)
    fground = terrain.ground(fx, fy)
    liftoff = swing & ~was_swing
    foot_ref = np.where(liftoff, terrain.ground(*_feet_xy(x, y, yaw, np.zeros_like(swing), cfg)),
                        state.foot_ref)
    rise = fground - foot_ref
    tripped = swing & (rise > clearance)
    any_trip = tripped.any(axis=1)
    excess = np.where(tripped, rise - clearance, 0.0).sum(axis=1)
    foot_ref = np.where(tripped, fground, foot_ref)
    x_new = np.where(any_trip, x, x_try)
    y_new = np.where(any_trip, y, y_try)
    if any_trip.any():
        fx, fy = _feet_xy(x_new, y_new, yaw, swing, cfg)
        fground = terrain.ground(fx, fy)
    vx_ach = np.where(any_trip, 0.0, vx)
    vy_ach = np.where(any_trip, 0.0, vy)
    trip_count = state.trip_count + tripped.sum(axis=1)

    # (5) foot forces and speeds
    touchdown = ~swing & was_swing
    mismatch = np.abs(foot_ref + clearance - fground)
    force = np.where(swing, 0.0, cfg.f_nominal)
    force = np.where(touchdown, cfg.f_nominal + cfg.k_f * mismatch, force)
    knee_vel = qd[:, list(KNEE)]
    planar = np.hypot(vx_ach, vy_ach)[:, None]
    foot_speed = np.where(swing, np.sqrt(planar**2 + (cfg.leg_length * knee_vel) ** 2), 0.0)
    foot_z = np.where(swing, foot_ref + clearance, fground)

    # (6) base height from stance feet, attitude relaxation plus trip kicks
    stance = ~swing
    wts = np.where(stance.any(axis=1, keepdims=True), stance, True).astype(np.float64)
    z_new = (fground * wts).sum(1) / wts.sum(1) + cfg.nominal_height
    decay = max(0.0, 1.0 - cfg.att_relax * dt)
    roll_new = roll * decay
    pitch_new = pitch * decay + cfg.k_trip * excess
    yaw_new = yaw + wz * dt

    achieved = np.stack([vx_ach, vy_ach, wz], axis=1)
    vel_sum = state.vel_sum + achieved
    step_idx = state.step + 1
    new = RobotState(
        base_pos=np.stack([x_new, y_new, z_new], axis=1),
        base_rpy=np.stack([roll_new, pitch_new, yaw_new], axis=1),
        base_linvel=np.stack([vx_ach, vy_ach, (z_new - z) / dt], axis=1),
        base_angvel=np.stack([(roll_new - roll) / dt, (pitch_new - pitch) / dt, wz], axis=1),
        joints=b_new,
        joint_vel=qd,
        prev_joint_vel=state.joint_vel.copy(),
        joint_acc=qdd,
        foot_pos=np.stack([fx, fy, foot_z], axis=2),
        foot_vel=foot_speed,
        foot_force=force,
        in_contact=stance,
        foot_ref=foot_ref,
        phase=phase,
        prev_action=a,
        trip_count=trip_count,
        vel_sum=vel_sum,
        avg_vel=vel_sum / step_idx[:, None],
        command=state.command.copy(),
        step=step_idx,
        history=np.concatenate([state.history[:, 1:], np.zeros((state.n, 1, PROPRIO_DIM))], axis=1),
        obs_bias=state.obs_bias,
    )
    new.history[:, -1] = proprio_frame(new)

    done = (np.abs(roll_new) > cfg.max_roll) | (np.abs(pitch_new) > cfg.max_pitch) \
        | (trip_count > cfg.trip_max) | fault
    timeout = (step_idx >= cfg.episode_len) & ~done
    info = {
        "phase": phase, "swing": swing, "foot_force": force, "foot_speed": foot_speed,
        "command": state.command, "achieved_vel": achieved, "action": a,
        "prev_action": state.prev_action, "joint_proposal": proposal, "joint_vel": qd,
        "joint_acc": qdd, "joints": b_new, "roll": roll_new, "pitch": pitch_new,
        "torque": torque, "trips": tripped.sum(axis=1), "fault": fault, "clearance": clearance,
    }
    return new, info, done, timeout


def build_observation(state: RobotState, scan, cfg: EnvConfig, noise: NoiseSpec | None = None,
                      rngs=None) -> Observation:
    """Assemble the observation. With noise enabled every proprio group gets
    fresh Gaussian noise per query (history frames included); ``scan`` is used
    as given, so a noisy scan must already carry its noise."""
    n = state.n
    proprio = state.history[:, -1].copy()
    history = state.history.copy()
    if noise is not None and noise.enabled:
        if rngs is None:
            raise ValueError("noisy observations need per-env rngs")
        sig = noise.proprio_sigma()
        draws = np.stack([r.standard_normal((HISTORY_LEN + 1, PROPRIO_DIM)) for r in rngs])
        proprio = proprio + draws[:, 0] * sig + state.obs_bias
        history = history + draws[:, 1:] * sig + state.obs_bias[:, None, :]
    periodic = np.stack([np.sin(2 * np.pi * state.phase), np.cos(2 * np.pi * state.phase),
                         np.full(n, cfg.rho)], axis=1)
    scan = np.asarray(scan, dtype=np.float64).reshape(n, SCAN_SIZE)
    return Observation(proprio, state.command.copy(), periodic, scan.copy(), history)
