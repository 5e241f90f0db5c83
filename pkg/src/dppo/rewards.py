"""Periodic gait, command tracking and regularization rewards."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import ndtr

from .terrain import ConfigError

# joint layout shared with envsim
HIP_YAW = (0, 6)
HIP_ROLL = (1, 7)
HIP_PITCH = (2, 8)
KNEE = (3, 9)
ARMS = tuple(range(12, 18))

REG_TERMS = ("action_diff", "dof_limits", "dof_vel", "dof_acc", "arm", "orientation",
             "torso_yaw", "torques")
TERM_NAMES = ("periodic_left", "periodic_right", "command_x", "command_y", "command_yaw") + REG_TERMS


@dataclass(frozen=True)
class RewardWeights:
    # periodic
    alpha_swing: float = 1.0
    alpha_stance: float = 1.0
    lambda1: float = -0.5  # stance force exponent
    lambda2: float = -0.5  # swing speed exponent
    kappa: float = 50.0
    periodic_convention: str = "paper"
    # command
    cmd_lambda_x: float = 1.0
    cmd_lambda_y: float = 1.0
    cmd_lambda_yaw: float = 1.0
    cmd_omega_x: float = 4.0
    cmd_omega_y: float = 4.0
    cmd_omega_yaw: float = 4.0
    # exponent scales of the regularization terms
    scale_action_diff: float = -0.5
    scale_dof_limits: float = -2.0
    scale_dof_vel: float = -0.01
    scale_dof_acc: float = 1e-5
    scale_orientation: float = -2.0
    scale_torques: float = -0.01
    # term weights in the total
    w_periodic: float = 1.0
    w_command: float = 1.0
    w_action_diff: float = 0.1
    w_dof_limits: float = 0.1
    w_dof_vel: float = 0.1
    w_dof_acc: float = 0.1
    w_arm: float = -0.05
    w_orientation: float = 0.1
    w_torso_yaw: float = -0.1
    w_torques: float = 0.1

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError("kappa must be > 0")
        for axis in ("x", "y", "yaw"):
            if not getattr(self, f"cmd_omega_{axis}") > 0:
                raise ConfigError(f"cmd_omega_{axis} must be > 0")
        if self.periodic_convention not in ("paper", "inverted"):
            raise ConfigError("periodic_convention must be 'paper' or 'inverted'")
        # keep every exponential term inside (0, 1]
        for name in ("lambda1", "lambda2", "scale_action_diff", "scale_dof_limits",
                     "scale_dof_vel", "scale_orientation", "scale_torques"):
            if getattr(self, name) > 0:
                raise ConfigError(f"{name} must be <= 0")
        if self.scale_dof_acc < 0:
            raise ConfigError("scale_dof_acc must be >= 0")

    def term_weights(self) -> dict[str, float]:
        w = {"periodic_left": self.w_periodic, "periodic_right": self.w_periodic,
             "command_x": self.w_command, "command_y": self.w_command, "command_yaw": self.w_command}
        for t in REG_TERMS:
            w[t] = getattr(self, f"w_{t}")
        return w

    def scaled(self, **weights) -> "RewardWeights":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(weights)
        return RewardWeights(**d)


@dataclass
class RewardBreakdown:
    raw: dict[str, np.ndarray]
    weighted: dict[str, np.ndarray]
    total: np.ndarray


def phase_indicator(phi, rho, kappa):
    """Smoothed swing/stance membership of a cycle phase.

    Swing occupies [0, rho). The indicator is the probability that a phase
    blurred by a wrapped normal of std 1/sqrt(kappa) lands in the swing arc,
    using the periodic images k = -1, 0, 1 of both boundaries.
    """
    phi = np.mod(np.asarray(phi, dtype=np.float64), 1.0)
    sigma = 1.0 / np.sqrt(kappa)
    e_swing = np.zeros_like(phi)
    for k in (-1.0, 0.0, 1.0):
        e_swing = e_swing + ndtr((phi - k) / sigma) - ndtr((phi - rho - k) / sigma)
    e_swing = np.clip(e_swing, 0.0, 1.0)
    return e_swing, 1.0 - e_swing


def periodic_reward(phi, force, speed, rho, theta_left, theta_right, weights: RewardWeights):
    """Per-foot periodic reward. ``force``/``speed`` have a trailing axis of
    2 (left, right). Returns (per_foot[..., 2], sum, stance expectations)."""
    force = np.asarray(force, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)[..., None]
    offsets = np.array([theta_left, theta_right])
    e_swing, e_stance = phase_indicator(phi + offsets, rho, weights.kappa)
    if weights.periodic_convention == "paper":
        v_stance = np.exp(weights.lambda1 * force**2)
        v_swing = np.exp(weights.lambda2 * speed**2)
    else:
        v_stance = np.exp(weights.lambda2 * speed**2)
        v_swing = np.exp(weights.lambda1 * force**2)
    per_foot = weights.alpha_stance * e_stance * v_stance + weights.alpha_swing * e_swing * v_swing
    return per_foot, per_foot.sum(axis=-1), e_stance


def command_terms(v_des, v_t, weights: RewardWeights) -> np.ndarray:
    """Per-axis tracking terms lambda_i * exp(-omega_i |error_i|), shape (..., 3)."""
    lam = np.array([weights.cmd_lambda_x, weights.cmd_lambda_y, weights.cmd_lambda_yaw])
    om = np.array([weights.cmd_omega_x, weights.cmd_omega_y, weights.cmd_omega_yaw])
    err = np.abs(np.asarray(v_des, dtype=np.float64) - np.asarray(v_t, dtype=np.float64))
    return lam * np.exp(-om * err)


def command_reward(v_des, v_t, weights: RewardWeights):
    return command_terms(v_des, v_t, weights).sum(axis=-1)


def dof_limit_violation(b, lower, upper) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return (np.maximum(0.0, b - upper) - np.minimum(0.0, b - lower)).sum(axis=-1)


def regularization_terms(*, action, prev_action, joint_proposal, joint_lower, joint_upper,
                         joint_vel, joint_acc, joints, roll, pitch, torque,
                         weights: RewardWeights) -> dict[str, np.ndarray]:
    action = np.asarray(action, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    w = weights
    torso_yaw = 0.5 * (joints[..., HIP_YAW[0]] - joints[..., HIP_YAW[1]])
    return {
        "action_diff": np.exp(w.scale_action_diff * np.linalg.norm(action - prev_action, axis=-1)),
        "dof_limits": np.exp(w.scale_dof_limits * dof_limit_violation(joint_proposal, joint_lower, joint_upper)),
        "dof_vel": np.exp(w.scale_dof_vel * np.sum(np.square(joint_vel), axis=-1)),
        "dof_acc": np.exp(-w.scale_dof_acc * np.sum(np.square(joint_acc), axis=-1)),
        "arm": np.expm1(np.abs(joints[..., list(ARMS)]).sum(axis=-1)),
        "orientation": np.exp(w.scale_orientation * (np.square(roll) + np.square(pitch))),
        "torso_yaw": np.abs(torso_yaw),
        "torques": np.exp(w.scale_torques * np.linalg.norm(torque, axis=-1)),
    }


def total_reward(raw: dict[str, np.ndarray], weights: RewardWeights) -> RewardBreakdown:
    tw = weights.term_weights()
    weighted = {k: tw[k] * np.asarray(raw[k], dtype=np.float64) for k in TERM_NAMES}
    total = np.zeros_like(weighted[TERM_NAMES[0]])
    for k in TERM_NAMES:
        total = total + weighted[k]
    return RewardBreakdown(dict(raw), weighted, total)


def compute_rewards(info, weights: RewardWeights, env_cfg) -> RewardBreakdown:
    """Assemble every term from the reward inputs returned by ``envsim.step``."""
    per_foot, _, _ = periodic_reward(info["phase"], info["foot_force"], info["foot_speed"],
                                     env_cfg.rho, env_cfg.theta_left, env_cfg.theta_right, weights)
    cmd = command_terms(info["command"], info["achieved_vel"], weights)
    raw = {"periodic_left": per_foot[..., 0], "periodic_right": per_foot[..., 1],
           "command_x": cmd[..., 0], "command_y": cmd[..., 1], "command_yaw": cmd[..., 2]}
    raw.update(regularization_terms(
        action=info["action"], prev_action=info["prev_action"],
        joint_proposal=info["joint_proposal"], joint_lower=env_cfg.lower_array(),
        joint_upper=env_cfg.upper_array(), joint_vel=info["joint_vel"], joint_acc=info["joint_acc"],
        joints=info["joints"], roll=info["roll"], pitch=info["pitch"], torque=info["torque"],
        weights=weights))
    return total_reward(raw, weights)
