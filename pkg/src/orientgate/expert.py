"""Scripted demonstrator: damped-least-squares resolved-rate IK with a fixed phase schedule."""
from __future__ import annotations

import numpy as np

from .sim import Action, TaskGeometry, WorldState, jacobian, forward_kinematics

DAMPING = 0.01
GAIN = 0.8
NOISE_DEG = 0.3

# step budget, inclusive ranges for T = 96
REACH_END = 39
GRASP_END = 47
TRANSPORT_END = 87

# moves are spread out so the observation keeps encoding progress: the reach parks over the yellow
# cube just before the t = 32 query; while the cube is held the wrist turns at a constant rate, so
# the joints tell the t = 64 and t = 80 queries how far the episode is even if the arm lags
REACH_ARRIVE = 30
TRANSPORT_ARRIVE = 76
WRIST_START_DEG = -25.0
WRIST_RATE_DEG = 2.0
WRIST_STOP = 80
WRIST_WEIGHT = 0.1


def gripper_schedule(t: int) -> float:
    """Open (1) until 40, linear close over 40..47, closed, linear open over 88..95."""
    if t < 40:
        return 1.0
    if t <= 47:
        return 1.0 - (t - 40) / 7.0
    if t < 88:
        return 0.0
    return min((t - 88) / 7.0, 1.0)


def phase(t: int) -> str:
    if t <= REACH_END:
        return "reach"
    if t <= GRASP_END:
        return "grasp"
    if t <= TRANSPORT_END:
        return "transport"
    return "release"


def dls_step(state: WorldState, target: np.ndarray, gain: float = GAIN, damping: float = DAMPING,
             wrist: float | None = None) -> np.ndarray:
    """One resolved-rate joint increment toward ``target``, clamped to the rate limit.

    With ``wrist`` given, the joint sum (last-link heading relative to the base) is a third task
    coordinate, weighted by WRIST_WEIGHT metres per radian.
    """
    geo = state.geometry
    J = jacobian(state.base, state.joints, geo.link_lengths)
    err = np.asarray(target, dtype=np.float64) - forward_kinematics(state.base, state.joints, geo.link_lengths)
    if wrist is not None:
        J = np.vstack([J, np.full((1, 3), WRIST_WEIGHT)])
        err = np.append(err, WRIST_WEIGHT * (wrist - float(np.sum(state.joints))))
    dq = gain * J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(len(err)), err)
    if not np.all(np.isfinite(dq)):
        raise FloatingPointError(f"IK step non-finite at joints {state.joints}")
    return np.clip(dq, -geo.rate_limit, geo.rate_limit)


def wrist_clock(t: int) -> float:
    """Joint-sum target (rad) after step ``t`` once the cube is held: a constant-rate sweep until the last query."""
    return np.radians(WRIST_START_DEG + WRIST_RATE_DEG * (min(t + 1, WRIST_STOP) - (GRASP_END + 1)))


def paced_target(state: WorldState, target: np.ndarray) -> np.ndarray:
    """Waypoint 1/n of the way from the end effector to ``target``, n = steps left to arrival."""
    arrive = REACH_ARRIVE if state.t <= GRASP_END else TRANSPORT_ARRIVE
    n = max(arrive - state.t, 1)
    ee = state.ee()
    return ee + (np.asarray(target, dtype=np.float64) - ee) / n


def expert_action(state: WorldState, rng: np.random.Generator | None = None,
                  noise_deg: float = NOISE_DEG) -> Action:
    """Expert command for the current step; ``rng=None`` gives the noiseless controller."""
    if phase(state.t) in ("reach", "grasp"):
        dq = dls_step(state, paced_target(state, state.yellow))
    else:
        dq = dls_step(state, paced_target(state, state.blue), wrist=wrist_clock(state.t))
    joints = state.joints + dq
    if rng is not None and noise_deg > 0:
        joints = joints + np.radians(noise_deg) * rng.standard_normal(3)
    lim = state.geometry.joint_limit
    return Action(np.clip(joints, -lim, lim), gripper_schedule(state.t))
