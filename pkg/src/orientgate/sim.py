"""Planar kinematic ring platform: parked base, 3R arm, two cubes, grasp/release rules.

World frame: origin at the ring centre, ring angle 0 along +x.  The base sits
on the ring facing the centre and never moves during an episode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TaskGeometry:
    ring_radius: float = 0.30
    yellow_home: tuple = (-0.08, 0.0)
    blue_home: tuple = (0.0, 0.0)
    link_lengths: tuple = (0.16, 0.14, 0.10)
    grasp_radius: float = 0.015
    success_radius: float = 0.02
    episode_len: int = 96
    chunk: int = 16
    jitter_std: float = 0.01
    home_joints_deg: tuple = (0.0, 60.0, -60.0)
    joint_limit_deg: float = 150.0
    rate_limit_deg: float = 6.0
    cube_size: float = 0.04

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def joint_limit(self) -> float:
        return math.radians(self.joint_limit_deg)

    @property
    def rate_limit(self) -> float:
        return math.radians(self.rate_limit_deg)

    @property
    def home_joints(self) -> np.ndarray:
        return np.radians(np.asarray(self.home_joints_deg, dtype=np.float64))

    def to_kv(self) -> dict:
        return {
            "ring_radius": self.ring_radius,
            "yellow_home": ",".join(repr(float(v)) for v in self.yellow_home),
            "blue_home": ",".join(repr(float(v)) for v in self.blue_home),
            "link_lengths": ",".join(repr(float(v)) for v in self.link_lengths),
            "grasp_radius": self.grasp_radius,
            "success_radius": self.success_radius,
            "episode_len": self.episode_len,
            "chunk": self.chunk,
            "jitter_std": self.jitter_std,
            "home_joints_deg": ",".join(repr(float(v)) for v in self.home_joints_deg),
            "joint_limit_deg": self.joint_limit_deg,
            "rate_limit_deg": self.rate_limit_deg,
            "cube_size": self.cube_size,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "TaskGeometry":
        fields_ = cls.__dataclass_fields__
        kwargs = {}
        for key, raw in kv.items():
            if key not in fields_:
                continue
            default = fields_[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in str(raw).split(","))
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class Action:
    joint_targets: np.ndarray
    gripper_cmd: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.joint_targets, dtype=np.float64), [self.gripper_cmd]])

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:3].copy(), float(a[3]))


@dataclass(frozen=True)
class WorldState:
    base: Pose2D
    joints: np.ndarray
    gripper: float
    yellow: np.ndarray
    blue: np.ndarray
    attached: bool = False
    t: int = 0
    geometry: TaskGeometry = field(default=TaskGeometry(), repr=False, compare=False)

    def ee(self) -> np.ndarray:
        return forward_kinematics(self.base, self.joints, self.geometry.link_lengths)


def reset(theta_deg: float, jitter_std: float = 0.0, seed: int = 0,
          geometry: TaskGeometry = TaskGeometry()) -> WorldState:
    if not 0 <= theta_deg < 360:
        raise ValueError(f"theta_deg must lie in [0, 360), got {theta_deg}")
    if jitter_std < 0:
        raise ValueError(f"jitter_std must be non-negative, got {jitter_std}")
    th = math.radians(theta_deg)
    bx, by = geometry.ring_radius * math.cos(th), geometry.ring_radius * math.sin(th)
    rng = np.random.default_rng(seed)
    yellow = np.asarray(geometry.yellow_home, dtype=np.float64) + rng.normal(0.0, 1.0, 2) * jitter_std
    blue = np.asarray(geometry.blue_home, dtype=np.float64) + rng.normal(0.0, 1.0, 2) * jitter_std
    return WorldState(
        base=Pose2D(bx, by, math.atan2(-by, -bx)),
        joints=geometry.home_joints.copy(),
        gripper=1.0,
        yellow=yellow,
        blue=blue,
        attached=False,
        t=0,
        geometry=geometry,
    )


def joint_positions(base: Pose2D, joints, link_lengths=TaskGeometry.link_lengths) -> np.ndarray:
    """Positions of joint 0 (the base), joint 1, joint 2 and the end effector, shape (4, 2)."""
    phi = base.heading + np.cumsum(np.asarray(joints, dtype=np.float64))
    L = np.asarray(link_lengths, dtype=np.float64)
    steps = np.stack([L * np.cos(phi), L * np.sin(phi)], axis=1)
    return np.vstack([[base.x, base.y], np.array([base.x, base.y]) + np.cumsum(steps, axis=0)])


def forward_kinematics(base: Pose2D, joints, link_lengths=TaskGeometry.link_lengths) -> np.ndarray:
    return joint_positions(base, joints, link_lengths)[-1]


def jacobian(base: Pose2D, joints, link_lengths=TaskGeometry.link_lengths) -> np.ndarray:
    """2x3 positional Jacobian; column i is the perpendicular of (ee - joint_i)."""
    pts = joint_positions(base, joints, link_lengths)
    lever = pts[-1] - pts[:-1]
    return np.stack([-lever[:, 1], lever[:, 0]], axis=0)


def step(state: WorldState, action: Action) -> WorldState:
    geo = state.geometry
    targets = np.asarray(action.joint_targets, dtype=np.float64)
    cmd = float(action.gripper_cmd)
    if not (np.all(np.isfinite(targets)) and math.isfinite(cmd)) or targets.shape != (3,):
        raise ValueError(f"step: non-finite or malformed action {action!r}")

    lim = geo.joint_limit
    delta = np.clip(targets - state.joints, -geo.rate_limit, geo.rate_limit)
    joints = np.clip(state.joints + delta, -lim, lim)
    gripper = min(max(cmd, 0.0), 1.0)
    ee = forward_kinematics(state.base, joints, geo.link_lengths)

    attached = state.attached
    yellow = state.yellow
    if state.gripper > 0.5 >= gripper:
        if float(np.hypot(*(ee - yellow))) <= geo.grasp_radius:
            attached = True
    elif state.gripper <= 0.5 < gripper:
        attached = False
    if attached:
        yellow = ee.copy()

    return replace(state, joints=joints, gripper=gripper, yellow=yellow,
                   attached=attached, t=state.t + 1)


def yellow_blue_distance(state: WorldState) -> float:
    return float(np.hypot(*(state.yellow - state.blue)))


def check_success(state: WorldState) -> bool:
    return (not state.attached and state.gripper > 0.5
            and yellow_blue_distance(state) <= state.geometry.success_radius)
