"""Closed-loop rollouts at arbitrary ring angles and the per-angle success report."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import perception
from .data import write_kv
from .policy import ACTPolicy
from .sim import Action, TaskGeometry, check_success, reset, step, yellow_blue_distance

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000


@dataclass
class Rollout:
    angle_deg: float
    seed: int
    success: bool
    final_distance: float
    actions: np.ndarray          # (T, 4) executed commands
    joints: np.ndarray           # (T + 1, 3) visited joint states
    step_vectors: np.ndarray     # (K, 2) per-step vectors measured while unfrozen
    used_vectors: np.ndarray     # (T, 2) protocol value in effect at each step
    frames: list = field(default_factory=list, repr=False)


def rollout(model: ACTPolicy | None, angle_deg: float, seed: int, jitter_std: float = 0.01,
            geometry: TaskGeometry = TaskGeometry(), actions=None, keep_frames: bool = False) -> Rollout:
    """Run one episode; with ``actions`` given the model is bypassed and those commands replayed.

    The vector is measured from rendered masks on each of the first K steps
    (running mean) and frozen afterwards; the policy is queried every ``chunk``
    steps and its chunk executed open-loop.
    """
    state = reset(angle_deg, jitter_std, seed, geometry)
    T, k = geometry.episode_len, geometry.chunk
    freezer = perception.FrozenVector()
    obj_kp, rob_kp = perception.KeypointTracker(), perception.KeypointTracker()
    executed = np.zeros((T, 4))
    joints = [state.joints.copy()]
    measured, used, frames = [], [], []
    chunk = None
    for t in range(T):
        if not freezer.frozen:
            om, rm = perception.object_mask(state), perception.robot_mask(state)
            try:
                v = perception.orient_vector(obj_kp(om), rob_kp(rm))
            except perception.EmptyMaskError:
                raise RuntimeError(f"empty mask at step {t} (angle {angle_deg}, seed {seed})") from None
            measured.append(v)
            freezer.push(v)
        used.append(freezer.value)
        if keep_frames:
            frames.append(perception.render(state))
        if actions is not None:
            a = np.asarray(actions[t], dtype=np.float64)
        else:
            if t % k == 0:
                scene = perception.render_scene(state)
                proprio = np.append(state.joints, state.gripper).astype(np.float32)
                chunk = model.forward_infer(scene[None], proprio[None],
                                            freezer.value.astype(np.float32)[None])[0]
            a = chunk[t % k].astype(np.float64)
        executed[t] = a
        state = step(state, Action.from_array(a))
        joints.append(state.joints.copy())
    return Rollout(angle_deg, seed, check_success(state), yellow_blue_distance(state), executed,
                   np.array(joints), np.array(measured), np.array(used), frames)


def replay_success(angle_deg: float, seed: int, jitter_std: float, actions,
                   geometry: TaskGeometry = TaskGeometry()) -> bool:
    state = reset(angle_deg, jitter_std, seed, geometry)
    for a in actions:
        state = step(state, Action.from_array(a))
    return check_success(state)


# ---------------------------------------------------------------- report

@dataclass
class TrialRecord:
    angle_deg: float
    seed: int
    success: bool
    steps: int
    final_distance: float


@dataclass
class AngleRow:
    angle_deg: float
    trials: int
    successes: int
    mean_distance: float
    in_domain: bool

    @property
    def rate(self) -> float:
        return self.successes / self.trials


@dataclass
class EvalReport:
    model_hash: str
    variant: str
    rows: list
    records: list

    def row(self, angle: float) -> AngleRow:
        for r in self.rows:
            if r.angle_deg == angle:
                return r
        raise KeyError(angle)

    def rate(self, angle: float) -> float:
        return self.row(angle).rate

    def table(self) -> str:
        lines = [f"model {self.model_hash} ({self.variant})",
                 f"{'angle':>8} {'domain':>7} {'trials':>6} {'succ':>5} {'rate':>6} {'mean_dist_m':>11}"]
        for r in self.rows:
            lines.append(f"{r.angle_deg:>8g} {'in' if r.in_domain else 'out':>7} {r.trials:>6d} "
                         f"{r.successes:>5d} {r.rate:>6.2f} {r.mean_distance:>11.4f}")
        return "\n".join(lines)

    def to_kv(self) -> dict:
        kv = {"model_hash": self.model_hash, "variant": self.variant}
        for r in self.rows:
            a = f"{r.angle_deg:g}"
            kv.update({f"angle.{a}.trials": r.trials, f"angle.{a}.successes": r.successes,
                       f"angle.{a}.rate": f"{r.rate:.6f}", f"angle.{a}.mean_distance": f"{r.mean_distance:.6f}",
                       f"angle.{a}.in_domain": int(r.in_domain)})
        for i, rec in enumerate(self.records):
            kv[f"trial.{i}"] = (f"{rec.angle_deg:g},{rec.seed},{int(rec.success)},{rec.steps},"
                                f"{rec.final_distance:.6f}")
        return kv

    def write(self, stem) -> None:
        with open(f"{stem}.txt", "w", encoding="utf-8") as fh:
            fh.write(self.table() + "\n")
        write_kv(f"{stem}.kv", self.to_kv())


def model_hash(model: ACTPolicy) -> str:
    h = hashlib.sha256()
    for name, p in model.store:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _trial(args):
    ckpt, angle, seed, jitter = args
    model, _ = ACTPolicy.load(ckpt)
    r = rollout(model, angle, seed, jitter)
    return TrialRecord(angle, seed, r.success, len(r.actions), r.final_distance)


def evaluate(model: ACTPolicy, angles, trials: int, base_seed: int = EVAL_SEED_BASE, jitter_std: float = 0.01,
             train_angles=(), geometry: TaskGeometry = TaskGeometry(), workers: int = 1,
             ckpt_path=None) -> EvalReport:
    """``trials`` seeded rollouts per angle; seeds base_seed..base_seed+trials-1 at every angle (paired)."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if base_seed < EVAL_SEED_BASE:
        log.warning("evaluation seed base %d overlaps the data-generation seed range", base_seed)
    jobs = [(a, base_seed + i) for a in sorted(angles) for i in range(trials)]
    if workers > 1 and ckpt_path:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_trial, [(ckpt_path, a, s, jitter_std) for a, s in jobs]))
    else:
        records = []
        for a, s in jobs:
            r = rollout(model, a, s, jitter_std, geometry)
            records.append(TrialRecord(a, s, r.success, len(r.actions), r.final_distance))
    records.sort(key=lambda r: (r.angle_deg, r.seed))
    train_angles = {float(a) for a in train_angles}
    rows = []
    for a in sorted(angles):
        recs = [r for r in records if r.angle_deg == a]
        rows.append(AngleRow(a, len(recs), sum(r.success for r in recs),
                             float(np.mean([r.final_distance for r in recs])), float(a) in train_angles))
    return EvalReport(model_hash(model), model.config.variant, rows, records)


def paired_table(base: EvalReport, other: EvalReport) -> str:
    lines = [f"{'angle':>8} {'domain':>7} {base.variant:>10} {other.variant:>10} {'diff':>7}"]
    for rb in base.rows:
        ro = other.row(rb.angle_deg)
        lines.append(f"{rb.angle_deg:>8g} {'in' if rb.in_domain else 'out':>7} {rb.rate:>10.2f} "
                     f"{ro.rate:>10.2f} {ro.rate - rb.rate:>+7.2f}")
    return "\n".join(lines)
