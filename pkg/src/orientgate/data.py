"""Demonstration episodes: generation with the scripted expert, split, cross-shuffled sampling, and I/O.

Episode file (little-endian): magic "OGEP", version u32, angle f32, seed u64, T u32, k u32,
joints[T*3] f32, gripper[T] f32, actions[T*4] f32, scene[T*64*64] u8,
object_mask and robot_mask bit-packed rows (T*64*8 bytes each), then a trailer of
jitter_std f64 and success u8.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import perception
from .expert import expert_action
from .sim import Action, TaskGeometry, check_success, reset, step

log = logging.getLogger(__name__)

EP_MAGIC = b"OGEP"
EP_VERSION = 1
HEADER = struct.Struct("<4sIfQII")
TRAILER = struct.Struct("<dB")
MANIFEST_NAME = "manifest.txt"
MAX_RETRIES = 3


class DatasetFormatError(ValueError):
    pass


@dataclass
class Observation:
    joints: np.ndarray
    gripper: float
    scene: np.ndarray
    object_mask: np.ndarray
    robot_mask: np.ndarray


def observe(state) -> Observation:
    scene, om, rm = perception.render(state)
    return Observation(state.joints.astype(np.float32), np.float32(state.gripper), scene, om, rm)


@dataclass
class Episode:
    angle_deg: float
    seed: int
    jitter_std: float
    joints: np.ndarray        # (T, 3) float32
    gripper: np.ndarray       # (T,) float32
    actions: np.ndarray       # (T, 4) float32
    scene: np.ndarray         # (T, 64, 64) uint8
    object_mask: np.ndarray   # (T, 64, 64) uint8 in {0, 1}
    robot_mask: np.ndarray
    success: bool
    chunk: int = 16
    _vectors: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def T(self) -> int:
        return len(self.actions)

    def proprio(self) -> np.ndarray:
        """Joint angles and gripper state per step, (T, 4) float32."""
        return np.concatenate([self.joints, self.gripper[:, None]], axis=1)

    def observation(self, t: int) -> Observation:
        return Observation(self.joints[t], self.gripper[t], perception.scene_from_bytes(self.scene[t]),
                           self.object_mask[t], self.robot_mask[t])

    def vectors(self, k: int = perception.FREEZE_STEPS) -> np.ndarray:
        """Frozen-vector protocol value at every step, shape (T, 2)."""
        if self._vectors is None:
            obj = perception.KeypointTracker()
            rob = perception.KeypointTracker()
            acc = perception.FrozenVector(k)
            out = np.zeros((self.T, 2))
            for t in range(self.T):
                if not acc.frozen:
                    acc.push(perception.orient_vector(obj(self.object_mask[t]), rob(self.robot_mask[t])))
                out[t] = acc.value
            self._vectors = out
        return self._vectors

    def equals(self, other: "Episode") -> bool:
        scalars = (self.angle_deg, self.seed, self.jitter_std, self.success, self.chunk)
        if scalars != (other.angle_deg, other.seed, other.jitter_std, other.success, other.chunk):
            return False
        names = ("joints", "gripper", "actions", "scene", "object_mask", "robot_mask")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def run_expert_episode(angle_deg: float, seed: int, jitter_std: float,
                       geometry: TaskGeometry = TaskGeometry(), noise: bool = True) -> Episode:
    state = reset(angle_deg, jitter_std, seed, geometry)
    rng = np.random.default_rng([seed, 1]) if noise else None
    T = geometry.episode_len
    joints = np.zeros((T, 3), np.float32)
    gripper = np.zeros(T, np.float32)
    actions = np.zeros((T, 4), np.float32)
    scene = np.zeros((T, perception.SIZE, perception.SIZE), np.uint8)
    om = np.zeros_like(scene)
    rm = np.zeros_like(scene)
    for t in range(T):
        obs = observe(state)
        joints[t], gripper[t] = obs.joints, obs.gripper
        scene[t] = perception.scene_to_bytes(obs.scene)
        om[t], rm[t] = obs.object_mask, obs.robot_mask
        # stored actions are float32; apply exactly what is stored so replay is bit-exact
        actions[t] = expert_action(state, rng).as_array().astype(np.float32)
        state = step(state, Action.from_array(actions[t]))
    return Episode(float(np.float32(angle_deg)), seed, jitter_std, joints, gripper, actions, scene, om, rm,
                   check_success(state), geometry.chunk)


def replay_episode(ep: Episode, geometry: TaskGeometry = TaskGeometry()) -> Episode:
    """Re-simulate ``ep``'s stored actions from its seed and angle."""
    state = reset(ep.angle_deg, ep.jitter_std, ep.seed, geometry)
    T = ep.T
    out = Episode(ep.angle_deg, ep.seed, ep.jitter_std, np.zeros_like(ep.joints), np.zeros_like(ep.gripper),
                  ep.actions.copy(), np.zeros_like(ep.scene), np.zeros_like(ep.object_mask),
                  np.zeros_like(ep.robot_mask), False, ep.chunk)
    for t in range(T):
        obs = observe(state)
        out.joints[t], out.gripper[t] = obs.joints, obs.gripper
        out.scene[t] = perception.scene_to_bytes(obs.scene)
        out.object_mask[t], out.robot_mask[t] = obs.object_mask, obs.robot_mask
        state = step(state, Action.from_array(ep.actions[t]))
    out.success = check_success(state)
    return out


# ---------------------------------------------------------------- dataset

def geometry_hash(geometry: TaskGeometry) -> str:
    text = "".join(f"{k}={v}\n" for k, v in sorted(geometry.to_kv().items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def angle_key(angle: float) -> str:
    return f"{float(angle):g}"


@dataclass
class Dataset:
    episodes: list
    geometry: TaskGeometry = field(default_factory=TaskGeometry)
    holdout: list = field(default_factory=list)   # indices into episodes, informational

    @property
    def counts(self) -> dict:
        out: dict = {}
        for ep in self.episodes:
            out[angle_key(ep.angle_deg)] = out.get(angle_key(ep.angle_deg), 0) + 1
        return out

    @property
    def angles(self) -> list:
        return sorted({ep.angle_deg for ep in self.episodes})

    def manifest(self) -> dict:
        kv = {"format_version": EP_VERSION, "episodes": len(self.episodes),
              "geometry_hash": geometry_hash(self.geometry)}
        for a, n in sorted(self.counts.items(), key=lambda kv_: float(kv_[0])):
            kv[f"count.{a}"] = n
        if self.holdout:
            kv["holdout"] = ",".join(str(i) for i in self.holdout)
        for k, v in self.geometry.to_kv().items():
            kv[f"geometry.{k}"] = v
        return kv

    def __len__(self) -> int:
        return len(self.episodes)


def generate_dataset(angles, per_angle: int, jitter_std: float = 0.01, base_seed: int = 0,
                     geometry: TaskGeometry = TaskGeometry()) -> Dataset:
    """``per_angle`` successful expert episodes per angle; each attempt consumes the next seed."""
    if per_angle < 1:
        raise ValueError(f"per_angle must be >= 1, got {per_angle}")
    seed = base_seed
    episodes = []
    for angle in angles:
        for _ in range(per_angle):
            for attempt in range(MAX_RETRIES + 1):
                ep = run_expert_episode(angle, seed, jitter_std, geometry)
                seed += 1
                if ep.success:
                    break
                log.info("expert failed at angle %s seed %d (attempt %d)", angle, ep.seed, attempt)
            else:
                raise RuntimeError(f"expert failed {MAX_RETRIES + 1} times in a row at angle {angle} "
                                   f"(last seed {seed - 1}, jitter {jitter_std})")
            episodes.append(ep)
    return Dataset(episodes, geometry)


def choose_holdout(dataset: Dataset, n_holdout_per_angle: int = 1, seed: int = 0) -> list:
    """Seeded choice of ``n_holdout_per_angle`` episode indices per angle."""
    if n_holdout_per_angle < 1:
        raise ValueError("n_holdout_per_angle must be >= 1")
    rng = np.random.default_rng(seed)
    held = []
    for angle in dataset.angles:
        idx = [i for i, ep in enumerate(dataset.episodes) if ep.angle_deg == angle]
        if n_holdout_per_angle > len(idx):
            raise ValueError(f"angle {angle}: cannot hold out {n_holdout_per_angle} of {len(idx)} episodes")
        held += sorted(int(i) for i in rng.choice(idx, n_holdout_per_angle, replace=False))
    return held


def split(dataset: Dataset, n_holdout_per_angle: int = 1, seed: int = 0) -> tuple[Dataset, Dataset]:
    held = choose_holdout(dataset, n_holdout_per_angle, seed)
    train = [ep for i, ep in enumerate(dataset.episodes) if i not in set(held)]
    if not train:
        raise ValueError("split leaves an empty training set")
    return (Dataset(train, dataset.geometry),
            Dataset([dataset.episodes[i] for i in held], dataset.geometry))


@dataclass
class Batch:
    scene: np.ndarray     # (B, 64, 64) float32
    joints: np.ndarray    # (B, 3) float32
    gripper: np.ndarray   # (B,) float32
    chunk: np.ndarray     # (B, k, 4) float32
    vector: np.ndarray    # (B, 2) float32
    episode: np.ndarray   # (B,) episode index
    start: np.ndarray     # (B,) chunk start step
    angle: np.ndarray     # (B,)

    @property
    def proprio(self) -> np.ndarray:
        return np.concatenate([self.joints, self.gripper[:, None]], axis=1)


def sample_batch(dataset: Dataset, batch: int, rng: np.random.Generator, k: int | None = None) -> Batch:
    """Uniform draw over all (episode, start) pairs of every angle, i.e. the cross-shuffle."""
    k = k or dataset.geometry.chunk
    T = dataset.geometry.episode_len
    starts = T - k + 1
    flat = rng.integers(0, len(dataset.episodes) * starts, size=batch)
    return gather(dataset, flat // starts, flat % starts, k)


def gather(dataset: Dataset, ep_idx, starts, k: int | None = None) -> Batch:
    k = k or dataset.geometry.chunk
    eps = [dataset.episodes[i] for i in ep_idx]
    return Batch(
        scene=np.stack([perception.scene_from_bytes(e.scene[t]) for e, t in zip(eps, starts)]),
        joints=np.stack([e.joints[t] for e, t in zip(eps, starts)]),
        gripper=np.array([e.gripper[t] for e, t in zip(eps, starts)], dtype=np.float32),
        chunk=np.stack([e.actions[t:t + k] for e, t in zip(eps, starts)]),
        vector=np.stack([e.vectors()[t] for e, t in zip(eps, starts)]).astype(np.float32),
        episode=np.asarray(ep_idx),
        start=np.asarray(starts),
        angle=np.array([e.angle_deg for e in eps]),
    )


def all_chunks(dataset: Dataset, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Every (episode, start) pair, for deterministic full-pass evaluation."""
    k = k or dataset.geometry.chunk
    starts = dataset.geometry.episode_len - k + 1
    e, s = np.divmod(np.arange(len(dataset.episodes) * starts), starts)
    return e, s


# ---------------------------------------------------------------- I/O

def episode_nbytes(T: int, size: int = perception.SIZE) -> int:
    return HEADER.size + T * (3 + 1 + 4) * 4 + T * size * size + 2 * T * (size * size // 8) + TRAILER.size


def encode_episode(ep: Episode) -> bytes:
    T = ep.T
    out = bytearray(HEADER.pack(EP_MAGIC, EP_VERSION, ep.angle_deg, ep.seed, T, ep.chunk))
    for arr in (ep.joints, ep.gripper, ep.actions):
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += np.ascontiguousarray(ep.scene, dtype=np.uint8).tobytes()
    for m in (ep.object_mask, ep.robot_mask):
        out += np.packbits(m.astype(np.uint8), axis=-1).tobytes()
    out += TRAILER.pack(ep.jitter_std, int(ep.success))
    return bytes(out)


def decode_episode(buf: bytes, name: str = "<episode>") -> Episode:
    if len(buf) < HEADER.size:
        raise DatasetFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    magic, version, angle, seed, T, k = HEADER.unpack_from(buf, 0)
    if magic != EP_MAGIC:
        raise DatasetFormatError(f"{name}: bad magic {magic!r}, expected {EP_MAGIC!r}")
    if version != EP_VERSION:
        raise DatasetFormatError(f"{name}: format version {version} != supported {EP_VERSION}")
    if len(buf) != episode_nbytes(T):
        raise DatasetFormatError(f"{name}: truncated or oversized file ({len(buf)} bytes, "
                                 f"expected {episode_nbytes(T)} for T={T})")
    S = perception.SIZE
    off = HEADER.size

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += count * np.dtype(dtype).itemsize
        return arr

    joints = take(T * 3, "<f4").reshape(T, 3).astype(np.float32)
    gripper = take(T, "<f4").astype(np.float32)
    actions = take(T * 4, "<f4").reshape(T, 4).astype(np.float32)
    scene = take(T * S * S, np.uint8).reshape(T, S, S).copy()
    om = np.unpackbits(take(T * S * S // 8, np.uint8).reshape(T, S, S // 8), axis=-1)
    rm = np.unpackbits(take(T * S * S // 8, np.uint8).reshape(T, S, S // 8), axis=-1)
    jitter, success = TRAILER.unpack_from(buf, off)
    return Episode(float(angle), int(seed), float(jitter), joints, gripper, actions, scene, om, rm,
                   bool(success), int(k))


def write_kv(path, kv: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in kv.items():
            fh.write(f"{k} = {v}\n")


def read_kv(path) -> dict:
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected 'key = value', got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return kv


def episode_filename(i: int) -> str:
    return f"ep_{i:05d}.ogep"


def write_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(dataset.episodes):
        (root / episode_filename(i)).write_bytes(encode_episode(ep))
    write_kv(root / MANIFEST_NAME, dataset.manifest())


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"{root}: no {MANIFEST_NAME}")
    kv = read_kv(root / MANIFEST_NAME)
    if int(kv.get("format_version", -1)) != EP_VERSION:
        raise DatasetFormatError(f"{root}: manifest format version {kv.get('format_version')} "
                                 f"!= supported {EP_VERSION}")
    geometry = TaskGeometry.from_kv({k[len("geometry."):]: v for k, v in kv.items() if k.startswith("geometry.")})
    if geometry_hash(geometry) != kv.get("geometry_hash"):
        raise DatasetFormatError(f"{root}: geometry hash mismatch")
    n = int(kv["episodes"])
    episodes = []
    for i in range(n):
        f = root / episode_filename(i)
        episodes.append(decode_episode(f.read_bytes(), str(f)))
    ds = Dataset(episodes, geometry)
    ds.holdout = [int(i) for i in kv["holdout"].split(",")] if kv.get("holdout") else []
    for key, val in kv.items():
        if key.startswith("count.") and ds.counts.get(key[6:]) != int(val):
            raise DatasetFormatError(f"{root}: manifest {key}={val} disagrees with contents {ds.counts}")
    return ds


def train_holdout(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Split a loaded dataset by the holdout indices recorded in its manifest."""
    held = set(dataset.holdout)
    return (Dataset([e for i, e in enumerate(dataset.episodes) if i not in held], dataset.geometry),
            Dataset([dataset.episodes[i] for i in sorted(held)], dataset.geometry))
