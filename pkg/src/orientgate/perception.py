"""Top-camera rendering with oracle masks, spatial-softmax keypoints and the frozen robot->object vector.

Camera: world square [-EXTENT, EXTENT]^2 onto a SIZE x SIZE grid, row 0 at +y.
Normalised coordinates: u = (col + 0.5) / 32 - 1 rightward, v = 1 - (row + 0.5) / 32 upward.
"""
from __future__ import annotations

import numpy as np

from .sim import WorldState, joint_positions

SIZE = 64
EXTENT = 0.45
SUPERSAMPLE = 4
TAU = 0.05
FREEZE_STEPS = 10

BLUE_LEVEL = 0.5
YELLOW_LEVEL = 0.75
ROBOT_LEVEL = 1.0

FRONT_BAR = (0.02, 0.10)      # depth along heading, width across
FOOTPRINT = (0.12, 0.10)      # chassis behind the front bar
LINK_WIDTH = 0.02
MASK_COVERAGE = 0.4           # a pixel joins a mask when this fraction of it is covered


class EmptyMaskError(ValueError):
    pass


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) of cell centres for an n x n raster of the camera square."""
    c = (np.arange(n) + 0.5) / n * 2 * EXTENT - EXTENT
    return np.meshgrid(c, -c)  # x varies along columns, y decreases down rows


_PIX_X, _PIX_Y = _grid(SIZE)
_SUB_X, _SUB_Y = _grid(SIZE * SUPERSAMPLE)
PIXEL_U = _PIX_X / EXTENT
PIXEL_V = _PIX_Y / EXTENT


def world_to_uv(xy) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) / EXTENT


def uv_to_world(uv) -> np.ndarray:
    return np.asarray(uv, dtype=np.float64) * EXTENT


# ---------------------------------------------------------------- shape tests

def _in_square(x, y, center, size):
    h = size / 2
    return (np.abs(x - center[0]) <= h) & (np.abs(y - center[1]) <= h)


def _in_rect(x, y, center, heading, along, across, back_offset=0.0):
    """Oriented rectangle; ``back_offset`` shifts it backward (against heading) from ``center``."""
    ax, ay = np.cos(heading), np.sin(heading)
    dx, dy = x - center[0], y - center[1]
    s = dx * ax + dy * ay + back_offset
    p = -dx * ay + dy * ax
    return (np.abs(s) <= along / 2) & (np.abs(p) <= across / 2)


def _near_segment(x, y, a, b, radius):
    ab = b - a
    L2 = float(ab @ ab)
    t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    px, py = a[0] + t * ab[0], a[1] + t * ab[1]
    return (x - px) ** 2 + (y - py) ** 2 <= radius ** 2


def _robot_shapes(state: WorldState, x, y):
    b = state.base
    c = (b.x, b.y)
    inside = _in_rect(x, y, c, b.heading, *FRONT_BAR)
    inside |= _in_rect(x, y, c, b.heading, FOOTPRINT[0], FOOTPRINT[1],
                       back_offset=FOOTPRINT[0] / 2 + FRONT_BAR[0] / 2)
    pts = joint_positions(b, state.joints, state.geometry.link_lengths)
    for a, e in zip(pts[:-1], pts[1:]):
        inside |= _near_segment(x, y, a, e, LINK_WIDTH / 2)
    return inside


def _coverage(inside: np.ndarray) -> np.ndarray:
    s = SUPERSAMPLE
    return inside.reshape(SIZE, s, SIZE, s).mean(axis=(1, 3))


_EDGES = np.arange(SIZE + 1) * (2 * EXTENT / SIZE) - EXTENT
_PIX = 2 * EXTENT / SIZE


def _square_coverage(center, size) -> np.ndarray:
    """Exact covered fraction of every pixel by an axis-aligned square."""
    h = size / 2

    def overlap(c):
        lo = np.maximum(_EDGES[:-1], c - h)
        hi = np.minimum(_EDGES[1:], c + h)
        return np.clip(hi - lo, 0.0, None) / _PIX

    return np.outer(overlap(center[1])[::-1], overlap(center[0]))


def object_mask(state: WorldState) -> np.ndarray:
    return (_square_coverage(state.blue, state.geometry.cube_size) >= MASK_COVERAGE).astype(np.uint8)


def robot_mask(state: WorldState) -> np.ndarray:
    b = state.base
    inside = _in_rect(_SUB_X, _SUB_Y, (b.x, b.y), b.heading, *FRONT_BAR)
    return (_coverage(inside) >= MASK_COVERAGE).astype(np.uint8)


def render_scene(state: WorldState) -> np.ndarray:
    """Anti-aliased grayscale composite, quantised to multiples of 1/255 (float32)."""
    size = state.geometry.cube_size
    img = BLUE_LEVEL * _square_coverage(state.blue, size)
    img = np.maximum(img, YELLOW_LEVEL * _square_coverage(state.yellow, size))
    img = np.maximum(img, ROBOT_LEVEL * _coverage(_robot_shapes(state, _SUB_X, _SUB_Y)))
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def render(state: WorldState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scene, object_mask, robot_mask) for one world state."""
    return render_scene(state), object_mask(state), robot_mask(state)


def scene_to_bytes(scene: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(scene, dtype=np.float64) * 255.0).astype(np.uint8)


def scene_from_bytes(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / 255.0).astype(np.float32)


# ---------------------------------------------------------------- keypoints

def spatial_softmax(mask, tau: float = TAU) -> np.ndarray:
    """Softmax-weighted mean of normalised pixel centres; returns (u, v)."""
    if tau <= 0:
        raise ValueError(f"spatial_softmax: temperature must be positive, got {tau}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (SIZE, SIZE):
        raise ValueError(f"spatial_softmax: expected {SIZE}x{SIZE} mask, got {m.shape}")
    if not m.any():
        raise EmptyMaskError("spatial_softmax: empty mask")
    w = np.exp((m - m.max()) / tau)
    w /= w.sum()
    return np.array([(w * PIXEL_U).sum(), (w * PIXEL_V).sum()])


def centroid(mask) -> np.ndarray:
    """Brute-force mean of 1-pixel centres (reference for the softmax keypoint)."""
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise EmptyMaskError("centroid: empty mask")
    return np.array([np.mean((cols + 0.5) / 32 - 1), np.mean(1 - (rows + 0.5) / 32)])


def orient_vector(object_kp, robot_kp) -> np.ndarray:
    return np.asarray(object_kp, dtype=np.float64) - np.asarray(robot_kp, dtype=np.float64)


class KeypointTracker:
    """Keypoints from successive masks; an empty mask reuses the previous keypoint."""

    def __init__(self, tau: float = TAU):
        self.tau = tau
        self.last = None

    def __call__(self, mask) -> np.ndarray:
        try:
            self.last = spatial_softmax(mask, self.tau)
        except EmptyMaskError:
            if self.last is None:
                raise
        return self.last


class FrozenVector:
    """Running mean of the first ``k`` pushed vectors, constant afterwards."""

    def __init__(self, k: int = FREEZE_STEPS):
        if k < 1:
            raise ValueError(f"freeze window must be >= 1, got {k}")
        self.k = k
        self._sum = np.zeros(2)
        self.count = 0

    @property
    def frozen(self) -> bool:
        return self.count >= self.k

    def push(self, v) -> np.ndarray:
        if not self.frozen:
            self._sum = self._sum + np.asarray(v, dtype=np.float64)
            self.count += 1
        return self.value

    @property
    def value(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no vectors observed yet")
        return self._sum / self.count


def temporal_average(vectors, t: int, k: int = FREEZE_STEPS) -> np.ndarray:
    """Protocol value at control step ``t``: running mean before ``k`` steps, frozen mean after."""
    if k < 1:
        raise ValueError(f"freeze window must be >= 1, got {k}")
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        raise ValueError("temporal_average: empty vector sequence")
    n = min(t + 1, k)
    if len(vectors) < n:
        raise ValueError(f"temporal_average: need {n} vectors at step {t}, have {len(vectors)}")
    acc = FrozenVector(k)
    for v in vectors[:n]:
        acc.push(v)
    return acc.value


def state_vector(state: WorldState, tau: float = TAU) -> np.ndarray:
    """Robot->object vector for a single state."""
    return orient_vector(spatial_softmax(object_mask(state), tau), spatial_softmax(robot_mask(state), tau))


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    raw = scene_to_bytes(img) if img.dtype != np.uint8 else img
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raw.shape[1]} {raw.shape[0]}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def write_pbm(path, mask) -> None:
    m = np.asarray(mask, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{m.shape[1]} {m.shape[0]}\n".encode("ascii"))
        fh.write(np.packbits(m, axis=1).tobytes())
