"""Ground-truth 2D world: unicycle kinematics, one static obstacle, range sensor.

Conventions
-----------
* ``alpha`` is the vehicle heading minus the line-of-sight bearing toward the
  obstacle center, wrapped to (-pi, pi]. ``alpha == 0`` means the vehicle points
  straight at the obstacle.
* Relative dynamics under that convention::

      d_dot     = -v cos(alpha)
      alpha_dot = SIN_SIGN * v sin(alpha) / d + omega

  ``SIN_SIGN`` was fixed by differentiating :func:`relative_state` along the
  exact global flow (see ``tests/test_world.py``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Sign of the v*sin(alpha)/d coupling in alpha_dot. Verified numerically, not
# copied from the printed model.
SIN_SIGN = 1.0

SHAPES = ("circle", "square", "triangle", "star", "rectangle")

# Inner/outer radius ratio of a regular pentagram.
_STAR_INNER_RATIO = math.sin(math.radians(18.0)) / math.sin(math.radians(54.0))


class GeometryError(ValueError):
    """Degenerate geometry: coincident points or a pose inside an obstacle."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    r = np.remainder(np.asarray(a, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.theta)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class RelState:
    """Relative state [d, alpha] with respect to the obstacle center."""

    d: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.d) and self.d > 0.0):
            raise ValueError(f"distance must be positive and finite, got {self.d}")
        object.__setattr__(self, "alpha", wrap_angle(self.alpha))

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.alpha])


@dataclass(frozen=True)
class Control:
    v: float
    omega: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.omega)):
            raise ValueError(f"non-finite control {self}")


@dataclass(frozen=True)
class Obstacle:
    """A single static obstacle.

    ``size`` is the radius for a circle, the side length for square and
    triangle, the outer radius for a star and the long side for a rectangle
    (short side = ``aspect * size``).
    """

    shape: str
    center: tuple[float, float] = (0.0, 0.0)
    size: float = 0.3
    orientation: float = 0.0
    aspect: float = 0.5

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not self.size > 0.0:
            raise ValueError(f"obstacle size must be positive, got {self.size}")
        if self.shape == "rectangle" and not 0.0 < self.aspect <= 1.0:
            raise ValueError(f"rectangle aspect must be in (0, 1], got {self.aspect}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def vertices(self) -> np.ndarray:
        """Polygon vertices (k, 2) in world frame, counter-clockwise. Empty for circles."""
        s = self.size
        if self.shape == "circle":
            return np.empty((0, 2))
        if self.shape == "square":
            local = np.array([[s, s], [-s, s], [-s, -s], [s, -s]]) / 2.0
        elif self.shape == "rectangle":
            w = self.aspect * s
            local = np.array([[s, w], [-s, w], [-s, -w], [s, -w]]) / 2.0
        elif self.shape == "triangle":
            rc = s / math.sqrt(3.0)
            ang = math.pi / 2.0 + np.arange(3) * TWO_PI / 3.0
            local = rc * np.column_stack([np.cos(ang), np.sin(ang)])
        else:  # star: alternate outer and inner vertices
            ang = math.pi / 2.0 + np.arange(10) * math.pi / 5.0
            rad = np.where(np.arange(10) % 2 == 0, s, s * _STAR_INNER_RATIO)
            local = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        c, sn = math.cos(self.orientation), math.sin(self.orientation)
        rot = np.array([[c, -sn], [sn, c]])
        return local @ rot.T + np.asarray(self.center)

    def contains(self, px: float, py: float) -> bool:
        """True if the point lies inside or on the obstacle."""
        cx, cy = self.center
        if self.shape == "circle":
            return math.hypot(px - cx, py - cy) <= self.size
        v = self.vertices()
        inside = False
        j = len(v) - 1
        for i in range(len(v)):
            xi, yi = v[i]
            xj, yj = v[j]
            if (yi > py) != (yj > py):
                xcross = xi + (py - yi) * (xj - xi) / (yj - yi)
                if px < xcross:
                    inside = not inside
            j = i
        return inside


@dataclass(frozen=True)
class ScanConfig:
    n_beams: int = 64
    fov: float = TWO_PI
    max_range: float = 10.0
    beam_0_offset: float = 0.0

    def __post_init__(self):
        if self.n_beams < 8:
            raise ValueError(f"n_beams must be >= 8, got {self.n_beams}")
        if not 0.0 < self.fov <= TWO_PI:
            raise ValueError(f"fov must be in (0, 2pi], got {self.fov}")
        if not self.max_range > 0.0:
            raise ValueError(f"max_range must be positive, got {self.max_range}")

    def beam_angles(self, theta: float) -> np.ndarray:
        return theta + self.beam_0_offset + np.arange(self.n_beams) * (self.fov / self.n_beams)


@dataclass(frozen=True)
class Corruption:
    """Synthetic sensing degradation: ``ranges * attenuation + bias + noise``."""

    attenuation: float = 1.0
    bias: float = 0.0
    noise_std: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.attenuation == 1.0 and self.bias == 0.0 and self.noise_std == 0.0


def relative_state(pose: Pose, obstacle_center) -> RelState:
    dx = obstacle_center[0] - pose.x
    dy = obstacle_center[1] - pose.y
    d = math.hypot(dx, dy)
    if d == 0.0:
        raise GeometryError("pose coincides with the obstacle center")
    return RelState(d, wrap_angle(pose.theta - math.atan2(dy, dx)))


def rel_dynamics(x: RelState, u: Control) -> tuple[float, float]:
    """Time derivative (d_dot, alpha_dot) of the relative state."""
    if not x.d > 0.0:
        raise GeometryError(f"relative dynamics need d > 0, got {x.d}")
    d_dot = -u.v * math.cos(x.alpha)
    alpha_dot = SIN_SIGN * u.v * math.sin(x.alpha) / x.d + u.omega
    return d_dot, alpha_dot


def _unicycle(state, v, omega):
    return np.array([v * math.cos(state[2]), v * math.sin(state[2]), omega])


def step_global(pose: Pose, u: Control, dt: float) -> Pose:
    """Advance the global unicycle by one RK4 step of length ``dt``."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    s = np.array([pose.x, pose.y, pose.theta])
    k1 = _unicycle(s, u.v, u.omega)
    k2 = _unicycle(s + 0.5 * dt * k1, u.v, u.omega)
    k3 = _unicycle(s + 0.5 * dt * k2, u.v, u.omega)
    k4 = _unicycle(s + dt * k3, u.v, u.omega)
    s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Pose(float(s[0]), float(s[1]), float(s[2]))


def min_enclosing_radius(obstacle: Obstacle) -> float:
    """Radius of the smallest circle centered on the obstacle center that contains it."""
    if obstacle.shape == "circle":
        return obstacle.size
    v = obstacle.vertices() - np.asarray(obstacle.center)
    return float(np.max(np.hypot(v[:, 0], v[:, 1])))


def cast_rays(ox: float, oy: float, angles: np.ndarray, obstacle: Obstacle,
              max_range: float) -> np.ndarray:
    """Distance along each ray to the first obstacle hit, else ``max_range``."""
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    hits = np.full(len(angles), np.inf)
    cx, cy = obstacle.center
    if obstacle.shape == "circle":
        fx, fy = ox - cx, oy - cy
        b = dirs[:, 0] * fx + dirs[:, 1] * fy
        c = fx * fx + fy * fy - obstacle.size ** 2
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 >= 0.0, t0, t1)
        hits = np.where(ok & (t >= 0.0), t, np.inf)
    else:
        v = obstacle.vertices()
        a = v
        e = np.roll(v, -1, axis=0) - v  # edge vectors (k, 2)
        # Solve o + t*dir = a + s*e for every (beam, edge) pair.
        wx = a[None, :, 0] - ox
        wy = a[None, :, 1] - oy
        dx = dirs[:, 0:1]
        dy = dirs[:, 1:2]
        denom = dx * e[None, :, 1] - dy * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (wx * e[None, :, 1] - wy * e[None, :, 0]) / denom
            s = (wx * dy - wy * dx) / denom
        valid = (np.abs(denom) > 1e-15) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
        t = np.where(valid, t, np.inf)
        hits = t.min(axis=1)
    return np.minimum(hits, max_range)


def scan(pose: Pose, obstacle: Obstacle, cfg: ScanConfig) -> np.ndarray:
    """Range scan of length ``cfg.n_beams`` taken from ``pose``."""
    if obstacle.contains(pose.x, pose.y):
        raise GeometryError("pose lies inside the obstacle")
    return cast_rays(pose.x, pose.y, cfg.beam_angles(pose.theta), obstacle, cfg.max_range)


def corrupt_scan(ranges: np.ndarray, mode: Corruption, seed: int | None = 0,
                 max_range: float = np.inf) -> np.ndarray:
    """Apply a synthetic corruption and clamp the result to ``[0, max_range]``."""
    ranges = np.asarray(ranges, dtype=float)
    if mode.is_identity:
        return ranges.copy()
    out = ranges * mode.attenuation + mode.bias
    if mode.noise_std > 0.0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, mode.noise_std, size=out.shape)
    return np.clip(out, 0.0, max_range)
