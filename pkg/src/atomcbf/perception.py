"""Labelled scan datasets and the learned inverse map scan -> [d_hat, alpha_hat]."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import DenseNet, forward
from .world import (
    Corruption,
    Obstacle,
    Pose,
    RelState,
    ScanConfig,
    corrupt_scan,
    min_enclosing_radius,
    scan,
    wrap_angle,
    wrap_angles,
)

DATASET_MAGIC = b"ATOMDS1\n"


@dataclass(frozen=True)
class Scenario:
    """Obstacle family a dataset or trial draws from."""

    name: str
    tag: str  # "ID" or "OoD"
    shapes: tuple[str, ...]
    size_range: tuple[float, float]
    corruption: Corruption | None = None

    def __post_init__(self):
        if not self.shapes:
            raise ValueError(f"scenario {self.name!r} has an empty obstacle family")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"invalid size range {self.size_range}")
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "size_range", (float(lo), float(hi)))

    def sample_obstacle(self, rng: np.random.Generator) -> Obstacle:
        shape = self.shapes[int(rng.integers(len(self.shapes)))]
        size = float(rng.uniform(*self.size_range))
        orientation = float(rng.uniform(0.0, 2.0 * math.pi))
        return Obstacle(shape, (0.0, 0.0), size, orientation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        corr = d.get("corruption")
        return cls(d["name"], d["tag"], tuple(d["shapes"]), tuple(d["size_range"]),
                   Corruption(**corr) if corr else None)


ID_CIRCLES = Scenario("id_circle", "ID", ("circle",), (0.1, 0.5))
OOD_POLYGONS = Scenario("ood_polygon", "OoD", ("square", "triangle", "star"), (1.5, 2.0))
OOD_WASHED_OUT = Scenario("ood_washed_out", "OoD", ("circle",), (0.1, 0.5),
                          Corruption(attenuation=1.0, bias=1.5, noise_std=0.05))

SCENARIOS = {s.name: s for s in (ID_CIRCLES, OOD_POLYGONS, OOD_WASHED_OUT)}


@dataclass
class Dataset:
    """Scans (N x n_beams, raw meters) with true relative states (N x 2)."""

    scans: np.ndarray
    states: np.ndarray
    provenance: dict = field(default_factory=dict)
    radii: np.ndarray | None = None  # enclosing radius per sample; not persisted

    def __post_init__(self):
        self.scans = np.asarray(self.scans, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.scans.ndim != 2 or len(self.scans) == 0:
            raise ValueError("dataset needs a non-empty 2-D scan array")
        if self.states.shape != (len(self.scans), 2):
            raise ValueError(f"states shape {self.states.shape} does not match {len(self.scans)} samples")

    def __len__(self) -> int:
        return len(self.scans)

    @property
    def n_beams(self) -> int:
        return self.scans.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.scans[idx], self.states[idx], dict(self.provenance),
                       None if self.radii is None else self.radii[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.scans.astype("<f8").tobytes())
        h.update(self.states.astype("<f8").tobytes())
        return h.hexdigest()


def sample_pose(rng: np.random.Generator, r: float, margin: float, d_max: float,
                center=(0.0, 0.0)) -> Pose:
    """Pose at uniform distance in [r + margin, d_max] and uniform relative heading."""
    d = float(rng.uniform(r + margin, d_max))
    bearing_from_center = float(rng.uniform(-math.pi, math.pi))
    alpha = float(rng.uniform(-math.pi, math.pi))
    x = center[0] + d * math.cos(bearing_from_center)
    y = center[1] + d * math.sin(bearing_from_center)
    # line of sight from the pose toward the center points the opposite way
    theta = wrap_angle(alpha + bearing_from_center + math.pi)
    return Pose(x, y, theta)


def generate_dataset(scenario: Scenario, n: int, seed: int, scan_cfg: ScanConfig = ScanConfig(),
                     margin: float = 0.1, d_max: float = 8.0) -> Dataset:
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    scans = np.empty((n, scan_cfg.n_beams))
    states = np.empty((n, 2))
    radii = np.empty(n)
    for i in range(n):
        obs = scenario.sample_obstacle(rng)
        r = min_enclosing_radius(obs)
        pose = sample_pose(rng, r, margin, d_max, obs.center)
        dx, dy = obs.center[0] - pose.x, obs.center[1] - pose.y
        states[i] = (math.hypot(dx, dy), wrap_angle(pose.theta - math.atan2(dy, dx)))
        ranges = scan(pose, obs, scan_cfg)
        if scenario.corruption is not None:
            ranges = corrupt_scan(ranges, scenario.corruption, int(rng.integers(2 ** 31)),
                                  scan_cfg.max_range)
        scans[i] = ranges
        radii[i] = r
    provenance = {
        "scenario": scenario.to_dict(),
        "n": n,
        "seed": seed,
        "scan": asdict(scan_cfg),
        "margin": margin,
        "d_max": d_max,
    }
    return Dataset(scans, states, provenance, radii)


def split_indices(n: int, fractions=(0.7, 0.2, 0.1), seed: int = 0) -> list[np.ndarray]:
    """Random disjoint index sets with the given fractions (last one takes the remainder)."""
    order = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum([int(round(f * n)) for f in fractions[:-1]])
    return np.split(order, cuts)


def normalize(scans, max_range: float) -> np.ndarray:
    """Map ranges to proximities in [0, 1]: 0 for an empty beam, 1 at contact."""
    return 1.0 - np.asarray(scans, dtype=float) / max_range


def raw_estimates(net: DenseNet, scans, max_range: float) -> np.ndarray:
    """Network outputs [d_hat, alpha_hat] for a batch of raw scans, alpha wrapped, no clamp."""
    out = forward(net, normalize(np.atleast_2d(scans), max_range))
    out[:, 1] = wrap_angles(out[:, 1])
    return out


def predict(net: DenseNet, ranges, r: float, max_range: float, eta: float = 0.05) -> RelState:
    """State estimate from one scan; ``d_hat`` is clamped to at least ``r + eta``."""
    ranges = np.asarray(ranges, dtype=float)
    if ranges.shape != (net.n_in,):
        raise ValueError(f"scan length {ranges.shape} does not match network input {net.n_in}")
    d_hat, alpha_hat = forward(net, normalize(ranges, max_range))
    return RelState(max(float(d_hat), r + eta), wrap_angle(float(alpha_hat)))


def state_errors(estimates: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Absolute per-coordinate errors; the angle error is the wrapped difference."""
    err = np.abs(np.asarray(estimates, dtype=float) - states)
    err[:, 1] = np.abs(wrap_angles(estimates[:, 1] - states[:, 1]))
    return err


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    n, b = ds.scans.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<QQ", n, b))
        f.write(np.hstack([ds.scans, ds.states]).astype("<f8").tobytes())
    sidecar = dict(ds.provenance, n_samples=n, n_beams=b, sha256=ds.digest())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: not an ATOMDS1 dataset file")
    k = len(DATASET_MAGIC)
    n, b = struct.unpack_from("<QQ", raw, k)
    rows = np.frombuffer(raw, dtype="<f8", offset=k + 16).astype(float).reshape(n, b + 2)
    sidecar = path.with_suffix(path.suffix + ".json")
    provenance = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Dataset(rows[:, :b], rows[:, b:], provenance)
