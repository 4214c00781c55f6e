"""Offline error calibration: outlier-filtered calibration set, base error ratio, adaptive margin.

The deployed margin is the worst case over the filtered set, not a conformal
quantile; :func:`conformal_quantile` and :func:`prediction_interval` are the
scalar-uncertainty conformal tools kept for reporting.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .world import RelState

# Filtered-set scores below this are treated as a failed filter, not clamped.
MIN_SCORE = 1e-12


class EmptyFilterError(ValueError):
    pass


class DivisionHazardError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationArtifact:
    mu_unc: float
    sigma_unc: float
    gamma: float
    phi_cal: tuple[float, ...]
    n_cal: int
    n_filtered: int
    euq_id: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = tuple(float(p) for p in self.phi_cal)
        if not all(math.isfinite(p) and p >= 0.0 for p in phi):
            raise ValueError(f"phi_cal entries must be finite and nonnegative, got {phi}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 <= self.n_filtered <= self.n_cal:
            raise ValueError(f"n_filtered={self.n_filtered} exceeds n_cal={self.n_cal}")
        object.__setattr__(self, "phi_cal", phi)

    @property
    def phi_norm(self) -> float:
        return math.hypot(*self.phi_cal)


def score_stats(scores) -> tuple[float, float]:
    """Mean and population standard deviation."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("no scores")
    return float(s.mean()), float(s.std())


def filter_calibration(scores, gamma: float) -> np.ndarray:
    """Indices whose score lies within ``gamma`` of the mean of all scores."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("filter_calibration needs at least one score")
    if not gamma > 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    keep = np.flatnonzero(np.abs(s - s.mean()) <= gamma)
    if keep.size == 0:
        raise EmptyFilterError(f"no calibration point within gamma={gamma} of the mean")
    return keep


def base_error_ratio(errors, scores) -> np.ndarray:
    """Per-coordinate max of |error| / Unc over the (already filtered) set.

    ``errors`` is (N, n) absolute estimation errors, ``scores`` the N matching
    uncertainty scores.
    """
    err = np.abs(np.atleast_2d(np.asarray(errors, dtype=float)))
    s = np.asarray(scores, dtype=float)
    if len(err) == 0 or len(err) != len(s):
        raise ValueError(f"need matching non-empty errors ({len(err)}) and scores ({len(s)})")
    low = np.flatnonzero(s < MIN_SCORE)
    if low.size:
        raise DivisionHazardError(f"{low.size} filtered points have Unc below {MIN_SCORE}, e.g. index {low[0]}")
    return np.max(err / s[:, None], axis=0)


def calibrate(errors, scores, gamma_multiplier: float = 1.0, euq_id: str = "",
              provenance: dict | None = None) -> CalibrationArtifact:
    """Filter the calibration set at ``gamma = gamma_multiplier * sigma`` and compute phi_cal."""
    s = np.asarray(scores, dtype=float)
    mu, sigma = score_stats(s)
    gamma = gamma_multiplier * sigma if math.isfinite(gamma_multiplier) else math.inf
    if gamma == 0.0:
        # every score identical: any positive width keeps them all
        gamma = math.ulp(1.0)
    keep = filter_calibration(s, gamma)
    phi = base_error_ratio(np.asarray(errors)[keep], s[keep])
    prov = dict(provenance or {}, gamma_multiplier=gamma_multiplier)
    return CalibrationArtifact(mu, sigma, gamma, tuple(phi), len(s), len(keep), euq_id, prov)


def adaptive_margin(artifact: CalibrationArtifact, unc: float) -> float:
    """eps_adapt = unc * |phi_cal|_2."""
    if not unc >= 0.0:
        raise ValueError(f"uncertainty score must be nonnegative, got {unc}")
    return unc * artifact.phi_norm


def prediction_interval(artifact: CalibrationArtifact, estimate: RelState, unc: float):
    """Per-coordinate intervals [x_hat_j - phi_j unc, x_hat_j + phi_j unc] for (d, alpha)."""
    if not unc >= 0.0:
        raise ValueError(f"uncertainty score must be nonnegative, got {unc}")
    center = (estimate.d, estimate.alpha)
    return tuple((c - p * unc, c + p * unc) for c, p in zip(center, artifact.phi_cal))


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((N+1)(1-alpha))-th smallest score."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"miscoverage alpha must be in (0, 1), got {alpha}")
    s = np.sort(np.asarray(scores, dtype=float))
    n = len(s)
    # guard against (N+1)(1-alpha) landing a hair above an integer
    rank = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if rank > n or n == 0:
        raise ValueError(f"N={n} calibration scores are too few for alpha={alpha}")
    return float(s[max(rank, 1) - 1])


def save_artifact(artifact: CalibrationArtifact, path) -> None:
    d = asdict(artifact)
    d["phi_cal"] = list(artifact.phi_cal)
    d["gamma"] = artifact.gamma if math.isfinite(artifact.gamma) else "inf"
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_artifact(path) -> CalibrationArtifact:
    d = json.loads(Path(path).read_text())
    d["gamma"] = float(d["gamma"])
    d["phi_cal"] = tuple(d["phi_cal"])
    return CalibrationArtifact(**d)
