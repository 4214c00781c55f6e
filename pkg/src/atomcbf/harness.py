"""Trials, outcome classification, metrics and experiment cells.

A cell is ``"<scenario>:<filter>"``, e.g. ``"ood_polygon:atom_scod"``. Trial
``i`` of every cell with the same scenario sees the same obstacle, start pose
and goal, so filters are compared on identical episodes.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationArtifact, adaptive_margin
from .config import Config, ConfigError
from .euq import Ensemble, LaplaceSketch, ensemble_scores, laplace_scores
from .nn import DenseNet
from .perception import SCENARIOS, Scenario, predict
from .safety_filter import ConeCBF, FilterConfig, SolverError, estimate_lipschitz, solve_robust
from .world import (
    Control,
    GeometryError,
    Obstacle,
    Pose,
    RelState,
    ScanConfig,
    corrupt_scan,
    min_enclosing_radius,
    relative_state,
    scan,
    step_global,
    wrap_angle,
)

FILTERS = ("cbf_qp", "mr_cbf", "atom_scod", "atom_deep")
EUQ_OF = {"atom_scod": "scod", "atom_deep": "deep"}
OUTCOMES = ("reach", "deadlock", "collision")

# Table 4 gains
KP_DIST, KD_DIST, KP_ANG, KD_ANG = 0.8, 0.1, 2.5, 0.1

LOG_COLUMNS = ("t", "x", "y", "theta", "d", "alpha", "d_hat", "alpha_hat", "unc", "eps",
               "v_nom", "omega_nom", "v", "omega", "slack", "h", "h_hat", "engaged")


class TrialError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


def parse_cell(cell: str) -> tuple[Scenario, str]:
    try:
        scen, kind = cell.split(":")
    except ValueError:
        raise ConfigError(f"cell {cell!r} is not of the form scenario:filter") from None
    if scen not in SCENARIOS:
        raise ConfigError(f"cell {cell!r}: unknown scenario, expected one of {sorted(SCENARIOS)}")
    if kind not in FILTERS:
        raise ConfigError(f"cell {cell!r}: unknown filter, expected one of {FILTERS}")
    return SCENARIOS[scen], kind


@dataclass
class Models:
    net: DenseNet
    ensemble: Ensemble
    sketch: LaplaceSketch
    artifacts: dict  # euq name -> CalibrationArtifact
    cal_scores: dict = field(default_factory=dict)  # euq name -> calibration Unc scores

    def unc(self, euq: str, ranges: np.ndarray, max_range: float) -> float:
        if euq == "scod":
            return float(laplace_scores(self.sketch, self.net, ranges, max_range)[0])
        if euq == "deep":
            return float(ensemble_scores(self.ensemble, ranges, max_range)[0])
        raise ValueError(f"unknown EUQ module {euq!r}")


@dataclass(frozen=True)
class TrialSpec:
    scenario: Scenario
    filter_kind: str
    obstacle: Obstacle
    start: Pose
    goal: tuple[float, float]
    seed: int
    dt: float = 0.05
    max_steps: int = 1200
    scan_cfg: ScanConfig = ScanConfig(n_beams=180)
    filter_cfg: FilterConfig = FilterConfig()
    clearance: float = 0.3
    eta: float = 0.05
    static_eps: float = 0.2
    goal_radius: float = 0.3
    stall_window: float = 5.0
    stall_distance: float = 0.05
    disengage: bool = True
    disengage_margin: float = 0.5
    perception: str = "net"
    index: int = 0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.max_steps < 1:
            raise ValueError("a trial needs at least one step")
        if self.filter_kind not in FILTERS:
            raise ValueError(f"unknown filter {self.filter_kind!r}")
        if self.obstacle.contains(self.start.x, self.start.y):
            raise ValueError("start pose lies inside the obstacle")
        if math.hypot(self.goal[0] - self.obstacle.center[0], self.goal[1] - self.obstacle.center[1]) == 0.0:
            raise ValueError("goal coincides with the obstacle center")

    @property
    def r(self) -> float:
        return min_enclosing_radius(self.obstacle)

    @property
    def r_cbf(self) -> float:
        return self.r + self.clearance

    @property
    def cell(self) -> str:
        return f"{self.scenario.name}:{self.filter_kind}"


@dataclass
class TrialRecord:
    spec: TrialSpec
    log: dict  # column name -> 1-D array, see LOG_COLUMNS
    outcome: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.log["t"])

    def engaged(self) -> np.ndarray:
        """Mask of steps where perception and the filter were active."""
        return (self.log["engaged"] > 0) & np.isfinite(self.log["d_hat"])


def nominal_pd(pose: Pose, goal, prev_errors=None, dt: float = 0.05,
               v_limits=(0.0, 3.0), omega_limits=(-1.5, 1.5)) -> tuple[Control, tuple[float, float]]:
    """PD steering to ``goal`` from ground-truth pose.

    Returns the control and the (distance, heading) errors to pass back next step.
    Derivatives are backward differences; the first step uses zero derivatives.
    """
    dx, dy = goal[0] - pose.x, goal[1] - pose.y
    e_d = math.hypot(dx, dy)
    e_th = wrap_angle(math.atan2(dy, dx) - pose.theta)
    if prev_errors is None:
        de_d = de_th = 0.0
    else:
        de_d = (e_d - prev_errors[0]) / dt
        de_th = wrap_angle(e_th - prev_errors[1]) / dt
    v = min(max(KP_DIST * e_d + KD_DIST * de_d, v_limits[0]), v_limits[1])
    w = min(max(KP_ANG * e_th + KD_ANG * de_th, omega_limits[0]), omega_limits[1])
    return Control(v, w), (e_d, e_th)


def _h(alpha: float, d: float, r: float) -> float:
    # cone CBF, continued past d <= r with asin saturated at pi/2
    return abs(alpha) - math.asin(min(1.0, r / d))


def _seed_for(base: int, scenario: str, index: int) -> int:
    ss = np.random.SeedSequence([base, zlib.crc32(scenario.encode()), index])
    return int(ss.generate_state(1)[0])


def make_trial_spec(cfg: Config, cell: str, index: int) -> TrialSpec:
    scenario, kind = parse_cell(cell)
    x, f, w = cfg.experiment, cfg.filter, cfg.world
    seed = _seed_for(x.seed, scenario.name, index)
    rng = np.random.default_rng(seed)
    obstacle = scenario.sample_obstacle(rng)
    r = min_enclosing_radius(obstacle)
    dist = float(rng.uniform(*x.start_distance))
    bearing = float(rng.uniform(-math.pi, math.pi))  # of the start, seen from the center
    sx, sy = dist * math.cos(bearing), dist * math.sin(bearing)
    lateral = float(rng.uniform(-x.lateral_offset, x.lateral_offset)) * r
    goal = (-sx - math.sin(bearing) * lateral, -sy + math.cos(bearing) * lateral)
    toward = bearing + math.pi
    if x.start_heading == "facing":
        heading = toward + float(rng.uniform(-x.heading_noise, x.heading_noise))
    else:
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        cone = math.asin(min(1.0, (r + f.clearance) / dist))
        heading = toward + side * (cone + float(rng.uniform(0.05, 0.3)))
    fcfg = FilterConfig(f.kappa_gain, f.L_Lfh, f.L_Lgh, f.L_kh, f.slack_penalty,
                        tuple(f.v_limits), tuple(f.omega_limits))
    if f.lipschitz == "estimate":
        l_f, l_g, l_k = estimate_lipschitz(ConeCBF(r + f.clearance), f.kappa_gain,
                                           d_max=max(8.0, x.start_distance[1]))
        fcfg = FilterConfig(f.kappa_gain, l_f, l_g, l_k, f.slack_penalty,
                            tuple(f.v_limits), tuple(f.omega_limits))
    return TrialSpec(
        scenario=scenario, filter_kind=kind, obstacle=obstacle,
        start=Pose(sx, sy, heading), goal=goal, seed=seed, dt=w.dt, max_steps=w.max_steps,
        scan_cfg=ScanConfig(n_beams=w.n_beams, fov=w.fov, max_range=w.max_range),
        filter_cfg=fcfg, clearance=f.clearance, eta=cfg.perception.eta, static_eps=f.static_eps,
        goal_radius=x.goal_radius, stall_window=x.stall_window, stall_distance=x.stall_distance,
        disengage=x.disengage, disengage_margin=x.disengage_margin, perception=x.perception,
        index=index,
    )


def _segment_entry(p0, p1, c, r) -> float | None:
    """Smallest s in (0, 1] with |p0 + s (p1 - p0) - c| <= r, else None."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    fx, fy = p0[0] - c[0], p0[1] - c[1]
    a = dx * dx + dy * dy
    if a == 0.0:
        return None
    b = fx * dx + fy * dy
    disc = b * b - a * (fx * fx + fy * fy - r * r)
    if disc < 0.0:
        return None
    s = (-b - math.sqrt(disc)) / a
    return s if 0.0 < s <= 1.0 else None


def _injected_estimate(x: RelState, eps: float, r_cbf: float, rng) -> RelState:
    """Truth plus an error of norm just under ``eps`` pointing up the gradient of h.

    The filter then sees a state that looks as safe as the error budget allows,
    the worst case for the robust constraint.
    """
    s = 1.0 if x.alpha >= 0.0 else -1.0
    gd = r_cbf / (x.d * math.sqrt(x.d * x.d - r_cbf * r_cbf)) if x.d > r_cbf else 1.0
    norm = math.hypot(gd, 1.0)
    scale = eps * (1.0 - 1e-9) * float(rng.uniform(0.5, 1.0))
    return RelState(max(x.d + scale * gd / norm, 1e-9), x.alpha + scale * s / norm)


def run_trial(spec: TrialSpec, models: Models) -> TrialRecord:
    """Closed-loop episode: scan, estimate, score, filter, integrate."""
    rng = np.random.default_rng(spec.seed + 1)
    obs, r, r_cbf = spec.obstacle, spec.r, spec.r_cbf
    c = obs.center
    cbf = ConeCBF(r_cbf)
    max_range = spec.scan_cfg.max_range
    euq = EUQ_OF.get(spec.filter_kind)
    artifact = models.artifacts[euq] if euq else None
    window = max(1, int(round(spec.stall_window / spec.dt)))
    rows = []
    pose, prev, engaged = spec.start, None, True
    positions = []
    nan = math.nan
    for k in range(spec.max_steps):
        t = k * spec.dt
        x = relative_state(pose, c)
        positions.append((pose.x, pose.y))
        base = [t, pose.x, pose.y, pose.theta, x.d, x.alpha]
        if x.d <= r or math.hypot(pose.x - spec.goal[0], pose.y - spec.goal[1]) < spec.goal_radius:
            rows.append(base + [nan] * 9 + [_h(x.alpha, x.d, r_cbf), nan, 0.0])
            break
        if k >= window:
            p0 = positions[k - window]
            if math.hypot(pose.x - p0[0], pose.y - p0[1]) < spec.stall_distance:
                rows.append(base + [nan] * 9 + [_h(x.alpha, x.d, r_cbf), nan, 0.0])
                break
        u_nom, prev = nominal_pd(pose, spec.goal, prev, spec.dt, spec.filter_cfg.v_limits,
                                 spec.filter_cfg.omega_limits)
        if engaged and spec.disengage:
            behind = (c[0] - pose.x) * (spec.goal[0] - pose.x) + (c[1] - pose.y) * (spec.goal[1] - pose.y) < 0.0
            if behind and x.d > r + spec.disengage_margin:
                engaged = False
        if engaged:
            try:
                ranges = scan(pose, obs, spec.scan_cfg)
                if spec.scenario.corruption is not None:
                    ranges = corrupt_scan(ranges, spec.scenario.corruption, int(rng.integers(2 ** 31)), max_range)
                unc = models.unc(euq, ranges, max_range) if euq else nan
                if spec.filter_kind == "mr_cbf":
                    eps = spec.static_eps
                elif euq:
                    eps = adaptive_margin(artifact, unc)
                else:
                    eps = 0.0
                if spec.perception == "injected":
                    x_hat = _injected_estimate(x, eps, r_cbf, rng)
                    x_hat = RelState(max(x_hat.d, r_cbf + spec.eta), x_hat.alpha)
                else:
                    x_hat = predict(models.net, ranges, r_cbf, max_range, spec.eta)
                res = solve_robust(x_hat, u_nom, eps, cbf, spec.filter_cfg)
            except (SolverError, GeometryError, ValueError) as exc:
                raise TrialError(f"{spec.cell} trial {spec.index}: {exc}", k) from exc
            u = res.u_safe
            rows.append(base + [x_hat.d, x_hat.alpha, unc, eps, u_nom.v, u_nom.omega, u.v, u.omega,
                                res.slack, _h(x.alpha, x.d, r_cbf), _h(x_hat.alpha, x_hat.d, r_cbf), 1.0])
        else:
            u = u_nom
            rows.append(base + [nan] * 4 + [u_nom.v, u_nom.omega, u.v, u.omega, 0.0,
                                            _h(x.alpha, x.d, r_cbf), nan, 0.0])
        new = step_global(pose, u, spec.dt)
        s = _segment_entry((pose.x, pose.y), (new.x, new.y), c, r)
        if s is not None and s < 1.0:
            # the enclosing circle was entered inside this step: log the entry point
            hit = Pose(pose.x + s * (new.x - pose.x), pose.y + s * (new.y - pose.y),
                       pose.theta + s * wrap_angle(new.theta - pose.theta))
            xh = relative_state(hit, c)
            rows.append([t + s * spec.dt, hit.x, hit.y, hit.theta, xh.d, xh.alpha] + [nan] * 9
                        + [_h(xh.alpha, xh.d, r_cbf), nan, 0.0])
            break
        pose = new
    arr = np.asarray(rows, dtype=float)
    log = {name: arr[:, i].copy() for i, name in enumerate(LOG_COLUMNS)}
    record = TrialRecord(spec, log)
    record.outcome = classify_outcome(record, spec)
    return record


def classify_outcome(record: TrialRecord, spec: TrialSpec) -> str:
    d = record.log["d"]
    if np.any(d <= spec.r):
        return "collision"
    xe, ye = record.log["x"][-1], record.log["y"][-1]
    if math.hypot(xe - spec.goal[0], ye - spec.goal[1]) < spec.goal_radius:
        return "reach"
    return "deadlock"


# --- metrics -----------------------------------------------------------------

def coverage(records, artifact: CalibrationArtifact, j: int) -> float:
    """Percent of engaged steps whose true coordinate ``j`` lies in the prediction interval."""
    inside = total = 0
    for rec in records:
        m = rec.engaged() & ~np.isnan(rec.log["unc"])
        if j == 0:
            err = np.abs(rec.log["d_hat"][m] - rec.log["d"][m])
        else:
            diff = rec.log["alpha_hat"][m] - rec.log["alpha"][m]
            err = np.abs(np.remainder(diff + math.pi, 2 * math.pi) - math.pi)
        inside += int(np.count_nonzero(err <= artifact.phi_cal[j] * rec.log["unc"][m]))
        total += int(m.sum())
    if total == 0:
        raise ValueError("coverage needs at least one engaged step with an uncertainty score")
    return 100.0 * inside / total


def auroc(id_scores, ood_scores) -> float:
    """P(OoD score > ID score) + 1/2 P(tie), from ranks of the pooled sample."""
    a = np.asarray(id_scores, dtype=float)
    b = np.asarray(ood_scores, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty ID and OoD score lists")
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    # average ranks over ties (1-based)
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def summarize_cell(cell: str, records, models: Models) -> dict:
    _, kind = parse_cell(cell)
    n = len(records)
    counts = {o: sum(r.outcome == o for r in records) for o in OUTCOMES}
    out = {"cell": cell, "trials": n, "status": "ok"}
    for o in OUTCOMES:
        out[o] = 100.0 * counts[o] / n
    euq = EUQ_OF.get(kind)
    out["d_coverage"] = out["alpha_coverage"] = out["auroc"] = None
    if euq:
        art = models.artifacts[euq]
        out["d_coverage"] = coverage(records, art, 0)
        out["alpha_coverage"] = coverage(records, art, 1)
        unc = np.concatenate([r.log["unc"][r.engaged()] for r in records])
        if records[0].spec.scenario.tag == "OoD" and len(models.cal_scores.get(euq, ())):
            out["auroc"] = auroc(models.cal_scores[euq], unc)
        out["mean_unc"] = float(np.mean(unc))
        out["mean_eps"] = float(np.mean(np.concatenate([r.log["eps"][r.engaged()] for r in records])))
    out["min_h"] = float(min(np.min(r.log["h"][r.engaged()], initial=math.inf) for r in records))
    out["min_clearance"] = float(min(np.min(r.log["d"]) - r.spec.r for r in records))
    return out


# --- cells and experiments ---------------------------------------------------

_WORKER: dict = {}


def _init_worker(models):
    _WORKER["models"] = models


def _run_spec(spec):
    return run_trial(spec, _WORKER["models"])


def run_cell(cfg: Config, cell: str, models: Models, parallel: int = 1) -> list[TrialRecord]:
    specs = [make_trial_spec(cfg, cell, i) for i in range(cfg.experiment.trials)]
    if parallel <= 1:
        return [run_trial(s, models) for s in specs]
    with ProcessPoolExecutor(max_workers=parallel, initializer=_init_worker, initargs=(models,)) as pool:
        return list(pool.map(_run_spec, specs, chunksize=max(1, len(specs) // (4 * parallel))))


def run_experiment(cfg: Config, models: Models, parallel: int = 1) -> tuple[dict, dict]:
    """Run every configured cell. Returns (summary, records per cell).

    A cell whose trials raise is recorded as aborted and the others still run.
    """
    cells, records = [], {}
    for cell in cfg.experiment.cells:
        try:
            recs = run_cell(cfg, cell, models, parallel)
        except TrialError as exc:
            cells.append({"cell": cell, "trials": cfg.experiment.trials, "status": "aborted", "error": str(exc)})
            continue
        records[cell] = recs
        cells.append(summarize_cell(cell, recs, models))
    summary = {"config_sha256": cfg.digest(), "cells": cells,
               "aborted": [c["cell"] for c in cells if c["status"] != "ok"]}
    return summary, records


def ablate_gamma(cfg: Config, models: Models, errors, scores: dict, multipliers,
                 parallel: int = 1) -> list[dict]:
    """Recalibrate at each gamma = k * sigma_unc and rerun the ATOM cells.

    ``errors`` are calibration-set absolute errors and ``scores`` the matching
    Unc values per EUQ module. A multiplier that empties the filtered set gives
    a failed row and the sweep carries on.
    """
    from .calibration import EmptyFilterError, DivisionHazardError, calibrate

    rows = []
    atom_cells = [c for c in cfg.experiment.cells if parse_cell(c)[1] in EUQ_OF]
    for mult in multipliers:
        if not mult > 0:
            raise ValueError(f"gamma multipliers must be positive, got {mult}")
        for cell in atom_cells:
            euq = EUQ_OF[parse_cell(cell)[1]]
            row = {"cell": cell, "gamma_multiplier": float(mult)}
            try:
                art = calibrate(errors, scores[euq], mult, euq_id=euq)
            except (EmptyFilterError, DivisionHazardError) as exc:
                rows.append(dict(row, status="failed", error=str(exc)))
                continue
            row.update(gamma=art.gamma, phi_cal=list(art.phi_cal), n_filtered=art.n_filtered)
            arts = dict(models.artifacts, **{euq: art})
            trial_models = Models(models.net, models.ensemble, models.sketch, arts, models.cal_scores)
            try:
                recs = run_cell(cfg, cell, trial_models, parallel)
            except TrialError as exc:
                rows.append(dict(row, status="failed", error=str(exc)))
                continue
            s = summarize_cell(cell, recs, trial_models)
            row.update(status="ok", **{k: s[k] for k in ("reach", "deadlock", "collision",
                                                         "d_coverage", "alpha_coverage")})
            rows.append(row)
    return rows
