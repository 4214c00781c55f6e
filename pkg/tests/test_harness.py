import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomcbf.calibration import calibrate
from atomcbf.config import Config, ConfigError
from atomcbf.euq import Ensemble, fit_laplace
from atomcbf.harness import (
    LOG_COLUMNS,
    Models,
    TrialRecord,
    auroc,
    classify_outcome,
    coverage,
    make_trial_spec,
    nominal_pd,
    parse_cell,
    run_trial,
)
from atomcbf.nn import DenseNet
from atomcbf.perception import ID_CIRCLES, generate_dataset
from atomcbf.world import Pose, ScanConfig


def test_nominal_pd_examples():
    u, errs = nominal_pd(Pose(0.0, 0.0, 0.0), (1.0, 0.0))
    assert u.v == pytest.approx(0.8) and u.omega == 0.0
    assert errs == (1.0, 0.0)
    u, _ = nominal_pd(Pose(0.0, 0.0, 0.0), (0.0, 1.0))
    assert u.omega == 1.5  # 2.5 * pi/2 clamped
    u, _ = nominal_pd(Pose(0.0, 0.0, 0.0), (10.0, 0.0))
    assert u.v == 3.0
    # derivative term: distance error shrank by 0.05 over one 0.05 s step
    u, _ = nominal_pd(Pose(0.0, 0.0, 0.0), (1.0, 0.0), prev_errors=(1.05, 0.0))
    assert u.v == pytest.approx(0.8 - 0.1)


def test_auroc_examples():
    assert auroc([1, 2], [3, 4]) == 1.0
    assert auroc([1, 2], [1, 2]) == 0.5
    assert auroc([1, 3], [2, 4]) == 0.75
    assert auroc([3, 4], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        auroc([], [1.0])


@settings(max_examples=60)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=12),
       st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_auroc_pair_oracle(a, b):
    wins = sum(1.0 if y > x else 0.5 if y == x else 0.0 for x, y in itertools.product(a, b))
    assert auroc(a, b) == pytest.approx(wins / (len(a) * len(b)), abs=1e-12)


def _record(d, d_hat, alpha, alpha_hat, unc, engaged=None):
    n = len(d)
    log = {c: np.zeros(n) for c in LOG_COLUMNS}
    log.update(d=np.asarray(d, float), d_hat=np.asarray(d_hat, float), alpha=np.asarray(alpha, float),
               alpha_hat=np.asarray(alpha_hat, float), unc=np.asarray(unc, float),
               engaged=np.ones(n) if engaged is None else np.asarray(engaged, float))
    return TrialRecord(spec=None, log=log)


def test_coverage_counting():
    art = calibrate([[0.1, 0.1]], [1.0], 1.0)  # phi = (0.1, 0.1)
    rec = _record([2, 2, 2, 2], [2.05, 2.2, 1.95, 2.0], [0] * 4, [0] * 4, [1, 1, 1, 1])
    assert coverage([rec], art, 0) == 75.0
    # wrapped angle error: pi - 0.01 vs -pi + 0.01 differ by 0.02
    rec = _record([2, 2], [2, 2], [math.pi - 0.01, 0.0], [-math.pi + 0.01, 0.5], [1, 1])
    assert coverage([rec], art, 1) == 50.0
    # disengaged steps are ignored
    rec = _record([2, 2], [2.5, 2.0], [0, 0], [0, 0], [1, 1], engaged=[0, 1])
    assert coverage([rec], art, 0) == 100.0


def test_coverage_zero_phi_and_infinite_width():
    art = calibrate([[0.0, 0.0]], [1.0], 1.0)
    rec = _record([2, 2], [2.0, 2.1], [0, 0], [0, 0], [1, 1])
    assert coverage([rec], art, 0) == 50.0
    art = calibrate([[0.1, 0.1]], [1.0], 1.0)
    rec = _record([2, 2], [5.0, 9.0], [0, 0], [0, 0], [math.inf, math.inf])
    assert coverage([rec], art, 0) == 100.0  # unbounded interval
    with pytest.raises(ValueError):
        coverage([_record([2], [2], [0], [0], [math.nan])], art, 0)


def test_parse_cell():
    scen, kind = parse_cell("ood_polygon:atom_deep")
    assert scen.name == "ood_polygon" and kind == "atom_deep"
    for bad in ("nope:cbf_qp", "id_circle:nope", "id_circle"):
        with pytest.raises(ConfigError):
            parse_cell(bad)


@pytest.fixture(scope="module")
def models():
    sc = ScanConfig(n_beams=32)
    ds = generate_dataset(ID_CIRCLES, 60, 0, sc, 0.1, 6.0)
    nets = tuple(DenseNet.init((32, 8, 2), s) for s in (0, 1))
    sketch = fit_laplace(nets[0], ds.scans, 4, 1.0, 10.0)
    art = calibrate(np.full((5, 2), 0.1), np.linspace(1, 2, 5), 1.0)
    return Models(nets[0], Ensemble(nets, (0, 1)), sketch, {"scod": art, "deep": art},
                  {"scod": np.ones(3), "deep": np.ones(3)})


def _cfg(**exp):
    cfg = Config()
    world = replace(cfg.world, n_beams=32, max_steps=200)
    return replace(cfg, world=world, experiment=replace(cfg.experiment, **exp))


def test_trial_determinism_and_shared_episodes(models):
    cfg = _cfg()
    a = make_trial_spec(cfg, "id_circle:atom_scod", 3)
    b = make_trial_spec(cfg, "id_circle:cbf_qp", 3)
    assert (a.obstacle, a.start, a.goal, a.seed) == (b.obstacle, b.start, b.goal, b.seed)
    r1, r2 = run_trial(a, models), run_trial(a, models)
    for c in LOG_COLUMNS:
        np.testing.assert_array_equal(r1.log[c], r2.log[c])
    assert r1.outcome == r2.outcome
    assert make_trial_spec(cfg, "id_circle:cbf_qp", 4).seed != b.seed


def test_trial_log_shape_and_outcome(models):
    cfg = _cfg()
    for i in range(3):
        rec = run_trial(make_trial_spec(cfg, "id_circle:atom_deep", i), models)
        assert set(rec.log) == set(LOG_COLUMNS)
        assert len({len(v) for v in rec.log.values()}) == 1
        assert rec.n_steps <= cfg.world.max_steps
        assert rec.outcome == classify_outcome(rec, rec.spec)
        assert np.all(np.diff(rec.log["t"]) > 0)


def test_safe_heading_starts_safe():
    cfg = _cfg(start_heading="safe")
    for i in range(30):
        spec = make_trial_spec(cfg, "ood_polygon:atom_scod", i)
        dx, dy = spec.obstacle.center[0] - spec.start.x, spec.obstacle.center[1] - spec.start.y
        d = math.hypot(dx, dy)
        alpha = math.remainder(spec.start.theta - math.atan2(dy, dx), 2 * math.pi)
        assert abs(alpha) - math.asin(spec.r_cbf / d) > 0.0


def test_outcome_classification():
    cfg = _cfg()
    spec = make_trial_spec(cfg, "id_circle:cbf_qp", 0)
    log = {c: np.zeros(2) for c in LOG_COLUMNS}
    log["d"] = np.array([3.0, spec.r])
    assert classify_outcome(TrialRecord(spec, log), spec) == "collision"
    log["d"] = np.array([3.0, 3.0])
    log["x"], log["y"] = np.full(2, spec.goal[0]), np.full(2, spec.goal[1])
    assert classify_outcome(TrialRecord(spec, log), spec) == "reach"
    log["x"] = log["x"] + 1.0
    assert classify_outcome(TrialRecord(spec, log), spec) == "deadlock"


def test_spec_validation():
    spec = make_trial_spec(_cfg(), "id_circle:cbf_qp", 0)
    with pytest.raises(ValueError):
        replace(spec, max_steps=0)
    with pytest.raises(ValueError):
        replace(spec, dt=0.0)
    with pytest.raises(ValueError):
        replace(spec, start=Pose(*spec.obstacle.center, 0.0))
