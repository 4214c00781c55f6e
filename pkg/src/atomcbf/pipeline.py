"""Offline stages: datasets, perception/ensemble training, EUQ fitting, calibration.

Every stage reads its inputs from and writes its outputs to one artifact
directory, so the CLI commands can be run one at a time or all in sequence.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .calibration import calibrate, load_artifact, save_artifact
from .config import Config
from .euq import (
    Ensemble,
    ensemble_scores,
    fit_laplace,
    laplace_scores,
    load_ensemble,
    load_sketch,
    save_ensemble,
    save_sketch,
)
from .harness import Models
from .nn import DenseNet, TrainConfig, load_net, save_net, train
from .perception import (
    ID_CIRCLES,
    OOD_POLYGONS,
    OOD_WASHED_OUT,
    generate_dataset,
    load_dataset,
    normalize,
    raw_estimates,
    save_dataset,
    split_indices,
    state_errors,
)
from .world import ScanConfig

EUQS = ("scod", "deep")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scan_config(cfg: Config) -> ScanConfig:
    w = cfg.world
    return ScanConfig(n_beams=w.n_beams, fov=w.fov, max_range=w.max_range)


def gen_data(cfg: Config, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    p, sc = cfg.perception, scan_config(cfg)
    ds = generate_dataset(ID_CIRCLES, p.n_samples, p.data_seed, sc, p.margin, p.d_max)
    save_dataset(ds, out / "id.atomds")
    parts = split_indices(len(ds), p.split, p.split_seed)
    split = {name: idx.tolist() for name, idx in zip(("train", "cal", "test"), parts)}
    (out / "split.json").write_text(json.dumps(split) + "\n")
    summary = {"id": {"n": len(ds), "sha256": ds.digest()},
               "split_sizes": {k: len(v) for k, v in split.items()}}
    for i, scen in enumerate((OOD_POLYGONS, OOD_WASHED_OUT)):
        ood = generate_dataset(scen, p.ood_samples, p.ood_seed + i, sc, p.margin, p.d_max)
        save_dataset(ood, out / f"{scen.name}.atomds")
        summary[scen.name] = {"n": len(ood), "sha256": ood.digest()}
    return summary


def _load_split(out) -> tuple[object, dict]:
    out = Path(out)
    ds = load_dataset(out / "id.atomds")
    split = {k: np.asarray(v, dtype=int) for k, v in json.loads((out / "split.json").read_text()).items()}
    return ds, split


def train_stage(cfg: Config, out, train_seed: int = 0) -> dict:
    """Train the ensemble; member 0 doubles as the perception map."""
    out = Path(out)
    p, e = cfg.perception, cfg.euq
    ds, split = _load_split(out)
    x = normalize(ds.scans[split["train"]], cfg.world.max_range)
    y = ds.states[split["train"]]
    sizes = (ds.n_beams, *p.hidden, 2)
    seeds = tuple(train_seed + m for m in range(e.n_members))
    members, losses = [], []
    for s in seeds:
        hist: list = []
        tc = TrainConfig(p.learning_rate, p.epochs, p.batch_size, s, p.optimizer, p.schedule)
        net = train(DenseNet.init(sizes, s), x, y, tc, hist)
        members.append(net)
        losses.append(hist[-1] if hist else None)
    ens = Ensemble(tuple(members), seeds)
    save_ensemble(ens, out / "ensemble")
    save_net(members[0], out / "perception.atomnn")
    test = ds.subset(split["test"])
    err = state_errors(raw_estimates(members[0], test.scans, cfg.world.max_range), test.states)
    return {"layer_sizes": list(sizes), "seeds": list(seeds), "final_loss": losses,
            "test_mean_abs_error": err.mean(axis=0).tolist(),
            "perception_sha256": file_sha256(out / "perception.atomnn")}


def fit_euq_stage(cfg: Config, out) -> dict:
    out = Path(out)
    e = cfg.euq
    ds, split = _load_split(out)
    net = load_net(out / "perception.atomnn")
    sketch = fit_laplace(net, ds.scans[split["train"]], e.rank, e.prior_scale, cfg.world.max_range,
                         e.fisher_samples)
    save_sketch(sketch, out / "laplace.atomsk")
    return {"P": sketch.n_params, "k": sketch.k, "prior_scale": sketch.prior_scale,
            "top_eigenvalues": sketch.eigenvalues[:5].tolist(),
            "sketch_sha256": file_sha256(out / "laplace.atomsk")}


def scores_for(euq: str, net, ens, sketch, scans, max_range) -> np.ndarray:
    if euq == "scod":
        return laplace_scores(sketch, net, scans, max_range)
    return ensemble_scores(ens, scans, max_range)


def calibrate_stage(cfg: Config, out, gamma_multiplier: float | None = None) -> dict:
    out = Path(out)
    ds, split = _load_split(out)
    net = load_net(out / "perception.atomnn")
    ens = load_ensemble(out / "ensemble")
    sketch = load_sketch(out / "laplace.atomsk")
    cal = ds.subset(split["cal"])
    mr = cfg.world.max_range
    errors = state_errors(raw_estimates(net, cal.scans, mr), cal.states)
    gm = cfg.calibration.gamma_multiplier if gamma_multiplier is None else gamma_multiplier
    summary = {}
    for euq in EUQS:
        s = scores_for(euq, net, ens, sketch, cal.scans, mr)
        np.save(out / f"cal_scores_{euq}.npy", s)
        art = calibrate(errors, s, gm, euq_id=euq, provenance={"dataset_sha256": ds.digest(),
                                                              "config_sha256": cfg.digest()})
        save_artifact(art, out / f"calibration_{euq}.json")
        summary[euq] = {"mu_unc": art.mu_unc, "sigma_unc": art.sigma_unc, "gamma": art.gamma,
                        "phi_cal": list(art.phi_cal), "n_cal": art.n_cal, "n_filtered": art.n_filtered}
    return summary


def calibration_inputs(cfg: Config, out) -> tuple[np.ndarray, dict]:
    """Calibration-set errors and per-EUQ scores, for ablations."""
    out = Path(out)
    ds, split = _load_split(out)
    net = load_net(out / "perception.atomnn")
    cal = ds.subset(split["cal"])
    errors = state_errors(raw_estimates(net, cal.scans, cfg.world.max_range), cal.states)
    return errors, {euq: np.load(out / f"cal_scores_{euq}.npy") for euq in EUQS}


def load_models(out) -> Models:
    out = Path(out)
    return Models(
        net=load_net(out / "perception.atomnn"),
        ensemble=load_ensemble(out / "ensemble"),
        sketch=load_sketch(out / "laplace.atomsk"),
        artifacts={euq: load_artifact(out / f"calibration_{euq}.json") for euq in EUQS},
        cal_scores={euq: np.load(out / f"cal_scores_{euq}.npy") for euq in EUQS},
    )


def with_artifacts(models: Models, artifacts: dict) -> Models:
    return replace(models, artifacts=dict(artifacts))
