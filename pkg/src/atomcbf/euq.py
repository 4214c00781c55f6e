"""Epistemic uncertainty scores: deep-ensemble spread and a low-rank Laplace posterior.

Both scores take raw range scans; inputs are normalised the same way as for
the perception map before any forward pass.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.linalg.blas
import scipy.sparse.linalg

from .nn import DenseNet, forward, load_net, param_jacobian_batch, save_net
from .perception import normalize

SKETCH_MAGIC = b"ATOMSK1\n"

# Above this parameter count the top-k eigenpairs come from a Lanczos solver
# instead of a full dense decomposition.
DENSE_EIGH_MAX_P = 2000


@dataclass(frozen=True)
class Ensemble:
    members: tuple[DenseNet, ...]
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(members)}")
        sizes = members[0].layer_sizes
        if any(m.layer_sizes != sizes for m in members):
            raise ValueError("ensemble members must share one architecture")
        seeds = tuple(int(s) for s in self.seeds)
        if seeds and (len(seeds) != len(members) or len(set(seeds)) != len(seeds)):
            raise ValueError(f"need one distinct seed per member, got {seeds}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "seeds", seeds)

    @property
    def n_in(self) -> int:
        return self.members[0].n_in


def ensemble_scores(ens: Ensemble, scans, max_range: float) -> np.ndarray:
    """Unc for a batch of scans: mean squared norm of member outputs minus squared norm of their mean."""
    x = normalize(np.atleast_2d(scans), max_range)
    if x.shape[1] != ens.n_in:
        raise ValueError(f"scan length {x.shape[1]} does not match ensemble input {ens.n_in}")
    preds = np.stack([forward(m, x) for m in ens.members])  # (M, B, n)
    mean = preds.mean(axis=0)
    unc = np.mean(np.sum(preds ** 2, axis=2), axis=0) - np.sum(mean ** 2, axis=1)
    return np.maximum(unc, 0.0)


def unc_ensemble(ens: Ensemble, scan, max_range: float) -> float:
    scan = np.asarray(scan, dtype=float)
    if scan.ndim != 1:
        raise ValueError("unc_ensemble takes one scan; use ensemble_scores for batches")
    return float(ensemble_scores(ens, scan, max_range)[0])


@dataclass(frozen=True)
class LaplaceSketch:
    """Top-k eigenpairs of the training Gauss-Newton matrix plus the prior scale."""

    eigenvalues: np.ndarray  # (k,), descending
    eigenvectors: np.ndarray  # (P, k), orthonormal columns
    prior_scale: float

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        U = np.asarray(self.eigenvectors, dtype=float)
        if U.ndim != 2 or lam.shape != (U.shape[1],):
            raise ValueError(f"eigenvalues {lam.shape} do not match eigenvectors {U.shape}")
        if np.any(lam < 0.0) or np.any(np.diff(lam) > 0.0):
            raise ValueError("eigenvalues must be nonnegative and sorted descending")
        if not self.prior_scale > 0.0:
            raise ValueError(f"prior_scale must be positive, got {self.prior_scale}")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", U)

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_params(self) -> int:
        return self.eigenvectors.shape[0]


def gauss_newton(net: DenseNet, inputs: np.ndarray, batch: int = 250) -> np.ndarray:
    """G = sum_i J_i^T J_i over the (already normalised) inputs."""
    P = net.n_params
    # rank-k updates into the upper triangle, in place: G can be gigabytes
    G = np.zeros((P, P), order="F")
    for start in range(0, len(inputs), batch):
        J = param_jacobian_batch(net, inputs[start:start + batch]).reshape(-1, P)
        if not np.all(np.isfinite(J)):
            raise ValueError(f"non-finite Jacobian in samples {start}..{start + batch}")
        G = scipy.linalg.blas.dsyrk(1.0, np.asfortranarray(J), beta=1.0, c=G, trans=1, lower=0,
                                    overwrite_c=1)
    blk = 512
    for i in range(0, P, blk):
        j = min(i + blk, P)
        G[j:, i:j] = G[i:j, j:].T
        G[i:j, i:j] = np.triu(G[i:j, i:j]) + np.triu(G[i:j, i:j], 1).T
    return G


def top_eigenpairs(G: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` eigenpairs of a symmetric PSD matrix, eigenvalues descending and clipped at 0."""
    P = G.shape[0]
    if P <= DENSE_EIGH_MAX_P or k >= P - 1:
        lam, U = scipy.linalg.eigh(G, subset_by_index=(P - k, P - 1))
    else:
        lam, U = scipy.sparse.linalg.eigsh(G, k=k, which="LA", v0=np.ones(P), tol=0.0)
    order = np.argsort(lam)[::-1]
    lam, U = np.maximum(lam[order], 0.0), U[:, order]
    # fix each eigenvector's sign so files are reproducible
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(k)])
    return lam, U * np.where(flip == 0.0, 1.0, flip)


def fit_laplace(net: DenseNet, scans, k: int = 20, prior_scale: float = 1.0,
                max_range: float = 10.0, max_samples: int = 5000) -> LaplaceSketch:
    """Sketch of the Fisher/Gauss-Newton matrix on the first ``max_samples`` scans."""
    scans = np.atleast_2d(np.asarray(scans, dtype=float))
    if len(scans) == 0:
        raise ValueError("fit_laplace needs at least one sample")
    if not 1 <= k <= net.n_params:
        raise ValueError(f"rank k={k} must be in [1, P={net.n_params}]")
    x = normalize(scans[:max_samples], max_range)
    lam, U = top_eigenpairs(gauss_newton(net, x), k)
    return LaplaceSketch(lam, U, float(prior_scale))


def _posterior_weights(sketch: LaplaceSketch) -> np.ndarray:
    s2 = sketch.prior_scale ** 2
    return sketch.eigenvalues * s2 / (1.0 + sketch.eigenvalues * s2)


def laplace_scores(sketch: LaplaceSketch, net: DenseNet, scans, max_range: float,
                   batch: int = 250) -> np.ndarray:
    """sqrt(trace(J Sigma J^T)) for a batch of scans under the low-rank posterior."""
    x = normalize(np.atleast_2d(scans), max_range)
    if net.n_params != sketch.n_params:
        raise ValueError(f"sketch has P={sketch.n_params}, network has P={net.n_params}")
    w = _posterior_weights(sketch)
    s2 = sketch.prior_scale ** 2
    out = np.empty(len(x))
    for start in range(0, len(x), batch):
        J = param_jacobian_batch(net, x[start:start + batch])  # (B, n, P)
        full = np.sum(J ** 2, axis=(1, 2))
        proj = np.sum((J @ sketch.eigenvectors) ** 2, axis=1)  # (B, k)
        out[start:start + batch] = s2 * (full - proj @ w)
    return np.sqrt(np.maximum(out, 0.0))


def unc_laplace(sketch: LaplaceSketch, net: DenseNet, scan, max_range: float) -> float:
    scan = np.asarray(scan, dtype=float)
    if scan.ndim != 1:
        raise ValueError("unc_laplace takes one scan; use laplace_scores for batches")
    return float(laplace_scores(sketch, net, scan, max_range)[0])


def save_sketch(sketch: LaplaceSketch, path) -> None:
    P, k = sketch.eigenvectors.shape
    with open(path, "wb") as f:
        f.write(SKETCH_MAGIC)
        f.write(struct.pack("<QQd", P, k, sketch.prior_scale))
        f.write(sketch.eigenvalues.astype("<f8").tobytes())
        f.write(sketch.eigenvectors.astype("<f8").tobytes())


def load_sketch(path) -> LaplaceSketch:
    raw = Path(path).read_bytes()
    if not raw.startswith(SKETCH_MAGIC):
        raise ValueError(f"{path}: not an ATOMSK1 sketch file")
    off = len(SKETCH_MAGIC)
    P, k, prior = struct.unpack_from("<QQd", raw, off)
    off += 24
    lam = np.frombuffer(raw, dtype="<f8", count=k, offset=off).astype(float)
    U = np.frombuffer(raw, dtype="<f8", count=P * k, offset=off + 8 * k).astype(float).reshape(P, k)
    return LaplaceSketch(lam, U, prior)


def save_ensemble(ens: Ensemble, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(ens.members):
        name = f"member_{i}.atomnn"
        save_net(m, directory / name)
        files.append({"file": name, "sha256": hashlib.sha256((directory / name).read_bytes()).hexdigest()})
    manifest = {"layer_sizes": list(ens.members[0].layer_sizes), "seeds": list(ens.seeds), "members": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    members = []
    for entry in manifest["members"]:
        raw = (directory / entry["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ValueError(f"{entry['file']}: checksum does not match the manifest")
        members.append(load_net(directory / entry["file"]))
    return Ensemble(tuple(members), tuple(manifest["seeds"]))

