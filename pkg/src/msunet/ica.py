"""Independent-basis fitting for patch sample matrices.

One fit turns a P x (n^2 t) matrix of patch vectors into a shared source
basis plus per-patch (mean, coefficients, residual sigma). The pipeline is
row-mean removal, column centering, PCA reduction to d components, then a
FastICA fixed-point rotation (tanh contrast, symmetric decorrelation).
Coefficients are the least-squares projection of the row-centered samples
onto the unit-variance sources, so means + coeffs @ sources + residual
reproduces the input exactly and a full-rank basis loses nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .canonical import BasisSet
from .errors import ConfigError, DataError, DimensionError, NumericError, RankError

_DEGENERATE_VAR = 1e-24
# below this min(P, q) an exact eigendecomposition is cheap; above it the
# "auto" solver switches to a seeded randomized range finder
_RANDOMIZED_CUTOFF = 256
_OVERSAMPLE = 10

SAMPLES_PER_COMPONENT = 10  # P >= 10 d floor


@dataclass(frozen=True)
class IcaConfig:
    seed: int = 0
    max_iter: int = 500
    tol: float = 1e-6
    method: str = "ica"  # ica | pca (pca skips the rotation; probe switch)
    solver: str = "auto"  # exact | randomized | auto
    sample_cap: int = 0  # 0 = fit basis on all rows; else subsample rows for the fit

    def __post_init__(self):
        if self.method not in ("ica", "pca"):
            raise ConfigError(f"unknown ica method {self.method!r}", "ica")
        if self.solver not in ("exact", "randomized", "auto"):
            raise ConfigError(f"unknown ica solver {self.solver!r}", "ica")
        if self.max_iter < 1 or self.tol <= 0:
            raise ConfigError("max_iter must be >= 1 and tol > 0", "ica")


@dataclass(frozen=True, eq=False)
class IcaFit:
    basis: BasisSet
    coefficients: np.ndarray  # P x d
    means: np.ndarray  # P
    residual_sigma: np.ndarray  # P
    explained_fraction: float
    converged: bool = True
    n_iter: int = 0


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    """W <- (W W^T)^(-1/2) W."""
    s, u = np.linalg.eigh(w @ w.T)
    s = np.maximum(s, 1e-18)
    return (u / np.sqrt(s)) @ u.T @ w


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    """Canonical sign: largest-magnitude entry of each row is positive."""
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None]


def _fastica_rotation(z: np.ndarray, cfg: IcaConfig) -> tuple[np.ndarray, bool, int]:
    """Fixed-point search for the orthogonal rotation of whitened rows z
    (d x q) that maximizes tanh-contrast non-Gaussianity."""
    d, q = z.shape
    rng = np.random.default_rng(cfg.seed)
    w = _sym_decorrelate(rng.standard_normal((d, d)))
    for iteration in range(1, cfg.max_iter + 1):
        y = w @ z
        g = np.tanh(y)
        g_prime_mean = (1.0 - g**2).mean(axis=1)
        w_new = _sym_decorrelate((g @ z.T) / q - g_prime_mean[:, None] * w)
        delta = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if delta < cfg.tol:
            return w, True, iteration
    return w, False, cfg.max_iter


def _principal_rows(xc: np.ndarray, d: int, cfg: IcaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Top-d right singular vectors of the doubly centered matrix, as rows,
    plus the matching singular values (used for the rank check).

    Exact path solves the eigenproblem of the smaller Gram matrix; the
    randomized path sketches the row space first (seeded, deterministic).
    """
    p, q = xc.shape
    small = min(p, q)
    use_randomized = cfg.solver == "randomized" or (
        cfg.solver == "auto" and small > _RANDOMIZED_CUTOFF and d + _OVERSAMPLE < small // 2
    )
    if use_randomized:
        rng = np.random.default_rng(cfg.seed + 1)
        sketch = xc @ rng.standard_normal((q, min(d + _OVERSAMPLE, small)))
        basis_q, _ = np.linalg.qr(sketch)
        _, svals, vt = np.linalg.svd(basis_q.T @ xc, full_matrices=False)
        return vt[:d], svals[:d]
    if q <= p:
        gram = xc.T @ xc  # q x q
        vals, vecs = np.linalg.eigh(gram)
        order = np.argsort(vals)[::-1][:d]
        svals = np.sqrt(np.maximum(vals[order], 0.0))
        return vecs[:, order].T, svals
    gram = xc @ xc.T  # p x p
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1][:d]
    svals = np.sqrt(np.maximum(vals[order], 0.0))
    vt = vecs[:, order].T @ xc  # d x q, rows orthogonal with norm sqrt(lambda)
    norms = np.linalg.norm(vt, axis=1, keepdims=True)
    return vt / np.maximum(norms, 1e-300), svals


def ica_fit(samples: np.ndarray, d: int, config: IcaConfig | None = None, scale_id: str = "") -> IcaFit:
    """Fit a d-dimensional independent basis to a P x q sample matrix.

    Deterministic given config.seed. Non-convergence of the rotation is a
    warning flag, not an error: the whitened basis still reconstructs.
    """
    cfg = config or IcaConfig()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DimensionError("samples must be a P x q matrix", "ica")
    if not np.isfinite(samples).all():
        raise DataError("samples contain non-finite values", "ica")
    p, q = samples.shape
    if d < 1 or d > min(p, q):
        raise RankError(f"basis dimension {d} outside 1..min(P={p}, q={q})", "ica")
    if p < SAMPLES_PER_COMPONENT * d:
        raise ConfigError(
            f"need at least {SAMPLES_PER_COMPONENT * d} samples for d={d}, have {p}", "ica"
        )

    means = samples.mean(axis=1)
    centered = samples - means[:, None]
    row_power = (centered**2).mean(axis=1)
    total_power = float(row_power.sum())

    if total_power <= _DEGENERATE_VAR * p:
        # constant patches: everything lives in the means
        basis = BasisSet(np.zeros((d, q)), np.zeros(q), scale_id)
        return IcaFit(basis, np.zeros((p, d)), means, np.zeros(p), 1.0, True, 0)

    column_means = centered.mean(axis=0)
    doubly = centered - column_means

    fit_rows = doubly
    if cfg.sample_cap and p > cfg.sample_cap >= SAMPLES_PER_COMPONENT * d:
        keep = np.random.default_rng(cfg.seed + 2).choice(p, size=cfg.sample_cap, replace=False)
        keep.sort()
        fit_rows = doubly[keep]

    rows, svals = _principal_rows(fit_rows, d, cfg)
    threshold = svals[0] * max(fit_rows.shape) * np.finfo(np.float64).eps
    live = int(np.sum(svals > threshold))
    # row-mean removal costs exactly one dimension, so d = live + 1 is the
    # benign full-rank request; anything beyond that is real deficiency
    if d > live + 1:
        raise RankError(f"basis dimension {d} exceeds the sample matrix rank {live}", "ica")

    vd = _fix_signs(rows[:live])
    whitened = vd * np.sqrt(q)  # rows: zero mean, unit variance, uncorrelated

    if cfg.method == "ica":
        rotation, converged, n_iter = _fastica_rotation(whitened, cfg)
        sources = _fix_signs(rotation @ whitened)
    else:
        sources, converged, n_iter = whitened, True, 0
    if live < d:
        sources = np.vstack([sources, np.zeros((d - live, q))])

    # least-squares projection of the row-centered data; source rows are
    # orthogonal with squared norm q, so the normal matrix is q * I
    coefficients = centered @ sources.T / q
    residual = centered - coefficients @ sources
    residual_sigma = np.sqrt((residual**2).mean(axis=1))
    explained = 1.0 - float((residual_sigma**2).sum()) / total_power
    explained = min(max(explained, 0.0), 1.0)

    basis = BasisSet(sources, column_means, scale_id)
    return IcaFit(basis, coefficients, means, residual_sigma, explained, converged, n_iter)


def amari_distance(recovered: np.ndarray, truth: np.ndarray) -> float:
    """Permutation/scale-invariant distance between two source (or mixing)
    matrices with matching shapes: 0 iff recovered = P D truth."""
    recovered = np.asarray(recovered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recovered.shape != truth.shape:
        raise DimensionError(f"shape mismatch {recovered.shape} vs {truth.shape}", "ica")
    k = truth.shape[0]
    sing = np.linalg.svd(truth, compute_uv=False)
    if sing[-1] <= sing[0] * max(truth.shape) * np.finfo(np.float64).eps:
        raise NumericError("truth matrix is singular", "ica")
    m = np.abs(recovered @ np.linalg.pinv(truth))
    row = (m.sum(axis=1) / m.max(axis=1) - 1.0).sum()
    col = (m.sum(axis=0) / m.max(axis=0) - 1.0).sum()
    return float((row + col) / (2.0 * k))
