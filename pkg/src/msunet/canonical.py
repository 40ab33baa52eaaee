"""Canonical-form distributions and the arithmetic that keeps network
outputs in canonical form.

A canonical form is mean + weighted independent sources + Gaussian residual:

    value(j) = a0 + sum_i coeffs[i] * sources[i, j]  (+ noise * N(0,1))

All cells of a grid share one BasisSet, which is what makes weighted sums
across cells exact. Grids and bases are immutable after construction; the
operations below are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError

# plane layout used everywhere a grid is stored densely:
# plane 0 = a0, planes 1..d = coeffs, plane d+1 = noise
def num_planes(d: int) -> int:
    return d + 2


@dataclass(frozen=True, eq=False)
class CanonicalForm:
    """One cell's distribution: mean, source weights, residual sigma."""

    a0: float
    coeffs: np.ndarray
    noise: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=np.float64))
        if self.coeffs.ndim != 1:
            raise DimensionError("coeffs must be a vector", "canonical")
        if self.noise < 0:
            raise NumericError("noise must be nonnegative", "canonical")
        if not (np.isfinite(self.a0) and np.isfinite(self.noise) and np.isfinite(self.coeffs).all()):
            raise NumericError("canonical form fields must be finite", "canonical")

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]


def zero_form(d: int) -> CanonicalForm:
    return CanonicalForm(0.0, np.zeros(d), 0.0)


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Shared independent sources for one scale branch.

    sources[i] is X_i evaluated at every outcome index j (one voxel slot of
    a patch, length n^2*t); column_means are the per-slot centering offsets
    recorded during fitting.
    """

    sources: np.ndarray
    column_means: np.ndarray
    scale_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sources", np.asarray(self.sources, dtype=np.float64))
        object.__setattr__(self, "column_means", np.asarray(self.column_means, dtype=np.float64))
        if self.sources.ndim != 2:
            raise DimensionError("sources must be d x (n^2 t)", "canonical")
        if self.column_means.shape != (self.sources.shape[1],):
            raise DimensionError("column_means length must match source length", "canonical")

    @property
    def dim(self) -> int:
        return self.sources.shape[0]

    @property
    def outcomes(self) -> int:
        return self.sources.shape[1]

    def check_invariants(self, mean_tol: float = 1e-6, corr_tol: float = 1e-4) -> None:
        """Zero mean, unit variance, pairwise decorrelation of the rows.
        Only meaningful for non-degenerate fits; all-zero rows are skipped."""
        src = self.sources
        live = [i for i in range(src.shape[0]) if np.any(src[i] != 0.0)]
        for i in live:
            row = src[i]
            if abs(row.mean()) > mean_tol:
                raise NumericError(f"source {i} mean {row.mean():.2e} exceeds {mean_tol}", "canonical")
            if abs(row.var() - 1.0) > mean_tol:
                raise NumericError(f"source {i} variance {row.var():.6f} not unit", "canonical")
        for a_idx in range(len(live)):
            for b_idx in range(a_idx + 1, len(live)):
                a, b = src[live[a_idx]], src[live[b_idx]]
                corr = float(np.dot(a - a.mean(), b - b.mean()) / (len(a) * a.std() * b.std()))
                if abs(corr) > corr_tol:
                    raise NumericError(f"sources {live[a_idx]},{live[b_idx]} corr {corr:.2e}", "canonical")


@dataclass(frozen=True)
class GridGeometry:
    """Where a grid came from: source dims, tiling, snippet placement."""

    volume_dims: tuple[int, int, int, int]  # X, Y, Z, T of the originating video
    n: int
    t: int
    stride: int
    snippet_index: int = 0


@dataclass(frozen=True, eq=False)
class CanonicalFormGrid:
    """Collapsed snippet: one canonical form per (gx, gy, z, channel).

    Stored densely as planes [d+2, Z, C, Gy, Gx] (see ``num_planes``), which
    is the layout the statistical network consumes directly.
    """

    data: np.ndarray
    basis: BasisSet
    geometry: GridGeometry

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 5:
            raise DimensionError("grid data must be [planes, Z, C, Gy, Gx]", "canonical")
        if self.data.shape[0] != num_planes(self.basis.dim):
            raise DimensionError(
                f"grid has {self.data.shape[0]} planes, basis dim {self.basis.dim} needs "
                f"{num_planes(self.basis.dim)}",
                "canonical",
            )

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """(Gx, Gy, Z, C)."""
        planes, z, c, gy, gx = self.data.shape
        return gx, gy, z, c

    def cell(self, gx: int, gy: int, z: int, c: int = 0) -> CanonicalForm:
        d = self.dim
        column = self.data[:, z, c, gy, gx]
        return CanonicalForm(float(column[0]), column[1 : d + 1].copy(), float(column[d + 1]))


def _require_same_dim(forms: Sequence[CanonicalForm]) -> int:
    dims = {cf.dim for cf in forms}
    if len(dims) != 1:
        raise DimensionError(f"mixed basis dimensions {sorted(dims)}", "canonical")
    return dims.pop()


def weighted_sum(terms: Sequence[tuple[float, CanonicalForm]], bias: float = 0.0) -> CanonicalForm:
    """Linear combination; exact on (a0, coeffs), residual sigmas add in
    quadrature (residuals are fit independently per cell)."""
    if not terms:
        return CanonicalForm(float(bias), np.zeros(0), 0.0)
    d = _require_same_dim([cf for _, cf in terms])
    a0 = float(bias)
    coeffs = np.zeros(d)
    noise_sq = 0.0
    for w, cf in terms:
        a0 += w * cf.a0
        coeffs += w * cf.coeffs
        noise_sq += (w * cf.noise) ** 2
    return CanonicalForm(a0, coeffs, float(np.sqrt(noise_sq)))


def stat_max(lhs: CanonicalForm, rhs: CanonicalForm) -> CanonicalForm:
    """Mean-gated max: return the argument with the larger a0, lhs on ties.

    Selection depends on a0 only, so the output is an exact canonical form;
    the gap to a true elementwise max is reported by a Monte-Carlo
    diagnostic, not bounded here.
    """
    _require_same_dim([lhs, rhs])
    return lhs if lhs.a0 >= rhs.a0 else rhs


def stat_relu(cf: CanonicalForm) -> tuple[CanonicalForm, int]:
    """Max against the zero form, gated on the mean. Returns (result, gate);
    the gate bit is what backprop multiplies by. a0 == 0 gates closed so the
    zero form is a fixed point."""
    if cf.a0 > 0.0:
        return cf, 1
    return zero_form(cf.dim), 0


def mix_planes(
    data: np.ndarray,
    sources: np.ndarray,
    include_noise: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Evaluate canonical forms at every outcome index.

    data is [d+2, ...cells...]; returns [...cells..., J] with
    out[..., j] = a0 + sum_i coeffs[i] * sources[i, j] (+ noise draw).
    """
    d = sources.shape[0]
    if data.shape[0] != num_planes(d):
        raise DimensionError(
            f"plane count {data.shape[0]} does not match basis dim {d}", "canonical"
        )
    out = np.tensordot(data[1 : d + 1], sources, axes=([0], [0]))
    out += data[0][..., None]
    if include_noise:
        if rng is None:
            rng = np.random.default_rng()
        out += data[d + 1][..., None] * rng.standard_normal(out.shape)
    return out


def mix(grid: CanonicalFormGrid, include_noise: bool = False, rng_seed: int | None = None) -> np.ndarray:
    """Dense patch outcomes [C, Gx, Gy, Z, n^2 t]. Deterministic when the
    noise term is excluded; seeded otherwise."""
    rng = np.random.default_rng(rng_seed) if include_noise else None
    out = mix_planes(grid.data, grid.basis.sources, include_noise, rng)
    # [Z, C, Gy, Gx, J] -> [C, Gx, Gy, Z, J]
    return out.transpose(1, 3, 2, 0, 4)
