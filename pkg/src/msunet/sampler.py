"""Video <-> canonical-form-grid conversion.

A video [X, Y, Z, T] is z-scored, cut along T into snippets of span t (last
one zero-padded), and each snippet is tiled in the X-Y plane into
non-overlapping n x n windows (zero-padded at the right/bottom borders).
Patches never span Z. All positions of all Z slices of one snippet pool into
a single sample matrix, so every cell of the resulting grid shares one basis.

Patch vector layout is the bit-exact contract enforced by a golden test:

    j = f * n^2 + ty * n + tx      (frame offset f, in-tile row ty, col tx)

i.e. time-major, then row-major within the tile. Sample rows are ordered
z-major: p = z * Gy * Gx + gy * Gx + gx.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .canonical import BasisSet, CanonicalFormGrid, GridGeometry, mix_planes, num_planes
from .dataio import VideoVolume
from .errors import ConfigError, DimensionError
from .ica import IcaConfig, IcaFit, SAMPLES_PER_COMPONENT, ica_fit


@dataclass(frozen=True)
class ScaleSpec:
    """One branch's sampling geometry: n x n windows over t frames,
    compressed to d basis components (realized ratio r = d / (n^2 t))."""

    n: int
    t: int
    d: int
    stride: int = 0  # 0 means stride = n

    def __post_init__(self):
        if self.stride == 0:
            object.__setattr__(self, "stride", self.n)
        if self.n < 1 or self.t < 1 or self.stride < 1:
            raise ConfigError(f"invalid scale {self}", "sampler")
        if not 1 <= self.d <= self.n**2 * self.t:
            raise ConfigError(f"d={self.d} outside 1..n^2*t={self.n**2 * self.t}", "sampler")

    @property
    def patch_len(self) -> int:
        return self.n**2 * self.t

    @property
    def r(self) -> float:
        return self.d / self.patch_len

    @property
    def scale_id(self) -> str:
        return f"n{self.n}_t{self.t}_d{self.d}"


def make_scale(n: int, t: int, ratio: float, d: int | None = None) -> ScaleSpec:
    """Scale with d = round(ratio * n^2 t) (floor 1) unless given explicitly;
    the realized ratio is whatever that d produces."""
    if d is None:
        d = max(1, round(ratio * n * n * t))
    return ScaleSpec(n=n, t=t, d=d)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True)
class SnippetPlan:
    """Tiling geometry shared by extract and restore."""

    dims: tuple[int, int, int, int]
    t: int

    @property
    def num_snippets(self) -> int:
        return -(-self.dims[3] // self.t)

    def snippet_range(self, s: int) -> tuple[int, int]:
        """[start, end) frame range; end may exceed T for the padded tail."""
        return s * self.t, (s + 1) * self.t

    def grid_dims(self, spec: ScaleSpec) -> tuple[int, int]:
        x, y = self.dims[0], self.dims[1]
        return -(-x // spec.stride), -(-y // spec.stride)


def normalize(video: VideoVolume) -> tuple[VideoVolume, NormStats]:
    """Per-video z-score. A constant volume maps to all zeros with unit std
    recorded so inversion stays well defined."""
    v = video.voxels
    if v.size == 0:
        raise DimensionError("empty volume", "sampler")
    mean = float(v.mean())
    std = float(v.std())
    if std == 0.0:
        return VideoVolume(np.zeros_like(v), dict(video.header)), NormStats(mean, 1.0)
    out = VideoVolume((v - mean) / std, dict(video.header))
    return out, NormStats(mean, std)


def denormalize(video: VideoVolume, stats: NormStats) -> VideoVolume:
    return VideoVolume(video.voxels * stats.std + stats.mean, dict(video.header))


def _padded_snippet(voxels: np.ndarray, plan: SnippetPlan, spec: ScaleSpec, s: int) -> np.ndarray:
    """Snippet frames zero-padded to tile multiples: [Xp, Yp, Z, t]."""
    x, y, z, t_total = plan.dims
    gx, gy = plan.grid_dims(spec)
    xp, yp = gx * spec.n, gy * spec.n
    start, end = plan.snippet_range(s)
    out = np.zeros((xp, yp, z, spec.t), dtype=np.float64)
    real = min(end, t_total) - start
    out[:x, :y, :, :real] = voxels[:, :, :, start : start + real]
    return out


def _patch_matrix(padded: np.ndarray, n: int) -> np.ndarray:
    """[Xp, Yp, Z, t] -> samples [Z*Gy*Gx, n^2 t] in the contract layout."""
    xp, yp, z, t = padded.shape
    gx, gy = xp // n, yp // n
    tiles = padded.reshape(gx, n, gy, n, z, t)  # axes: gx, tx, gy, ty, z, f
    tiles = tiles.transpose(4, 2, 0, 5, 3, 1)  # z, gy, gx, f, ty, tx
    return tiles.reshape(z * gy * gx, t * n * n)


def _scatter_patches(patches: np.ndarray, gx: int, gy: int, z: int, n: int, t: int) -> np.ndarray:
    """Inverse of _patch_matrix: [Z*Gy*Gx, n^2 t] -> [Xp, Yp, Z, t]."""
    tiles = patches.reshape(z, gy, gx, t, n, n)  # z, gy, gx, f, ty, tx
    tiles = tiles.transpose(2, 5, 1, 4, 0, 3)  # gx, tx, gy, ty, z, f
    return tiles.reshape(gx * n, gy * n, z, t)


def _fit_to_grid(fit: IcaFit, gx: int, gy: int, z: int, geometry: GridGeometry) -> CanonicalFormGrid:
    d = fit.basis.dim
    planes = np.empty((num_planes(d), z, 1, gy, gx), dtype=np.float64)
    planes[0, :, 0] = fit.means.reshape(z, gy, gx)
    planes[1 : d + 1, :, 0] = fit.coefficients.reshape(z, gy, gx, d).transpose(3, 0, 1, 2)
    planes[d + 1, :, 0] = fit.residual_sigma.reshape(z, gy, gx)
    return CanonicalFormGrid(planes, fit.basis, geometry)


def extract(
    video: VideoVolume,
    spec: ScaleSpec,
    ica_config: IcaConfig | None = None,
    plan: SnippetPlan | None = None,
) -> list[CanonicalFormGrid]:
    """Collapse a normalized video into one grid per snippet.

    Each snippet gets its own basis, fit on the pooled patches of every
    position and every Z slice (pooling is what keeps the per-cell sample
    count above the ICA floor).
    """
    cfg = ica_config or IcaConfig()
    plan = plan or SnippetPlan(video.dims, spec.t)
    if plan.t != spec.t:
        raise DimensionError(f"plan span {plan.t} != scale span {spec.t}", "sampler")
    gx, gy = plan.grid_dims(spec)
    z = plan.dims[2]
    if gx * gy * z < SAMPLES_PER_COMPONENT * spec.d:
        raise ConfigError(
            f"scale {spec.scale_id}: {gx * gy * z} patches even after pooling all Z slices, "
            f"need {SAMPLES_PER_COMPONENT * spec.d} for d={spec.d}",
            "sampler",
        )
    grids = []
    for s in range(plan.num_snippets):
        padded = _padded_snippet(video.voxels, plan, spec, s)
        samples = _patch_matrix(padded, spec.n)
        snippet_seed = int(np.random.SeedSequence((cfg.seed, spec.n, s)).generate_state(1)[0])
        fit = ica_fit(samples, spec.d, replace(cfg, seed=snippet_seed), scale_id=spec.scale_id)
        geometry = GridGeometry(plan.dims, spec.n, spec.t, spec.stride, snippet_index=s)
        grids.append(_fit_to_grid(fit, gx, gy, z, geometry))
    return grids


def restore(
    grids: list[CanonicalFormGrid],
    plan: SnippetPlan,
    norm: NormStats,
    include_noise: bool = False,
    rng_seed: int | None = None,
) -> VideoVolume:
    """Mix grids back to a video: evaluate every cell at every outcome index,
    scatter patches to the padded plane, crop, stitch snippets, un-normalize."""
    if len(grids) != plan.num_snippets:
        raise DimensionError(
            f"{len(grids)} grids for a plan with {plan.num_snippets} snippets", "sampler"
        )
    x, y, z, t_total = plan.dims
    out = np.empty((x, y, z, t_total), dtype=np.float64)
    rng = np.random.default_rng(rng_seed) if include_noise else None
    for s, grid in enumerate(grids):
        n, t, stride = grid.geometry.n, grid.geometry.t, grid.geometry.stride
        gx_e, gy_e = -(-x // stride), -(-y // stride)
        gx, gy, gz, c = grid.shape
        if (gx, gy, gz) != (gx_e, gy_e, z) or c != 1 or grid.geometry.volume_dims != plan.dims:
            raise DimensionError(f"grid {s} geometry does not match the plan", "sampler")
        values = mix_planes(grid.data, grid.basis.sources, include_noise, rng)
        patches = values[:, 0].reshape(z * gy * gx, n * n * t)  # rows already z-major
        frames = _scatter_patches(patches, gx, gy, z, n, t)
        start, end = plan.snippet_range(s)
        real = min(end, t_total) - start
        out[:, :, :, start : start + real] = frames[:x, :y, :, :real]
    return denormalize(VideoVolume(out), norm)


def restore_rmse(original: VideoVolume, restored: VideoVolume) -> float:
    """RMSE in normalized units (divided by the original volume's std)."""
    diff = original.voxels - restored.voxels
    std = original.voxels.std()
    rmse = float(np.sqrt((diff**2).mean()))
    return rmse / std if std > 0 else rmse
