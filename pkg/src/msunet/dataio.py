"""Volume/mask containers, the raw binary file formats, and the synthetic
cardiac phantom generator that stands in for clinical data.

File formats (full byte-level description in docs/formats.md):
  volume: magic "MSUV", version u32, X Y Z T u32, payload float32 LE,
          written T-major (T, Z, Y, X with X fastest).
  mask:   magic "MSUM", same header, payload uint8 in the same order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

FORMAT_VERSION = 1
MAX_VOXELS = 1 << 31  # refuse absurd headers before allocating

LABEL_BACKGROUND = 0
LABEL_RV = 1
LABEL_MYO = 2
LABEL_LV = 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "rv", "myo", "lv")


@dataclass
class VideoVolume:
    """Intensity data indexed [X, Y, Z, T]."""

    voxels: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 4:
            raise DataError(f"volume must be 4-D [X,Y,Z,T], got shape {self.voxels.shape}", "dataio")
        if not np.isfinite(self.voxels).all():
            raise DataError("volume contains non-finite voxels", "dataio")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.voxels.shape


@dataclass
class MaskVolume:
    """Class labels indexed [X, Y, Z, T], values in {0..3}."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 4:
            raise DataError(f"mask must be 4-D [X,Y,Z,T], got shape {self.labels.shape}", "dataio")
        if self.labels.max(initial=0) >= NUM_CLASSES:
            raise DataError(f"mask labels outside 0..{NUM_CLASSES - 1}", "dataio")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.labels.shape


# ---------------------------------------------------------------------------
# binary formats

_HEADER = struct.Struct("<4sIIIII")  # magic, version, X, Y, Z, T


def _write_raw(path, magic: bytes, dims, payload: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, *dims))
        # disk order is (T, Z, Y, X) with X fastest
        fh.write(np.ascontiguousarray(payload.transpose(3, 2, 1, 0)).tobytes())


def _read_raw(path, magic: bytes, dtype) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header in {path}", offset=len(blob), module="dataio")
    got_magic, version, x, y, z, t = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r} in {path}, expected {magic!r}", offset=0, module="dataio")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} in {path}", offset=4, module="dataio")
    n = x * y * z * t
    if n == 0 or n > MAX_VOXELS:
        raise FormatError(f"implausible dims {(x, y, z, t)} in {path}", offset=8, module="dataio")
    expected = _HEADER.size + n * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise FormatError(
            f"payload length mismatch in {path}: have {len(blob)} bytes, need {expected}",
            offset=min(len(blob), expected),
            module="dataio",
        )
    flat = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    return flat.reshape(t, z, y, x).transpose(3, 2, 1, 0)


def write_volume(path, volume: VideoVolume) -> None:
    _write_raw(path, b"MSUV", volume.dims, volume.voxels.astype("<f4"))


def read_volume(path) -> VideoVolume:
    return VideoVolume(_read_raw(path, b"MSUV", np.dtype("<f4")).astype(np.float64))


def write_mask(path, mask: MaskVolume) -> None:
    _write_raw(path, b"MSUM", mask.dims, mask.labels.astype(np.uint8))


def read_mask(path) -> MaskVolume:
    return MaskVolume(_read_raw(path, b"MSUM", np.uint8).copy())


# ---------------------------------------------------------------------------
# phantom generator

@dataclass
class PhantomConfig:
    dims: tuple[int, int, int, int] = (64, 64, 8, 30)
    num_cases: int = 30
    seed: int = 0
    noise_sigma: float = 0.05
    bias_field_amplitude: float = 0.2
    cycle_frames: int = 30
    apex_taper: float = 0.93
    # peak systolic radius factor: LV area shrinks to this value squared
    systole_radius_factor: float = 0.775

    def __post_init__(self):
        if self.cycle_frames < 2:
            raise ConfigError("cycle_frames must be >= 2", "dataio")
        if not 0.0 < self.apex_taper <= 1.0:
            raise ConfigError("apex_taper must be in (0, 1]", "dataio")
        if self.num_cases < 1:
            raise ConfigError("num_cases must be >= 1", "dataio")


# tissue intensities; blood pools bright, myocardium mid, background dark
_INTENSITY = {LABEL_BACKGROUND: 0.15, LABEL_RV: 0.80, LABEL_MYO: 0.50, LABEL_LV: 1.00}


def _case_mask(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Label geometry for one case: LV disc inside a MYO ring, RV crescent
    abutting the ring, all pulsing over the cardiac cycle and tapering with Z."""
    x_dim, y_dim, z_dim, t_dim = cfg.dims
    half = min(x_dim, y_dim) / 2.0

    lv_r = half * rng.uniform(0.24, 0.30)
    myo_w = max(2.0, half * rng.uniform(0.12, 0.16))
    rv_r = half * rng.uniform(0.28, 0.36)
    outer = lv_r + myo_w
    # ring plus crescent must fit with a margin on the coarsest slice
    if outer + rv_r * 0.9 + 2.0 > min(x_dim, y_dim) * 0.95:
        raise ConfigError(
            f"phantom dims {cfg.dims[:2]} too small to fit the myocardial ring",
            "dataio",
        )
    cx = x_dim / 2.0 + rng.uniform(-0.05, 0.05) * x_dim + rv_r * 0.35
    cy = y_dim / 2.0 + rng.uniform(-0.05, 0.05) * y_dim

    xs = np.arange(x_dim)[:, None]
    ys = np.arange(y_dim)[None, :]

    labels = np.zeros(cfg.dims, dtype=np.uint8)
    amp = 1.0 - cfg.systole_radius_factor
    for t in range(t_dim):
        phase = 2.0 * np.pi * t / cfg.cycle_frames
        pulse = 1.0 - amp * (1.0 - np.cos(phase)) / 2.0
        for z in range(z_dim):
            taper = cfg.apex_taper ** z
            r_lv = lv_r * pulse * taper
            r_out = r_lv + myo_w * taper
            r_rv = rv_r * pulse * taper
            rv_cx = cx - (r_out + r_rv * 0.55)
            d_lv = (xs - cx) ** 2 + (ys - cy) ** 2
            d_rv = (xs - rv_cx) ** 2 + (ys - cy) ** 2
            frame = np.zeros((x_dim, y_dim), dtype=np.uint8)
            frame[d_rv <= r_rv**2] = LABEL_RV
            frame[d_lv <= r_out**2] = LABEL_MYO
            frame[d_lv <= r_lv**2] = LABEL_LV
            labels[:, :, z, t] = frame
    return labels


def _bias_field(shape_xy, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative shading: 1 + amplitude * low-order 2-D polynomial."""
    x_dim, y_dim = shape_xy
    u = (np.arange(x_dim)[:, None] / max(x_dim - 1, 1)) * 2.0 - 1.0
    v = (np.arange(y_dim)[None, :] / max(y_dim - 1, 1)) * 2.0 - 1.0
    c = rng.uniform(-1.0, 1.0, size=5)
    poly = c[0] * u + c[1] * v + c[2] * u * v + c[3] * u**2 + c[4] * v**2
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return 1.0 + amplitude * poly


def generate_phantom(cfg: PhantomConfig) -> list[tuple[VideoVolume, MaskVolume]]:
    """Deterministic per-seed list of (video, mask) cases."""
    root = np.random.SeedSequence(cfg.seed)
    cases = []
    for case_seed in root.spawn(cfg.num_cases):
        rng = np.random.default_rng(case_seed)
        labels = _case_mask(cfg, rng)
        intensity = np.zeros(cfg.dims, dtype=np.float64)
        for label, value in _INTENSITY.items():
            intensity[labels == label] = value
        bias = _bias_field(cfg.dims[:2], cfg.bias_field_amplitude, rng)
        intensity *= bias[:, :, None, None]
        if cfg.noise_sigma > 0:
            intensity += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
        cases.append((VideoVolume(intensity), MaskVolume(labels)))
    return cases


# ---------------------------------------------------------------------------
# dataset directory layout: case files plus a manifest with the split

def save_dataset(out_dir, cases, splits: dict[str, int]) -> dict:
    """Write cases as case_###.msuv/.msum and a manifest.json assigning the
    first ``splits['train']`` cases to train, the next to val, rest to test."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = splits.get("train", 0)
    n_val = splits.get("val", 0)
    entries = []
    for i, (video, mask) in enumerate(cases):
        name = f"case_{i:03d}"
        write_volume(out_dir / f"{name}.msuv", video)
        write_mask(out_dir / f"{name}.msum", mask)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        entries.append({"id": name, "volume": f"{name}.msuv", "mask": f"{name}.msum", "split": split})
    manifest = {"format_version": FORMAT_VERSION, "cases": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(data_dir) -> dict[str, list[tuple[VideoVolume, MaskVolume]]]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {data_dir}", "dataio")
    manifest = json.loads(manifest_path.read_text())
    out: dict[str, list] = {"train": [], "val": [], "test": []}
    for entry in manifest["cases"]:
        video = read_volume(data_dir / entry["volume"])
        mask = read_mask(data_dir / entry["mask"])
        if video.dims != mask.dims:
            raise DataError(f"dims mismatch for {entry['id']}", "dataio")
        out[entry["split"]].append((video, mask))
    return out
