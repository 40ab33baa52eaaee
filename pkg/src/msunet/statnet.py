"""Network graphs over canonical-form grids (statistical mode) and plain
frames (deterministic mode), with hand-rolled reverse-mode gradients.

Topology per branch: DownTube blocks [conv3x3, relu, conv_down] * depth,
a Center block [conv3x3, relu], UpTube blocks [tconv_up, concat-with-skip,
conv3x3, relu] * depth. A shared Final Evaluator concatenates all branch
outputs and maps them to class logits via [conv3x3, relu, conv1x1].

Statistical layers act per grid cell on the d+2 coefficient planes: linear
layers are weighted sums (bias lands on the mean plane, residual sigmas
combine in quadrature), relu gates whole cells on the sign of the mean.
At ``mix_point`` the planes are mixed (noise excluded) into t per-frame maps
that are n-times larger in each spatial dim, and the rest of the graph runs
deterministically per frame. Skips taken before the mix point are mixed at
concat time. Mixing never feeds the noise plane forward, so parameter
gradients flow through the (exactly linear) value planes only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import convops
from .canonical import CanonicalFormGrid
from .dataio import VideoVolume
from .errors import BuildError, DimensionError, FormatError, UsageError
from .sampler import ScaleSpec

MIX_POINTS = ("after_dt", "after_ut")
DEFAULT_BASE_CHANNELS = 8
DEFAULT_DEPTH = 2

# kind -> (kh, kw, stride, pad); tconv geometry is fixed 2x2/2
_CONV_GEOM = {"conv3x3": (3, 3, 1, 1), "conv_down": (3, 3, 2, 1), "conv1x1": (1, 1, 1, 0)}
PARAM_KINDS = ("conv3x3", "conv_down", "conv1x1", "tconv_up")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv3x3 | conv_down | tconv_up | relu | concat | conv1x1
    in_channels: int
    out_channels: int
    mode: str  # statistical | deterministic


@dataclass(frozen=True)
class DTBlock:
    conv: LayerSpec
    relu: LayerSpec
    down: LayerSpec


@dataclass(frozen=True)
class UTBlock:
    up: LayerSpec
    concat: LayerSpec
    conv: LayerSpec
    relu: LayerSpec


@dataclass(frozen=True)
class Branch:
    scale: ScaleSpec | None  # None = full-resolution frame branch (baseline)
    depth: int
    dt: tuple[DTBlock, ...]
    center_conv: LayerSpec
    center_relu: LayerSpec
    ut: tuple[UTBlock, ...]


@dataclass(frozen=True)
class FinalEvaluator:
    concat: LayerSpec
    conv: LayerSpec
    relu: LayerSpec
    head: LayerSpec


@dataclass(frozen=True)
class LayoutRow:
    spec: LayerSpec
    w_offset: int
    w_shape: tuple[int, ...]
    b_offset: int
    b_len: int


@dataclass
class NetworkGraph:
    kind: str  # msunet | baseline
    scales: tuple[ScaleSpec, ...]
    branches: tuple[Branch, ...]
    fe: FinalEvaluator
    mix_point: str | None
    num_classes: int
    base_channels: int
    depth: int
    seed: int
    params: np.ndarray = field(repr=False)
    layout: tuple[LayoutRow, ...] = field(repr=False)

    def __post_init__(self):
        self._rows = {row.spec.name: row for row in self.layout}

    def weights(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(weight view, bias view) into the flat parameter vector."""
        row = self._rows[name]
        w = self.params[row.w_offset : row.w_offset + int(np.prod(row.w_shape))]
        b = self.params[row.b_offset : row.b_offset + row.b_len]
        return w.reshape(row.w_shape), b

    def layer_specs(self) -> list[LayerSpec]:
        out = []
        for branch in self.branches:
            for blk in branch.dt:
                out += [blk.conv, blk.relu, blk.down]
            out += [branch.center_conv, branch.center_relu]
            for blk in branch.ut:
                out += [blk.up, blk.concat, blk.conv, blk.relu]
        out += [self.fe.concat, self.fe.conv, self.fe.relu, self.fe.head]
        return out

    @property
    def num_params(self) -> int:
        return self.params.size


# ---------------------------------------------------------------------------
# builders

def _weight_shape(kind: str, cin: int, cout: int) -> tuple[int, ...]:
    if kind == "tconv_up":
        return (cin, cout, 2, 2)
    kh, kw, _, _ = _CONV_GEOM[kind]
    return (cout, cin, kh, kw)


def _build_graph(
    kind: str,
    scales: tuple[ScaleSpec, ...],
    branch_plans: list[tuple[ScaleSpec | None, int]],
    base_channels: int,
    num_classes: int,
    mix_point: str | None,
    seed: int,
    depth: int,
) -> NetworkGraph:
    stat_tail = mix_point == "after_ut"

    def mode_dt() -> str:
        return "statistical" if kind == "msunet" else "deterministic"

    def mode_tail() -> str:
        return "statistical" if (kind == "msunet" and stat_tail) else "deterministic"

    branches = []
    for b_idx, (scale, b_depth) in enumerate(branch_plans):
        chans = [base_channels * (1 << k) for k in range(b_depth + 1)]
        prefix = f"b{b_idx}"
        dt = []
        prev = 1
        for k in range(b_depth):
            dt.append(
                DTBlock(
                    conv=LayerSpec(f"{prefix}/dt{k}/conv", "conv3x3", prev, chans[k], mode_dt()),
                    relu=LayerSpec(f"{prefix}/dt{k}/relu", "relu", chans[k], chans[k], mode_dt()),
                    down=LayerSpec(f"{prefix}/dt{k}/down", "conv_down", chans[k], chans[k], mode_dt()),
                )
            )
            prev = chans[k]
        center_conv = LayerSpec(f"{prefix}/center/conv", "conv3x3", chans[b_depth - 1], chans[b_depth], mode_tail())
        center_relu = LayerSpec(f"{prefix}/center/relu", "relu", chans[b_depth], chans[b_depth], mode_tail())
        ut = []
        prev = chans[b_depth]
        for k in reversed(range(b_depth)):
            ut.append(
                UTBlock(
                    up=LayerSpec(f"{prefix}/ut{k}/up", "tconv_up", prev, chans[k], mode_tail()),
                    concat=LayerSpec(f"{prefix}/ut{k}/concat", "concat", 2 * chans[k], 2 * chans[k], mode_tail()),
                    conv=LayerSpec(f"{prefix}/ut{k}/conv", "conv3x3", 2 * chans[k], chans[k], mode_tail()),
                    relu=LayerSpec(f"{prefix}/ut{k}/relu", "relu", chans[k], chans[k], mode_tail()),
                )
            )
            prev = chans[k]
        branches.append(Branch(scale, b_depth, tuple(dt), center_conv, center_relu, tuple(ut)))

    fe_in = base_channels * len(branches)
    fe = FinalEvaluator(
        concat=LayerSpec("fe/concat", "concat", fe_in, fe_in, "deterministic"),
        conv=LayerSpec("fe/conv", "conv3x3", fe_in, base_channels, "deterministic"),
        relu=LayerSpec("fe/relu", "relu", base_channels, base_channels, "deterministic"),
        head=LayerSpec("fe/head", "conv1x1", base_channels, num_classes, "deterministic"),
    )

    # flat parameter vector, He-uniform weights, zero biases
    layout = []
    offset = 0
    graph_stub_layers = []
    for branch in branches:
        for blk in branch.dt:
            graph_stub_layers += [blk.conv, blk.down]
        graph_stub_layers.append(branch.center_conv)
        for blk in branch.ut:
            graph_stub_layers += [blk.up, blk.conv]
    graph_stub_layers += [fe.conv, fe.head]

    rng = np.random.default_rng(seed)
    chunks = []
    for spec in graph_stub_layers:
        w_shape = _weight_shape(spec.kind, spec.in_channels, spec.out_channels)
        w_size = int(np.prod(w_shape))
        fan_in = spec.in_channels * w_shape[-1] * w_shape[-2]
        limit = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-limit, limit, size=w_size))
        chunks.append(np.zeros(spec.out_channels))
        layout.append(LayoutRow(spec, offset, w_shape, offset + w_size, spec.out_channels))
        offset += w_size + spec.out_channels
    params = np.concatenate(chunks) if chunks else np.zeros(0)

    return NetworkGraph(
        kind=kind,
        scales=scales,
        branches=tuple(branches),
        fe=fe,
        mix_point=mix_point,
        num_classes=num_classes,
        base_channels=base_channels,
        depth=depth,
        seed=seed,
        params=params,
        layout=tuple(layout),
    )


def build_msunet(
    scales: list[ScaleSpec],
    base_channels: int = DEFAULT_BASE_CHANNELS,
    depth: int = DEFAULT_DEPTH,
    num_classes: int = 4,
    mix_point: str = "after_dt",
    seed: int = 0,
) -> NetworkGraph:
    """One DownTube/UpTube pair per scale. ``depth`` is the tube depth of
    the finest scale; coarser scales get proportionally fewer steps so every
    UpTube output lands at the same per-frame resolution after mixing."""
    if not scales:
        raise BuildError("need at least one scale", "statnet")
    if len({s.t for s in scales}) != 1:
        raise BuildError("all scales must share one snippet span t", "statnet")
    if depth < 1:
        raise BuildError("depth must be >= 1", "statnet")
    if base_channels < 2:
        raise BuildError("base_channels must be >= 2", "statnet")
    if mix_point not in MIX_POINTS:
        raise BuildError(f"mix_point must be one of {MIX_POINTS}", "statnet")
    n_min = min(s.n for s in scales)
    plans = []
    for s in scales:
        ratio = s.n // n_min
        if s.n != n_min * ratio or ratio & (ratio - 1):
            raise BuildError(
                f"scale n={s.n} is not a power-of-two multiple of the finest n={n_min}", "statnet"
            )
        b_depth = depth - ratio.bit_length() + 1
        if b_depth < 1:
            raise BuildError(
                f"scale n={s.n} cannot reach the common resolution with depth {depth}", "statnet"
            )
        plans.append((s, b_depth))
    return _build_graph(
        "msunet", tuple(scales), plans, base_channels, num_classes, mix_point, seed, depth
    )


def build_baseline(
    depth: int = 3,
    base_channels: int = 8,
    num_classes: int = 4,
    seed: int = 0,
) -> NetworkGraph:
    """Shallow per-frame 2-D U-Net (e.g. depth 3 with 8 initial filters is
    the D3+IF8 configuration)."""
    if depth < 1:
        raise BuildError("depth must be >= 1", "statnet")
    return _build_graph(
        "baseline", (), [(None, depth)], base_channels, num_classes, None, seed, depth
    )


# ---------------------------------------------------------------------------
# forward/backward engine

@dataclass
class _Det:
    uid: int
    data: np.ndarray  # [t, Z, C, H, W]


@dataclass
class _Stat:
    uid: int
    val: np.ndarray  # [d+1, Z, C, H, W]; plane 0 = mean, 1..d = coeffs
    noise: np.ndarray  # [Z, C, H, W]
    sources: np.ndarray  # [d, n^2 t]
    n: int
    t: int


class Tape:
    """Reverse-mode record of one forward pass. Holds views into the
    graph's parameter vector; run backward() before mutating parameters."""

    def __init__(self):
        self.steps: list[tuple[int, tuple[int, ...], object]] = []
        self.output_id: int | None = None
        self.layer_outputs: list[tuple[str, np.ndarray]] = []
        # distance of each relu's gate input from its kink; finite-difference
        # checks are only trustworthy when min(gate_margins) >> h
        self.gate_margins: list[float] = []

    def record(self, out_id: int, in_ids: tuple[int, ...], fn) -> None:
        self.steps.append((out_id, in_ids, fn))


class _Ctx:
    def __init__(self, graph: NetworkGraph, tape: Tape | None, force_open: bool):
        self.graph = graph
        self.tape = tape
        self.force_open = force_open
        self._next = 0

    def new_id(self) -> int:
        self._next += 1
        return self._next

    def _rec(self, out_id, in_ids, fn, name, out_array):
        if self.tape is not None:
            self.tape.record(out_id, in_ids, fn)
            self.tape.layer_outputs.append((name, out_array))

    # -- parameterized linear layers ------------------------------------

    def conv(self, spec: LayerSpec, feat):
        w, b = self.graph.weights(spec.name)
        row = self.graph._rows[spec.name]
        kh, kw, stride, pad = _CONV_GEOM[spec.kind]
        if isinstance(feat, _Det):
            t, z, c, h, wd = feat.data.shape
            xb = feat.data.reshape(t * z, c, h, wd)
            y = convops.conv2d_forward(xb, w, b, stride, pad)
            out = _Det(self.new_id(), y.reshape(t, z, *y.shape[1:]))

            def bwd(dout):
                dy = dout.reshape(t * z, *dout.shape[2:])
                dx, dw, db = convops.conv2d_backward(dy, xb, w, stride, pad)
                return [dx.reshape(feat.data.shape)], [(row.w_offset, dw), (row.b_offset, db)]

            self._rec(out.uid, (feat.uid,), bwd, spec.name, out.data)
            return out
        planes, z, c, h, wd = feat.val.shape
        vb = feat.val.reshape(planes * z, c, h, wd)
        yv = convops.conv2d_forward(vb, w, None, stride, pad)
        yv = yv.reshape(planes, z, *yv.shape[1:])
        yv[0] += b[None, :, None, None]
        yn = np.sqrt(
            np.maximum(convops.conv2d_forward(feat.noise**2, w**2, None, stride, pad), 0.0)
        )
        out = _Stat(self.new_id(), yv, yn, feat.sources, feat.n, feat.t)

        def bwd_stat(dout):
            dy = dout.reshape(planes * z, *dout.shape[2:])
            dx, dw, _ = convops.conv2d_backward(dy, vb, w, stride, pad, with_bias=False)
            db = dout[0].sum(axis=(0, 2, 3))
            return [dx.reshape(feat.val.shape)], [(row.w_offset, dw), (row.b_offset, db)]

        self._rec(out.uid, (feat.uid,), bwd_stat, spec.name, out.val)
        return out

    def tconv(self, spec: LayerSpec, feat):
        w, b = self.graph.weights(spec.name)
        row = self.graph._rows[spec.name]
        if isinstance(feat, _Det):
            t, z, c, h, wd = feat.data.shape
            xb = feat.data.reshape(t * z, c, h, wd)
            y = convops.tconv2d_forward(xb, w, b)
            out = _Det(self.new_id(), y.reshape(t, z, *y.shape[1:]))

            def bwd(dout):
                dy = dout.reshape(t * z, *dout.shape[2:])
                dx, dw, db = convops.tconv2d_backward(dy, xb, w)
                return [dx.reshape(feat.data.shape)], [(row.w_offset, dw), (row.b_offset, db)]

            self._rec(out.uid, (feat.uid,), bwd, spec.name, out.data)
            return out
        planes, z, c, h, wd = feat.val.shape
        vb = feat.val.reshape(planes * z, c, h, wd)
        yv = convops.tconv2d_forward(vb, w, None)
        yv = yv.reshape(planes, z, *yv.shape[1:])
        yv[0] += b[None, :, None, None]
        yn = np.sqrt(np.maximum(convops.tconv2d_forward(feat.noise**2, w**2, None), 0.0))
        out = _Stat(self.new_id(), yv, yn, feat.sources, feat.n, feat.t)

        def bwd_stat(dout):
            dy = dout.reshape(planes * z, *dout.shape[2:])
            dx, dw, _ = convops.tconv2d_backward(dy, vb, w, with_bias=False)
            db = dout[0].sum(axis=(0, 2, 3))
            return [dx.reshape(feat.val.shape)], [(row.w_offset, dw), (row.b_offset, db)]

        self._rec(out.uid, (feat.uid,), bwd_stat, spec.name, out.val)
        return out

    # -- nonlinearity -----------------------------------------------------

    def relu(self, spec: LayerSpec, feat):
        if isinstance(feat, _Det):
            if self.force_open:
                gate = np.ones_like(feat.data, dtype=bool)
            else:
                gate = feat.data > 0.0
                if self.tape is not None:
                    self.tape.gate_margins.append(float(np.abs(feat.data).min()))
            out = _Det(self.new_id(), np.where(gate, feat.data, 0.0))

            def bwd(dout):
                return [dout * gate], []

            self._rec(out.uid, (feat.uid,), bwd, spec.name, out.data)
            return out
        # whole cells gate together on the sign of the mean plane
        if self.force_open:
            gate = np.ones_like(feat.noise, dtype=np.float64)
        else:
            gate = (feat.val[0] > 0.0).astype(np.float64)
            if self.tape is not None:
                self.tape.gate_margins.append(float(np.abs(feat.val[0]).min()))
        out = _Stat(self.new_id(), feat.val * gate[None], feat.noise * gate, feat.sources, feat.n, feat.t)

        def bwd_stat(dout):
            return [dout * gate[None]], []

        self._rec(out.uid, (feat.uid,), bwd_stat, spec.name, out.val)
        return out

    # -- structure ---------------------------------------------------------

    def concat(self, spec: LayerSpec, feats):
        if isinstance(feats[0], _Det):
            sizes = [f.data.shape[2] for f in feats]
            out = _Det(self.new_id(), np.concatenate([f.data for f in feats], axis=2))

            def bwd(dout):
                return list(np.split(dout, np.cumsum(sizes)[:-1], axis=2)), []

            self._rec(out.uid, tuple(f.uid for f in feats), bwd, spec.name, out.data)
            return out
        sizes = [f.val.shape[2] for f in feats]
        first = feats[0]
        out = _Stat(
            self.new_id(),
            np.concatenate([f.val for f in feats], axis=2),
            np.concatenate([f.noise for f in feats], axis=1),
            first.sources,
            first.n,
            first.t,
        )

        def bwd_stat(dout):
            return list(np.split(dout, np.cumsum(sizes)[:-1], axis=2)), []

        self._rec(out.uid, tuple(f.uid for f in feats), bwd_stat, spec.name, out.val)
        return out

    def crop_to(self, feat, h: int, w: int):
        if isinstance(feat, _Det):
            if feat.data.shape[-2:] == (h, w):
                return feat
            full = feat.data.shape
            out = _Det(self.new_id(), feat.data[..., :h, :w])

            def bwd(dout):
                dx = np.zeros(full)
                dx[..., :h, :w] = dout
                return [dx], []

            self._rec(out.uid, (feat.uid,), bwd, "crop", out.data)
            return out
        if feat.val.shape[-2:] == (h, w):
            return feat
        full = feat.val.shape
        out = _Stat(
            self.new_id(), feat.val[..., :h, :w], feat.noise[..., :h, :w], feat.sources, feat.n, feat.t
        )

        def bwd_stat(dout):
            dx = np.zeros(full)
            dx[..., :h, :w] = dout
            return [dx], []

        self._rec(out.uid, (feat.uid,), bwd_stat, "crop", out.val)
        return out

    def mix(self, feat: _Stat) -> _Det:
        """Evaluate value planes at every outcome index and scatter the
        n x n x t patches into per-frame maps. Noise is excluded."""
        d_plus, z, c, h, w = feat.val.shape
        d = d_plus - 1
        n, t = feat.n, feat.t
        src = feat.sources
        vals = np.tensordot(feat.val[1:], src, axes=([0], [0]))  # [Z,C,h,w,J]
        vals += feat.val[0][..., None]
        vals = vals.reshape(z, c, h, w, t, n, n).transpose(4, 0, 1, 2, 5, 3, 6)
        out = _Det(self.new_id(), np.ascontiguousarray(vals).reshape(t, z, c, h * n, w * n))

        def bwd(dout):
            dd = dout.reshape(t, z, c, h, n, w, n).transpose(1, 2, 3, 5, 0, 4, 6)
            dd = np.ascontiguousarray(dd).reshape(z, c, h, w, t * n * n)
            dval = np.empty(feat.val.shape)
            dval[0] = dd.sum(axis=-1)
            dval[1:] = np.moveaxis(np.tensordot(dd, src, axes=([4], [1])), -1, 0)
            return [dval], []

        self._rec(out.uid, (feat.uid,), bwd, "mix", out.data)
        return out

    def output(self, feat: _Det) -> tuple[int, np.ndarray]:
        """[t, Z, C, Y, X] -> logits [X, Y, Z, T, C]."""
        out_id = self.new_id()
        logits = feat.data.transpose(4, 3, 1, 0, 2)

        def bwd(dout):
            return [dout.transpose(3, 2, 4, 1, 0)], []

        self._rec(out_id, (feat.uid,), bwd, "output", logits)
        return out_id, logits


def _branch_forward(ctx: _Ctx, branch: Branch, feat, mix_active: bool):
    graph = ctx.graph
    skips = []
    for blk in branch.dt:
        feat = ctx.conv(blk.conv, feat)
        feat = ctx.relu(blk.relu, feat)
        skips.append(feat)
        feat = ctx.conv(blk.down, feat)
    if mix_active and graph.mix_point == "after_dt":
        feat = ctx.mix(feat)
    feat = ctx.conv(branch.center_conv, feat)
    feat = ctx.relu(branch.center_relu, feat)
    for blk, skip in zip(branch.ut, reversed(skips)):
        feat = ctx.tconv(blk.up, feat)
        if isinstance(feat, _Det) and isinstance(skip, _Stat):
            skip = ctx.mix(skip)
        if isinstance(skip, _Det):
            sh, sw = skip.data.shape[-2:]
        else:
            sh, sw = skip.val.shape[-2:]
        feat = ctx.crop_to(feat, sh, sw)
        feat = ctx.concat(blk.concat, [feat, skip])
        feat = ctx.conv(blk.conv, feat)
        feat = ctx.relu(blk.relu, feat)
    if mix_active and graph.mix_point == "after_ut" and isinstance(feat, _Stat):
        feat = ctx.mix(feat)
    return feat


def _evaluate(ctx: _Ctx, graph: NetworkGraph, branch_feats: list[_Det], y: int, x: int):
    cropped = [ctx.crop_to(f, y, x) for f in branch_feats]
    feat = ctx.concat(graph.fe.concat, cropped)
    feat = ctx.conv(graph.fe.conv, feat)
    feat = ctx.relu(graph.fe.relu, feat)
    feat = ctx.conv(graph.fe.head, feat)
    return ctx.output(feat)


def forward_stat(
    graph: NetworkGraph,
    grids: list[CanonicalFormGrid],
    want_tape: bool = False,
    force_open_gates: bool = False,
):
    """One snippet through the statistical graph. Returns per-frame logits
    [X, Y, Z, t, num_classes], plus the tape when requested."""
    if graph.kind != "msunet":
        raise UsageError("forward_stat needs an msunet graph", "statnet")
    if len(grids) != len(graph.scales):
        raise DimensionError(
            f"graph has {len(graph.scales)} scales, got {len(grids)} grids", "statnet"
        )
    dims = grids[0].geometry.volume_dims
    for grid, scale in zip(grids, graph.scales):
        if grid.geometry.n != scale.n or grid.geometry.t != scale.t or grid.dim != scale.d:
            raise DimensionError(
                f"grid {grid.geometry.n}/{grid.geometry.t}/d{grid.dim} does not match "
                f"scale {scale.scale_id}",
                "statnet",
            )
        if grid.geometry.volume_dims != dims:
            raise DimensionError("grids come from different volumes", "statnet")
    x, y = dims[0], dims[1]
    tape = Tape() if want_tape else None
    ctx = _Ctx(graph, tape, force_open_gates)
    branch_feats = []
    for branch, grid, scale in zip(graph.branches, grids, graph.scales):
        d = grid.dim
        feat = _Stat(
            ctx.new_id(),
            grid.data[: d + 1],
            grid.data[d + 1],
            grid.basis.sources,
            scale.n,
            scale.t,
        )
        branch_feats.append(_branch_forward(ctx, branch, feat, mix_active=True))
    out_id, logits = _evaluate(ctx, graph, branch_feats, y, x)
    if want_tape:
        tape.output_id = out_id
        return logits, tape
    return logits


def forward_det(
    graph: NetworkGraph,
    frames: VideoVolume | np.ndarray,
    want_tape: bool = False,
    force_open_gates: bool = False,
):
    """Per-frame deterministic pass over every (z, t) slice. Works for the
    baseline graph and for any msunet graph run as its matched deterministic
    twin (each branch then sees the full-resolution frames)."""
    voxels = frames.voxels if isinstance(frames, VideoVolume) else np.asarray(frames, dtype=np.float64)
    if voxels.ndim != 4:
        raise DimensionError("frames must be [X, Y, Z, T]", "statnet")
    x, y, z, t = voxels.shape
    data = voxels.transpose(3, 2, 1, 0)[:, :, None]  # [T, Z, 1, Y, X]
    tape = Tape() if want_tape else None
    ctx = _Ctx(graph, tape, force_open_gates)
    branch_feats = []
    for branch in graph.branches:
        feat = _Det(ctx.new_id(), data)
        branch_feats.append(_branch_forward(ctx, branch, feat, mix_active=False))
    out_id, logits = _evaluate(ctx, graph, branch_feats, y, x)
    if want_tape:
        tape.output_id = out_id
        return logits, tape
    return logits


def backward(graph: NetworkGraph, tape: Tape, loss_grad: np.ndarray) -> np.ndarray:
    """Parameter gradients for one recorded forward pass."""
    if tape is None or tape.output_id is None:
        raise UsageError("backward needs a tape from forward(..., want_tape=True)", "statnet")
    grads: dict[int, np.ndarray] = {tape.output_id: np.asarray(loss_grad, dtype=np.float64)}
    param_grads = np.zeros_like(graph.params)
    for out_id, in_ids, fn in reversed(tape.steps):
        dout = grads.pop(out_id, None)
        if dout is None:
            continue
        dins, dparams = fn(dout)
        for in_id, din in zip(in_ids, dins):
            if in_id in grads:
                grads[in_id] = grads[in_id] + din
            else:
                grads[in_id] = din
        for offset, dp in dparams:
            flat = dp.ravel()
            param_grads[offset : offset + flat.size] += flat
    return param_grads


# ---------------------------------------------------------------------------
# FLOP accounting

def _conv_macs(kind: str, cin: int, cout: int, h: int, w: int) -> tuple[int, int, int]:
    """(macs per image, out_h, out_w)."""
    if kind == "tconv_up":
        return h * w * cin * cout * 4, 2 * h, 2 * w
    kh, kw, stride, pad = _CONV_GEOM[kind]
    oh, ow = convops.conv_out_hw(h, w, kh, kw, stride, pad)
    return oh * ow * cin * cout * kh * kw, oh, ow


def _branch_macs(branch: Branch, h0: int, w0: int, z: int, t: int, stat: bool, mix_point: str | None):
    """Walk one branch symbolically; returns (macs, out_h, out_w)."""
    total = 0
    scale = branch.scale
    d = scale.d if (stat and scale is not None) else 0
    images_stat = (d + 2) * z
    images_det = t * z
    images = images_stat if stat else images_det
    h, w = h0, w0
    skip_dims = []
    skip_stat = []
    for blk in branch.dt:
        macs, h, w = _conv_macs(blk.conv.kind, blk.conv.in_channels, blk.conv.out_channels, h, w)
        total += macs * images
        skip_dims.append((h, w))
        skip_stat.append(stat)
        macs, h, w = _conv_macs(blk.down.kind, blk.down.in_channels, blk.down.out_channels, h, w)
        total += macs * images
    if stat and mix_point == "after_dt":
        total += h * w * z * branch.dt[-1].down.out_channels * d * (scale.n**2 * t)
        h, w = h * scale.n, w * scale.n
        images = images_det
        stat = False
    macs, h, w = _conv_macs(
        branch.center_conv.kind, branch.center_conv.in_channels, branch.center_conv.out_channels, h, w
    )
    total += macs * images
    for blk, (sh, sw), s_stat in zip(branch.ut, reversed(skip_dims), reversed(skip_stat)):
        macs, h, w = _conv_macs(blk.up.kind, blk.up.in_channels, blk.up.out_channels, h, w)
        total += macs * images
        if not stat and s_stat and scale is not None:
            # mixing the skip at concat time
            total += sh * sw * z * blk.up.out_channels * d * (scale.n**2 * t)
            sh, sw = sh * scale.n, sw * scale.n
        h, w = min(h, sh), min(w, sw)
        macs, h, w = _conv_macs(blk.conv.kind, blk.conv.in_channels, blk.conv.out_channels, h, w)
        total += macs * images
    if stat and mix_point == "after_ut" and scale is not None:
        total += h * w * z * branch.ut[-1].conv.out_channels * d * (scale.n**2 * t)
        h, w = h * scale.n, w * scale.n
    return total, h, w


def flop_count(graph: NetworkGraph, volume_dims: tuple[int, int, int, int]) -> dict:
    """Multiply-accumulate counts for one snippet: the graph as built
    (statistical branches on collapsed grids) versus the same architecture
    run deterministically on every full-resolution frame."""
    x, y, z = volume_dims[0], volume_dims[1], volume_dims[2]
    t = graph.scales[0].t if graph.scales else 1

    def walk(stat: bool) -> int:
        total = 0
        for branch in graph.branches:
            if stat and branch.scale is not None:
                n = branch.scale.n
                h0, w0 = -(-y // n), -(-x // n)
            else:
                h0, w0 = y, x
            macs, _, _ = _branch_macs(branch, h0, w0, z, t, stat and branch.scale is not None, graph.mix_point)
            total += macs
        images = t * z
        macs, h, w = _conv_macs(graph.fe.conv.kind, graph.fe.conv.in_channels, graph.fe.conv.out_channels, y, x)
        total += macs * images
        macs, _, _ = _conv_macs(graph.fe.head.kind, graph.fe.head.in_channels, graph.fe.head.out_channels, h, w)
        total += macs * images
        return total

    stat_flops = walk(stat=graph.kind == "msunet")
    det_flops = walk(stat=False)
    return {
        "stat_flops_per_snippet": stat_flops,
        "det_flops_per_snippet": det_flops,
        "analytic_ratio": det_flops / stat_flops,
    }


def single_conv_flop_ratio(scale: ScaleSpec, volume_dims: tuple[int, int, int, int], channels: tuple[int, int] = (1, 1)) -> float:
    """flop_count's bookkeeping specialized to one conv3x3 layer: t full
    resolution frames versus d+2 coefficient planes on the collapsed grid."""
    x, y, z = volume_dims[0], volume_dims[1], volume_dims[2]
    cin, cout = channels
    gy, gx = -(-y // scale.n), -(-x // scale.n)
    det_macs, _, _ = _conv_macs("conv3x3", cin, cout, gy * scale.n, gx * scale.n)
    stat_macs, _, _ = _conv_macs("conv3x3", cin, cout, gy, gx)
    det = det_macs * scale.t * z
    stat = stat_macs * (scale.d + 2) * z
    return det / stat


# ---------------------------------------------------------------------------
# checkpoints: magic "MSUN", version, config text block, params float32 LE

_CKPT_MAGIC = b"MSUN"
_CKPT_VERSION = 1


def _graph_config(graph: NetworkGraph) -> dict:
    return {
        "kind": graph.kind,
        "scales": [[s.n, s.t, s.d] for s in graph.scales],
        "base_channels": graph.base_channels,
        "depth": graph.depth,
        "num_classes": graph.num_classes,
        "mix_point": graph.mix_point,
        "seed": graph.seed,
    }


def save_checkpoint(path, graph: NetworkGraph) -> None:
    config = json.dumps(_graph_config(graph)).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(config)))
        fh.write(config)
        fh.write(graph.params.astype("<f4").tobytes())


def load_checkpoint(path) -> NetworkGraph:
    from pathlib import Path

    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}", offset=0, module="statnet")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, module="statnet")
    (config_len,) = struct.unpack_from("<I", blob, 8)
    header_end = 12 + config_len
    if len(blob) < header_end:
        raise FormatError("truncated checkpoint config", offset=len(blob), module="statnet")
    config = json.loads(blob[12:header_end].decode())
    if config["kind"] == "msunet":
        scales = [ScaleSpec(n=n, t=t, d=d) for n, t, d in config["scales"]]
        graph = build_msunet(
            scales,
            base_channels=config["base_channels"],
            depth=config["depth"],
            num_classes=config["num_classes"],
            mix_point=config["mix_point"],
            seed=config["seed"],
        )
    else:
        graph = build_baseline(
            depth=config["depth"],
            base_channels=config["base_channels"],
            num_classes=config["num_classes"],
            seed=config["seed"],
        )
    params = np.frombuffer(blob, dtype="<f4", offset=header_end)
    if params.size != graph.params.size:
        raise FormatError(
            f"checkpoint holds {params.size} parameters, graph needs {graph.params.size}",
            offset=header_end,
            module="statnet",
        )
    graph.params[:] = params.astype(np.float64)
    return graph
