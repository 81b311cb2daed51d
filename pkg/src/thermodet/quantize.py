"""Post-training quantization and the int8 executor.

Weights are per-output-channel symmetric int8 (zero_point 0), activations
per-tensor asymmetric int8 from calibrated min/max ranges, biases int32 at
scale s_in * s_w. The executor core is integer-only: int8 taps, wide
accumulation, fixed-point requantization (normalized 31-bit mantissa plus
rounding right shift, half away from zero), so reruns are bit-identical
on any platform.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    CorruptionError,
    CoverageError,
    DimensionError,
    FormatError,
    StructureError,
    UnsupportedVersionError,
)
from .graph import (
    CONV3X3,
    DEPTHWISE3X3,
    LayerDesc,
    RELU6,
    _ACT_CODE,
    _CODE_ACT,
    _CODE_KIND,
    _KIND_CODE,
    weight_shape,
)
from .infer import forward_collect

MIN_RANGE_SPAN = 1e-6
ZERO_CHANNEL_SCALE = 1.0
CALIBRATION_IMAGES = 100


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ConfigError(f"zero_point {self.zero_point} outside int8 range")


def quantize_tensor(x, qp):
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize(q, qp):
    return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale


def activation_qparams(lo, hi):
    """Asymmetric int8 params covering [lo, hi] (which includes 0)."""
    scale = (hi - lo) / 255.0
    zp = int(np.clip(-128.0 - round_half_away(lo / scale), -128, 127))
    return QuantParams(scale=scale, zero_point=zp)


def quantize_multiplier(m):
    """Represent m as mant * 2**-rshift with mant a normalized int32."""
    if not 0 < m < 2**30:
        raise ConfigError(f"requant multiplier {m} out of range")
    frac, exp = math.frexp(m)
    mant = round(frac * (1 << 31))
    if mant == 1 << 31:
        mant //= 2
        exp += 1
    rshift = 31 - exp
    if not 1 <= rshift <= 62:
        raise ConfigError(f"requant shift {rshift} unrepresentable")
    return mant, rshift


def calibrate(graph, images):
    """Running min/max of every activation tensor over the calibration
    set; keys are "input" and each layer index. Ranges always include 0
    and degenerate ranges are widened to a minimal span."""
    if graph.has_batchnorm():
        raise StructureError("calibration requires a BN-folded graph")
    images = list(images)
    if not images:
        raise ConfigError("calibration set is empty")
    ranges = {}

    def absorb(key, arr):
        lo, hi = float(arr.min()), float(arr.max())
        if key in ranges:
            lo, hi = min(lo, ranges[key][0]), max(hi, ranges[key][1])
        ranges[key] = (lo, hi)

    for x in images:
        _, acts = forward_collect(graph, x)
        absorb("input", acts[0])
        for i, act in enumerate(acts[1:]):
            absorb(i, act)
    out = {}
    for key, (lo, hi) in ranges.items():
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        if hi - lo < MIN_RANGE_SPAN:
            hi = lo + MIN_RANGE_SPAN
        out[key] = (lo, hi)
    return out


@dataclass
class QuantLayer:
    desc: LayerDesc
    w: np.ndarray  # int8
    bias: np.ndarray  # int32
    w_scales: np.ndarray  # float64 per output channel
    out_qp: QuantParams
    mult: np.ndarray  # int32 per output channel
    rshift: np.ndarray  # int32 per output channel
    act_min: int
    act_max: int


@dataclass
class QuantizedModel:
    layers: list  # QuantLayer
    input_qp: QuantParams
    anchors: np.ndarray
    input_channels: int

    @property
    def out_qps(self):
        return [l.out_qp for l in self.layers]


def _weight_scales(w):
    flat = np.abs(w.reshape(w.shape[0], -1)).max(axis=1) / 127.0
    return np.where(flat > 0, flat, ZERO_CHANNEL_SCALE).astype(np.float64)


def _act_bounds(desc, qp):
    if desc.activation == RELU6:
        lo = qp.zero_point
        hi = min(127, qp.zero_point + int(round_half_away(6.0 / qp.scale)))
        return lo, hi
    return -128, 127


def quantize_model(graph, ranges):
    """Quantize a folded f32 graph using calibrated activation ranges."""
    if graph.has_batchnorm():
        raise StructureError("quantization requires a BN-folded graph")
    if "input" not in ranges:
        raise CoverageError("missing range for tensor 'input'")
    input_qp = activation_qparams(*ranges["input"])
    qlayers = []
    s_in = input_qp.scale
    for i, (desc, p) in enumerate(zip(graph.layers, graph.params)):
        if i not in ranges:
            raise CoverageError(f"missing range for layer {i} output")
        out_qp = activation_qparams(*ranges[i])
        w64 = p.w.astype(np.float64)
        scales = _weight_scales(w64)
        bshape = (-1,) + (1,) * (w64.ndim - 1)
        qw = np.clip(
            round_half_away(w64 / scales.reshape(bshape)), -127, 127
        ).astype(np.int8)
        bias_scale = s_in * scales
        qb = np.clip(
            round_half_away(p.b.astype(np.float64) / bias_scale),
            -(2**31),
            2**31 - 1,
        ).astype(np.int32)
        mult = np.empty(len(scales), dtype=np.int32)
        rshift = np.empty(len(scales), dtype=np.int32)
        for c, s_w in enumerate(scales):
            mult[c], rshift[c] = quantize_multiplier(s_in * s_w / out_qp.scale)
        act_min, act_max = _act_bounds(desc, out_qp)
        qlayers.append(
            QuantLayer(
                desc=LayerDesc(
                    desc.kind,
                    desc.in_channels,
                    desc.out_channels,
                    desc.stride,
                    False,
                    desc.activation,
                ),
                w=qw,
                bias=qb,
                w_scales=scales,
                out_qp=out_qp,
                mult=mult,
                rshift=rshift,
                act_min=act_min,
                act_max=act_max,
            )
        )
        s_in = out_qp.scale
    return QuantizedModel(
        layers=qlayers,
        input_qp=input_qp,
        anchors=graph.anchors.copy(),
        input_channels=graph.input_channels,
    )


def forward_int8(qm, xq):
    """Integer-only forward pass on an int8 input quantized with
    qm.input_qp; returns (int8 head tensor, dequantized f32 view)."""
    xq = np.asarray(xq)
    if xq.dtype != np.int8:
        raise DimensionError("forward_int8 expects an int8 input")
    if xq.ndim == 2:
        xq = xq[None]
    if xq.ndim != 3 or xq.shape[0] != qm.input_channels:
        raise DimensionError(
            f"input must have {qm.input_channels} channels, got {xq.shape}"
        )
    zp_in = qm.input_qp.zero_point
    for ql in qm.layers:
        d = ql.desc
        args = (
            xq,
            zp_in,
            ql.w,
            ql.bias,
            ql.mult,
            ql.rshift,
            ql.out_qp.zero_point,
            ql.act_min,
            ql.act_max,
        )
        if d.kind == CONV3X3:
            xq = kernels.conv3x3_int8(*args, d.stride)
        elif d.kind == DEPTHWISE3X3:
            xq = kernels.depthwise3x3_int8(*args, d.stride)
        else:
            xq = kernels.pointwise_int8(*args)
        zp_in = ql.out_qp.zero_point
    deq = dequantize(xq, qm.layers[-1].out_qp).astype(np.float32)
    return xq, deq


def weight_bytes(qm):
    return sum(ql.w.size for ql in qm.layers)


# --- container ---------------------------------------------------------
#
# Little-endian: magic "TDQ8", version u16, input_channels u16,
# n_layers u16, n_anchors u16, input scale f64 + zero point i32,
# anchors f32, per-layer descriptor records as in the f32 container,
# then per layer: w int8 blob, bias i32, w_scales f64, out scale f64,
# out zero point i32, act_min i32, act_max i32. Requant multipliers are
# recomputed from the stored scales at load time (deterministic).

MAGIC_INT8 = b"TDQ8"
QCONTAINER_VERSION = 1


def quantized_serialize(qm, path):
    with open(path, "wb") as f:
        f.write(MAGIC_INT8)
        f.write(
            struct.pack(
                "<HHHH",
                QCONTAINER_VERSION,
                qm.input_channels,
                len(qm.layers),
                len(qm.anchors),
            )
        )
        f.write(struct.pack("<di", qm.input_qp.scale, qm.input_qp.zero_point))
        f.write(qm.anchors.astype("<f4").tobytes())
        for ql in qm.layers:
            d = ql.desc
            f.write(
                struct.pack(
                    "<BBBBII",
                    _KIND_CODE[d.kind],
                    d.stride,
                    0,
                    _ACT_CODE[d.activation],
                    d.in_channels,
                    d.out_channels,
                )
            )
        for ql in qm.layers:
            f.write(ql.w.tobytes())
            f.write(ql.bias.astype("<i4").tobytes())
            f.write(ql.w_scales.astype("<f8").tobytes())
            f.write(
                struct.pack(
                    "<diii",
                    ql.out_qp.scale,
                    ql.out_qp.zero_point,
                    ql.act_min,
                    ql.act_max,
                )
            )


def quantized_deserialize(path):
    blob = open(path, "rb").read()
    off = [0]

    def take(n):
        if off[0] + n > len(blob):
            raise CorruptionError(f"{path}: truncated at byte {off[0]}")
        out = blob[off[0] : off[0] + n]
        off[0] += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(4) != MAGIC_INT8:
        raise FormatError(f"{path}: bad magic, not a quantized container")
    version, input_channels, n_layers, n_anchors = unpack("<HHHH")
    if version != QCONTAINER_VERSION:
        raise UnsupportedVersionError(
            f"{path}: container version {version}, supported {QCONTAINER_VERSION}"
        )
    in_scale, in_zp = unpack("<di")
    input_qp = QuantParams(scale=in_scale, zero_point=in_zp)
    anchors = (
        np.frombuffer(take(8 * n_anchors), dtype="<f4").reshape(n_anchors, 2).copy()
    )
    descs = []
    for _ in range(n_layers):
        kind, stride, _bn, act, cin, cout = unpack("<BBBBII")
        if kind not in _CODE_KIND or act not in _CODE_ACT:
            raise FormatError(f"{path}: unknown layer kind/activation code")
        descs.append(
            LayerDesc(_CODE_KIND[kind], cin, cout, stride, False, _CODE_ACT[act])
        )
    qlayers = []
    s_in = in_scale
    for d in descs:
        wshape = weight_shape(d)
        n_w = int(np.prod(wshape))
        w = np.frombuffer(take(n_w), dtype=np.int8).reshape(wshape).copy()
        bias = np.frombuffer(take(4 * d.out_channels), dtype="<i4").copy()
        scales = np.frombuffer(take(8 * d.out_channels), dtype="<f8").copy()
        out_scale, out_zp, act_min, act_max = unpack("<diii")
        out_qp = QuantParams(scale=out_scale, zero_point=out_zp)
        mult = np.empty(d.out_channels, dtype=np.int32)
        rshift = np.empty(d.out_channels, dtype=np.int32)
        for c, s_w in enumerate(scales):
            mult[c], rshift[c] = quantize_multiplier(s_in * s_w / out_scale)
        qlayers.append(
            QuantLayer(
                desc=d,
                w=w,
                bias=bias,
                w_scales=scales,
                out_qp=out_qp,
                mult=mult,
                rshift=rshift,
                act_min=act_min,
                act_max=act_max,
            )
        )
        s_in = out_scale
    if off[0] != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - off[0]} trailing bytes")
    return QuantizedModel(
        layers=qlayers,
        input_qp=input_qp,
        anchors=anchors,
        input_channels=input_channels,
    )
