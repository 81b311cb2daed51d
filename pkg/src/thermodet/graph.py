"""Detector architecture as an ordered layer list.

ModelGraph is the single source of truth for the architecture: layer
descriptors plus float32 parameter blocks, with counting, a binary
container format and deterministic random initialization.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    StructureError,
    UnsupportedVersionError,
)

CONV3X3 = "conv3x3"
DEPTHWISE3X3 = "depthwise3x3"
POINTWISE1X1 = "pointwise1x1"
_KINDS = (CONV3X3, DEPTHWISE3X3, POINTWISE1X1)

RELU6 = "relu6"
NONE = "none"

NUM_ANCHORS = 5
HEAD_CHANNELS_PER_ANCHOR = 5  # tx, ty, tw, th, objectness

# Widths reproduce the tiny-YOLOv2-style channel progression; the head
# follows the last one. These are defaults, not a hard-coded topology.
DEFAULT_WIDTHS = (16, 32, 64, 128, 256, 512, 1024, 512)

# Anchor (w, h) priors in pixels, spanning plausible person sizes at
# 32x24; replace with kmeans_anchors() output for a specific dataset.
DEFAULT_ANCHORS = ((3.0, 3.0), (4.0, 4.0), (5.0, 5.0), (6.0, 6.0), (8.0, 8.0))

INPUT_HW = (24, 32)
DOWNSAMPLE = 4
BN_EPS = 1e-5


@dataclass
class LayerDesc:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    batchnorm: bool = False
    activation: str = RELU6

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise StructureError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise StructureError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == DEPTHWISE3X3 and self.in_channels != self.out_channels:
            raise StructureError("depthwise layers require out_channels == in_channels")
        if self.kind == POINTWISE1X1 and self.stride != 1:
            raise StructureError("pointwise layers are stride 1")
        if self.activation not in (RELU6, NONE):
            raise StructureError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise StructureError("channel counts must be positive")


_BN_FIELDS = ("bn_gamma", "bn_beta", "bn_mean", "bn_var")


@dataclass
class LayerParams:
    w: np.ndarray
    b: np.ndarray
    bn_gamma: np.ndarray = None
    bn_beta: np.ndarray = None
    bn_mean: np.ndarray = None
    bn_var: np.ndarray = None

    def arrays(self):
        """(name, array) pairs for every stored block, fixed order."""
        out = [("w", self.w), ("b", self.b)]
        for name in _BN_FIELDS:
            arr = getattr(self, name)
            if arr is not None:
                out.append((name, arr))
        return out

    def trainable(self):
        """Arrays updated by SGD (running BN stats excluded)."""
        out = [("w", self.w), ("b", self.b)]
        if self.bn_gamma is not None:
            out += [("bn_gamma", self.bn_gamma), ("bn_beta", self.bn_beta)]
        return out


def weight_shape(desc):
    if desc.kind == CONV3X3:
        return (desc.out_channels, desc.in_channels, 3, 3)
    if desc.kind == DEPTHWISE3X3:
        return (desc.out_channels, 3, 3)
    return (desc.out_channels, desc.in_channels)


@dataclass(eq=False)
class ModelGraph:
    layers: list
    params: list
    anchors: np.ndarray
    input_channels: int

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float32)
        self.validate()

    @property
    def num_anchors(self):
        return len(self.anchors)

    @property
    def head_index(self):
        return len(self.layers) - 1

    def validate(self):
        if len(self.layers) != len(self.params):
            raise StructureError("layer/parameter list length mismatch")
        if self.anchors.ndim != 2 or self.anchors.shape[1] != 2:
            raise StructureError("anchors must be (n, 2) width/height pairs")
        if np.any(self.anchors <= 0):
            raise StructureError("anchor sizes must be positive")
        chan = self.input_channels
        for i, (desc, p) in enumerate(zip(self.layers, self.params)):
            if desc.in_channels != chan:
                raise StructureError(
                    f"layer {i}: expects {desc.in_channels} input channels, "
                    f"previous produces {chan}"
                )
            if p.w.shape != weight_shape(desc):
                raise StructureError(
                    f"layer {i}: weight shape {p.w.shape} != {weight_shape(desc)}"
                )
            if p.b.shape != (desc.out_channels,):
                raise StructureError(f"layer {i}: bias shape mismatch")
            has_bn = p.bn_gamma is not None
            if has_bn != desc.batchnorm:
                raise StructureError(f"layer {i}: batchnorm flag/params mismatch")
            if has_bn:
                for name in _BN_FIELDS:
                    if getattr(p, name).shape != (desc.out_channels,):
                        raise StructureError(f"layer {i}: {name} shape mismatch")
            chan = desc.out_channels

    def has_batchnorm(self):
        return any(d.batchnorm for d in self.layers)


def copy_graph(graph):
    params = []
    for p in graph.params:
        kw = {name: arr.copy() for name, arr in p.arrays()}
        params.append(LayerParams(**kw))
    return ModelGraph(
        layers=[replace(d) for d in graph.layers],
        params=params,
        anchors=graph.anchors.copy(),
        input_channels=graph.input_channels,
    )


def graphs_equal(a, b):
    """Bit-exact comparison of two graphs."""
    if a.input_channels != b.input_channels or a.layers != b.layers:
        return False
    if a.anchors.tobytes() != b.anchors.tobytes():
        return False
    for pa, pb in zip(a.params, b.params):
        la, lb = pa.arrays(), pb.arrays()
        if len(la) != len(lb):
            return False
        for (na, xa), (nb, xb) in zip(la, lb):
            if na != nb or xa.shape != xb.shape or xa.tobytes() != xb.tobytes():
                return False
    return True


def _init_params(desc, rng):
    shape = weight_shape(desc)
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
    b = np.zeros(desc.out_channels, dtype=np.float32)
    if desc.batchnorm:
        return LayerParams(
            w=w,
            b=b,
            bn_gamma=np.ones(desc.out_channels, dtype=np.float32),
            bn_beta=np.zeros(desc.out_channels, dtype=np.float32),
            bn_mean=np.zeros(desc.out_channels, dtype=np.float32),
            bn_var=np.ones(desc.out_channels, dtype=np.float32),
        )
    return LayerParams(w=w, b=b)


def build_architecture(
    input_channels=1,
    widths=DEFAULT_WIDTHS,
    anchors=DEFAULT_ANCHORS,
    batchnorm=True,
    seed=0,
):
    """Backbone of one 3x3 conv + len(widths)-1 depthwise-separable
    blocks + 1x1 head; the first two blocks downsample (factor 4 total)."""
    if input_channels not in (1, 2):
        raise ConfigError("input_channels must be 1 or 2")
    if len(widths) < 2:
        raise ConfigError("need at least two widths (stem + one block)")
    anchors = np.asarray(anchors, dtype=np.float32)
    head_out = HEAD_CHANNELS_PER_ANCHOR * len(anchors)

    descs = [
        LayerDesc(CONV3X3, input_channels, widths[0], 1, batchnorm, RELU6)
    ]
    prev = widths[0]
    for block, width in enumerate(widths[1:]):
        stride = 2 if block < 2 else 1
        descs.append(LayerDesc(DEPTHWISE3X3, prev, prev, stride, batchnorm, RELU6))
        descs.append(LayerDesc(POINTWISE1X1, prev, width, 1, batchnorm, RELU6))
        prev = width
    descs.append(LayerDesc(POINTWISE1X1, prev, head_out, 1, False, NONE))

    rng = np.random.default_rng(seed)
    params = [_init_params(d, rng) for d in descs]
    return ModelGraph(
        layers=descs, params=params, anchors=anchors, input_channels=input_channels
    )


def default_architecture(input_channels=1, seed=0):
    return build_architecture(input_channels=input_channels, seed=seed)


def count_params(graph):
    return sum(arr.size for p in graph.params for _, arr in p.arrays())


def _spatial_after(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def count_macs(graph, input_hw=INPUT_HW):
    h, w = input_hw
    total = 0
    for desc in graph.layers:
        ho, wo = _spatial_after(h, w, desc.stride)
        per_out = {
            CONV3X3: desc.in_channels * 9,
            DEPTHWISE3X3: 9,
            POINTWISE1X1: desc.in_channels,
        }[desc.kind]
        total += per_out * desc.out_channels * ho * wo
        h, w = ho, wo
    return total


def output_grid(graph, input_hw=INPUT_HW):
    h, w = input_hw
    for desc in graph.layers:
        h, w = _spatial_after(h, w, desc.stride)
    return h, w


# --- binary container -------------------------------------------------
#
# Little-endian layout:
#   magic "TDF3", version u16, input_channels u16, n_layers u16,
#   n_anchors u16, anchors f32[n*2], per-layer descriptor records
#   (kind u8, stride u8, batchnorm u8, activation u8, in u32, out u32),
#   then per-layer f32 blobs in arrays() order. No padding anywhere.

MAGIC_F32 = b"TDF3"
CONTAINER_VERSION = 1
_KIND_CODE = {CONV3X3: 0, DEPTHWISE3X3: 1, POINTWISE1X1: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_ACT_CODE = {RELU6: 0, NONE: 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def serialize(graph, path):
    with open(path, "wb") as f:
        f.write(MAGIC_F32)
        f.write(
            struct.pack(
                "<HHHH",
                CONTAINER_VERSION,
                graph.input_channels,
                len(graph.layers),
                graph.num_anchors,
            )
        )
        f.write(graph.anchors.astype("<f4").tobytes())
        for desc in graph.layers:
            f.write(
                struct.pack(
                    "<BBBBII",
                    _KIND_CODE[desc.kind],
                    desc.stride,
                    int(desc.batchnorm),
                    _ACT_CODE[desc.activation],
                    desc.in_channels,
                    desc.out_channels,
                )
            )
        for p in graph.params:
            for _, arr in p.arrays():
                f.write(arr.astype("<f4").tobytes())


class _Cursor:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise CorruptionError(f"{self.path}: truncated at byte {self.off}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        n = int(np.prod(shape))
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def done(self):
        if self.off != len(self.blob):
            raise CorruptionError(
                f"{self.path}: {len(self.blob) - self.off} trailing bytes"
            )


def deserialize(path):
    blob = open(path, "rb").read()
    cur = _Cursor(blob, path)
    if cur.take(4) != MAGIC_F32:
        raise FormatError(f"{path}: bad magic, not a model container")
    version, input_channels, n_layers, n_anchors = cur.unpack("<HHHH")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(
            f"{path}: container version {version}, supported {CONTAINER_VERSION}"
        )
    anchors = cur.array((n_anchors, 2))
    descs = []
    for _ in range(n_layers):
        kind, stride, bn, act, cin, cout = cur.unpack("<BBBBII")
        if kind not in _CODE_KIND or act not in _CODE_ACT:
            raise FormatError(f"{path}: unknown layer kind/activation code")
        descs.append(
            LayerDesc(_CODE_KIND[kind], cin, cout, stride, bool(bn), _CODE_ACT[act])
        )
    params = []
    for desc in descs:
        w = cur.array(weight_shape(desc))
        b = cur.array((desc.out_channels,))
        if desc.batchnorm:
            bn_arrays = [cur.array((desc.out_channels,)) for _ in range(4)]
            params.append(LayerParams(w, b, *bn_arrays))
        else:
            params.append(LayerParams(w, b))
    cur.done()
    return ModelGraph(
        layers=descs, params=params, anchors=anchors, input_channels=input_channels
    )


def kmeans_anchors(boxes, k=NUM_ANCHORS, iters=50, seed=0):
    """IoU-distance k-means over (w, h) box shapes."""
    wh = np.array([[b.w, b.h] for b in boxes], dtype=np.float64)
    if len(wh) < k:
        raise ConfigError(f"need at least {k} boxes to fit {k} anchors")
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), size=k, replace=False)]

    def shape_iou(a, c):
        inter = np.minimum(a[:, None, 0], c[None, :, 0]) * np.minimum(
            a[:, None, 1], c[None, :, 1]
        )
        union = a[:, None, 0] * a[:, None, 1] + c[None, :, 0] * c[None, :, 1] - inter
        return inter / union

    assign = None
    for _ in range(iters):
        new_assign = np.argmax(shape_iou(wh, centers), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = wh[assign == j]
            if len(sel):
                centers[j] = sel.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1])
    return centers[order].astype(np.float32)
