"""Thermal frame I/O, normalization and synthetic scene generation.

Frames are stored as 32x24 single-channel 16-bit unsigned grayscale
TIFFs (little-endian, one strip, no compression) holding temperature in
degrees Celsius multiplied by 100. Annotations are JSON-lines, one box
per line with keys frame_index, x, y, w, h (pixels, top-left origin).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, ValidationError

FRAME_WIDTH = 32
FRAME_HEIGHT = 24
TEMP_MIN_C = -40.0
TEMP_MAX_C = 300.0

# Fixed affine normalization window: indoor ambient up to body temperature.
NORMALIZE_LO_C = 15.0
NORMALIZE_HI_C = 40.0

DEFAULT_DIFF_STRIDE = 5


@dataclass
class ThermalFrame:
    """One 32x24 grid of temperatures in degrees Celsius."""

    temps: np.ndarray
    index: int = 0
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=np.float64)
        if self.temps.shape != (self.height, self.width):
            raise DimensionError(
                f"expected {self.height}x{self.width} grid, got {self.temps.shape}"
            )
        if (self.width, self.height) != (FRAME_WIDTH, FRAME_HEIGHT):
            raise DimensionError(
                f"target sensor frames are {FRAME_WIDTH}x{FRAME_HEIGHT}, "
                f"got {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(self.temps)):
            raise ValidationError("temperatures must be finite")
        if self.temps.min() < TEMP_MIN_C or self.temps.max() > TEMP_MAX_C:
            raise ValidationError(
                f"temperatures outside sensor range [{TEMP_MIN_C}, {TEMP_MAX_C}] C"
            )


@dataclass(frozen=True)
class GroundTruthBox:
    """Annotated person box in pixel coordinates, top-left origin."""

    frame_index: int
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box must have positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > FRAME_WIDTH or self.y + self.h > FRAME_HEIGHT:
            raise ValidationError(
                f"box ({self.x},{self.y},{self.w},{self.h}) outside "
                f"{FRAME_WIDTH}x{FRAME_HEIGHT} frame"
            )

    def as_xywh(self):
        return (float(self.x), float(self.y), float(self.w), float(self.h))


# --- TIFF codec ------------------------------------------------------
#
# Byte layout written by write_frame (offsets in bytes):
#   0   "II" 42 <u32 ifd_offset=8+data>   little-endian header
#   8   pixel data, H*W u16 row-major, one strip
#   8+N IFD: u16 entry count, then 12-byte entries, then u32 next=0
# Entries: ImageWidth(256), ImageLength(257), BitsPerSample(258)=16,
# Compression(259)=1, Photometric(262)=1, StripOffsets(273)=8,
# SamplesPerPixel(277)=1, RowsPerStrip(278)=H, StripByteCounts(279)=N,
# SampleFormat(339)=1.

_TYPE_SHORT = 3
_TYPE_LONG = 4


def _ifd_entry(tag, typ, value):
    if typ == _TYPE_SHORT:
        return struct.pack("<HHIHH", tag, typ, 1, value, 0)
    return struct.pack("<HHII", tag, typ, 1, value)


def write_frame(frame, path):
    """Write one frame as a 16-bit grayscale TIFF (temps * 100 as u16)."""
    raw = np.round(frame.temps * 100.0)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValidationError("temperatures not representable as u16 centidegrees")
    data = raw.astype("<u2").tobytes()
    ifd_offset = 8 + len(data)
    entries = [
        _ifd_entry(256, _TYPE_LONG, frame.width),
        _ifd_entry(257, _TYPE_LONG, frame.height),
        _ifd_entry(258, _TYPE_SHORT, 16),
        _ifd_entry(259, _TYPE_SHORT, 1),
        _ifd_entry(262, _TYPE_SHORT, 1),
        _ifd_entry(273, _TYPE_LONG, 8),
        _ifd_entry(277, _TYPE_SHORT, 1),
        _ifd_entry(278, _TYPE_LONG, frame.height),
        _ifd_entry(279, _TYPE_LONG, len(data)),
        _ifd_entry(339, _TYPE_SHORT, 1),
    ]
    with open(path, "wb") as f:
        f.write(struct.pack("<2sHI", b"II", 42, ifd_offset))
        f.write(data)
        f.write(struct.pack("<H", len(entries)))
        f.write(b"".join(entries))
        f.write(struct.pack("<I", 0))


def _read_ifd_value(entry):
    tag, typ, count = struct.unpack("<HHI", entry[:8])
    if count != 1:
        return tag, None
    if typ == _TYPE_SHORT:
        return tag, struct.unpack("<H", entry[8:10])[0]
    if typ == _TYPE_LONG:
        return tag, struct.unpack("<I", entry[8:12])[0]
    return tag, None


def read_frame(path, index=0):
    """Read one 16-bit grayscale TIFF into a ThermalFrame (temps = u16/100)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated TIFF header")
    order, magic, ifd_offset = struct.unpack("<2sHI", blob[:8])
    if order != b"II" or magic != 42:
        raise FormatError(f"{path}: not a little-endian TIFF")
    if ifd_offset + 2 > len(blob):
        raise FormatError(f"{path}: IFD offset outside file")
    (n_entries,) = struct.unpack("<H", blob[ifd_offset : ifd_offset + 2])
    end = ifd_offset + 2 + 12 * n_entries
    if end > len(blob):
        raise FormatError(f"{path}: truncated IFD")
    tags = {}
    for i in range(n_entries):
        off = ifd_offset + 2 + 12 * i
        tag, value = _read_ifd_value(blob[off : off + 12])
        tags[tag] = value
    width, height = tags.get(256), tags.get(257)
    if width is None or height is None:
        raise FormatError(f"{path}: missing image dimensions")
    if tags.get(258) != 16 or tags.get(339, 1) != 1:
        raise FormatError(f"{path}: expected unsigned 16-bit samples")
    if tags.get(259, 1) != 1:
        raise FormatError(f"{path}: compressed TIFFs not supported")
    if tags.get(277, 1) != 1:
        raise FormatError(f"{path}: expected single-channel grayscale")
    if (width, height) != (FRAME_WIDTH, FRAME_HEIGHT):
        raise DimensionError(
            f"{path}: expected {FRAME_WIDTH}x{FRAME_HEIGHT}, got {width}x{height}"
        )
    strip_offset, strip_bytes = tags.get(273), tags.get(279)
    if strip_offset is None or strip_bytes is None:
        raise FormatError(f"{path}: multi-strip or missing strip layout")
    if strip_bytes != width * height * 2 or strip_offset + strip_bytes > len(blob):
        raise FormatError(f"{path}: strip does not hold {width}x{height} u16 pixels")
    raw = np.frombuffer(blob[strip_offset : strip_offset + strip_bytes], dtype="<u2")
    temps = raw.astype(np.float64).reshape(height, width) / 100.0
    return ThermalFrame(temps=temps, index=index)


# --- normalization and frame differencing ----------------------------


def normalize(frame, lo=NORMALIZE_LO_C, hi=NORMALIZE_HI_C):
    """Map temperatures through a clamped affine window to [0, 1]."""
    if lo >= hi:
        raise ConfigError(f"normalization window requires lo < hi, got [{lo}, {hi}]")
    temps = frame.temps if isinstance(frame, ThermalFrame) else np.asarray(frame)
    out = (temps - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def denormalize(values, lo=NORMALIZE_LO_C, hi=NORMALIZE_HI_C):
    """Inverse of normalize (without the clamp)."""
    if lo >= hi:
        raise ConfigError(f"normalization window requires lo < hi, got [{lo}, {hi}]")
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def diff_image(current, past):
    """Element-wise current - past; values land in [-1, 1]."""
    current = np.asarray(current)
    past = np.asarray(past)
    if current.shape != past.shape:
        raise DimensionError(
            f"frame shapes differ: {current.shape} vs {past.shape}"
        )
    return (current.astype(np.float32) - past.astype(np.float32))


# --- synthetic scenes -------------------------------------------------


@dataclass
class SyntheticSceneConfig:
    """Desk-scale stand-in for the recorded dataset.

    Persons are warm moving Gaussian blobs with ground-truth boxes;
    imposters are identical but static and unannotated, so they are
    person-like to any single-frame observer.
    """

    n_frames: int = 100
    n_persons: int = 1
    n_imposters: int = 0
    ambient_c: float = 20.0
    person_c: tuple = (28.0, 34.0)
    person_width: tuple = (3, 8)
    noise_sigma: float = 0.15
    speed: float = 0.7
    seed: int = 0
    empty_start_frames: int = 0

    def __post_init__(self):
        if self.n_frames <= 0:
            raise ConfigError("n_frames must be positive")
        if self.n_persons < 0 or self.n_imposters < 0 or self.empty_start_frames < 0:
            raise ConfigError("counts must be non-negative")
        if self.person_c[0] <= self.ambient_c:
            raise ConfigError("person temperature must exceed ambient")
        if self.noise_sigma < 0 or self.speed < 0:
            raise ConfigError("noise_sigma and speed must be non-negative")
        if not 2 <= self.person_width[0] <= self.person_width[1] <= 12:
            raise ConfigError("person_width range must satisfy 2 <= lo <= hi <= 12")


_CX_MIN, _CX_MAX = 2.0, FRAME_WIDTH - 3.0
_CY_MIN, _CY_MAX = 2.0, FRAME_HEIGHT - 3.0


def _reflect(v, lo, hi):
    span = hi - lo
    v = (v - lo) % (2.0 * span)
    if v > span:
        v = 2.0 * span - v
    return v + lo


def _blob_box(cx, cy, width, frame_index):
    half = width / 2.0
    x0 = max(0, int(round(cx - half)))
    y0 = max(0, int(round(cy - half)))
    x1 = min(FRAME_WIDTH, int(round(cx + half)))
    y1 = min(FRAME_HEIGHT, int(round(cy + half)))
    return GroundTruthBox(
        frame_index=frame_index, x=x0, y=y0, w=max(1, x1 - x0), h=max(1, y1 - y0)
    )


def synth_sequence(cfg):
    """Generate a labeled thermal sequence; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    yy, xx = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)

    def sample_blob():
        width = int(rng.integers(cfg.person_width[0], cfg.person_width[1] + 1))
        return {
            "cx": float(rng.uniform(_CX_MIN, _CX_MAX)),
            "cy": float(rng.uniform(_CY_MIN, _CY_MAX)),
            "width": width,
            "sigma": width / 4.0,
            "amp": float(rng.uniform(*cfg.person_c)) - cfg.ambient_c,
        }

    persons = [sample_blob() for _ in range(cfg.n_persons)]
    imposters = [sample_blob() for _ in range(cfg.n_imposters)]

    frames, boxes = [], []
    for t in range(cfg.n_frames):
        if t >= cfg.empty_start_frames and cfg.speed > 0:
            for p in persons:
                dx, dy = rng.normal(0.0, cfg.speed, size=2)
                p["cx"] = _reflect(p["cx"] + dx, _CX_MIN, _CX_MAX)
                p["cy"] = _reflect(p["cy"] + dy, _CY_MIN, _CY_MAX)
        temps = np.full((FRAME_HEIGHT, FRAME_WIDTH), cfg.ambient_c, dtype=np.float64)
        active = list(imposters)
        if t >= cfg.empty_start_frames:
            active += persons
        for blob in active:
            d2 = (xx - blob["cx"]) ** 2 + (yy - blob["cy"]) ** 2
            temps += blob["amp"] * np.exp(-d2 / (2.0 * blob["sigma"] ** 2))
        if cfg.noise_sigma > 0:
            temps += rng.normal(0.0, cfg.noise_sigma, size=temps.shape)
        temps = np.clip(temps, 0.0, TEMP_MAX_C)
        frames.append(ThermalFrame(temps=temps, index=t))
        if t >= cfg.empty_start_frames:
            for p in persons:
                boxes.append(_blob_box(p["cx"], p["cy"], p["width"], t))
    return frames, boxes


# --- annotations ------------------------------------------------------


def write_annotations(path, boxes):
    """Write boxes as JSON-lines, sorted canonically."""
    ordered = sorted(boxes, key=lambda b: (b.frame_index, b.x, b.y, b.w, b.h))
    with open(path, "w") as f:
        for b in ordered:
            f.write(
                json.dumps(
                    {"frame_index": b.frame_index, "x": b.x, "y": b.y, "w": b.w, "h": b.h}
                )
                + "\n"
            )


def read_annotations(path):
    """Read JSON-lines annotations; every box is validated."""
    boxes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                box = GroundTruthBox(
                    frame_index=int(rec["frame_index"]),
                    x=int(rec["x"]),
                    y=int(rec["y"]),
                    w=int(rec["w"]),
                    h=int(rec["h"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad annotation record") from exc
            boxes.append(box)
    return boxes


# --- on-disk sequences ------------------------------------------------


def write_sequence(directory, frames, boxes):
    """Write frames as frame_NNNNNN.tiff plus annotations.jsonl."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        write_frame(frame, directory / f"frame_{frame.index:06d}.tiff")
    write_annotations(directory / "annotations.jsonl", boxes)


def read_sequence(directory):
    """Read a frame directory back; frames ordered by filename."""
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.tiff"))
    if not paths:
        raise FormatError(f"{directory}: no frame_*.tiff files")
    frames = [read_frame(p, index=i) for i, p in enumerate(paths)]
    ann = directory / "annotations.jsonl"
    boxes = read_annotations(ann) if ann.exists() else []
    return frames, boxes
