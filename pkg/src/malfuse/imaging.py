"""Modality image generation.

Three visual representations of one sample:

* GS - byte-bigram grayscale: 256x256 matrix of adjacent-pair counts,
  row-normalized to 0..255, then resized.
* EG - entropy graph: per-256-byte-segment average Shannon entropy plotted
  as a polyline on a square canvas.
* SH - simhash image: per-opcode MD5 bit rows stacked into a binary matrix
  and resized.

All resizing uses the same bilinear interpolation: destination pixel (i, j)
samples source coordinate (i*m/a, j*n/b); fractional coordinates blend the
four enclosing pixels through two x-direction interpolants S1, S2 and a
final y-direction blend P.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import ByteStream, OpcodeSequence
from .errors import (
    EmptyOpcodes,
    EmptySegment,
    EmptySeries,
    EmptyStream,
    StreamTooShort,
    ZeroDimension,
)

SEGMENT_SIZE = 256
DEFAULT_SIDE = 224
DEFAULT_ROW_CAP = 8192
SIMHASH_BITS = 128

# Maximum possible average entropy of a full segment: 8 bits / 256 bytes.
MAX_AVG_ENTROPY = 8.0 / SEGMENT_SIZE


class Modality(str, Enum):
    GS = "gs"
    EG = "eg"
    SH = "sh"


@dataclass
class ModalImage:
    """Single-channel square image of one modality, values 0..255."""

    modality: Modality
    side: int
    pixels: np.ndarray  # uint8 (side, side)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.side < 1 or self.pixels.shape != (self.side, self.side):
            raise ValueError(f"pixels shape {self.pixels.shape} != ({self.side}, {self.side})")


@dataclass
class EntropySeries:
    """Per-segment average entropy (entropy divided by segment length)."""

    avg_entropy: np.ndarray  # float64, 1-D
    segment_size: int = SEGMENT_SIZE

    def __post_init__(self):
        self.avg_entropy = np.asarray(self.avg_entropy, dtype=np.float64).ravel()

    def __len__(self) -> int:
        return int(self.avg_entropy.size)


@dataclass
class BitMatrix:
    """Stacked per-keyword hash signatures, one 128-bit row per opcode."""

    bits: np.ndarray  # uint8 in {0,1}, (rows, 128)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2 or self.bits.shape[1] != SIMHASH_BITS:
            raise ValueError(f"bit matrix must be (m, {SIMHASH_BITS}), got {self.bits.shape}")

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class InterpolationCell:
    """One 2x2 neighborhood and a query point inside it.

    Corner values are laid out so that T11/T21 share the low y edge and
    T11/T12 share the low x edge; interpolate() blends along x first (S1 at
    y1, S2 at y2) and then along y.
    """

    t11: float
    t12: float
    t21: float
    t22: float
    x1: float
    x2: float
    y1: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError("cell corners must satisfy x1 < x2 and y1 < y2")

    def interpolate(self, x: float, y: float) -> float:
        if not (self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2):
            raise ValueError("query point outside cell")
        s1 = self.t11 * ((self.x2 - x) / (self.x2 - self.x1)) + self.t21 * (
            (x - self.x1) / (self.x2 - self.x1)
        )
        s2 = self.t12 * ((self.x2 - x) / (self.x2 - self.x1)) + self.t22 * (
            (x - self.x1) / (self.x2 - self.x1)
        )
        return s1 * ((self.y2 - y) / (self.y2 - self.y1)) + s2 * (
            (y - self.y1) / (self.y2 - self.y1)
        )


def shannon_entropy(segment) -> float:
    """Shannon entropy in bits of a byte segment: -sum p(v) log2 p(v)."""
    seg = np.asarray(segment)
    if seg.size == 0:
        raise EmptySegment("segment has no bytes")
    counts = np.bincount(seg.astype(np.int64).ravel(), minlength=256)
    if counts.size > 256:
        raise ValueError("segment values outside 0..255")
    nz = counts[counts > 0]
    p = nz / seg.size
    return float(-(p * np.log2(p)).sum())


def entropy_series(stream: ByteStream) -> EntropySeries:
    """Partition the stream into 256-byte segments (last may be short) and
    return each segment's entropy divided by its length."""
    values = stream.values
    if values.size == 0:
        raise EmptyStream(stream.sample_id)
    out = []
    for off in range(0, values.size, SEGMENT_SIZE):
        seg = values[off : off + SEGMENT_SIZE]
        out.append(shannon_entropy(seg) / seg.size)
    return EntropySeries(np.array(out, dtype=np.float64))


def resample_series(values: np.ndarray, points: int = 256) -> np.ndarray:
    """Linearly resample a series to exactly `points` samples over its index range."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptySeries("cannot resample an empty series")
    if values.size == 1:
        return np.full(points, values[0])
    pos = np.arange(points) * (values.size - 1) / (points - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, values.size - 1)
    frac = pos - i0
    return values[i0] * (1.0 - frac) + values[i1] * frac


def draw_line(pixels: np.ndarray, x0: int, y0: int, x1: int, y1: int, value: int = 255) -> None:
    """Bresenham line segment, endpoints included, into pixels[y, x]."""
    dx = abs(x1 - x0)
    sx = 1 if x0 < x1 else -1
    dy = -abs(y1 - y0)
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pixels[y, x] = value
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def render_entropy_graph(series: EntropySeries, side: int = DEFAULT_SIDE) -> ModalImage:
    """Plot the average-entropy series as a white-on-black polyline.

    The series is resampled to 256 x-positions; y maps the value range
    [0, 8/256] top-down (0 at the bottom row), clamped to the canvas.
    """
    if len(series) == 0:
        raise EmptySeries("entropy series is empty")
    if side < 16:
        raise ValueError(f"side {side} < 16")
    points = resample_series(series.avg_entropy, 256)
    xs = np.rint(np.arange(256) * (side - 1) / 255.0).astype(np.int64)
    norm = np.clip(points / MAX_AVG_ENTROPY, 0.0, None)
    ys = np.clip(np.rint((side - 1) * (1.0 - norm)), 0, side - 1).astype(np.int64)
    canvas = np.zeros((side, side), dtype=np.uint8)
    for k in range(255):
        draw_line(canvas, xs[k], ys[k], xs[k + 1], ys[k + 1])
    return ModalImage(Modality.EG, side, canvas)


def bigram_counts(values: np.ndarray) -> np.ndarray:
    """256x256 counts of overlapping adjacent byte pairs."""
    v = np.asarray(values, dtype=np.int64).ravel()
    counts = np.zeros((256, 256), dtype=np.int64)
    if v.size >= 2:
        np.add.at(counts, (v[:-1], v[1:]), 1)
    return counts


def bigram_base_image(stream: ByteStream) -> np.ndarray:
    """Pre-resize 256x256 bigram image: each row scaled by 256/rowsum,
    rounded, clamped to 255; all-zero rows stay zero."""
    if len(stream) < 2:
        raise StreamTooShort(f"{stream.sample_id}: {len(stream)} byte(s), need >= 2")
    counts = bigram_counts(stream.values)
    rowsum = counts.sum(axis=1, keepdims=True)
    scaled = np.zeros((256, 256), dtype=np.float64)
    np.divide(counts * 256.0, rowsum, out=scaled, where=rowsum > 0)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def bigram_grayscale(stream: ByteStream, side: int = DEFAULT_SIDE) -> ModalImage:
    base = bigram_base_image(stream)
    resized = bilinear_resize(base.astype(np.float64), side, side)
    return ModalImage(Modality.GS, side, np.clip(np.rint(resized), 0, 255).astype(np.uint8))


def _md5_bits(token: str) -> np.ndarray:
    """128 bits of MD5(token), index j holding (digest-as-big-endian-int >> j) & 1."""
    digest = hashlib.md5(token.encode("ascii")).digest()
    return np.unpackbits(np.frombuffer(digest, dtype=np.uint8)[::-1], bitorder="little")


def simhash_bit_matrix(opcodes: OpcodeSequence, row_cap: int = DEFAULT_ROW_CAP) -> BitMatrix:
    """One 128-bit MD5 signature row per opcode token, in token order,
    truncated at row_cap rows."""
    if row_cap < 1:
        raise ValueError(f"row_cap {row_cap} < 1")
    if len(opcodes) == 0:
        raise EmptyOpcodes(opcodes.sample_id)
    cache: dict[str, np.ndarray] = {}
    rows = []
    for token in opcodes.opcodes[:row_cap]:
        bits = cache.get(token)
        if bits is None:
            bits = _md5_bits(token)
            cache[token] = bits
        rows.append(bits)
    return BitMatrix(np.stack(rows))


def bit_matrix_to_image(bits: BitMatrix, side: int = DEFAULT_SIDE) -> ModalImage:
    """Render bits as 0/255 grayscale and resize the m x 128 strip to a square."""
    gray = bits.bits.astype(np.float64) * 255.0
    resized = bilinear_resize(gray, side, side)
    return ModalImage(Modality.SH, side, np.clip(np.rint(resized), 0, 255).astype(np.uint8))


def bilinear_resize(src: np.ndarray, a: int, b: int) -> np.ndarray:
    """Resize an m x n array to a x b.

    Destination (i, j) samples source (i*m/a, j*n/b); integer coordinates
    copy the source pixel, fractional ones blend the enclosing 2x2 cell,
    and coordinates past the last index clamp to the border.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError(f"expected 2-D source, got shape {src.shape}")
    m, n = src.shape
    if m < 1 or n < 1 or a < 1 or b < 1:
        raise ZeroDimension(f"resize {m}x{n} -> {a}x{b}")

    x = np.minimum(np.arange(a) * (m / a), m - 1.0)
    y = np.minimum(np.arange(b) * (n / b), n - 1.0)
    x1 = np.floor(x).astype(np.int64)
    y1 = np.floor(y).astype(np.int64)
    x2 = np.minimum(x1 + 1, m - 1)
    y2 = np.minimum(y1 + 1, n - 1)
    fx = (x - x1)[:, None]
    fy = (y - y1)[None, :]

    t11 = src[x1[:, None], y1[None, :]]
    t21 = src[x2[:, None], y1[None, :]]
    t12 = src[x1[:, None], y2[None, :]]
    t22 = src[x2[:, None], y2[None, :]]

    s1 = t11 * (1.0 - fx) + t21 * fx
    s2 = t12 * (1.0 - fx) + t22 * fx
    return s1 * (1.0 - fy) + s2 * fy


# --- persistence -----------------------------------------------------------

def image_filename(sample_id: str, modality: Modality) -> str:
    return f"{sample_id}.{modality.value}.pgm"


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError("PGM output requires a 2-D array")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path}: not a maxval-255 binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    """8-bit grayscale or RGB PNG (optional alternative to PGM)."""
    from PIL import Image

    arr = np.asarray(pixels, dtype=np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(str(path), format="PNG")


def write_entropy_csv(path: str | Path, series: EntropySeries) -> None:
    lines = ["segment,avg_entropy"]
    for k, v in enumerate(series.avg_entropy):
        lines.append(f"{k},{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
