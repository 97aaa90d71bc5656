"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way and shares no
code with the package: a from-scratch MD5, four-loop convolution, two-loop
bigram normalization, direct metric formulas, and float-sampled line
rasterization.
"""
from __future__ import annotations

import math

import numpy as np

# --- MD5 (RFC 1321), independent of hashlib ---------------------------------

_SHIFTS = (
    [7, 12, 17, 22] * 4 + [5, 9, 14, 20] * 4 + [4, 11, 16, 23] * 4 + [6, 10, 15, 21] * 4
)
_SINES = [int(abs(math.sin(i + 1)) * 2**32) & 0xFFFFFFFF for i in range(64)]


def _rotl32(x: int, c: int) -> int:
    return ((x << c) | (x >> (32 - c))) & 0xFFFFFFFF


def md5_digest(message: bytes) -> bytes:
    a0, b0, c0, d0 = 0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476
    data = bytearray(message)
    bit_len = (8 * len(message)) & 0xFFFFFFFFFFFFFFFF
    data.append(0x80)
    while len(data) % 64 != 56:
        data.append(0)
    data += bit_len.to_bytes(8, "little")
    for off in range(0, len(data), 64):
        chunk = data[off : off + 64]
        m = [int.from_bytes(chunk[i * 4 : i * 4 + 4], "little") for i in range(16)]
        a, b, c, d = a0, b0, c0, d0
        for i in range(64):
            if i < 16:
                f = (b & c) | (~b & d)
                g = i
            elif i < 32:
                f = (d & b) | (~d & c)
                g = (5 * i + 1) % 16
            elif i < 48:
                f = b ^ c ^ d
                g = (3 * i + 5) % 16
            else:
                f = c ^ (b | ~d)
                g = (7 * i) % 16
            f = (f + a + _SINES[i] + m[g]) & 0xFFFFFFFF
            a, d, c, b = d, c, b, (b + _rotl32(f, _SHIFTS[i])) & 0xFFFFFFFF
        a0 = (a0 + a) & 0xFFFFFFFF
        b0 = (b0 + b) & 0xFFFFFFFF
        c0 = (c0 + c) & 0xFFFFFFFF
        d0 = (d0 + d) & 0xFFFFFFFF
    return b"".join(x.to_bytes(4, "little") for x in (a0, b0, c0, d0))


def md5_bit_row(token: str) -> list[int]:
    """The 128-entry signature row: bit j is (digest-as-big-endian-int >> j) & 1."""
    b = int.from_bytes(md5_digest(token.encode("ascii")), "big")
    return [(b >> j) & 1 for j in range(128)]


# --- naive layer math --------------------------------------------------------


def naive_conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct four-loop cross-correlation with zero same-padding."""
    c, h, wd = x.shape
    f = w.shape[0]
    out = np.zeros((f, h, wd))
    for fi in range(f):
        for i in range(h):
            for j in range(wd):
                acc = b[fi]
                for ci in range(c):
                    for di in range(3):
                        for dj in range(3):
                            si, sj = i + di - 1, j + dj - 1
                            if 0 <= si < h and 0 <= sj < wd:
                                acc += w[fi, ci, di, dj] * x[ci, si, sj]
                out[fi, i, j] = acc
    return out


def naive_dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k, d = w.shape
    out = np.zeros(k)
    for ki in range(k):
        acc = b[ki]
        for di in range(d):
            acc += w[ki, di] * x[di]
        out[ki] = acc
    return out


def naive_softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Unshifted definition; only valid at moderate magnitudes."""
    e = np.exp(logits)
    probs = e / e.sum()
    return float(-np.log(probs[label])), probs


def naive_pool2x2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = np.empty((c, ho, wo))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                window = x[ci, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                out[ci, i, j] = window.max()
    return out


# --- naive imaging -----------------------------------------------------------


def naive_bigram_image(values) -> np.ndarray:
    """Two-loop count + per-row normalize, round, clamp."""
    counts = [[0] * 256 for _ in range(256)]
    rowsums = [0] * 256
    values = list(int(v) for v in values)
    for a, b in zip(values, values[1:]):
        counts[a][b] += 1
        rowsums[a] += 1
    out = np.zeros((256, 256), dtype=np.uint8)
    for r in range(256):
        if rowsums[r] == 0:
            continue
        for c in range(256):
            out[r, c] = min(round(counts[r][c] / rowsums[r] * 256), 255)
    return out


def entropy_direct(segment) -> float:
    seg = list(int(v) for v in segment)
    freq: dict[int, int] = {}
    for v in seg:
        freq[v] = freq.get(v, 0) + 1
    h = 0.0
    for count in freq.values():
        p = count / len(seg)
        h -= p * math.log2(p)
    return h


def sampled_line_points(x0: int, y0: int, x1: int, y1: int) -> set[tuple[int, int]]:
    """Rasterize a segment by DDA: one float sample per driving-axis step.
    Agrees with integer Bresenham on lines free of rounding ties (slope +-1,
    horizontal, vertical)."""
    points = set()
    steps = max(abs(x1 - x0), abs(y1 - y0), 1)
    for t in range(steps + 1):
        fx = x0 + (x1 - x0) * t / steps
        fy = y0 + (y1 - y0) * t / steps
        points.add((int(math.floor(fx + 0.5)), int(math.floor(fy + 0.5))))
    return points


# --- direct metric formulas ----------------------------------------------------


def metrics_direct(counts: np.ndarray) -> dict:
    """Accuracy, per-class precision/recall/F1 and both averages, computed
    straight from the one-vs-rest definitions."""
    k = counts.shape[0]
    total = int(counts.sum())
    per = []
    for c in range(k):
        tp = int(counts[c][c])
        fp = int(sum(counts[t][c] for t in range(k)) - tp)
        fn = int(sum(counts[c][p] for p in range(k)) - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per.append({"p": precision, "r": recall, "f1": f1, "support": tp + fn})
    accuracy = sum(counts[c][c] for c in range(k)) / total
    macro = {
        "p": sum(m["p"] for m in per) / k,
        "r": sum(m["r"] for m in per) / k,
        "f1": sum(m["f1"] for m in per) / k,
    }
    weighted = {
        "p": sum(m["p"] * m["support"] for m in per) / total,
        "r": sum(m["r"] * m["support"] for m in per) / total,
        "f1": sum(m["f1"] * m["support"] for m in per) / total,
    }
    return {"accuracy": accuracy, "per_class": per, "macro": macro, "weighted": weighted}
