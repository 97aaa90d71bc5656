"""Grad-CAM heatmaps and feature export.

Gradients of the target pre-softmax logit are taken at a branch's last
conv activations; channel weights are the spatial gradient means; the
rectified weighted sum, max-normalized, is the class activation map.
Per-family cumulative maps sum many samples' maps before one final
normalization, then get colorized blue-to-red and optionally blended over
the original modality image.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidClass, UntrainedModel
from .imaging import ModalImage, Modality, bilinear_resize
from .model import FusionModel, TrainedModel
from .nnet import relu


@dataclass
class Cam:
    """Class-activation map in [0,1]; max is 1 unless the map is all zero."""

    values: np.ndarray  # float64 (h, w) at conv resolution
    target_class: int  # family 1..K
    branch: Modality
    upscaled: np.ndarray | None = None  # float64 (side, side) when requested

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class ColorMap:
    """Piecewise-linear RGB map over [0,1]; positions strictly increasing."""

    anchors: tuple[tuple[float, tuple[int, int, int]], ...]

    def __post_init__(self):
        pos = [p for p, _ in self.anchors]
        if pos[0] != 0.0 or pos[-1] != 1.0 or any(a >= b for a, b in zip(pos, pos[1:])):
            raise ValueError("anchor positions must increase strictly from 0 to 1")


# Cool-to-warm: blue, cyan, green, yellow, red.
DEFAULT_COLORMAP = ColorMap(
    anchors=(
        (0.00, (0, 0, 255)),
        (0.25, (0, 255, 255)),
        (0.50, (0, 255, 0)),
        (0.75, (255, 255, 0)),
        (1.00, (255, 0, 0)),
    )
)


def _resolve_model(trained) -> FusionModel:
    model = trained.model if isinstance(trained, TrainedModel) else trained
    if not model.trained:
        raise UntrainedModel("grad-cam requires a trained model")
    return model


def grad_cam(
    trained,
    images: dict[Modality, np.ndarray],
    target_class: int,
    branch: Modality,
    upscale_to: int | None = None,
) -> Cam:
    """Class activation map of one sample for one branch.

    images: per-modality float arrays (side, side) scaled to [0,1].
    target_class is a family id 1..K; the gradient is taken on its
    pre-softmax logit.
    """
    model = _resolve_model(trained)
    cfg = model.config
    if not 1 <= target_class <= cfg.classes:
        raise InvalidClass(f"family {target_class} outside 1..{cfg.classes}")
    if branch not in cfg.modalities:
        raise InvalidClass(f"model has no {branch.value} branch")
    model.forward(images)
    donehot = np.zeros(cfg.classes)
    donehot[target_class - 1] = 1.0
    model.zero_grads()
    da = model.grad_at_branch_conv(branch, donehot)
    activation = model.branch_conv_activation(branch)
    model.zero_grads()
    alphas = da.mean(axis=(1, 2))
    raw = relu(np.tensordot(alphas, activation, axes=1))
    peak = raw.max()
    values = raw / peak if peak > 0 else raw
    upscaled = None
    if upscale_to is not None:
        upscaled = bilinear_resize(values, upscale_to, upscale_to)
    return Cam(values=values, target_class=target_class, branch=branch, upscaled=upscaled)


def channel_weights(
    trained, images: dict[Modality, np.ndarray], target_class: int, branch: Modality
) -> np.ndarray:
    """The per-channel gradient means backing grad_cam (exposed for probes)."""
    model = _resolve_model(trained)
    model.forward(images)
    donehot = np.zeros(model.config.classes)
    donehot[target_class - 1] = 1.0
    model.zero_grads()
    da = model.grad_at_branch_conv(branch, donehot)
    model.zero_grads()
    return da.mean(axis=(1, 2))


def cumulative_cam(cams, side: int) -> Cam:
    """Sum many samples' maps on one side x side canvas, then normalize by
    the accumulated maximum (an all-zero accumulator stays zero).

    Maps are summed in a canonical content order, so the result is
    bit-exactly independent of input ordering.
    """
    cams = list(cams)
    if not cams:
        raise EmptyInput("no cams to accumulate")
    upscaled = []
    for cam in cams:
        if cam.upscaled is not None and cam.upscaled.shape == (side, side):
            upscaled.append(np.asarray(cam.upscaled, dtype=np.float64))
        else:
            upscaled.append(bilinear_resize(cam.values, side, side))
    upscaled.sort(key=lambda a: hashlib.sha256(a.tobytes()).digest())
    acc = np.zeros((side, side), dtype=np.float64)
    for layer in upscaled:
        acc += layer
    peak = acc.max()
    if peak > 0:
        acc /= peak
    return Cam(values=acc, target_class=cams[0].target_class, branch=cams[0].branch)


def colorize(cam, cmap: ColorMap = DEFAULT_COLORMAP) -> np.ndarray:
    """Map normalized values to RGB bytes by linear interpolation between anchors."""
    values = cam.values if isinstance(cam, Cam) else np.asarray(cam, dtype=np.float64)
    positions = np.array([p for p, _ in cmap.anchors])
    out = np.empty((*values.shape, 3), dtype=np.uint8)
    for ch in range(3):
        levels = np.array([c[ch] for _, c in cmap.anchors], dtype=np.float64)
        out[..., ch] = np.rint(np.interp(values, positions, levels)).astype(np.uint8)
    return out


def superimpose(base: ModalImage, colored: np.ndarray, alpha: float) -> np.ndarray:
    """Blend the colorized heatmap over the grayscale base image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    colored = np.asarray(colored)
    if colored.shape != (base.side, base.side, 3):
        raise DimensionMismatch(f"heatmap {colored.shape} vs base {(base.side, base.side, 3)}")
    gray = base.pixels.astype(np.float64)[..., None]
    blended = alpha * colored.astype(np.float64) + (1.0 - alpha) * gray
    return np.rint(blended).astype(np.uint8)


def export_features(trained, dataset) -> list[tuple[str, int, np.ndarray]]:
    """Post-fusion penultimate feature vector per sample, in dataset order."""
    model = _resolve_model(trained)
    cfg = model.config
    rows = []
    for sample in dataset:
        x = {}
        for b in cfg.branches:
            img = sample.images[b.modality]
            x[b.modality] = np.asarray(img, dtype=np.float64) / 255.0
        vec = model.penultimate(x)
        rows.append((sample.sample_id, sample.family, np.asarray(vec, dtype=np.float64)))
    return rows


def write_feature_csv(path, rows) -> None:
    """Comma-separated feature table with header id,family,f0..fD."""
    if not rows:
        raise EmptyInput("no feature rows")
    dim = rows[0][2].size
    lines = ["id,family," + ",".join(f"f{i}" for i in range(dim))]
    for sample_id, family, vec in rows:
        lines.append(f"{sample_id},{family}," + ",".join(repr(float(v)) for v in vec))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
