"""Branch assembly, training, and prediction.

Each modality gets its own small VGG-style stack (3x3 same-padded convs,
2x2 max pools), flattened into a fixed-width feature vector. Multi-branch
models merge those penultimate vectors with one fusion operator before a
single dense head produces the 9-way logits.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DivergedLoss,
    InvalidConfig,
    MissingModality,
)
from .imaging import ModalImage, Modality
from .nnet import (
    Conv3x3,
    Dense,
    Flatten,
    FuseOp,
    FusionSpec,
    MaxPool2x2,
    ReLU,
    Sequential,
    fuse,
    fuse_backward,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)

MODALITY_ORDER = (Modality.GS, Modality.EG, Modality.SH)

DEFAULT_CONV_BLOCKS = ((8, 1), (16, 1))
DEFAULT_FEATURE_DIM = 64


@dataclass(frozen=True)
class BranchConfig:
    """One modality's conv stack: blocks of (filters, convs per block)."""

    modality: Modality
    conv_blocks: tuple[tuple[int, int], ...] = DEFAULT_CONV_BLOCKS
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        if not self.conv_blocks:
            raise InvalidConfig("branch needs at least one conv block")
        for filters, convs in self.conv_blocks:
            if filters < 1 or convs < 1:
                raise InvalidConfig(f"bad conv block ({filters}, {convs})")
        if self.feature_dim < 1:
            raise InvalidConfig(f"feature_dim {self.feature_dim} < 1")


@dataclass(frozen=True)
class ModelConfig:
    branches: tuple[BranchConfig, ...]
    fusion: FusionSpec | None
    input_side: int
    classes: int = 9

    def __post_init__(self):
        if not 1 <= len(self.branches) <= 3:
            raise InvalidConfig(f"{len(self.branches)} branches, need 1..3")
        mods = [b.modality for b in self.branches]
        if len(set(mods)) != len(mods):
            raise InvalidConfig("duplicate branch modalities")
        if (self.fusion is not None) != (len(self.branches) >= 2):
            raise InvalidConfig("fusion must be present iff branches >= 2")
        if self.fusion is not None and self.fusion.input_arity != len(self.branches):
            raise InvalidConfig(
                f"fusion arity {self.fusion.input_arity} != {len(self.branches)} branches"
            )
        if self.input_side < 2:
            raise InvalidConfig(f"input_side {self.input_side} < 2")
        if self.classes < 2:
            raise InvalidConfig(f"classes {self.classes} < 2")
        if self.fusion is not None and self.fusion.operator is not FuseOp.CONCAT:
            dims = {b.feature_dim for b in self.branches}
            if len(dims) != 1:
                raise InvalidConfig(f"{self.fusion.operator.value} fusion needs equal feature dims")

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return tuple(b.modality for b in self.branches)

    @property
    def fused_dim(self) -> int:
        if self.fusion is not None and self.fusion.operator is FuseOp.CONCAT:
            return sum(b.feature_dim for b in self.branches)
        return self.branches[0].feature_dim

    def label(self) -> str:
        """Row label in the reporting notation: GS, GS||EG, avg(GS,EG,SH), ..."""
        names = [b.modality.name for b in self.branches]
        if self.fusion is None:
            return names[0]
        op = self.fusion.operator
        if op is FuseOp.CONCAT:
            return "||".join(names)
        if op is FuseOp.ADD:
            return "+".join(names)
        return f"{op.value}({','.join(names)})"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        # lr 0 is allowed as a no-update probe; only negative rates are invalid
        if self.learning_rate < 0:
            raise InvalidConfig(f"learning_rate {self.learning_rate} < 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum {self.momentum} outside [0, 1)")


@dataclass
class Sample:
    """One corpus sample with its rendered modality images."""

    sample_id: str
    family: int  # 1..classes
    images: dict[Modality, np.ndarray]  # uint8 (side, side)


@dataclass(frozen=True)
class EpochStats:
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _pooled_side(side: int, blocks: int) -> int:
    for _ in range(blocks):
        side = (side + 1) // 2
    return side


def _build_branch(cfg: BranchConfig, input_side: int, rng: np.random.Generator) -> Sequential:
    layers = []
    in_ch = 1
    for filters, convs in cfg.conv_blocks:
        for _ in range(convs):
            layers.append(Conv3x3(in_ch, filters, rng=rng))
            layers.append(ReLU())
            in_ch = filters
        layers.append(MaxPool2x2())
    side = _pooled_side(input_side, len(cfg.conv_blocks))
    flat = in_ch * side * side
    layers.append(Flatten())
    layers.append(Dense(flat, cfg.feature_dim, rng=rng))
    layers.append(ReLU())
    return Sequential(layers)


class FusionModel:
    """Per-modality branches plus one dense head over the fused features."""

    def __init__(self, config: ModelConfig, branches: dict[Modality, Sequential], head: Dense):
        self.config = config
        self.branches = branches
        self.head = head
        self.trained = False
        self._feats: list[np.ndarray] | None = None
        self._fused: np.ndarray | None = None

    def all_layers(self):
        layers = []
        for b in self.config.branches:
            layers.extend(self.branches[b.modality].layers)
        layers.append(self.head)
        return layers

    def params(self):
        return [p for layer in self.all_layers() for p in layer.params()]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def forward(self, images: dict[Modality, np.ndarray]) -> np.ndarray:
        """images: per modality float array [side,side] or [N,side,side],
        values already scaled to [0,1]. Returns logits [K] or [N,K]."""
        feats = []
        for b in self.config.branches:
            x = images[b.modality]
            x = x[None] if x.ndim == 2 else x[:, None]
            feats.append(self.branches[b.modality].forward(x))
        self._feats = feats
        self._fused = fuse(feats, self.config.fusion) if self.config.fusion else feats[0]
        return self.head.forward(self._fused)

    def backward(self, dlogits: np.ndarray) -> None:
        dfused = self.head.backward(dlogits)
        if self.config.fusion is not None:
            dfeats = fuse_backward(dfused, self._feats, self.config.fusion)
        else:
            dfeats = [dfused]
        for b, df in zip(self.config.branches, dfeats):
            self.branches[b.modality].backward(df)

    def penultimate(self, images: dict[Modality, np.ndarray]) -> np.ndarray:
        self.forward(images)
        return self._fused

    # activation-level access used by Grad-CAM

    def last_conv_index(self, modality: Modality) -> int:
        seq = self.branches[modality]
        idx = [i for i, layer in enumerate(seq.layers) if isinstance(layer, Conv3x3)]
        return idx[-1]

    def branch_conv_activation(self, modality: Modality) -> np.ndarray:
        """Output of the branch's last conv layer from the most recent forward."""
        seq = self.branches[modality]
        return seq.acts[self.last_conv_index(modality) + 1]

    def grad_at_branch_conv(self, modality: Modality, dlogits: np.ndarray) -> np.ndarray:
        """Backprop dlogits to the last conv output of one branch (single sample)."""
        dfused = self.head.backward(dlogits)
        if self.config.fusion is not None:
            dfeats = fuse_backward(dfused, self._feats, self.config.fusion)
        else:
            dfeats = [dfused]
        pos = self.config.modalities.index(modality)
        seq = self.branches[modality]
        return seq.backward_to(self.last_conv_index(modality) + 1, dfeats[pos])

    def logits_from_branch_activation(self, modality: Modality, activation: np.ndarray) -> np.ndarray:
        """Re-run the network tail with one branch's last-conv output replaced.

        Other branches reuse their cached features from the last forward().
        Overwrites the tail caches of the chosen branch.
        """
        seq = self.branches[modality]
        feat = seq.forward_from(self.last_conv_index(modality) + 1, activation)
        feats = list(self._feats)
        feats[self.config.modalities.index(modality)] = feat
        fused = fuse(feats, self.config.fusion) if self.config.fusion else feats[0]
        return self.head.forward(fused)

    def save(self, path) -> None:
        save_checkpoint(path, self.all_layers())

    def load(self, path) -> None:
        load_checkpoint(path, self.all_layers())
        self.trained = True


@dataclass
class TrainedModel:
    config: ModelConfig
    model: FusionModel
    history: tuple[EpochStats, ...] = field(default_factory=tuple)


def build_model(config: ModelConfig, seed: int) -> FusionModel:
    """Deterministic scaled-uniform initialization: weights are drawn branch
    by branch in declared modality order, biases start at zero."""
    rng = np.random.default_rng(seed)
    branches = {
        b.modality: _build_branch(b, config.input_side, rng) for b in config.branches
    }
    head = Dense(config.fused_dim, config.classes, rng=rng)
    return FusionModel(config, branches, head)


def _stack_images(samples, modalities, side) -> dict[Modality, np.ndarray]:
    stacked = {}
    for mod in modalities:
        arrs = []
        for s in samples:
            img = s.images.get(mod)
            if img is None:
                raise MissingModality(f"{s.sample_id} lacks {mod.value}")
            if img.shape != (side, side):
                raise MissingModality(
                    f"{s.sample_id} {mod.value} image is {img.shape}, expected {(side, side)}"
                )
            arrs.append(img)
        stacked[mod] = np.stack(arrs).astype(np.float64) / 255.0
    return stacked


def _eval_batches(model: FusionModel, x, y, batch_size: int) -> tuple[float, float]:
    n = y.size
    total_loss = 0.0
    correct = 0
    for off in range(0, n, batch_size):
        sel = slice(off, min(off + batch_size, n))
        logits = model.forward({m: a[sel] for m, a in x.items()})
        losses, probs = softmax_cross_entropy(logits, y[sel])
        total_loss += float(losses.sum())
        correct += int((probs.argmax(axis=1) == y[sel]).sum())
    return total_loss / n, correct / n


def train(model: FusionModel, train_set, val_set, tc: TrainConfig) -> TrainedModel:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Shuffling, and therefore the whole run, is a pure function of
    (data, model weights, tc.seed).
    """
    cfg = model.config
    mods = cfg.modalities
    side = cfg.input_side
    x_train = _stack_images(train_set, mods, side)
    y_train = np.array([s.family - 1 for s in train_set], dtype=np.int64)
    x_val = _stack_images(val_set, mods, side)
    y_val = np.array([s.family - 1 for s in val_set], dtype=np.int64)
    if np.any(y_train < 0) or np.any(y_train >= cfg.classes):
        raise InvalidConfig("train labels outside 1..classes")
    if np.any(y_val < 0) or np.any(y_val >= cfg.classes):
        raise InvalidConfig("val labels outside 1..classes")

    rng = np.random.default_rng(tc.seed)
    params = model.params()
    velocity = [np.zeros_like(p.data) for p in params]
    n = y_train.size
    history = []
    for epoch in range(tc.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for off in range(0, n, tc.batch_size):
            batch = perm[off : off + tc.batch_size]
            logits = model.forward({m: a[batch] for m, a in x_train.items()})
            losses, probs = softmax_cross_entropy(logits, y_train[batch])
            epoch_loss += float(losses.sum())
            correct += int((probs.argmax(axis=1) == y_train[batch]).sum())
            model.zero_grads()
            dlogits = softmax_cross_entropy_backward(probs, y_train[batch]) / batch.size
            model.backward(dlogits)
            for p, v in zip(params, velocity):
                v *= tc.momentum
                v -= tc.learning_rate * p.grad
                p.data += v
        train_loss = epoch_loss / n
        val_loss, val_acc = _eval_batches(model, x_val, y_val, tc.batch_size)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergedLoss(epoch)
        history.append(EpochStats(train_loss, correct / n, val_loss, val_acc))
    model.trained = True
    return TrainedModel(config=cfg, model=model, history=tuple(history))


def predict(
    trained: TrainedModel | FusionModel, images: dict[Modality, ModalImage]
) -> tuple[int, np.ndarray, float]:
    """Classify one sample: (family 1..K, probabilities, forward-pass seconds).

    Ties break toward the lower family index; timing covers only the
    forward pass, not image generation or scaling.
    """
    model = trained.model if isinstance(trained, TrainedModel) else trained
    cfg = model.config
    x = {}
    for b in cfg.branches:
        img = images.get(b.modality)
        if img is None:
            raise MissingModality(f"prediction lacks {b.modality.value}")
        pixels = img.pixels if isinstance(img, ModalImage) else np.asarray(img)
        x[b.modality] = pixels.astype(np.float64) / 255.0
    start = time.perf_counter()
    logits = model.forward(x)
    elapsed = time.perf_counter() - start
    probs = softmax(logits)
    family = int(probs.argmax()) + 1
    return family, probs, elapsed


def evaluate_predictions(model: FusionModel, samples, batch_size: int = 64):
    """Batched predicted families for a sample list (deterministic path)."""
    cfg = model.config
    x = _stack_images(samples, cfg.modalities, cfg.input_side)
    preds = []
    n = len(samples)
    for off in range(0, n, batch_size):
        sel = slice(off, min(off + batch_size, n))
        logits = model.forward({m: a[sel] for m, a in x.items()})
        preds.extend(int(k) + 1 for k in logits.argmax(axis=1))
    return [(s.family, p) for s, p in zip(samples, preds)]
