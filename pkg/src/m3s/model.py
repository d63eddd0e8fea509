"""The M3S classifier.

Two (or more) convolutional branches read GASF images of one spectrum at
different scales, a dense head turns the pooled, concatenated embeddings
into a preliminary class distribution ``e_R``, and a 6x4 weight matrix
mixes ``e_R`` with the training-set probability matrix ``P(class | flag)``
before the final softmax.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedLoss, InvalidConfig, NonFinite, SchemaError, ShapeError, UnlabeledSample
from .gaf import encode_many
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Param,
    ReLU,
    Sequential,
    sgd_step,
    softmax,
    softmax_backward,
    softmax_cross_entropy,
)
from .spectra import HISTORY_FLAGS, N_CLASSES, N_FLAGS, Dataset, Subtype

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "m3s-checkpoint/1"
DEFAULT_KERNELS = {32: 3, 64: 5, 128: 7}
FUSION_POLICIES = ("masked", "global", "none")
WEIGHT_MODES = ("adaptive", "fixed")


@dataclass
class TrainConfig:
    scales: list = field(default_factory=lambda: [32, 64])
    kernel_sizes: list | None = None
    channels: list = field(default_factory=lambda: [8, 16])
    epochs: int = 500
    lr: float = 0.001
    batch_size: int = 1
    seed: int = 0
    fusion: str = "masked"
    weights: str = "adaptive"
    fixed_ratio: float = 0.9
    train_fraction: float = 0.75
    # early stop once, for `stop_patience` consecutive epochs, training accuracy
    # stays >= stop_train_acc or the epoch loss fails to improve on its best
    # value by more than stop_loss_delta
    stop_train_acc: float | None = None
    stop_loss_delta: float | None = None
    stop_patience: int = 3

    def __post_init__(self):
        self.scales = [int(s) for s in self.scales]
        if self.kernel_sizes is None:
            missing = [s for s in self.scales if s not in DEFAULT_KERNELS]
            if missing:
                raise InvalidConfig(f"no default kernel for scales {missing}; set kernel_sizes", "kernel_sizes")
            self.kernel_sizes = [DEFAULT_KERNELS[s] for s in self.scales]
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        self.channels = [int(c) for c in self.channels]

    def validate(self):
        if not self.scales or any(s < 4 for s in self.scales):
            raise InvalidConfig("need at least one scale, each >= 4", "scales")
        if len(set(self.scales)) != len(self.scales):
            raise InvalidConfig("scales must be distinct", "scales")
        if len(self.kernel_sizes) != len(self.scales) or any(k < 1 for k in self.kernel_sizes):
            raise InvalidConfig("one positive kernel size per scale", "kernel_sizes")
        if len(self.channels) != 2 or any(c < 1 for c in self.channels):
            raise InvalidConfig("two positive channel counts", "channels")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise InvalidConfig("must be a non-negative integer", "epochs")
        if not (self.lr > 0):
            raise InvalidConfig("must be positive", "lr")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidConfig("must be a positive integer", "batch_size")
        if self.fusion not in FUSION_POLICIES:
            raise InvalidConfig(f"must be one of {FUSION_POLICIES}", "fusion")
        if self.weights not in WEIGHT_MODES:
            raise InvalidConfig(f"must be one of {WEIGHT_MODES}", "weights")
        if not 0.0 <= self.fixed_ratio <= 1.0:
            raise InvalidConfig("must lie in [0, 1]", "fixed_ratio")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidConfig("must lie strictly between 0 and 1", "train_fraction")
        if not isinstance(self.stop_patience, int) or self.stop_patience < 1:
            raise InvalidConfig("must be a positive integer", "stop_patience")
        return self

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown keys {sorted(unknown)}", "train_config")
        try:
            return cls(**data).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(str(exc), "train_config") from None

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"invalid JSON ({exc})", "train_config") from None

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ----------------------------------------------------------- probability matrix

@dataclass
class ProbabilityMatrix:
    entries: np.ndarray  # (5, 4)
    support: np.ndarray  # (5,) samples carrying each flag

    @property
    def zero_support(self):
        return self.support == 0

    def to_dict(self):
        return {"entries": self.entries.tolist(), "support": self.support.tolist(),
                "zero_support": self.zero_support.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["entries"], dtype=np.float64), np.array(data["support"], dtype=np.int64))


def build_probability_matrix(train: Dataset) -> ProbabilityMatrix:
    """Row ``h`` is the class distribution among training samples with flag ``h``.

    Flags nobody carries get a uniform row and are reported via ``zero_support``.
    """
    labels = train.labels()
    if np.any(labels < 0):
        bad = next(s.id for s in train if s.label is None)
        raise UnlabeledSample(f"sample {bad!r} has no label")
    hist = train.histories()
    counts = np.zeros((N_FLAGS, N_CLASSES))
    for h in range(N_FLAGS):
        counts[h] = np.bincount(labels[hist[:, h]], minlength=N_CLASSES)
    support = counts.sum(axis=1).astype(np.int64)
    entries = np.full((N_FLAGS, N_CLASSES), 1.0 / N_CLASSES)
    has = support > 0
    entries[has] = counts[has] / support[has, None]
    return ProbabilityMatrix(entries, support)


def fixed_weight_matrix(ratio=0.9):
    """Spectral row gets ``ratio``; the five history rows share ``1 - ratio`` equally."""
    w = np.empty((1 + N_FLAGS, N_CLASSES))
    w[0] = ratio
    w[1:] = (1.0 - ratio) / N_FLAGS
    return w


# ---------------------------------------------------------------------- fusion

@dataclass
class FusionOutput:
    prediction_matrix: np.ndarray  # (6, 4)
    class_scores: np.ndarray  # (4,)
    probabilities: np.ndarray  # (4,)


def fusion_stack(e_r, prob_entries, histories, policy):
    """Batched ``e_F``: ``(N, 6, 4)`` stacking e_R over the (possibly masked) history rows."""
    e_r = np.atleast_2d(e_r)
    n = e_r.shape[0]
    rows = np.broadcast_to(prob_entries, (n, N_FLAGS, N_CLASSES))
    if policy == "masked":
        rows = rows * np.asarray(histories, dtype=np.float64).reshape(n, N_FLAGS, 1)
    elif policy != "global":
        raise InvalidConfig(f"fusion policy must be 'masked' or 'global', got {policy!r}", "fusion")
    return np.concatenate([e_r[:, None, :], rows], axis=1)


def fuse(e_r, prob_matrix, history, weight, policy="masked") -> FusionOutput:
    """Mix one preliminary prediction with history probabilities.

    ``class_scores`` are the column sums of ``e_F * M_W``; ``probabilities`` is
    their softmax.
    """
    e_r = np.asarray(e_r, dtype=np.float64)
    entries = getattr(prob_matrix, "entries", prob_matrix)
    weight = np.asarray(weight, dtype=np.float64)
    if e_r.shape != (N_CLASSES,) or np.shape(entries) != (N_FLAGS, N_CLASSES) \
            or weight.shape != (1 + N_FLAGS, N_CLASSES) or len(history) != N_FLAGS:
        raise ShapeError("fuse expects e_R (4,), M_H (5, 4), history (5,), M_W (6, 4)")
    e_f = fusion_stack(e_r, entries, [history], policy)[0]
    p_m = e_f * weight
    scores = p_m.sum(axis=0)
    return FusionOutput(p_m, scores, softmax(scores))


# ----------------------------------------------------------------------- model

def make_branch(scale, kernel, channels, rng, name):
    c1, c2 = channels
    pad = kernel // 2
    return Sequential([
        Conv2D(1, c1, kernel, 1, pad, rng, f"{name}.conv1"), ReLU(),
        MaxPool2D(2, 2),
        Conv2D(c1, c2, kernel, 1, pad, rng, f"{name}.conv2"), ReLU(),
        Conv2D(c2, c2, 2, 2, 0, rng, f"{name}.conv3"), ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
    ])


class M3SModel:
    def __init__(self, config: TrainConfig, prob_matrix: ProbabilityMatrix | None = None):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.branches = [make_branch(s, k, config.channels, rng, f"branch{s}")
                         for s, k in zip(config.scales, config.kernel_sizes)]
        self.embed_sizes = []
        for s, branch in zip(config.scales, self.branches):
            shape = branch.output_shape((1, s, s))
            if min(shape) < 1:
                raise InvalidConfig(f"scale {s} too small for the branch architecture", "scales")
            self.embed_sizes.append(int(np.prod(shape)))
        self.head = Dense(sum(self.embed_sizes), N_CLASSES, rng, "head")
        init = fixed_weight_matrix(config.fixed_ratio) if config.weights == "fixed" else np.ones((1 + N_FLAGS, N_CLASSES))
        self.weight = Param("weight_matrix", init)
        if prob_matrix is None:
            prob_matrix = ProbabilityMatrix(np.full((N_FLAGS, N_CLASSES), 0.25), np.zeros(N_FLAGS, dtype=np.int64))
        self.prob_matrix = prob_matrix
        self.log = []

    # -- parameters
    def all_params(self):
        ps = [p for b in self.branches for p in b.params()] + self.head.params() + [self.weight]
        return ps

    def trainable_params(self):
        ps = [p for b in self.branches for p in b.params()] + self.head.params()
        if self.config.weights == "adaptive" and self.config.fusion != "none":
            ps.append(self.weight)
        return ps

    def zero_grad(self):
        for p in self.all_params():
            p.zero_grad()

    # -- forward / backward
    def encode(self, spectra):
        """GASF images for every configured scale: list of ``(N, 1, s, s)`` arrays."""
        return [encode_many(spectra, s)[:, None] for s in self.config.scales]

    def _check_images(self, images):
        if len(images) != len(self.branches):
            raise ShapeError(f"expected {len(self.branches)} image stacks, got {len(images)}")
        for img, s in zip(images, self.config.scales):
            if img.ndim != 4 or img.shape[1:] != (1, s, s):
                raise ShapeError(f"branch for scale {s} got images of shape {img.shape}")

    def preliminary(self, images):
        """``e_R`` for a batch: softmax over the head logits, shape ``(N, 4)``."""
        self._check_images(images)
        feats = [b.forward(img) for b, img in zip(self.branches, images)]
        logits = self.head.forward(np.concatenate(feats, axis=1))
        return softmax(logits)

    def forward(self, images, histories):
        """Final class probabilities ``(N, 4)`` plus intermediates for backward."""
        e_r = self.preliminary(images)
        if self.config.fusion == "none":
            return e_r, {"e_r": e_r}
        e_f = fusion_stack(e_r, self.prob_matrix.entries, histories, self.config.fusion)
        scores = (e_f * self.weight.value).sum(axis=1)
        return softmax(scores), {"e_r": e_r, "e_f": e_f, "scores": scores}

    def loss_and_backward(self, images, histories, labels):
        """Mean cross-entropy over the batch and the batch probabilities.

        Gradients are accumulated into every parameter.
        """
        e_r = self.preliminary(images)
        if self.config.fusion == "none":
            # cross-entropy of softmax(logits) straight from the head
            probs = e_r
            loss, dlogits = softmax_cross_entropy(np.log(np.clip(e_r, 1e-300, None)), labels)
        else:
            e_f = fusion_stack(e_r, self.prob_matrix.entries, histories, self.config.fusion)
            scores = (e_f * self.weight.value).sum(axis=1)
            probs = softmax(scores)
            loss, dscores = softmax_cross_entropy(scores, labels)
            self.weight.grad += np.einsum("nc,nrc->rc", dscores, e_f)
            de_r = dscores * self.weight.value[0]
            dlogits = softmax_backward(de_r, e_r)
        de3 = self.head.backward(dlogits)
        offsets = np.cumsum([0] + self.embed_sizes)
        for b, lo, hi in zip(self.branches, offsets[:-1], offsets[1:]):
            b.backward(de3[:, lo:hi])
        return loss, probs

    def predict_proba(self, images, histories):
        return self.forward(images, histories)[0]

    def predict_dataset(self, dataset: Dataset):
        """Probabilities ``(N, 4)`` and argmax labels (ties -> lowest index)."""
        probs = self.predict_proba(self.encode(dataset.samples), dataset.histories())
        return probs, probs.argmax(axis=1)

    # -- serialization
    def to_checkpoint(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "layers": {f"branch{s}": b.spec() for s, b in zip(self.config.scales, self.branches)} | {"head": self.head.spec()},
            "params": {p.name: p.value.tolist() for p in self.all_params()},
            "probability_matrix": self.prob_matrix.to_dict(),
            "history_flags": list(HISTORY_FLAGS),
            "classes": [c.name for c in Subtype],
            "log": list(self.log),
        }

    @classmethod
    def from_checkpoint(cls, data):
        if data.get("format") != CHECKPOINT_FORMAT:
            raise SchemaError(f"unsupported checkpoint format {data.get('format')!r}")
        config = TrainConfig.from_dict(data["config"])
        model = cls(config, ProbabilityMatrix.from_dict(data["probability_matrix"]))
        for s, b in zip(config.scales, model.branches):
            if b.spec() != data["layers"][f"branch{s}"]:
                raise SchemaError(f"layer layout of branch{s} does not match its config")
        params = data["params"]
        for p in model.all_params():
            value = np.array(params[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise SchemaError(f"parameter {p.name} has shape {value.shape}, expected {p.value.shape}")
            p.value = value
            p.grad = np.zeros_like(value)
        model.log = [dict(r) for r in data.get("log", [])]
        return model

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_checkpoint(), sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"checkpoint is not valid JSON ({exc})") from None
        return cls.from_checkpoint(data)


def extract_features(img32, img64, model: M3SModel):
    """``e_R`` of one sample from its images at the model's two scales."""
    images = [np.asarray(getattr(img, "pixels", img), dtype=np.float64)[None, None] for img in (img32, img64)]
    return model.preliminary(images)[0]


def train(train_set: Dataset, config: TrainConfig, images=None, on_epoch=None) -> M3SModel:
    """Fit the extractor (and the weight matrix in adaptive mode) end to end.

    The probability matrix comes from ``train_set`` alone. ``images`` may hold
    precomputed GASF stacks for ``train_set`` in config scale order.
    """
    config.validate()
    model = M3SModel(config, build_probability_matrix(train_set))
    labels = train_set.labels()
    hist = train_set.histories()
    if images is None:
        images = model.encode(train_set.samples)
    model._check_images(images)
    n = len(train_set)
    rng = np.random.default_rng([config.seed, 1])
    params = model.trainable_params()
    acc_streak = loss_streak = 0
    best_loss = math.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            batch = [img[idx] for img in images]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, probs = model.loss_and_backward(batch, hist[idx], labels[idx])
            except NonFinite:
                raise DivergedLoss(f"non-finite activations at epoch {epoch}") from None
            if not math.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} at epoch {epoch}")
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
            total += loss * len(idx)
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_step([p.value for p in params], [p.grad for p in params], config.lr)
            bad = [p.name for p in params if not np.all(np.isfinite(p.value))]
            if bad:
                raise DivergedLoss(f"parameters {', '.join(bad)} became non-finite at epoch {epoch}")
        # accuracy of the pre-update predictions seen during the epoch
        train_acc = correct / n
        record = {"epoch": epoch, "loss": total / n, "train_acc": train_acc}
        model.log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d loss %.6f train_acc %.4f", epoch, record["loss"], train_acc)
        if config.stop_train_acc is not None:
            acc_streak = acc_streak + 1 if train_acc >= config.stop_train_acc else 0
        if config.stop_loss_delta is not None:
            loss_streak = loss_streak + 1 if best_loss - record["loss"] <= config.stop_loss_delta else 0
        best_loss = min(best_loss, record["loss"])
        if max(acc_streak, loss_streak) >= config.stop_patience:
            break
    return model


def predict(model: M3SModel, spec):
    """Class probabilities and label for one spectrum."""
    images = model.encode([spec])
    probs = model.predict_proba(images, np.array([spec.history]))[0]
    return probs, Subtype(int(probs.argmax()))
