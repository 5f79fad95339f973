"""The lane-change decision network, its ablations, training and inference.

Two convolutional branches read the driving-style inputs: CNN1 the seven
surrounding-vehicle DOPs (stacked as channels), CNN2 the ego DOP.  Their
flattened outputs are concatenated with the traffic factors and fed to a
fully connected head ending in a 3-way softmax (Keep, Left, Right).
Ablations remove a branch entirely, so the head input shrinks.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .features import DOP_SHAPE, FACTOR_NAMES, FeatureBundle
from .labeling import CASE_WIDTH, CaseSet, Label, flatten_bundle
from .nn import (
    Adam, Conv2D, Dense, Flatten, ReLU, Sequential, cross_entropy, one_hot, read_weight_file, softmax,
    softmax_cross_entropy_grad, write_weight_file,
)
from .trajectory import ROLES

CNN1_CHANNELS = (16, 32)
CNN2_CHANNELS = (16, 8)
KERNEL_SIZES = (4, 5)
FC_WIDTHS = (50, 128, 32, 16)
N_CLASSES = 3
N_SURROUND = len(ROLES)
N_FACTORS = len(FACTOR_NAMES)
SPATIAL = DOP_SHAPE[0] * DOP_SHAPE[1]
_ASL, _ASR = ROLES.index("ASL"), ROLES.index("ASR")


class Ablation(str, enum.Enum):
    FULL = "full"
    NO_EGO = "no-ego"
    NO_SURROUND = "no-surround"
    NO_DS = "no-ds"

    @property
    def title(self) -> str:
        return {"full": "Full", "no-ego": "NoEgoDS", "no-surround": "NoSurroundDS", "no-ds": "NoDS"}[self.value]

    @property
    def uses_surround(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_EGO)

    @property
    def uses_ego(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_SURROUND)

    @classmethod
    def parse(cls, value) -> "Ablation":
        if isinstance(value, Ablation):
            return value
        text = str(value).strip()
        for a in cls:
            if text.lower() in (a.value, a.title.lower(), a.name.lower()):
                return a
        raise ConfigError(f"unknown ablation {value!r}; expected one of {', '.join(a.value for a in cls)}")


@dataclass(frozen=True)
class ModelConfig:
    ablation: Ablation = Ablation.FULL
    t_h: float = 1.5
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.001
    seed: int = 0
    safety_mask_default: bool = True
    width_scale: float = 1.0  # 0.25 gives the reduced model used for gradient checks

    def __post_init__(self):
        object.__setattr__(self, "ablation", Ablation.parse(self.ablation))
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.width_scale > 0:
            raise ConfigError(f"width_scale must be positive, got {self.width_scale}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def widths(self) -> dict:
        s = lambda n: max(1, int(round(n * self.width_scale)))  # noqa: E731
        return {"cnn1": tuple(s(c) for c in CNN1_CHANNELS), "cnn2": tuple(s(c) for c in CNN2_CHANNELS),
                "fc": tuple(s(w) for w in FC_WIDTHS)}


class Decision(NamedTuple):
    probabilities: tuple
    label: Label
    masked: bool


def _branch(in_channels: int, channels, rng) -> Sequential:
    layers = []
    c = in_channels
    for i, (out, k) in enumerate(zip(channels, KERNEL_SIZES)):
        # the network input needs no gradient
        layers += [Conv2D(c, out, k, rng, input_grad=i > 0), ReLU()]
        c = out
    return Sequential(layers + [Flatten()])


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    w = config.widths()
    total = 0
    head_in = N_FACTORS
    for use, c_in, chans in ((config.ablation.uses_surround, N_SURROUND, w["cnn1"]),
                             (config.ablation.uses_ego, 1, w["cnn2"])):
        if not use:
            continue
        for out, k in zip(chans, KERNEL_SIZES):
            total += out * c_in * k * k + out
            c_in = out
        head_in += c_in * SPATIAL
    for width in w["fc"] + (N_CLASSES,):
        total += head_in * width + width
        head_in = width
    return total


@dataclass
class Normalizer:
    """Per-dimension z-scores fitted on the training split (zero std maps to 1)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalizer":
        features = np.asarray(features, dtype=np.float64)
        if len(features) == 0:
            raise ConfigError("cannot fit normalisation on an empty training set")
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(CASE_WIDTH), np.ones(CASE_WIDTH))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def split_inputs(features: np.ndarray):
    """(surrounding (n,7,8,7), ego (n,1,8,7), factors (n,10)) views of case rows."""
    n_sur = N_SURROUND * SPATIAL
    return (features[:, :n_sur].reshape((-1, N_SURROUND) + DOP_SHAPE),
            features[:, n_sur:n_sur + SPATIAL].reshape((-1, 1) + DOP_SHAPE),
            features[:, n_sur + SPATIAL:])


class Model:
    """A built network plus its input normalisation."""

    def __init__(self, config: ModelConfig, normalizer: Normalizer | None = None):
        self.config = config
        self.normalizer = normalizer or Normalizer.identity()
        rng = np.random.default_rng(config.seed)
        w = config.widths()
        self.cnn1 = _branch(N_SURROUND, w["cnn1"], rng) if config.ablation.uses_surround else None
        self.cnn2 = _branch(1, w["cnn2"], rng) if config.ablation.uses_ego else None
        head_in = N_FACTORS
        if self.cnn1 is not None:
            head_in += w["cnn1"][-1] * SPATIAL
        if self.cnn2 is not None:
            head_in += w["cnn2"][-1] * SPATIAL
        self.head_in = head_in
        layers = []
        for width in w["fc"]:
            layers += [Dense(head_in, width, rng), ReLU()]
            head_in = width
        layers.append(Dense(head_in, N_CLASSES, rng))
        self.head = Sequential(layers)

    # -- parameters -------------------------------------------------------
    def _parts(self):
        return [(name, net) for name, net in (("cnn1", self.cnn1), ("cnn2", self.cnn2), ("head", self.head))
                if net is not None]

    @property
    def params(self):
        return [p for _, net in self._parts() for p in net.params]

    @property
    def grads(self):
        return [g for _, net in self._parts() for g in net.grads]

    def named_params(self):
        return [pair for name, net in self._parts() for pair in net.named_params(f"{name}.")]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- forward / backward on normalised inputs --------------------------
    def logits(self, surrounding, ego, factors) -> np.ndarray:
        parts = []
        if self.cnn1 is not None:
            parts.append(self.cnn1.forward(surrounding))
        if self.cnn2 is not None:
            parts.append(self.cnn2.forward(ego))
        parts.append(np.asarray(factors, dtype=np.float64).reshape(len(factors), -1))
        x = np.concatenate(parts, axis=1)
        if x.shape[1] != self.head_in:
            raise ShapeError(f"head expects {self.head_in} inputs, got {x.shape[1]}")
        return self.head.forward(x)

    def backward(self, dlogits) -> None:
        dx = self.head.backward(dlogits)
        col = 0
        for net in (self.cnn1, self.cnn2):
            if net is None:
                continue
            width = net.layers[-3].out_channels * SPATIAL
            net.backward(dx[:, col:col + width])
            col += width

    def loss(self, inputs, labels) -> float:
        probs = softmax(self.logits(*inputs))
        return cross_entropy(probs, one_hot(labels, N_CLASSES))

    def loss_and_grads(self, inputs, labels):
        probs = softmax(self.logits(*inputs))
        y = one_hot(labels, N_CLASSES)
        self.backward(softmax_cross_entropy_grad(probs, y))
        return cross_entropy(probs, y), [g.copy() for g in self.grads]

    # -- inference on raw case rows -----------------------------------------
    def prepare(self, features: np.ndarray):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != CASE_WIDTH:
            raise ShapeError(f"case rows must be (n, {CASE_WIDTH}), got {features.shape}")
        return split_inputs(self.normalizer.apply(features))

    def predict_proba(self, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if len(features) == 0:
            return np.zeros((0, N_CLASSES))
        out = []
        for lo in range(0, len(features), batch_size):
            out.append(softmax(self.logits(*self.prepare(features[lo:lo + batch_size]))))
        return np.concatenate(out)

    def predict_cases(self, cases: CaseSet | np.ndarray, apply_safety_mask: bool | None = None):
        """``(probabilities, labels, masked)`` for many case rows."""
        features = cases.features if isinstance(cases, CaseSet) else np.asarray(cases, dtype=np.float64)
        mask = self.config.safety_mask_default if apply_safety_mask is None else apply_safety_mask
        probs = self.predict_proba(features)
        masked = np.zeros(len(probs), dtype=bool)
        if mask and len(probs):
            sur = split_inputs(features)[0]
            probs, masked = apply_mask(probs, np.any(sur[:, _ASL] != 0, axis=(1, 2)),
                                       np.any(sur[:, _ASR] != 0, axis=(1, 2)))
        return probs, np.argmax(probs, axis=1), masked


def apply_mask(probs: np.ndarray, asl: np.ndarray, asr: np.ndarray):
    """Zero Left where an ASL vehicle exists and Right where an ASR vehicle exists, then renormalise."""
    probs = np.array(probs, dtype=np.float64, copy=True)
    asl, asr = np.asarray(asl, dtype=bool), np.asarray(asr, dtype=bool)
    probs[asl, Label.LEFT] = 0.0
    probs[asr, Label.RIGHT] = 0.0
    masked = asl | asr
    # unmasked rows stay bit-identical to the raw softmax
    probs[masked] /= probs[masked].sum(axis=1, keepdims=True)
    return probs, masked


def build(config: ModelConfig | None = None) -> Model:
    return Model(config or ModelConfig())


def predict(model: Model, bundle: FeatureBundle, apply_safety_mask: bool | None = None) -> Decision:
    if np.shape(bundle.surrounding) != (N_SURROUND,) + DOP_SHAPE or np.shape(bundle.ego) != DOP_SHAPE \
            or np.shape(bundle.factors) != (N_FACTORS,):
        raise ShapeError("feature bundle does not have the 7x8x7 / 8x7 / 10 layout")
    probs, labels, masked = model.predict_cases(flatten_bundle(bundle)[None], apply_safety_mask)
    return Decision(tuple(float(p) for p in probs[0]), Label(int(labels[0])), bool(masked[0]))


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)


def train(model: Model, train_set: CaseSet, config: ModelConfig | None = None,
          progress: Callable[[int, float], None] | None = None, fit_normalizer: bool = True) -> TrainResult:
    """Minibatch Adam on softmax cross-entropy; returns the per-epoch mean loss."""
    config = config or model.config
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if fit_normalizer:
        model.normalizer = Normalizer.fit(train_set.features)
    sur, ego, fac = model.prepare(train_set.features)
    labels = train_set.labels
    optimizer = Adam(model.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    n = len(labels)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, _ = _step(model, (sur[idx], ego[idx], fac[idx]), labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            optimizer.step(model.params, model.grads)
            total += loss * len(idx)
        history.append(total / n)
        if progress is not None:
            progress(epoch, history[-1])
    return TrainResult(model, history)


def _step(model: Model, inputs, labels):
    probs = softmax(model.logits(*inputs))
    y = one_hot(labels, N_CLASSES)
    loss = cross_entropy(probs, y)
    model.backward(softmax_cross_entropy_grad(probs, y))
    return loss, probs


def save(model: Model, path) -> None:
    tensors = [(name, name.split(".")[2], p) for name, p in model.named_params()]
    meta = {"model": "dsadlc", "config": model.config.to_dict(), "head_in": model.head_in}
    write_weight_file(path, meta, tensors, {"mean": model.normalizer.mean, "std": model.normalizer.std})


def load(path) -> Model:
    meta, tensors, norm = read_weight_file(path)
    if meta.get("model") != "dsadlc":
        raise FormatError(f"{path}: not a lane-change decision model")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (ConfigError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config: {exc}") from None
    model = Model(config, Normalizer(norm["mean"], norm["std"]))
    named = model.named_params()
    if [n for n, _ in named] != [n for n, _, _ in tensors]:
        raise FormatError(f"{path}: tensor table does not match the {config.ablation.title} architecture")
    for (_, p), (name, _, arr) in zip(named, tensors):
        if p.shape != arr.shape:
            raise FormatError(f"{path}: tensor {name} has shape {arr.shape}, expected {p.shape}")
        p[...] = arr
    return model
