"""A small deterministic neural-network engine on numpy (float64).

Layers operate on batches: convolutions take ``(N, C, H, W)`` and keep the
spatial size ("same" zero padding, the extra row/column of an even kernel
going to the bottom/right), dense layers take ``(N, features)``.  Every
layer caches what its backward pass needs during ``forward``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

WEIGHT_MAGIC = b"DSADLC-W"
WEIGHT_FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _as_batch(x: np.ndarray, ndim: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")
    return x, False


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix ``(N*H*W, k*k*C)``; columns ordered (row offset, col offset, channel)."""
    n, c, h, w = x.shape
    before, _ = _same_padding(k)
    xp = np.zeros((n, h + k - 1, w + k - 1, c))
    xp[:, before:before + h, before:before + w] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(n * h * w, k * k * c)


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    o, c, k, _ = kernels.shape
    return kernels.transpose(2, 3, 1, 0).reshape(k * k * c, o)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 2-D cross-correlation of ``x`` with ``kernels`` (O, C, k, k)."""
    xb, single = _as_batch(x, 4)
    out, _ = _conv_forward(xb, kernels, bias)
    return out[0] if single else out


def _conv_forward(x, kernels, bias):
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be (out, in, k, k), got {kernels.shape}")
    o, c, k, _ = kernels.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"input has {cx} channels, kernels expect {c}")
    if np.shape(bias) != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {np.shape(bias)}")
    if k < 1 or h < 1 or w < 1:
        raise ShapeError(f"kernel size {k} does not fit a {h}x{w} input")
    cols = _im2col(x, k)
    out = cols @ _kernel_matrix(kernels) + bias
    return out.reshape(n, h, w, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape, kernels: np.ndarray, input_grad: bool = True):
    """Gradients ``(dx, dkernels, dbias)`` of a same-padded convolution.

    ``dx`` is None when ``input_grad`` is false.
    """
    n, c, h, w = x_shape
    o, _, k, _ = kernels.shape
    d = dout.transpose(0, 2, 3, 1).reshape(n * h * w, o)
    dk = (cols.T @ d).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    db = d.sum(axis=0)
    if not input_grad:
        return None, dk, db
    dcols = (d @ _kernel_matrix(kernels).T).reshape(n, h, w, k, k, c)
    before, _ = _same_padding(k)
    dxp = np.zeros((n, h + k - 1, w + k - 1, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w] += dcols[:, :, :, i, j]
    return dxp[:, before:before + h, before:before + w].transpose(0, 3, 1, 2), dk, db


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[1] or np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"dense layer {weight.shape} cannot take input {x.shape}")
    return x @ weight.T + bias


def fc_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, n_classes: int = 3) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(probabilities: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of ``-sum_c y_c log p_c``."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and targets {y.shape} differ in shape")
    p2 = p.reshape(-1, p.shape[-1])
    y2 = y.reshape(-1, y.shape[-1])
    per_sample = -(y2 * np.log(np.maximum(p2, PROB_FLOOR))).sum(axis=1)
    return float(per_sample.mean())


def softmax_cross_entropy_grad(probabilities: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the logits."""
    return (probabilities - targets) / probabilities.shape[0]


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    params: list
    grads: list
    param_names: tuple = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": type(self).__name__}


class Conv2D(Layer):
    param_names = ("kernels", "bias")

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng=None, input_grad=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.input_grad = input_grad
        self.params = [he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
                       np.zeros(out_channels)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        out, self._cols = _conv_forward(x, *self.params)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self._cols, self._x_shape, self.params[0], self.input_grad)
        self.grads[0][...] = dk
        self.grads[1][...] = db
        return dx

    def spec(self):
        return {"type": "Conv2D", "in": self.in_channels, "out": self.out_channels, "k": self.kernel_size}


class Dense(Layer):
    param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params = [he_uniform(rng, (out_features, in_features), in_features), np.zeros(out_features)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        self._x = x
        return fc_forward(x, *self.params)

    def backward(self, dout):
        dx, dw, db = fc_backward(dout, self._x, self.params[0])
        self.grads[0][...] = dw
        self.grads[1][...] = db
        return dx

    def spec(self):
        return {"type": "Dense", "in": self.in_features, "out": self.out_features}


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = [], []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Flatten(Layer):
    def __init__(self):
        self.params, self.grads = [], []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential(Layer):
    """Layers applied in order; used both as a branch and as a classifier."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def named_params(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in zip(layer.param_names, layer.params):
                out.append((f"{prefix}{i}.{type(layer).__name__}.{name}", p))
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def spec(self):
        return {"type": "Sequential", "layers": [layer.spec() for layer in self.layers]}

    # classifier interface used by gradient_check
    def loss(self, x, labels) -> float:
        return cross_entropy(softmax(self.forward(x)), one_hot(labels, self._n_out()))

    def loss_and_grads(self, x, labels):
        probs = softmax(self.forward(x))
        y = one_hot(labels, probs.shape[-1])
        self.backward(softmax_cross_entropy_grad(probs, y))
        return cross_entropy(probs, y), [g.copy() for g in self.grads]

    def _n_out(self):
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_features
            if isinstance(layer, Conv2D):
                return layer.out_channels
        raise ShapeError("network has no output layer")


class Adam:
    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        """Update ``params`` in place."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ShapeError("parameter, gradient and state lists differ in length")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam):
    state.step(params, grads)
    return params


def _relu_layers(net) -> list:
    if isinstance(net, ReLU):
        return [net]
    if hasattr(net, "layers"):
        return [r for layer in net.layers for r in _relu_layers(layer)]
    if hasattr(net, "_parts"):
        return [r for _, part in net._parts() for r in _relu_layers(part)]
    return []


def _masks(relus) -> tuple:
    return tuple(r._mask.copy() for r in relus)


@dataclass
class GradientReport:
    """Per-parameter-array results of a finite-difference check."""

    errors: dict
    checked: dict
    skipped: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def skipped_fraction(self) -> float:
        total = sum(self.checked.values()) + sum(self.skipped.values())
        return sum(self.skipped.values()) / total if total else 0.0


def gradient_report(net, inputs, labels, epsilon: float = 1e-4, names=None,
                    skip_kinks: bool = True) -> GradientReport:
    """Compare analytic gradients with central differences, entry by entry.

    The relative error of an entry is ``|fd - an| / max(|fd|, |an|, 1e-8)``.
    With ``skip_kinks`` an entry is skipped when the two perturbed passes
    switch any ReLU on or off: the loss is not differentiable inside that
    stencil, so the difference quotient says nothing about the gradient.
    ``net`` must provide ``params`` (arrays updated in place), ``loss`` and
    ``loss_and_grads``.
    """
    params = net.params
    _, analytic = net.loss_and_grads(inputs, labels)
    names = names or [f"param{i}" for i in range(len(params))]
    relus = _relu_layers(net) if skip_kinks else []
    errors, checked, skipped = {}, {}, {}
    for name, p, g in zip(names, params, analytic):
        worst, n_ok, n_skip = 0.0, 0, 0
        flat = p.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = net.loss(inputs, labels)
            up_masks = _masks(relus)
            flat[i] = orig - epsilon
            down = net.loss(inputs, labels)
            flat[i] = orig
            if relus and any(not np.array_equal(a, b) for a, b in zip(up_masks, _masks(relus))):
                n_skip += 1
                continue
            fd = (up - down) / (2.0 * epsilon)
            an = g_flat[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
            n_ok += 1
        errors[name], checked[name], skipped[name] = worst, n_ok, n_skip
    return GradientReport(errors, checked, skipped)


def gradient_errors(net, inputs, labels, epsilon: float = 1e-4, names=None, skip_kinks: bool = True) -> dict:
    """Max relative error per parameter array (see :func:`gradient_report`)."""
    return gradient_report(net, inputs, labels, epsilon, names, skip_kinks).errors


def gradient_check(net, inputs, labels, epsilon: float = 1e-4, skip_kinks: bool = True) -> float:
    return gradient_report(net, inputs, labels, epsilon, skip_kinks=skip_kinks).max_error


def write_weight_file(path, meta: dict, tensors, norm: dict) -> None:
    """Serialise named tensors and normalisation vectors.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header
    (meta, tensor table, normalisation table), little-endian float64
    payload in table order, SHA-256 of everything before it.
    """
    tensors = [(name, kind, np.ascontiguousarray(a, dtype="<f8")) for name, kind, a in tensors]
    norm = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in norm.items()]
    header = {
        "meta": meta,
        "tensors": [{"name": n, "type": k, "shape": list(a.shape)} for n, k, a in tensors],
        "norm": [{"name": n, "shape": list(a.shape)} for n, a in norm],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(WEIGHT_MAGIC + struct.pack("<II", WEIGHT_FORMAT_VERSION, len(head)) + head)
    for _, _, a in tensors:
        body += a.tobytes()
    for _, a in norm:
        body += a.tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def read_weight_file(path):
    """Inverse of :func:`write_weight_file`: ``(meta, [(name, type, array)], {name: array})``."""
    data = Path(path).read_bytes()
    fixed = len(WEIGHT_MAGIC) + 8
    if len(data) < fixed + 32 or data[:len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a weight file or truncated")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, head_len = struct.unpack("<II", data[len(WEIGHT_MAGIC):fixed])
    if version != WEIGHT_FORMAT_VERSION:
        raise FormatError(f"{path}: weight format version {version}, expected {WEIGHT_FORMAT_VERSION}")
    try:
        header = json.loads(data[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    offset = fixed + head_len
    payload_end = len(data) - 32

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > payload_end:
            raise FormatError(f"{path}: payload shorter than the header declares")
        arr = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        return arr

    tensors = [(t["name"], t["type"], take(tuple(t["shape"]))) for t in header["tensors"]]
    norm = {t["name"]: take(tuple(t["shape"])) for t in header["norm"]}
    if offset != payload_end:
        raise FormatError(f"{path}: {payload_end - offset} unexpected trailing payload bytes")
    return header["meta"], tensors, norm
