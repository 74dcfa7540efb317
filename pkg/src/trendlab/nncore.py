"""Small differentiable classifiers written directly against numpy.

Models are a flat list of layers (dense, conv2d, relu, flatten, residual).
Every layer knows its own forward and vector-Jacobian product, which gives
gradients with respect to both parameters and inputs. Everything runs in
float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, InputShapeError, NumericError
from .quant import QuantConfig, quantize_activation, quantize_input, quantize_tensor

logger = logging.getLogger(__name__)

FAMILIES = ("plain-feedforward", "micro-residual")
LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "residual")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    ``residual`` wraps two inner layers of width ``fan_in`` with an identity
    skip; its inner layers are 3x3-style convolutions when ``kernel > 0`` and
    dense layers otherwise.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out, "kernel": self.kernel}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple
    layers: tuple
    classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(
            self, "layers", tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        )
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.classes < 2:
            raise ValueError("a classifier needs at least two classes")
        out = _trace_shapes(self.input_shape, self.layers)
        if out != (self.classes,):
            raise ValueError(f"network output shape {out} does not match {self.classes} classes")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "classes": self.classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            classes=d["classes"],
            seed=d.get("seed", 0),
        )


def _trace_shapes(shape, layers):
    shape = tuple(shape)
    for i, l in enumerate(layers):
        if l.kind not in LAYER_KINDS:
            raise ValueError(f"layer {i}: unknown kind {l.kind!r}")
        if l.kind == "dense":
            if len(shape) != 1 or shape[0] != l.fan_in:
                raise ValueError(f"layer {i}: dense fan_in {l.fan_in} does not match incoming shape {shape}")
            shape = (l.fan_out,)
        elif l.kind == "conv2d":
            if len(shape) != 3 or shape[0] != l.fan_in:
                raise ValueError(f"layer {i}: conv2d fan_in {l.fan_in} does not match incoming shape {shape}")
            if l.kernel < 1 or l.kernel % 2 == 0:
                raise ValueError(f"layer {i}: conv2d kernel must be odd and positive")
            shape = (l.fan_out,) + shape[1:]
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind == "residual":
            if l.fan_in != l.fan_out or shape[0] != l.fan_in:
                raise ValueError(f"layer {i}: residual block must map {shape[0]} channels onto itself")
            if l.kernel > 0 and (len(shape) != 3 or l.kernel % 2 == 0):
                raise ValueError(f"layer {i}: convolutional residual needs image input and an odd kernel")
            if l.kernel == 0 and len(shape) != 1:
                raise ValueError(f"layer {i}: dense residual needs flat input")
    return shape


def plain_spec(input_shape=(1, 8, 8), classes=10, seed=0, channels=8, hidden=64) -> ModelSpec:
    """conv-conv-dense stack."""
    c, h, w = input_shape
    return ModelSpec(
        family="plain-feedforward",
        input_shape=input_shape,
        layers=(
            LayerSpec("conv2d", c, channels, 3),
            LayerSpec("relu"),
            LayerSpec("conv2d", channels, channels, 3),
            LayerSpec("relu"),
            LayerSpec("flatten"),
            LayerSpec("dense", channels * h * w, hidden),
            LayerSpec("relu"),
            LayerSpec("dense", hidden, classes),
        ),
        classes=classes,
        seed=seed,
    )


def residual_spec(input_shape=(1, 8, 8), classes=10, seed=0, channels=8, hidden=64) -> ModelSpec:
    """Same stack as :func:`plain_spec` with the second conv pair wrapped in a skip."""
    c, h, w = input_shape
    return ModelSpec(
        family="micro-residual",
        input_shape=input_shape,
        layers=(
            LayerSpec("conv2d", c, channels, 3),
            LayerSpec("relu"),
            LayerSpec("residual", channels, channels, 3),
            LayerSpec("flatten"),
            LayerSpec("dense", channels * h * w, hidden),
            LayerSpec("relu"),
            LayerSpec("dense", hidden, classes),
        ),
        classes=classes,
        seed=seed,
    )


def dense_spec(n_in, classes, hidden=(), seed=0, residual=False) -> ModelSpec:
    """Dense-only stack on flat inputs; ``residual`` adds one skip block per hidden layer."""
    layers = []
    width = n_in
    for h in hidden:
        layers += [LayerSpec("dense", width, h), LayerSpec("relu")]
        width = h
        if residual:
            layers.append(LayerSpec("residual", h, h, 0))
    layers.append(LayerSpec("dense", width, classes))
    return ModelSpec(
        family="micro-residual" if residual else "plain-feedforward",
        input_shape=(n_in,),
        layers=tuple(layers),
        classes=classes,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _col2im(dcols, shape, k):
    n, c, h, w = shape
    p = k // 2
    dcols = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + w]


def _dense_fwd(w, b, x):
    return x @ w.T + b, x


def _dense_bwd(w, x, dy):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _conv_fwd(w, b, x):
    f, c, k, _ = w.shape
    n, _, h, wd = x.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2), (cols, x.shape)


def _conv_bwd(w, cache, dy):
    cols, xshape = cache
    f, c, k, _ = w.shape
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dyr.T @ cols).reshape(w.shape)
    db = dyr.sum(axis=0)
    dx = _col2im(dyr @ w.reshape(f, -1), xshape, k)
    return dx, dw, db


def _relu_fwd(z, abits):
    a = np.maximum(z, 0.0)
    return quantize_activation(a, abits), z > 0


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_params(spec: ModelSpec) -> dict:
    """Fan-in scaled uniform weights, zero biases, seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for i, l in enumerate(spec.layers):
        if l.kind == "dense":
            params[f"L{i}.weight"] = _he_uniform(rng, (l.fan_out, l.fan_in), l.fan_in)
            params[f"L{i}.bias"] = np.zeros(l.fan_out)
        elif l.kind == "conv2d":
            fan = l.fan_in * l.kernel * l.kernel
            params[f"L{i}.weight"] = _he_uniform(rng, (l.fan_out, l.fan_in, l.kernel, l.kernel), fan)
            params[f"L{i}.bias"] = np.zeros(l.fan_out)
        elif l.kind == "residual":
            for j in (1, 2):
                if l.kernel > 0:
                    shape = (l.fan_in, l.fan_in, l.kernel, l.kernel)
                    fan = l.fan_in * l.kernel * l.kernel
                else:
                    shape = (l.fan_in, l.fan_in)
                    fan = l.fan_in
                params[f"L{i}.weight{j}"] = _he_uniform(rng, shape, fan)
                params[f"L{i}.bias{j}"] = np.zeros(l.fan_in)
    return params


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A spec, its parameters and how it is quantized.

    ``bounds`` is the valid input box ``(lo, hi)`` in normalized units,
    each broadcastable to ``spec.input_shape``; attacks clamp into it.
    """

    spec: ModelSpec
    params: dict
    quant: QuantConfig | None = None
    bounds: tuple | None = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def build(cls, spec: ModelSpec, quant=None, bounds=None) -> Model:
        return cls(spec=spec, params=init_params(spec), quant=quant, bounds=_as_bounds(bounds))

    # quantization knobs --------------------------------------------------
    def _bits(self, kind):
        if self.quant is not None and self.quant.kind == kind:
            return self.quant.bits
        return None

    @property
    def batch_dependent(self) -> bool:
        """True when a sample's prediction depends on the rest of its minibatch."""
        return self._bits("input") is not None

    def with_quant(self, quant) -> Model:
        return replace(self, quant=quant, provenance=dict(self.provenance))

    def copy(self) -> Model:
        return Model(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            quant=self.quant,
            bounds=self.bounds,
            provenance=copy.deepcopy(self.provenance),
        )

    def effective_params(self) -> dict:
        """Parameters as the forward pass sees them (weights quantized if configured)."""
        wbits = self._bits("weight")
        return {k: (quantize_tensor(v, wbits) if ".weight" in k else v) for k, v in self.params.items()}

    def clip(self, x: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return x
        return np.clip(x, self.bounds[0], self.bounds[1])

    @property
    def model_id(self) -> str:
        return self.provenance.get("id") or self.content_hash()[:12]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(self.quant.to_dict() if self.quant else None).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()

    # forward / backward ----------------------------------------------------
    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.spec.input_shape:
            raise InputShapeError(f"expected batch of shape (N, {self.spec.input_shape}), got {x.shape}")
        return x

    def _forward(self, x, keep=False):
        x = self._check_input(x)
        p = self.effective_params()
        abits = self._bits("activation")
        ibits = self._bits("input")
        if ibits is not None:
            x = quantize_input(x, ibits)
        caches = []
        h = x
        for i, l in enumerate(self.spec.layers):
            if l.kind == "dense":
                h, c = _dense_fwd(p[f"L{i}.weight"], p[f"L{i}.bias"], h)
            elif l.kind == "conv2d":
                h, c = _conv_fwd(p[f"L{i}.weight"], p[f"L{i}.bias"], h)
            elif l.kind == "relu":
                h, c = _relu_fwd(h, abits)
            elif l.kind == "flatten":
                c = h.shape
                h = h.reshape(h.shape[0], -1)
            else:
                h, c = self._residual_fwd(p, i, l, h, abits)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite output from layer {i} ({l.kind})", layer=i)
            if keep:
                caches.append(c)
        return h, (caches, p)

    @staticmethod
    def _residual_fwd(p, i, l, x, abits):
        fwd = _conv_fwd if l.kernel > 0 else _dense_fwd
        z1, c1 = fwd(p[f"L{i}.weight1"], p[f"L{i}.bias1"], x)
        a1, m1 = _relu_fwd(z1, abits)
        z2, c2 = fwd(p[f"L{i}.weight2"], p[f"L{i}.bias2"], a1)
        out, m2 = _relu_fwd(x + z2, abits)
        return out, (c1, m1, c2, m2)

    def _backward(self, cache, dlogits, want_params=True):
        caches, p = cache
        grads = {}
        d = dlogits
        for i in range(len(self.spec.layers) - 1, -1, -1):
            l = self.spec.layers[i]
            c = caches[i]
            if l.kind == "dense":
                d, gw, gb = _dense_bwd(p[f"L{i}.weight"], c, d)
                if want_params:
                    grads[f"L{i}.weight"], grads[f"L{i}.bias"] = gw, gb
            elif l.kind == "conv2d":
                d, gw, gb = _conv_bwd(p[f"L{i}.weight"], c, d)
                if want_params:
                    grads[f"L{i}.weight"], grads[f"L{i}.bias"] = gw, gb
            elif l.kind == "relu":
                d = d * c
            elif l.kind == "flatten":
                d = d.reshape(c)
            else:
                c1, m1, c2, m2 = c
                bwd = (lambda w, cc, dy: _conv_bwd(w, cc, dy)) if l.kernel > 0 else _dense_bwd
                dz = d * m2
                da1, gw2, gb2 = bwd(p[f"L{i}.weight2"], c2, dz)
                dz1 = da1 * m1
                dx, gw1, gb1 = bwd(p[f"L{i}.weight1"], c1, dz1)
                d = dz + dx
                if want_params:
                    grads.update(
                        {f"L{i}.weight1": gw1, f"L{i}.bias1": gb1, f"L{i}.weight2": gw2, f"L{i}.bias2": gb2}
                    )
        # input quantizer backward is the identity
        return d, grads

    def forward(self, x) -> np.ndarray:
        return self._forward(x)[0]

    __call__ = forward

    def predict(self, x, batch_size=None) -> np.ndarray:
        if batch_size is None:
            return np.argmax(self.forward(x), axis=1)
        x = np.asarray(x)
        return np.concatenate(
            [np.argmax(self.forward(x[s : s + batch_size]), axis=1) for s in range(0, len(x), batch_size)]
        ) if len(x) else np.zeros(0, dtype=int)

    def input_vjp(self, x, dlogits) -> np.ndarray:
        """Pull ``dlogits`` back to the input: returns ``J(x)^T dlogits`` per sample."""
        logits, cache = self._forward(x, keep=True)
        return self._backward(cache, np.asarray(dlogits, dtype=np.float64), want_params=False)[0]

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy over the batch and its parameter gradients."""
        logits, cache = self._forward(x, keep=True)
        losses, dlogits = softmax_xent(logits, labels)
        _, grads = self._backward(cache, dlogits / len(labels))
        return float(losses.mean()), grads


def _as_bounds(bounds):
    if bounds is None:
        return None
    lo, hi = bounds
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Per-sample cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    losses = lse - z[rows, labels]
    d = softmax(logits)
    d[rows, labels] -= 1.0
    return losses, d


def _check_labels(model, labels, n):
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (n,):
        raise InputShapeError(f"need {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= model.spec.classes):
        raise ValueError("label outside the model's class range")
    return labels


def forward(model: Model, batch) -> np.ndarray:
    return model.forward(batch)


def input_gradient(model: Model, batch, labels) -> np.ndarray:
    """Gradient of each sample's own cross-entropy loss with respect to its input.

    Losses are summed, not averaged, so a sample's gradient does not depend on
    the batch it travels in.
    """
    batch = model._check_input(batch)
    labels = _check_labels(model, labels, len(batch))
    logits, cache = model._forward(batch, keep=True)
    losses, dlogits = softmax_xent(logits, labels)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss at the output layer", layer=len(model.spec.layers) - 1)
    return model._backward(cache, dlogits, want_params=False)[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    milestones: tuple = (0.6, 0.8)
    decay: float = 10.0
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestone fractions must lie in (0, 1) and strictly increase")
        if not self.decay > 1:
            raise ValueError("decay factor must exceed 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "milestones": list(self.milestones),
            "decay": self.decay,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force during 1-based ``epoch``.

    The rate drops by ``cfg.decay`` once per milestone the run has completed,
    so with 100 epochs and milestones (0.6, 0.8) epoch 61 is the first at 1e-3.
    """
    passed = sum(epoch > round(m * cfg.epochs) for m in cfg.milestones)
    return cfg.lr / cfg.decay**passed


class _SGD:
    def __init__(self, cfg):
        self.cfg = cfg
        self.buf = {}

    def step(self, params, grads, lr):
        m, wd = self.cfg.momentum, self.cfg.weight_decay
        for k, g in grads.items():
            g = g + wd * params[k]
            v = self.buf.get(k)
            v = g if v is None else m * v + g
            self.buf[k] = v
            params[k] = params[k] - lr * v


class _Adam:
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, cfg):
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, lr):
        self.t += 1
        for k, g in grads.items():
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def train(model: Model, train_set, val_set, cfg: TrainConfig) -> Model:
    """Train a copy of ``model`` and return its best-validation snapshot.

    ``train_set`` and ``val_set`` expose ``x`` and ``y`` arrays. After every
    epoch the model is scored on the validation set; the snapshot with the
    highest accuracy wins, the earliest one on ties.
    """
    if len(train_set.y) == 0 or len(val_set.y) == 0:
        raise DataError("training and validation sets must be non-empty")
    m = model.copy()
    x = np.asarray(train_set.x, dtype=np.float64)
    y = np.asarray(train_set.y, dtype=int)
    rng = np.random.default_rng(cfg.seed)
    opt = _SGD(cfg) if cfg.optimizer == "sgd" else _Adam(cfg)
    best_acc, _ = evaluate(m, val_set)
    best = {k: v.copy() for k, v in m.params.items()}
    best_epoch = 0
    lr_trace, val_trace = [], []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        lr_trace.append(lr)
        order = rng.permutation(len(y))
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            try:
                loss, grads = m.loss_and_grads(x[idx], y[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}", layer=exc.layer, epoch=epoch) from exc
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss in epoch {epoch}", epoch=epoch)
            opt.step(m.params, grads, lr)
        try:
            acc, _ = evaluate(m, val_set)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}", layer=exc.layer, epoch=epoch) from exc
        val_trace.append(acc)
        logger.debug("epoch %d lr %.1e val acc %.4f", epoch, lr, acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best = {k: v.copy() for k, v in m.params.items()}
    m.params = best
    m.provenance.update(
        {
            "optimizer": cfg.optimizer,
            "train_seed": cfg.seed,
            "init_seed": m.spec.seed,
            "epochs_trained": cfg.epochs,
            "best_epoch": best_epoch,
            "val_accuracy": best_acc,
            "lr_trace": lr_trace,
            "val_trace": val_trace,
        }
    )
    return m


def evaluate(model: Model, dataset, batch_size=256):
    """Accuracy and per-image correctness mask."""
    y = np.asarray(dataset.y, dtype=int)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred = model.predict(dataset.x, batch_size=batch_size)
    mask = pred == y
    return float(mask.mean()), mask
