"""Toy crowd-density regressors and the squared-error training loop.

Three architecture families, each producing a density map at 1/4 of the
input resolution in both spatial dims:

* ``multi_column``: parallel columns with distinct kernel sizes, fused by a
  1x1 convolution.
* ``dilated``: a short front end followed by dilated 3x3 convolutions.
* ``context``: front-end features contrasted against average-pooled copies
  at several scales (input sides must be divisible by 4 * max(scales)).

Every model ends in a clamp at zero, so predicted maps are nonnegative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .io import MODEL_MAGIC, read_container, write_container
from .scenes import Scene

log = logging.getLogger(__name__)

ARCHS = ("multi_column", "dilated", "context")
DOWNSAMPLE = 4
TRAIN_CHUNK = 8


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    seed: int = 0
    channels: int = 3
    widths: tuple[int, ...] = ()
    kernels: tuple[int, ...] = ()
    dilation: int = 2
    scales: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        defaults = {
            "multi_column": ((4, 6, 8), (7, 5, 3)),
            "dilated": ((8, 16), (3,)),
            "context": ((8, 16), (3,)),
        }
        if self.arch not in defaults:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        dw, dk = defaults[self.arch]
        if not self.widths:
            object.__setattr__(self, "widths", dw)
        if not self.kernels:
            object.__setattr__(self, "kernels", dk)
        self.validate()

    def validate(self):
        if self.channels < 1 or any(w < 1 for w in self.widths):
            raise ValueError("channel counts must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernels}")
        if self.arch == "multi_column":
            if len(self.widths) < 2 or len(self.widths) != len(self.kernels):
                raise ValueError("multi_column needs >= 2 columns with one width per kernel size")
            if len(set(self.kernels)) != len(self.kernels):
                raise ValueError("multi_column kernel sizes must be distinct")
        elif self.arch == "dilated":
            if len(self.widths) != 2 or self.dilation < 2:
                raise ValueError("dilated needs widths (w1, w2) and dilation >= 2")
        elif self.arch == "context":
            if len(self.widths) != 2 or len(self.scales) < 2 or min(self.scales) < 2:
                raise ValueError("context needs widths (w1, w2) and >= 2 pooling scales >= 2")

    def to_header(self) -> dict[str, str]:
        return {
            "arch": self.arch,
            "seed": str(self.seed),
            "channels": str(self.channels),
            "widths": ",".join(map(str, self.widths)),
            "kernels": ",".join(map(str, self.kernels)),
            "dilation": str(self.dilation),
            "scales": ",".join(map(str, self.scales)),
        }

    @classmethod
    def from_header(cls, h: dict[str, str]) -> "ModelSpec":
        ints = lambda s: tuple(int(v) for v in s.split(",") if v)  # noqa: E731
        return cls(h["arch"], int(h["seed"]), int(h["channels"]), ints(h["widths"]),
                   ints(h["kernels"]), int(h["dilation"]), ints(h["scales"]))


def param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    c = spec.channels
    out: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, o, i, k):
        out.append((f"{name}.w", (o, i, k, k)))
        out.append((f"{name}.b", (o,)))

    if spec.arch == "multi_column":
        for ci, (w, k) in enumerate(zip(spec.widths, spec.kernels)):
            conv(f"col{ci}.conv1", w, c, k)
            conv(f"col{ci}.conv2", w, w, k)
            conv(f"col{ci}.conv3", w, w, k)
        conv("fuse", 1, sum(spec.widths), 1)
    elif spec.arch == "dilated":
        w1, w2 = spec.widths
        conv("conv1", w1, c, 3)
        conv("conv2", w2, w1, 3)
        conv("dil1", w2, w2, 3)
        conv("dil2", w2, w2, 3)
        conv("out", 1, w2, 1)
    else:
        w1, w2 = spec.widths
        conv("conv1", w1, c, 3)
        conv("conv2", w2, w1, 3)
        conv("conv3", w2, w2, 3)
        for s in spec.scales:
            conv(f"ctx{s}", w2, w2, 1)
        conv("fuse", w2, w2 * (1 + len(spec.scales)), 1)
        conv("out", 1, w2, 1)
    return out


def param_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for _, s in param_shapes(spec)))


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def forward(self, x, params: Optional[dict] = None):
        """Density map for x of shape (C,H,W) or (N,C,H,W).

        ``params`` may map names to tape variables (for training); by default
        the stored arrays are used as constants.
        """
        p = self.params if params is None else params
        xv = T.value_of(x)
        if xv.ndim not in (3, 4) or xv.shape[-3] != self.spec.channels:
            raise ValueError(
                f"expected input with {self.spec.channels} channels as (C,H,W) or (N,C,H,W), got {xv.shape}"
            )
        h, w = xv.shape[-2:]
        mult = DOWNSAMPLE * (max(self.spec.scales) if self.spec.arch == "context" else 1)
        if h % mult or w % mult:
            raise ValueError(f"input height/width {h}x{w} must be divisible by {mult} for {self.spec.arch}")
        return _FORWARD[self.spec.arch](self.spec, p, x)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


def _conv(p, name, x, pad=None, dilation=1):
    wgt = p[f"{name}.w"]
    k = T.value_of(wgt).shape[-1]
    if pad is None:
        pad = dilation * (k // 2)
    return T.conv2d(x, wgt, p[f"{name}.b"], dilation=dilation, padding=pad)


def _forward_multi_column(spec, p, x):
    # shared 2x stem keeps the large-kernel columns off the full-res grid
    x = T.avg_pool2d(x, 2)
    feats = []
    for ci in range(len(spec.widths)):
        h = T.avg_pool2d(T.relu(_conv(p, f"col{ci}.conv1", x)), 2)
        h = T.relu(_conv(p, f"col{ci}.conv2", h))
        feats.append(T.relu(_conv(p, f"col{ci}.conv3", h)))
    fused = _conv(p, "fuse", T.concat(feats, axis=-3))
    return _squeeze_channel(T.relu(fused))


def _forward_dilated(spec, p, x):
    h = T.avg_pool2d(T.relu(_conv(p, "conv1", x)), 2)
    h = T.avg_pool2d(T.relu(_conv(p, "conv2", h)), 2)
    h = T.relu(_conv(p, "dil1", h, dilation=spec.dilation))
    h = T.relu(_conv(p, "dil2", h, dilation=spec.dilation))
    return _squeeze_channel(T.relu(_conv(p, "out", h)))


def _forward_context(spec, p, x):
    h = T.avg_pool2d(T.relu(_conv(p, "conv1", x)), 2)
    h = T.avg_pool2d(T.relu(_conv(p, "conv2", h)), 2)
    f = T.relu(_conv(p, "conv3", h))
    fh, fw = T.value_of(f).shape[-2:]
    parts = [f]
    for s in spec.scales:
        ctx = T.relu(_conv(p, f"ctx{s}", T.avg_pool2d(f, s)))
        # contrast between local features and their pooled surroundings
        parts.append(T.add(f, T.mul(T.bilinear_resize(ctx, fh, fw), -1.0)))
    h = T.relu(_conv(p, "fuse", T.concat(parts, axis=-3)))
    return _squeeze_channel(T.relu(_conv(p, "out", h)))


def _squeeze_channel(y):
    shape = T.value_of(y).shape
    new = shape[:-3] + shape[-2:]
    return T.reshape(y, new) if isinstance(y, T.Var) else y.reshape(new)


_FORWARD = {
    "multi_column": _forward_multi_column,
    "dilated": _forward_dilated,
    "context": _forward_context,
}


OUTPUT_BIAS_INIT = 0.01


def build_model(spec: ModelSpec) -> Model:
    """Parameters drawn uniform in +-1/sqrt(fan_in) from ``spec.seed``.

    Exception: the output layer's weights take their absolute value and its
    bias is the constant ``OUTPUT_BIAS_INIT``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params = {}
    fan_in = None
    for name, shape in param_shapes(spec):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    # output layer starts nonnegative over nonnegative features: the final clamp is live at init
    (wname, _), (bname, _) = param_shapes(spec)[-2:]
    params[wname] = np.abs(params[wname])
    params[bname] = np.full(params[bname].shape, OUTPUT_BIAS_INIT)
    return Model(spec, params)


def predict_density(model: Model, image) -> np.ndarray:
    return T.value_of(model.forward(image))


def count(density) -> float:
    return float(np.sum(T.value_of(density)))


def target_map(density: np.ndarray) -> np.ndarray:
    """Ground truth at model resolution (4x4 block sums keep total mass)."""
    return T.block_sum(np.asarray(density, float), DOWNSAMPLE)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    batch_threshold: int = 32
    minibatch: int = 8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """Adam or heavy-ball SGD over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for k, g in grads.items():
            if cfg.optimizer == "adam":
                self.m[k] = cfg.momentum * self.m[k] + (1 - cfg.momentum) * g
                self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
                mhat = self.m[k] / (1 - cfg.momentum**self.t)
                vhat = self.v[k] / (1 - cfg.beta2**self.t)
                params[k] -= cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                self.m[k] = cfg.momentum * self.m[k] + g
                params[k] -= cfg.lr * self.m[k]


class NonFiniteLoss(FloatingPointError):
    pass


def loss_and_grads(model: Model, images: np.ndarray, targets: np.ndarray, n_total: int,
                   weight: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """weight * (1/2N) * sum ||f(x_i) - l_i||^2 over the given images, with N = n_total."""
    tape = T.Tape()
    pv = {k: tape.variable(v) for k, v in model.params.items()}
    pred = model.forward(images, pv)
    diff = T.add(pred, -targets)
    loss = T.mul(T.square(diff).sum(), weight / (2.0 * n_total))
    grads = T.backward(tape, loss)
    return float(loss.value), {k: grads[v] for k, v in pv.items()}


def _batches(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    if n <= cfg.batch_threshold:
        return [np.arange(n)]
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i : i + cfg.minibatch] for i in range(0, n, cfg.minibatch)]


def epoch_objective(model: Model, images: np.ndarray, targets: np.ndarray, idx,
                    n_total: int, weight: float = 1.0):
    """Accumulate loss/grads for images[idx] in chunks (same result as one pass)."""
    total, acc = 0.0, None
    for s in range(0, len(idx), TRAIN_CHUNK):
        chunk = idx[s : s + TRAIN_CHUNK]
        loss, g = loss_and_grads(model, images[chunk], targets[chunk], n_total, weight)
        total += loss
        acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
    return total, acc


def stack_dataset(scenes: Sequence[Scene]) -> tuple[np.ndarray, np.ndarray]:
    if not scenes:
        raise ValueError("dataset is empty")
    images = np.stack([s.image for s in scenes])
    targets = np.stack([target_map(s.density) for s in scenes])
    return images, targets


def train(model: Model, scenes: Sequence[Scene], cfg: TrainConfig,
          transform=None) -> tuple[Model, list[float]]:
    """Minimize (1/2N) sum ||f(x_i) - l_i||^2 with the configured optimizer.

    ``transform(images, epoch)`` may rewrite the inputs each epoch (used by
    ablation retraining). Returns a new model and the per-epoch mean loss
    (total loss of the epoch's batches divided by the number of batches).
    """
    model = model.copy()
    images, targets = stack_dataset(scenes)
    n = len(images)
    opt = Optimizer(model.params, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        inputs = images if transform is None else transform(images, epoch)
        losses = []
        for bi, idx in enumerate(_batches(n, cfg, epoch)):
            loss, grads = epoch_objective(model, inputs, targets, idx, len(idx))
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step(model.params, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d loss %.6g", epoch, trace[-1])
    return model, trace


def dataset_loss(model: Model, scenes: Sequence[Scene]) -> float:
    images, targets = stack_dataset(scenes)
    total = 0.0
    for s in range(0, len(images), TRAIN_CHUNK):
        pred = predict_density(model, images[s : s + TRAIN_CHUNK])
        total += float(((pred - targets[s : s + TRAIN_CHUNK]) ** 2).sum())
    return total / (2 * len(images))


def predict_counts(model: Model, images) -> np.ndarray:
    out = []
    for s in range(0, len(images), TRAIN_CHUNK):
        out.extend(predict_density(model, np.asarray(images[s : s + TRAIN_CHUNK])).sum(axis=(-2, -1)))
    return np.array(out)


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: Model, extra: Optional[dict] = None) -> None:
    header = model.spec.to_header()
    header["params"] = ",".join(name for name, _ in param_shapes(model.spec))
    header.update(extra or {})
    write_container(path, MODEL_MAGIC, header,
                    [model.params[name] for name, _ in param_shapes(model.spec)])


def load_model(path) -> Model:
    header, tensors = read_container(path, MODEL_MAGIC)
    spec = ModelSpec.from_header(header)
    shapes = param_shapes(spec)
    if len(tensors) != len(shapes):
        raise ValueError(f"{path}: expected {len(shapes)} parameter tensors, found {len(tensors)}")
    params = {}
    for (name, shape), t in zip(shapes, tensors):
        if t.shape != shape:
            raise ValueError(f"{path}: parameter {name} has shape {t.shape}, expected {shape}")
        params[name] = t
    return Model(spec, params)


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    return replace(spec, seed=seed)
