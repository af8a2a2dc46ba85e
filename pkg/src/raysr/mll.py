"""Residual multi-layer learning (MLL) model for cluster super-resolution.

The pre-upsampled window ``x`` (interpolation baseline, normalised and
flattened) flows through three cascaded ensemble linear blocks (ELBs)::

    h1 = B1(x)      input_dim  -> output_dim
    h2 = B2(h1)     output_dim -> output_dim
    h3 = B3(h2)     output_dim -> output_dim
    y  = h1 + h2 + h3            (residual=False keeps only h3)

Each ELB is six dense layers whose width jumps to its maximum after the
input and then shrinks, ReLU everywhere except the last layer.  Gradients
are derived by hand; training uses Adam on the squared-weight L2 loss over
predicted snapshots only.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import NormStats, PairBatch, apply_norm, check_scale, invert_norm, predicted_indices
from .interp import interpolate_array

N_BLOCKS = 3
N_LAYERS = 6
CHECKPOINT_VERSION = 1
HIDDEN_PROFILE = (1.0, 0.75, 0.5, 0.25, 0.125)


class ModelError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ELBSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) != N_LAYERS + 1:
            raise ModelError(f"an ELB needs {N_LAYERS + 1} layer dims, got {len(dims)}")
        if any(d <= 0 for d in dims):
            raise ModelError("layer dims must be positive")
        hidden = dims[1:-1]
        if any(a < b for a, b in zip(hidden, hidden[1:])):
            raise ModelError("hidden widths must peak at the first hidden layer and then not increase")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")


def hidden_dims(max_dim: int = 512) -> tuple[int, ...]:
    """Five hidden widths, ``max_dim`` first then declining (512 -> 512, 384, 256, 128, 64)."""
    return tuple(max(1, int(round(max_dim * f))) for f in HIDDEN_PROFILE)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class SRModel:
    scale: int
    n_slots: int
    specs: tuple[ELBSpec, ...]
    params: list[np.ndarray]  # W1, b1, ..., W6, b6 for block 1, then blocks 2 and 3
    norm: NormStats
    seed: int = 0
    residual: bool = True
    epoch: int = 0
    n_features: int = 4
    window: int = 17

    @property
    def input_dim(self) -> int:
        return self.specs[0].layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.specs[0].layer_dims[-1]

    @property
    def predicted_indices(self) -> np.ndarray:
        return predicted_indices(self.scale, self.window)

    def block_params(self, b: int) -> list[np.ndarray]:
        k = 2 * N_LAYERS
        return self.params[b * k : (b + 1) * k]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "SRModel":
        return copy.deepcopy(self)


def model_dims(scale: int, n_slots: int, n_features: int = 4, window: int = 17) -> tuple[int, int]:
    check_scale(scale)
    n_pred = len(predicted_indices(scale, window))
    return window * n_slots * n_features, n_pred * n_slots * n_features


def init_params(specs, seed: int = 0, zero: bool = False) -> list[np.ndarray]:
    """Fan-in scaled uniform weights and zero biases for a sequence of ELB specs."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in specs:
        dims = spec.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if zero:
                w[:] = 0.0
            params.extend([w, np.zeros(fan_out)])
    return params


def toy_model(in_dim: int, out_dim: int, hidden=(8, 6, 5, 4, 3), seed: int = 0, activation: str = "relu", residual: bool = True) -> SRModel:
    """Tiny network outside the windowed data layout, for gradient checks."""
    specs = (
        ELBSpec((in_dim, *hidden, out_dim), activation),
        ELBSpec((out_dim, *hidden, out_dim), activation),
        ELBSpec((out_dim, *hidden, out_dim), activation),
    )
    return SRModel(16, 1, specs, init_params(specs, seed), NormStats.identity(), seed, residual)


def init_model(
    scale: int,
    n_slots: int,
    seed: int = 0,
    max_dim: int = 512,
    hidden: tuple[int, ...] | None = None,
    activation: str = "relu",
    residual: bool = True,
    norm: NormStats | None = None,
    zero: bool = False,
    n_features: int = 4,
    window: int = 17,
) -> SRModel:
    """Fresh model for one scale factor.

    Weights of a layer with fan-in ``n`` are drawn from U(-1/sqrt(n), 1/sqrt(n));
    biases start at zero.  ``zero=True`` zeroes everything (test hook).
    """
    in_dim, out_dim = model_dims(scale, n_slots, n_features, window)
    hid = tuple(hidden) if hidden is not None else hidden_dims(max_dim)
    if len(hid) != N_LAYERS - 1:
        raise ModelError(f"need {N_LAYERS - 1} hidden widths, got {len(hid)}")
    specs = (
        ELBSpec((in_dim, *hid, out_dim), activation),
        ELBSpec((out_dim, *hid, out_dim), activation),
        ELBSpec((out_dim, *hid, out_dim), activation),
    )
    params = init_params(specs, seed, zero)
    return SRModel(
        scale,
        n_slots,
        specs,
        params,
        norm if norm is not None else NormStats.identity(n_features),
        seed,
        residual,
        0,
        n_features,
        window,
    )


# ---------------------------------------------------------------- forward / backward


def _block_forward(x, block, activation):
    act = _ACTIVATIONS[activation][0]
    cache = []
    a = x
    for layer in range(N_LAYERS):
        w, b = block[2 * layer], block[2 * layer + 1]
        z = a @ w + b
        out = act(z) if layer < N_LAYERS - 1 else z
        cache.append((a, z, out))
        a = out
    return a, cache


def _block_backward(dout, block, cache, activation):
    dact = _ACTIVATIONS[activation][1]
    grads = [None] * (2 * N_LAYERS)
    d = dout
    for layer in reversed(range(N_LAYERS)):
        a_in, z, out = cache[layer]
        if layer < N_LAYERS - 1:
            d = d * dact(z, out)
        grads[2 * layer] = a_in.T @ d
        grads[2 * layer + 1] = d.sum(axis=0)
        d = d @ block[2 * layer].T
    return d, grads


def network_forward(model: SRModel, x: np.ndarray, keep_cache: bool = False):
    """Normalised, flattened input (N, input_dim) -> (N, output_dim)."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ModelError(f"expected input of shape (N, {model.input_dim}), got {x.shape}")
    hs, caches = [], []
    h = x
    for b in range(N_BLOCKS):
        h, cache = _block_forward(h, model.block_params(b), model.specs[b].activation)
        hs.append(h)
        caches.append(cache)
    y = hs[0] + hs[1] + hs[2] if model.residual else hs[2]
    if keep_cache:
        return y, (hs, caches)
    return y


def network_backward(model: SRModel, dy: np.ndarray, cache) -> list[np.ndarray]:
    hs, caches = cache
    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    k = 2 * N_LAYERS
    carry = np.zeros_like(dy)
    for b in reversed(range(N_BLOCKS)):
        dh = carry + (dy if (model.residual or b == N_BLOCKS - 1) else 0.0)
        carry, g = _block_backward(dh, model.block_params(b), caches[b], model.specs[b].activation)
        grads[b * k : (b + 1) * k] = g
    return grads


def prepare_inputs(model: SRModel, lr, rx, known) -> np.ndarray:
    """Pre-upsample, normalise and flatten LR windows."""
    full = interpolate_array(lr, known, rx)
    return apply_norm(full, model.norm).reshape(len(full), -1)


def forward(model: SRModel, lr, rx, known=None) -> np.ndarray:
    """Predicted features at the predicted snapshots, (N, P, J, F) in physical units."""
    lr = np.asarray(lr, dtype=float)
    squeeze = lr.ndim == 3
    if squeeze:
        lr, rx = lr[None], np.asarray(rx)[None]
    known = np.arange(0, model.window, model.scale) if known is None else np.asarray(known)
    if len(known) != lr.shape[1] or not np.array_equal(known, np.arange(0, model.window, model.scale)):
        raise ModelError(f"input does not match the model's scale factor {model.scale}")
    if lr.shape[2] != model.n_slots:
        raise ModelError(f"model expects {model.n_slots} cluster slots, input has {lr.shape[2]}")
    x = prepare_inputs(model, lr, rx, known)
    y = network_forward(model, x)
    out = invert_norm(y.reshape(len(x), -1, model.n_slots, model.n_features), model.norm)
    return out[0] if squeeze else out


def predict(model: SRModel, batch: PairBatch) -> np.ndarray:
    if batch.scale != model.scale:
        raise ModelError(f"batch scale {batch.scale} != model scale {model.scale}")
    return forward(model, batch.lr, batch.rx, batch.known_indices)


# ---------------------------------------------------------------- loss


def weighted_loss(pred, truth, weights, kind: str = "l2") -> float:
    """Sum over snapshots, slots and features of ``(w*pred - w*truth)**2``.

    ``weights`` has one entry per (snapshot, slot) and broadcasts over the
    feature axis.  ``kind="l1"`` is an experiment flag only.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ModelError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    w = np.asarray(weights, dtype=float)
    if w.shape != pred.shape[:-1]:
        raise ModelError(f"weights shape {w.shape} does not match {pred.shape[:-1]}")
    diff = w[..., None] * pred - w[..., None] * truth
    if kind == "l2":
        return float(np.sum(diff * diff))
    if kind == "l1":
        return float(np.sum(np.abs(diff)))
    raise ModelError(f"unknown loss {kind!r}")


@dataclass
class Targets:
    """Normalised, flattened training arrays for one PairBatch."""

    x: np.ndarray  # (N, input_dim)
    t: np.ndarray  # (N, output_dim)
    w: np.ndarray  # (N, output_dim), weights broadcast over features

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Targets":
        return Targets(self.x[idx], self.t[idx], self.w[idx])


def make_targets(model: SRModel, batch: PairBatch) -> Targets:
    if batch.scale != model.scale:
        raise ModelError(f"batch scale {batch.scale} != model scale {model.scale}")
    pi = batch.predicted_indices
    x = prepare_inputs(model, batch.lr, batch.rx, batch.known_indices)
    t = apply_norm(batch.hr[:, pi], model.norm).reshape(len(x), -1)
    w = np.repeat(batch.weights[:, pi][..., None], model.n_features, axis=-1).reshape(len(x), -1)
    return Targets(x, t, w)


def loss_and_gradients(model: SRModel, data: Targets, kind: str = "l2") -> tuple[float, list[np.ndarray]]:
    """Loss on normalised targets and its exact gradient w.r.t. every parameter."""
    if len(data) == 0:
        raise ModelError("empty batch")
    y, cache = network_forward(model, data.x, keep_cache=True)
    r = data.w * (y - data.t)
    if kind == "l2":
        loss = float(np.sum(r * r))
        dy = 2.0 * data.w * r
    elif kind == "l1":
        loss = float(np.sum(np.abs(r)))
        dy = data.w * np.sign(r)
    else:
        raise ModelError(f"unknown loss {kind!r}")
    return loss, network_backward(model, dy, cache)


def gradients(model: SRModel, batch, kind: str = "l2") -> list[np.ndarray]:
    data = batch if isinstance(batch, Targets) else make_targets(model, batch)
    return loss_and_gradients(model, data, kind)[1]


def dataset_loss(model: SRModel, data: Targets, kind: str = "l2", chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        part = data.subset(slice(i, i + chunk))
        y = network_forward(model, part.x)
        r = part.w * (y - part.t)
        total += float(np.sum(r * r)) if kind == "l2" else float(np.sum(np.abs(r)))
    return total


# ---------------------------------------------------------------- optimiser


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    loss: str = "l2"

    def __post_init__(self):
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ModelError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ModelError("batch size must be >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class TrainResult:
    model: SRModel
    best_model: SRModel
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    best_epoch: int = 0


def train(model: SRModel, train_set: PairBatch, val_set: PairBatch, config: TrainConfig | None = None, log=None) -> TrainResult:
    """Adam training with seeded shuffling.

    Losses are recorded per epoch as the mean per-sample loss; the training
    figure is accumulated over the epoch's mini-batches.  Returns the final
    model and the checkpoint with the lowest validation loss.
    """
    config = config or TrainConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ModelError("training and validation sets must be non-empty")
    if train_set.scale != model.scale or val_set.scale != model.scale:
        raise ModelError("datasets and model disagree on scale")
    rng = np.random.default_rng(config.seed)
    tr = make_targets(model, train_set)
    va = make_targets(model, val_set)
    model = model.copy()
    state = AdamState.zeros_like(model.params)
    result = TrainResult(model, model.copy())
    result.initial_train_loss = dataset_loss(model, tr, config.loss) / len(tr)
    result.initial_val_loss = dataset_loss(model, va, config.loss) / len(va)
    best = math.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(tr))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            part = tr.subset(order[i : i + config.batch_size])
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradients(model, part, config.loss)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; check the learning rate and feature normalisation"
                )
            total += loss
            model.params, state = adam_step(model.params, grads, state, config)
        model.epoch = epoch
        with np.errstate(over="ignore", invalid="ignore"):
            val = dataset_loss(model, va, config.loss) / len(va)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        result.train_loss.append(total / len(tr))
        result.val_loss.append(val)
        if val < best:
            best = val
            result.best_model = model.copy()
            result.best_epoch = epoch
        if log is not None:
            log(epoch, result.train_loss[-1], val)
    result.model = model
    return result


# ---------------------------------------------------------------- checkpoints


def save_model(model: SRModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "scale": model.scale,
        "n_slots": model.n_slots,
        "n_features": model.n_features,
        "window": model.window,
        "specs": [{"layer_dims": list(s.layer_dims), "activation": s.activation} for s in model.specs],
        "norm_stats": model.norm.to_dict(),
        "seed": model.seed,
        "residual": model.residual,
        "epoch": model.epoch,
    }
    arrays = {f"p{i:02d}": p for i, p in enumerate(model.params)}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> SRModel:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
        keys = sorted(k for k in data.files if k.startswith("p"))
        params = [data[k].copy() for k in keys]
    specs = tuple(ELBSpec(tuple(s["layer_dims"]), s["activation"]) for s in meta["specs"])
    return SRModel(
        meta["scale"],
        meta["n_slots"],
        specs,
        params,
        NormStats.from_dict(meta["norm_stats"]),
        meta["seed"],
        meta["residual"],
        meta["epoch"],
        meta["n_features"],
        meta["window"],
    )
