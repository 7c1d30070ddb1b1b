"""The constituent five-layer convolutional network.

Layer 1 combines sub-bands, layer 2 forms channel combinations, layers 3-4
are temporal convolutions with ReLU, layer 5 is fully connected with a
softmax. Backpropagation is written out by hand for this fixed graph.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .signal import CohortDataset, FilteredEpoch

log = logging.getLogger(__name__)

# Parameters entering the L2 penalty; biases are excluded.
WEIGHT_KEYS = ("subband", "channel", "conv3", "conv4", "fc")
PARAM_KEYS = ("subband", "channel", "conv3", "conv3_bias", "conv4", "conv4_bias",
              "fc", "fc_bias")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    n_channels: int
    n_samples: int
    n_subbands: int
    n_classes: int
    n_combinations: int = 120
    conv3_maps: int = 120
    conv3_kernel: int = 2
    conv3_stride: int = 2
    conv4_maps: int = 120
    conv4_kernel: int = 10

    def __post_init__(self):
        if min(self.n_channels, self.n_samples, self.n_subbands, self.n_combinations,
               self.conv3_maps, self.conv4_maps, self.conv3_kernel, self.conv3_stride,
               self.conv4_kernel) < 1 or self.n_classes < 2:
            raise ValueError(f"invalid architecture {self}")
        if self.conv3_len < 1:
            raise ValueError("input too short for the layer-3 kernel")

    @property
    def conv3_len(self) -> int:
        return kernels.conv_out_len(self.n_samples, self.conv3_kernel, self.conv3_stride, 0, 0)

    @property
    def conv4_pad(self) -> tuple:
        total = self.conv4_kernel - 1
        return total // 2, total - total // 2

    @property
    def fc_inputs(self) -> int:
        return self.conv4_maps * self.conv3_len

    @property
    def input_shape(self) -> tuple:
        return self.n_channels, self.n_samples, self.n_subbands

    def param_shapes(self) -> dict:
        return {
            "subband": (self.n_subbands,),
            "channel": (self.n_channels, self.n_combinations),
            "conv3": (self.conv3_maps, self.n_combinations, self.conv3_kernel),
            "conv3_bias": (self.conv3_maps,),
            "conv4": (self.conv4_maps, self.conv3_maps, self.conv4_kernel),
            "conv4_bias": (self.conv4_maps,),
            "fc": (self.n_classes, self.fc_inputs),
            "fc_bias": (self.n_classes,),
        }


@dataclass
class NetworkWeights:
    arch: Architecture
    params: dict

    @property
    def w_s(self) -> NDArray:
        """Sub-band combiner, shape ``(Ns,)``."""
        return self.params["subband"]

    @property
    def w_c(self) -> NDArray:
        """Channel combinations as columns, shape ``(C, N_ch)``."""
        return self.params["channel"]

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.arch, {k: v.copy() for k, v in self.params.items()})

    def squared_norm(self) -> float:
        return float(sum(np.sum(self.params[k] ** 2) for k in WEIGHT_KEYS))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def equals(self, other: "NetworkWeights") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(self.params[k], other.params[k]) for k in PARAM_KEYS)


@dataclass(frozen=True)
class TrainingConfig:
    lambda_l2: float = 0.001
    dropout: tuple = (0.1, 0.1, 0.95)
    batch_size: int = 64
    epochs_global: int = 500
    epochs_finetune: int = 200
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: Optional[int] = None
    seed: int = 0
    n_combinations: int = 120
    conv3_maps: int = 120
    conv3_kernel: int = 2
    conv3_stride: int = 2
    conv4_maps: int = 120
    conv4_kernel: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        if len(self.dropout) != 3 or not all(0 <= p < 1 for p in self.dropout):
            raise ValueError("dropout needs three probabilities in [0, 1)")
        if self.learning_rate <= 0 or self.finetune_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.epochs_global < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be non-negative")

    def architecture(self, n_channels: int, n_samples: int, n_subbands: int,
                     n_classes: int) -> Architecture:
        return Architecture(n_channels, n_samples, n_subbands, n_classes,
                            self.n_combinations, self.conv3_maps, self.conv3_kernel,
                            self.conv3_stride, self.conv4_maps, self.conv4_kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**{**d, "dropout": tuple(d.get("dropout", cls.dropout))})


def init_weights(arch: Architecture, seed: int = 0) -> NetworkWeights:
    """Layer 1 starts at exactly one; other weights ~ N(0, 0.01^2); biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in arch.param_shapes().items():
        if key == "subband":
            params[key] = np.ones(shape)
        elif key.endswith("_bias"):
            params[key] = np.zeros(shape)
        else:
            params[key] = rng.normal(0.0, 0.01, size=shape)
    return NetworkWeights(arch, params)


@dataclass
class ForwardTrace:
    x: NDArray
    a1: NDArray
    h2: NDArray
    z3: NDArray
    h3: NDArray
    z4: NDArray
    h4: NDArray
    logits: NDArray
    softmax: NDArray
    masks: tuple = (None, None, None)


def _dropout(a: NDArray, p: float, rng) -> tuple:
    """In-place inverted dropout; returns ``(a, (keep_mask, scale))``.

    Units are kept when a raw 16-bit draw reaches ``round(p * 2**16)``, so the
    drop probability is ``p`` to within 2**-17; the scale uses the exact
    keep fraction.
    """
    threshold = int(round(p * 65536))
    if threshold == 0:
        return a, None
    n_words = -(-a.size // 4)
    draws = rng.bit_generator.random_raw(n_words).view(np.uint16)[:a.size]
    keep = (draws >= threshold).reshape(a.shape)
    scale = 65536.0 / (65536 - threshold)
    np.multiply(a, keep, out=a)
    a *= scale
    return a, (keep, scale)


def _undo_dropout(grad: NDArray, mask) -> NDArray:
    if mask is not None:
        keep, scale = mask
        np.multiply(grad, keep, out=grad)
        grad *= scale
    return grad


def _as_batch(x, arch: Architecture) -> NDArray:
    if isinstance(x, FilteredEpoch):
        x = x.samples
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != arch.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input "
                         f"{arch.input_shape}")
    return x


def forward(w: NetworkWeights, x, train: bool = False, dropout=(0.1, 0.1, 0.95),
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Forward pass over one epoch ``(C, Nt, Ns)`` or a batch ``(B, C, Nt, Ns)``.

    Dropout is applied only with ``train=True`` and then consumes ``rng``.
    """
    arch = w.arch
    x = _as_batch(x, arch)
    p = w.params
    if train and rng is None:
        raise ValueError("train-mode forward needs an rng")
    a1 = x @ p["subband"]  # (B, C, Nt)
    h2 = np.matmul(p["channel"].T, a1)  # (B, Nch, Nt)
    masks = [None, None, None]
    if train:
        h2, masks[0] = _dropout(h2, dropout[0], rng)
    z3 = kernels.conv1d_forward(h2, p["conv3"], arch.conv3_stride, 0, 0)
    z3 += p["conv3_bias"][None, :, None]
    h3 = np.maximum(z3, 0.0)
    if train:
        h3, masks[1] = _dropout(h3, dropout[1], rng)
    pl, pr = arch.conv4_pad
    z4 = kernels.conv1d_forward(h3, p["conv4"], 1, pl, pr)
    z4 += p["conv4_bias"][None, :, None]
    h4 = np.maximum(z4, 0.0)
    if train:
        h4, masks[2] = _dropout(h4, dropout[2], rng)
    logits = h4.reshape(len(x), -1) @ p["fc"].T + p["fc_bias"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return ForwardTrace(x, a1, h2, z3, h3, z4, h4, logits, s, tuple(masks))


def loss(trace: ForwardTrace, labels, w: NetworkWeights, lambda_l2: float = 0.001,
         clamp: Optional[float] = 1e-12) -> float:
    """Mean categorical cross-entropy over the batch plus ``lambda * |w|^2``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    s = trace.softmax[np.arange(len(labels)), labels]
    if clamp is not None and np.any(s < clamp):
        warnings.warn("softmax probability of a true label below the clamp; "
                      "log argument clamped", RuntimeWarning, stacklevel=2)
        s = np.maximum(s, clamp)
    return float(np.mean(-np.log(s)) + lambda_l2 * w.squared_norm())


def backward(w: NetworkWeights, trace: ForwardTrace, labels,
             lambda_l2: float = 0.001) -> dict:
    """Gradient of ``loss`` with respect to every parameter."""
    arch = w.arch
    p = w.params
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    nb = len(labels)
    m1, m2, m3 = trace.masks
    g = {}
    dlogits = trace.softmax.copy()
    dlogits[np.arange(nb), labels] -= 1.0
    dlogits /= nb
    flat = trace.h4.reshape(nb, -1)
    g["fc"] = dlogits.T @ flat
    g["fc_bias"] = dlogits.sum(axis=0)
    dh4 = _undo_dropout((dlogits @ p["fc"]).reshape(trace.h4.shape), m3)
    dz4 = dh4 * (trace.z4 > 0)
    g["conv4_bias"] = dz4.sum(axis=(0, 2))
    pl, pr = arch.conv4_pad
    dh3, g["conv4"] = kernels.conv1d_backward(dz4, trace.h3, p["conv4"], 1, pl, pr)
    _undo_dropout(dh3, m2)
    dz3 = dh3 * (trace.z3 > 0)
    g["conv3_bias"] = dz3.sum(axis=(0, 2))
    dh2, g["conv3"] = kernels.conv1d_backward(dz3, trace.h2, p["conv3"],
                                              arch.conv3_stride, 0, 0)
    # gradient w.r.t. the pre-dropout layer-2 output
    _undo_dropout(dh2, m1)
    g["channel"] = np.matmul(trace.a1, dh2.transpose(0, 2, 1)).sum(axis=0)
    da1 = np.matmul(p["channel"], dh2)
    g["subband"] = trace.x.reshape(-1, arch.n_subbands).T @ da1.ravel()
    for k in WEIGHT_KEYS:
        g[k] = g[k] + 2.0 * lambda_l2 * p[k]
    return g


def predict_batch(w: NetworkWeights, x) -> tuple:
    """Eval-mode labels (lowest index wins ties) and softmax for a batch."""
    s = forward(w, x, train=False).softmax
    return np.argmax(s, axis=1), s


def predict(w: NetworkWeights, x) -> tuple:
    """``(label, softmax)`` for one epoch."""
    labels, s = predict_batch(w, x)
    if len(labels) != 1:
        raise ValueError("predict takes a single epoch; use predict_batch")
    return int(labels[0]), s[0]


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, gk in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * gk
            v *= self.beta2
            v += (1.0 - self.beta2) * gk * gk
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainingHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": list(self.loss), "accuracy": list(self.accuracy)}


def fit(w: NetworkWeights, data: NDArray, labels: NDArray, cfg: TrainingConfig,
        epochs: int, lr: float, seed) -> tuple:
    """Mini-batch Adam on ``loss``; returns a new ``(weights, history)``.

    Every epoch reshuffles all examples; the last partial batch is kept.
    """
    w = w.copy()
    history = TrainingHistory()
    if epochs == 0 or len(labels) == 0:
        return w, history
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    opt = Adam(w.params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n = len(labels)
    best, stale = np.inf, 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = np.asarray(data[idx], dtype=np.float64)
            yb = labels[idx]
            trace = forward(w, xb, train=True, dropout=cfg.dropout, rng=rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                batch_loss = loss(trace, yb, w, cfg.lambda_l2)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"loss became {batch_loss} at epoch {epoch}, batch {start // cfg.batch_size}"
                    f" (lr={lr}, |w|^2={w.squared_norm():.3g})")
            opt.step(w.params, backward(w, trace, yb, cfg.lambda_l2))
            total += batch_loss * len(idx)
            correct += int(np.sum(np.argmax(trace.softmax, axis=1) == yb))
        history.loss.append(total / n)
        history.accuracy.append(correct / n)
        if cfg.plateau_patience is not None:
            if history.loss[-1] < best * (1 - 1e-4):
                best, stale = history.loss[-1], 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    log.info("training loss plateaued after %d epochs", epoch + 1)
                    break
    return w, history


def _stack(cohort: CohortDataset, indices=None) -> tuple:
    parts = cohort.participants if indices is None else [cohort.participants[i] for i in indices]
    data = np.concatenate([p.data for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return data, labels


def architecture_for(cohort: CohortDataset, cfg: TrainingConfig) -> Architecture:
    c, nt, ns = cohort.epoch_shape
    return cfg.architecture(c, nt, ns, cohort.layout.n_classes)


def train_global(cohort: CohortDataset, cfg: TrainingConfig = TrainingConfig()) -> tuple:
    """First stage: one network on every participant's labelled epochs.

    Returns ``(weights, history)``.
    """
    if cohort.n_participants == 0:
        raise ValueError("cannot train on an empty cohort")
    w0 = init_weights(architecture_for(cohort, cfg), cfg.seed)
    data, labels = _stack(cohort)
    seed = np.random.SeedSequence(cfg.seed, spawn_key=(0,))
    return fit(w0, data, labels, cfg, cfg.epochs_global, cfg.learning_rate, seed)


def finetune_seed(cfg: TrainingConfig, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(cfg.seed, spawn_key=(1, index))


def fine_tune(global_w: NetworkWeights, cohort: CohortDataset, index: int,
              cfg: TrainingConfig) -> tuple:
    rec = cohort.participants[index]
    return fit(global_w, rec.data, rec.labels, cfg, cfg.epochs_finetune,
               cfg.finetune_learning_rate, finetune_seed(cfg, index))


def fine_tune_all(global_w: NetworkWeights, cohort: CohortDataset,
                  cfg: TrainingConfig = TrainingConfig(), n_jobs: int = 1) -> list:
    """Second stage: one copy of ``global_w`` fine-tuned per participant.

    Each participant gets its own derived seed, so ``n_jobs`` does not change
    the result.
    """
    if n_jobs == 1:
        return [fine_tune(global_w, cohort, i, cfg)[0] for i in range(cohort.n_participants)]
    from joblib import Parallel, delayed
    out = Parallel(n_jobs=n_jobs)(delayed(fine_tune)(global_w, cohort, i, cfg)
                                  for i in range(cohort.n_participants))
    return [w for w, _ in out]


def weights_to_arrays(w: NetworkWeights, prefix: str = "") -> dict:
    return {prefix + k: w.params[k] for k in PARAM_KEYS}


def weights_from_arrays(arch: Architecture, arrays: dict, prefix: str = "") -> NetworkWeights:
    params = {}
    for k, shape in arch.param_shapes().items():
        a = np.asarray(arrays[prefix + k], dtype=np.float64)
        if a.shape != shape:
            raise ValueError(f"weight {prefix + k} has shape {a.shape}, expected {shape}")
        params[k] = a
    return NetworkWeights(arch, params)


def arch_to_dict(arch: Architecture) -> dict:
    return asdict(arch)


def arch_from_dict(d: dict) -> Architecture:
    return Architecture(**d)


def with_overrides(cfg: TrainingConfig, **kw) -> TrainingConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
