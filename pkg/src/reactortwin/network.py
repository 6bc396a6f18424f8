"""From-scratch fully connected network: tanh hidden layers, linear
output, z-score normalization folded into the model, full-batch Adam
(gradient descent with momentum and per-parameter adaptive step) on the
regularized objective, and a versioned text serialization that
round-trips bit-exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(Exception):
    """Input width does not match the model's first layer."""


class LengthMismatch(Exception):
    """Prediction and target arrays differ in length."""


class Divergence(Exception):
    """Training loss became non-finite."""


@dataclass
class Normalization:
    """Per-feature shift/scale applied to inputs and outputs."""

    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "Normalization":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "Normalization":
        # Constant features keep scale 1 so z-scoring stays finite.
        def _stats(a):
            shift = a.mean(axis=0)
            scale = a.std(axis=0)
            scale[scale == 0.0] = 1.0
            return shift, scale
        in_shift, in_scale = _stats(np.asarray(x, dtype=float))
        out_shift, out_scale = _stats(np.asarray(y, dtype=float))
        return cls(in_shift, in_scale, out_shift, out_scale)

    def norm_in(self, x):
        return (x - self.in_shift) / self.in_scale

    def norm_out(self, y):
        return (y - self.out_shift) / self.out_scale

    def denorm_out(self, y):
        return y * self.out_scale + self.out_shift


@dataclass
class NeuralNetModel:
    """Feedforward net; weights[l] has shape (n_l, n_{l-1})."""

    layers: list
    weights: list
    biases: list
    norm: Normalization

    @classmethod
    def init(cls, layers, seed: int = 0) -> "NeuralNetModel":
        if len(layers) < 2 or any(n < 1 for n in layers):
            raise ValueError("need at least input and output layers, all positive")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layers[:-1], layers[1:]):
            span = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-span, span, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(list(layers), weights, biases,
                   Normalization.identity(layers[0], layers[-1]))

    def copy(self) -> "NeuralNetModel":
        return copy.deepcopy(self)


def _forward_norm(model: NeuralNetModel, xn: np.ndarray):
    """Forward pass in normalized space; returns output and per-layer
    activations for backprop."""
    acts = [xn]
    a = xn
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if l == last else np.tanh(z)
        acts.append(a)
    return a, acts


def forward(model: NeuralNetModel, x) -> np.ndarray:
    """Predict in raw units for a single sample or a batch of rows."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.shape[1] != model.layers[0]:
        raise ShapeMismatch(f"expected {model.layers[0]} inputs, got {rows.shape[1]}")
    yn, _ = _forward_norm(model, model.norm.norm_in(rows))
    y = model.norm.denorm_out(yn)
    return y[0] if single else y


def loss(preds, targets) -> float:
    """Half mean-square error over all entries: (1/2N) sum of squares."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.shape} vs {t.shape}")
    n = p.shape[0] if p.ndim > 0 else 1
    if n == 0:
        raise LengthMismatch("empty arrays")
    return float(np.sum((p - t) ** 2) / (2.0 * n))


def rmse(preds, targets) -> float:
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.shape} vs {t.shape}")
    if p.size == 0:
        raise LengthMismatch("empty arrays")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def weight_norm(model: NeuralNetModel) -> float:
    """Sum of squared weights; biases are not penalized."""
    return float(sum(np.sum(w ** 2) for w in model.weights))


def regularized_loss(model: NeuralNetModel, xn, yn, alpha: float, beta: float) -> float:
    out, _ = _forward_norm(model, xn)
    return beta * loss(out, yn) + alpha * weight_norm(model)


def gradient(model: NeuralNetModel, xn, yn, alpha: float, beta: float):
    """Backprop gradient of the regularized objective.

    Returns (d_weights, d_biases) matching the model's parameter lists.
    Inputs are in normalized space (training operates there).
    """
    xn = np.atleast_2d(np.asarray(xn, dtype=float))
    yn = np.atleast_2d(np.asarray(yn, dtype=float))
    n = xn.shape[0]
    out, acts = _forward_norm(model, xn)
    delta = beta * (out - yn) / n          # d L_D/d out, times beta
    d_w = [None] * len(model.weights)
    d_b = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        d_w[l] = delta.T @ acts[l] + 2.0 * alpha * model.weights[l]
        d_b[l] = delta.sum(axis=0)
        if l > 0:
            # tanh' = 1 - a^2 on the stored activation
            delta = (delta @ model.weights[l]) * (1.0 - acts[l] ** 2)
    return d_w, d_b


@dataclass
class TrainHyper:
    """Training controls.  target_mse is the data-loss stop threshold in
    normalized output units (half mean-square form)."""

    target_mse: float = 1e-2
    max_epochs: int = 20000
    learn_rate: float = 0.01
    batch_size: int = 4096
    alpha: float = 1e-7
    beta: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    lr_patience: int = 40      # epochs without progress before halving the step


@dataclass
class TrainReport:
    epochs_used: int
    target_reached: bool
    train_loss: float          # L_D on the training split, normalized units
    val_loss: float
    train_rmse: float          # denormalized (raw units)
    val_rmse: float
    loss_curve: list = field(default_factory=list)


def _split(n_rows: int, groups, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    if groups is None:
        idx = rng.permutation(n_rows)
        n_val = max(1, int(round(val_fraction * n_rows))) if n_rows > 1 else 0
        return np.sort(idx[n_val:]), np.sort(idx[:n_val])
    groups = np.asarray(groups)
    uniq = rng.permutation(np.unique(groups))
    n_val = max(1, int(round(val_fraction * len(uniq)))) if len(uniq) > 1 else 0
    val_groups = set(uniq[:n_val].tolist())
    mask = np.array([g in val_groups for g in groups])
    return np.where(~mask)[0], np.where(mask)[0]


def train(x, y, layers, hyper: TrainHyper, groups=None):
    """Fit a network to (x, y) in raw units.

    Splits train/validation by group labels when given (episode-wise),
    otherwise by row, fits the normalization on the training split
    only, runs full-batch Adam on the regularized objective, stops as
    soon as the training data loss reaches target_mse, and returns the
    snapshot with the best validation loss seen.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{x.shape[0]} inputs vs {y.shape[0]} targets")
    if layers[0] != x.shape[1] or layers[-1] != y.shape[1]:
        raise ShapeMismatch("layer widths do not match the data")

    tr_idx, va_idx = _split(x.shape[0], groups, hyper.val_fraction, hyper.seed)
    if len(va_idx) == 0:
        va_idx = tr_idx
    model = NeuralNetModel.init(layers, seed=hyper.seed)
    model.norm = Normalization.fit(x[tr_idx], y[tr_idx])
    xtr, ytr = model.norm.norm_in(x[tr_idx]), model.norm.norm_out(y[tr_idx])
    xva, yva = model.norm.norm_in(x[va_idx]), model.norm.norm_out(y[va_idx])

    def data_loss(m, xs, ys):
        out, _ = _forward_norm(m, xs)
        return loss(out, ys)

    m_w = [np.zeros_like(w) for w in model.weights]
    v_w = [np.zeros_like(w) for w in model.weights]
    m_b = [np.zeros_like(b) for b in model.biases]
    v_b = [np.zeros_like(b) for b in model.biases]
    lr = hyper.learn_rate
    shuffler = np.random.default_rng(hyper.seed + 0x5EED)

    tr_loss = data_loss(model, xtr, ytr)
    va_loss = data_loss(model, xva, yva)
    best = (va_loss, model.copy())
    curve = [tr_loss]
    keep_every = max(1, hyper.max_epochs // 500)
    epochs = 0
    steps = 0
    stall = 0
    best_tr = tr_loss
    n_tr = xtr.shape[0]
    bs = min(hyper.batch_size, n_tr)
    while tr_loss > hyper.target_mse and epochs < hyper.max_epochs:
        epochs += 1
        order = shuffler.permutation(n_tr) if bs < n_tr else np.arange(n_tr)
        for lo in range(0, n_tr, bs):
            sel = order[lo:lo + bs]
            d_w, d_b = gradient(model, xtr[sel], ytr[sel], hyper.alpha, hyper.beta)
            steps += 1
            b1c = 1.0 - hyper.adam_b1 ** steps
            b2c = 1.0 - hyper.adam_b2 ** steps
            for l in range(len(model.weights)):
                m_w[l] = hyper.adam_b1 * m_w[l] + (1 - hyper.adam_b1) * d_w[l]
                v_w[l] = hyper.adam_b2 * v_w[l] + (1 - hyper.adam_b2) * d_w[l] ** 2
                model.weights[l] -= lr * (m_w[l] / b1c) / (np.sqrt(v_w[l] / b2c) + hyper.adam_eps)
                m_b[l] = hyper.adam_b1 * m_b[l] + (1 - hyper.adam_b1) * d_b[l]
                v_b[l] = hyper.adam_b2 * v_b[l] + (1 - hyper.adam_b2) * d_b[l] ** 2
                model.biases[l] -= lr * (m_b[l] / b1c) / (np.sqrt(v_b[l] / b2c) + hyper.adam_eps)
        tr_loss = data_loss(model, xtr, ytr)
        if not np.isfinite(tr_loss):
            raise Divergence(f"training loss became non-finite at epoch {epochs}")
        va_loss = data_loss(model, xva, yva)
        if va_loss < best[0]:
            best = (va_loss, model.copy())
        if epochs % keep_every == 0:
            curve.append(tr_loss)
        # halve the step when progress stalls for a long stretch
        if tr_loss < best_tr * 0.999:
            best_tr = tr_loss
            stall = 0
        else:
            stall += 1
            if stall >= hyper.lr_patience:
                lr = max(lr * 0.5, 1e-5)
                stall = 0

    target_reached = tr_loss <= hyper.target_mse
    # On target, keep the model that reached it; otherwise keep whichever
    # snapshot validated best (the current model counts).
    final = model if target_reached or va_loss <= best[0] else best[1]
    out_tr = final.norm.denorm_out(_forward_norm(final, xtr)[0])
    out_va = final.norm.denorm_out(_forward_norm(final, xva)[0])
    report = TrainReport(
        epochs_used=epochs, target_reached=target_reached,
        train_loss=data_loss(final, xtr, ytr), val_loss=data_loss(final, xva, yva),
        train_rmse=rmse(out_tr, y[tr_idx]), val_rmse=rmse(out_va, y[va_idx]),
        loss_curve=curve)
    return final, report


# ---------------------------------------------------------------------------
# Serialization: line-oriented text, 17 significant digits (exact for
# IEEE doubles), versioned header.

FORMAT_TAG = "reactortwin-net v1"


def _fmt_vec(arr) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(arr, dtype=float).ravel())


def serialize(model: NeuralNetModel) -> str:
    lines = [FORMAT_TAG,
             "layers " + " ".join(str(n) for n in model.layers),
             "activation tanh",
             "in_shift " + _fmt_vec(model.norm.in_shift),
             "in_scale " + _fmt_vec(model.norm.in_scale),
             "out_shift " + _fmt_vec(model.norm.out_shift),
             "out_scale " + _fmt_vec(model.norm.out_scale)]
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{l} " + _fmt_vec(w))
        lines.append(f"b{l} " + _fmt_vec(b))
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> NeuralNetModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError("unrecognized model format/version")
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    layers = [int(v) for v in fields["layers"].split()]
    if fields.get("activation", "tanh") != "tanh":
        raise ValueError("unsupported activation")

    def vec(key, shape):
        arr = np.array([float(v) for v in fields[key].split()])
        return arr.reshape(shape)

    norm = Normalization(vec("in_shift", (layers[0],)),
                         vec("in_scale", (layers[0],)),
                         vec("out_shift", (layers[-1],)),
                         vec("out_scale", (layers[-1],)))
    weights, biases = [], []
    for l, (n_in, n_out) in enumerate(zip(layers[:-1], layers[1:])):
        weights.append(vec(f"W{l}", (n_out, n_in)))
        biases.append(vec(f"b{l}", (n_out,)))
    return NeuralNetModel(layers, weights, biases, norm)


def save_model(model: NeuralNetModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(model))


def load_model(path) -> NeuralNetModel:
    with open(path) as fh:
        return deserialize(fh.read())
