"""Mean-squared-error training of the predictor with hand-derived backprop.

Training runs in a normalized input/output space for conditioning; the
normalization is affine, so it is folded back into the embedding and output
layers on export and the returned weights operate on raw signals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np

from .plant import DataWindow
from .tfe import TfeConfig, TfeWeights, bfr, softmax_rows


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class GradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 500
    optimizer: str = "adam"   # 'adam' or 'sgd'
    init_scale: float = 0.5
    seed: int = 0
    val_fraction: float = 0.25
    patience: int = 60        # epochs without validation-BFR improvement

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_loss: list
    final_train_bfr: float   # percent
    final_val_bfr: float     # percent
    wall_time: float
    best_epoch: int
    skipped_train: int
    skipped_val: int

    def as_dict(self):
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "final_train_bfr": float(self.final_train_bfr),
            "final_val_bfr": float(self.final_val_bfr),
            "wall_time": float(self.wall_time),
            "best_epoch": int(self.best_epoch),
            "skipped_train": int(self.skipped_train),
            "skipped_val": int(self.skipped_val),
        }


@dataclass
class Gradients:
    """Gradient arrays mirroring every TfeWeights field."""

    w_em1: np.ndarray
    b_em1: np.ndarray
    w_em2: np.ndarray
    b_em2: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_l1: np.ndarray
    b_l1: np.ndarray
    w_l2: np.ndarray
    b_l2: np.ndarray

    def names(self):
        return [f.name for f in fields(self)]


def init_weights(config: TfeConfig, init_scale: float, rng: np.random.Generator) -> TfeWeights:
    """Uniform init in [-s, s] with s = init_scale / sqrt(d_k).

    Keeps initial attention scores near zero so the softmax starts close to
    uniform rows.
    """
    s = init_scale / np.sqrt(config.d_k)
    from .tfe import _WEIGHT_SHAPES
    arrays = {name: rng.uniform(-s, s, size=shape_of(config))
              for name, shape_of in _WEIGHT_SHAPES.items()}
    return TfeWeights(**arrays).validate(config)


def stack_windows(windows: list[DataWindow]):
    """Stack a window list into batched arrays (X_p, U, Y_true)."""
    if not windows:
        raise ValueError("empty batch")
    xp = np.stack([w.X_p for w in windows])
    u = np.stack([w.U for w in windows])
    y = np.stack([w.Y_true for w in windows])
    return xp, u, y


def _forward_batch(xp, u, weights: TfeWeights, config: TfeConfig):
    """Batched forward pass; returns (Y, cache) with batch-leading shapes."""
    z1_top = xp @ weights.w_em1.T + weights.b_em1
    z1_bot = u[:, :, None] @ weights.w_em2.T + weights.b_em2
    z1 = np.concatenate([z1_top, z1_bot], axis=1)
    q = z1 @ weights.w_q.T + weights.b_q
    k = z1 @ weights.w_k.T + weights.b_k
    v = z1 @ weights.w_v.T + weights.b_v
    p = q @ np.swapaxes(k, -1, -2) / np.sqrt(config.d_k)
    r = softmax_rows(p)
    z2 = r @ v
    h = (z1 + z2) @ weights.w_l1[0] + weights.b_l1[0]
    y = h @ weights.w_l2.T + weights.b_l2
    return y, (z1, q, k, v, r, z2, h)


def loss(batch: list[DataWindow], weights: TfeWeights, config: TfeConfig) -> float:
    """Mean over the batch of ||Y - Y_true||^2 / p."""
    xp, u, y_true = stack_windows(batch)
    y, _ = _forward_batch(xp, u, weights, config)
    res = y - y_true
    return float(np.sum(res * res) / (len(batch) * config.p))


def _backward_batch(xp, u, y_true, weights: TfeWeights, config: TfeConfig):
    b_count = xp.shape[0]
    y, (z1, q, k, v, r, z2, h) = _forward_batch(xp, u, weights, config)
    res = y - y_true
    loss_val = float(np.sum(res * res) / (b_count * config.p))
    dy = 2.0 * res / (b_count * config.p)

    g_b_l2 = dy.sum(axis=0)
    g_w_l2 = np.einsum("bp,bl->pl", dy, h)
    dh = dy @ weights.w_l2
    z12 = z1 + z2
    g_w_l1 = np.einsum("bl,bld->d", dh, z12)[None, :]
    g_b_l1 = np.array([dh.sum()])
    dz12 = dh[:, :, None] * weights.w_l1[0]

    dr = dz12 @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(r, -1, -2) @ dz12
    # softmax Jacobian per row: diag(r) - r r^T
    dp = r * (dr - np.sum(r * dr, axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(config.d_k)
    dq = dp @ k * scale
    dk = np.swapaxes(dp, -1, -2) @ q * scale

    g_w_q = np.einsum("bld,ble->de", dq, z1)
    g_b_q = dq.sum(axis=(0, 1))
    g_w_k = np.einsum("bld,ble->de", dk, z1)
    g_b_k = dk.sum(axis=(0, 1))
    g_w_v = np.einsum("bld,ble->de", dv, z1)
    g_b_v = dv.sum(axis=(0, 1))

    dz1 = dq @ weights.w_q + dk @ weights.w_k + dv @ weights.w_v + dz12
    dz1_top, dz1_bot = dz1[:, :config.w], dz1[:, config.w:]
    g_w_em1 = np.einsum("bwd,bwc->dc", dz1_top, xp)
    g_b_em1 = dz1_top.sum(axis=(0, 1))
    g_w_em2 = np.einsum("bpd,bp->d", dz1_bot, u)[:, None]
    g_b_em2 = dz1_bot.sum(axis=(0, 1))
    du = dz1_bot @ weights.w_em2[:, 0]

    grads = Gradients(g_w_em1, g_b_em1, g_w_em2, g_b_em2, g_w_q, g_b_q,
                      g_w_k, g_b_k, g_w_v, g_b_v, g_w_l1, g_b_l1, g_w_l2, g_b_l2)
    return loss_val, grads, du


def backward(batch: list[DataWindow], weights: TfeWeights, config: TfeConfig) -> Gradients:
    """Gradient of loss() with respect to every weight and bias array."""
    xp, u, y_true = stack_windows(batch)
    _, grads, _ = _backward_batch(xp, u, y_true, weights, config)
    for name in grads.names():
        if not np.all(np.isfinite(getattr(grads, name))):
            raise GradientError(f"non-finite gradient for parameter {name}")
    return grads


def prediction_vjp(x_p, u, weights: TfeWeights, config: TfeConfig, dy):
    """Vector-Jacobian product of a single forward pass.

    Given the cotangent dy on the prediction, returns (du, dx_p): the
    gradients with respect to the future inputs and the past (u, y) block.
    Used by the direct-optimization baseline and horizon chaining.
    """
    xp_b = np.asarray(x_p, dtype=float)[None]
    u_b = np.asarray(u, dtype=float)[None]
    _, (z1, q, k, v, r, z2, h) = _forward_batch(xp_b, u_b, weights, config)
    dy_b = np.asarray(dy, dtype=float)[None]

    dh = dy_b @ weights.w_l2
    dz12 = dh[:, :, None] * weights.w_l1[0]
    dr = dz12 @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(r, -1, -2) @ dz12
    dp = r * (dr - np.sum(r * dr, axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(config.d_k)
    dq = dp @ k * scale
    dk = np.swapaxes(dp, -1, -2) @ q * scale
    dz1 = dq @ weights.w_q + dk @ weights.w_k + dv @ weights.w_v + dz12
    du = dz1[0, config.w:] @ weights.w_em2[:, 0]
    dx_p = dz1[0, :config.w] @ weights.w_em1
    return du, dx_p


def split_dataset(windows: list[DataWindow], val_fraction: float, gap: int | None = None):
    """Chronological train/validation split with a leakage gap.

    Sliding windows overlap, so a block of `gap` windows (default w+p-1) is
    dropped between the two parts.
    """
    n = len(windows)
    if n < 4:
        raise ValueError("dataset too small to split")
    if gap is None:
        gap = windows[0].w + windows[0].p - 1
    n_train = int(round(n * (1.0 - val_fraction)))
    n_train = min(max(n_train, 1), n - 1)
    val = windows[min(n_train + gap, n - 1):]
    if not val:
        val = windows[n_train:]
    return windows[:n_train], val


@dataclass
class Normalization:
    u_mu: float
    u_sd: float
    y_mu: float
    y_sd: float

    def apply(self, windows):
        out = []
        for w in windows:
            xp = w.X_p.copy()
            xp[:, 0] = (xp[:, 0] - self.u_mu) / self.u_sd
            xp[:, 1] = (xp[:, 1] - self.y_mu) / self.y_sd
            out.append(DataWindow(xp, (w.U - self.u_mu) / self.u_sd,
                                  (w.Y_true - self.y_mu) / self.y_sd))
        return out


def fit_normalization(windows) -> Normalization:
    us = np.concatenate([np.concatenate([w.X_p[:, 0], w.U]) for w in windows])
    ys = np.concatenate([np.concatenate([w.X_p[:, 1], w.Y_true]) for w in windows])
    return Normalization(float(us.mean()), float(us.std() + 1e-12),
                         float(ys.mean()), float(ys.std() + 1e-12))


def fold_normalization(weights: TfeWeights, norm: Normalization) -> TfeWeights:
    """Absorb the affine input/output normalization into the weight arrays."""
    out = weights.copy()
    inv = np.array([1.0 / norm.u_sd, 1.0 / norm.y_sd])
    shift = np.array([norm.u_mu / norm.u_sd, norm.y_mu / norm.y_sd])
    out.b_em1 = out.b_em1 - out.w_em1 @ shift
    out.w_em1 = out.w_em1 * inv
    out.b_em2 = out.b_em2 - out.w_em2[:, 0] * (norm.u_mu / norm.u_sd)
    out.w_em2 = out.w_em2 / norm.u_sd
    out.w_l2 = norm.y_sd * out.w_l2
    out.b_l2 = norm.y_sd * out.b_l2 + norm.y_mu
    return out


def evaluate_windows(weights: TfeWeights, config: TfeConfig, windows):
    """Mean per-window BFR as a percentage; degenerate windows are skipped."""
    if not windows:
        return 0.0, 0
    xp, u, y_true = stack_windows(windows)
    y, _ = _forward_batch(xp, u, weights, config)
    scores, skipped = [], 0
    for i in range(len(windows)):
        denom = np.linalg.norm(y_true[i] - y_true[i].mean())
        if denom == 0.0:
            skipped += 1
            continue
        scores.append(max(0.0, 1.0 - np.linalg.norm(y[i] - y_true[i]) / denom))
    if not scores:
        return 0.0, skipped
    return 100.0 * float(np.mean(scores)), skipped


def evaluate(weights: TfeWeights, config: TfeConfig, train_windows, val_windows):
    """(train BFR %, validation BFR %) with degenerate-window counts."""
    tr, sk_tr = evaluate_windows(weights, config, train_windows)
    va, sk_va = evaluate_windows(weights, config, val_windows)
    return tr, va, sk_tr, sk_va


def train(dataset: list[DataWindow], config: TrainConfig, model_config: TfeConfig):
    """Train on windowed data; returns folded weights and a report.

    Deterministic given the seed.  The best-validation-BFR snapshot is
    returned, not the final iterate.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    train_raw, val_raw = split_dataset(dataset, config.val_fraction)
    norm = fit_normalization(train_raw)
    train_w = norm.apply(train_raw)
    val_w = norm.apply(val_raw)
    xp_tr, u_tr, y_tr = stack_windows(train_w)

    weights = init_weights(model_config, config.init_scale, rng)
    names = weights.names()
    m = {n: np.zeros_like(getattr(weights, n)) for n in names}
    v = {n: np.zeros_like(getattr(weights, n)) for n in names}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step_count = 0

    best = weights.copy()
    best_val = -np.inf
    best_epoch = 0
    since_best = 0
    epoch_losses = []

    n_train = len(train_w)
    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        running = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss_val, grads, _ = _backward_batch(xp_tr[idx], u_tr[idx], y_tr[idx],
                                                 weights, model_config)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(epoch)
            running += loss_val * len(idx)
            step_count += 1
            for name in names:
                g = getattr(grads, name)
                w_arr = getattr(weights, name)
                if config.optimizer == "sgd":
                    setattr(weights, name, w_arr - config.learning_rate * g)
                else:
                    m[name] = beta1 * m[name] + (1 - beta1) * g
                    v[name] = beta2 * v[name] + (1 - beta2) * g * g
                    mhat = m[name] / (1 - beta1 ** step_count)
                    vhat = v[name] / (1 - beta2 ** step_count)
                    setattr(weights, name, w_arr - config.learning_rate * mhat / (np.sqrt(vhat) + eps))
        epoch_losses.append(running / n_train)
        val_bfr, _ = evaluate_windows(weights, model_config, val_w)
        if val_bfr > best_val:
            best_val = val_bfr
            best = weights.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    folded = fold_normalization(best, norm)
    tr_bfr, sk_tr = evaluate_windows(folded, model_config, train_raw)
    va_bfr, sk_va = evaluate_windows(folded, model_config, val_raw)
    report = TrainReport(epoch_losses, tr_bfr, va_bfr,
                         time.perf_counter() - t0, best_epoch, sk_tr, sk_va)
    return folded, report
