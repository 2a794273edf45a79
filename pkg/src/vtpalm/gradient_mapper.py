"""Per-pixel intensity-to-slope regression.

A small fully connected ReLU network maps (I_R, I_G, I_B, u, v) to the slope
pair (G_u, G_v).  Training uses Adam on a mean L1 objective with dropout
before the output layer and early stopping on a held-out validation split;
everything is plain numpy and bit-reproducible for a fixed seed.  A
nearest-neighbor lookup over the training set serves as a model-free
cross-check.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import GradientField, RasterImage, SegMask, VTPalmError, require_same_shape
from .tactile_calib import GradientDataset, normalized_coords

WEIGHTS_MAGIC = b"VTPW"


class TrainingError(VTPalmError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, epoch, message):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class MlpConfig:
    """Training recipe for the slope regressor.

    ``calibrate_output`` rescales each output channel on the validation
    split after training.  Minimizing L1 with dropout in front of the output
    layer settles on amplitudes shrunk by roughly the keep probability (the
    loss tracks the median of the masked sum, which inverted dropout does
    not unbias), so the raw network systematically underestimates slopes;
    the calibration is a per-output scalar fitted on validation data and is
    only kept when it does not worsen the validation L1.
    """

    hidden_sizes: tuple = (16, 64, 32, 8)
    activation: str = "relu"
    dropout_p: float = 0.3  # applied before the output layer, training only
    learning_rate: float = 3e-5
    loss: str = "l1"
    max_epochs: int = 120
    early_stop_patience: int = 10
    batch_size: int = 4096
    seed: int = 0
    val_fraction: float = 0.15
    calibrate_output: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.activation != "relu":
            raise TrainingError(f"only relu activation is implemented, got {self.activation!r}")
        if self.loss != "l1":
            raise TrainingError(f"only the l1 loss is implemented, got {self.loss!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise TrainingError("dropout_p must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if not self.hidden_sizes:
            raise TrainingError("need at least one hidden layer")

    @property
    def layer_sizes(self):
        return (5, *self.hidden_sizes, 2)


@dataclass(frozen=True)
class MlpWeights:
    """Per-layer weight matrices (n_in, n_out) and bias vectors."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise TrainingError("need matching weight/bias lists")
        for w, b in zip(ws, bs):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise TrainingError(f"layer shape mismatch: W {w.shape}, b {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise TrainingError("weights contain non-finite values")
        for a, b in zip(ws[:-1], ws[1:]):
            if a.shape[1] != b.shape[0]:
                raise TrainingError("consecutive layers do not chain")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def layer_sizes(self):
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))


@dataclass
class TrainingLog:
    train_l1: list = field(default_factory=list)
    val_l1: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    final_val_mse: float = float("nan")
    seed: int = 0

    def save_csv(self, path):
        with open(path, "w", encoding="ascii") as f:
            f.write("epoch,train_l1,val_l1\n")
            for ep, (tr, va) in enumerate(zip(self.train_l1, self.val_l1)):
                f.write(f"{ep},{tr!r},{va!r}\n")


def _init_weights(cfg: MlpConfig, rng):
    ws, bs = [], []
    sizes = cfg.layer_sizes
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / n_in)  # He-style uniform for the ReLU stack
        ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
        # hidden biases start slightly positive: the features are all
        # non-negative, and zero-bias units can otherwise be born dead
        bias = 0.1 if i < len(sizes) - 2 else 0.0
        bs.append(np.full(n_out, bias))
    return ws, bs


def _forward(ws, bs, x, drop_mask=None):
    """Forward pass; returns (per-layer inputs, output).

    ``drop_mask`` is the inverted-dropout scaling applied to the penultimate
    activations during training; inference passes None.
    """
    acts = [x]
    h = x
    for i in range(len(ws) - 1):
        h = np.maximum(0.0, h @ ws[i] + bs[i])
        acts.append(h)
    if drop_mask is not None:
        h = h * drop_mask
        acts[-1] = h
    return acts, h @ ws[-1] + bs[-1]


def l1_loss_and_gradients(ws, bs, x, y, drop_mask=None):
    """Mean L1 loss over samples and outputs, with analytic parameter grads."""
    acts, out = _forward(ws, bs, x, drop_mask)
    resid = out - y
    loss = float(np.mean(np.abs(resid)))
    d = np.sign(resid) / resid.size
    gws = [None] * len(ws)
    gbs = [None] * len(bs)
    for i in range(len(ws) - 1, -1, -1):
        gws[i] = acts[i].T @ d
        gbs[i] = d.sum(axis=0)
        if i > 0:
            d = d @ ws[i].T
            if i == len(ws) - 1 and drop_mask is not None:
                d = d * drop_mask
            d = d * (acts[i] > 0)
    return loss, gws, gbs


def train(dataset: GradientDataset, cfg: Optional[MlpConfig] = None):
    """Fit the regressor; returns (best MlpWeights, TrainingLog).

    The seed drives the 85/15 train/validation split, the init, the epoch
    shuffles, and the dropout masks, so two runs with the same inputs give
    identical logs and weights.  Training stops early once the validation L1
    has not improved for ``early_stop_patience`` consecutive epochs, and the
    weights returned are the ones with the best recorded validation loss.
    """
    cfg = cfg or MlpConfig()
    n = len(dataset)
    if n == 0:
        raise TrainingError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx
    x_tr, y_tr = dataset.inputs[train_idx], dataset.labels[train_idx]
    x_va, y_va = dataset.inputs[val_idx], dataset.labels[val_idx]

    ws, bs = _init_weights(cfg, rng)
    m_w = [np.zeros_like(w) for w in ws]
    v_w = [np.zeros_like(w) for w in ws]
    m_b = [np.zeros_like(b) for b in bs]
    v_b = [np.zeros_like(b) for b in bs]
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    step = 0

    log = TrainingLog(seed=cfg.seed)
    best_val = np.inf
    best = None
    bad_epochs = 0
    n_pen = cfg.layer_sizes[-2]

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(x_tr))
        epoch_loss = 0.0
        n_batches = 0
        for k in range(0, len(x_tr), cfg.batch_size):
            sel = perm[k:k + cfg.batch_size]
            xb, yb = x_tr[sel], y_tr[sel]
            if cfg.dropout_p > 0.0:
                keep = (rng.random((len(xb), n_pen)) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
            else:
                keep = None
            loss, gws, gbs = l1_loss_and_gradients(ws, bs, xb, yb, keep)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, f"non-finite loss at epoch {epoch}")
            epoch_loss += loss
            n_batches += 1
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for i in range(len(ws)):
                m_w[i] = b1 * m_w[i] + (1 - b1) * gws[i]
                v_w[i] = b2 * v_w[i] + (1 - b2) * gws[i] ** 2
                ws[i] -= cfg.learning_rate * (m_w[i] / c1) / (np.sqrt(v_w[i] / c2) + eps)
                m_b[i] = b1 * m_b[i] + (1 - b1) * gbs[i]
                v_b[i] = b2 * v_b[i] + (1 - b2) * gbs[i] ** 2
                bs[i] -= cfg.learning_rate * (m_b[i] / c1) / (np.sqrt(v_b[i] / c2) + eps)
        _, val_out = _forward(ws, bs, x_va)
        val_l1 = float(np.mean(np.abs(val_out - y_va)))
        if not np.isfinite(val_l1):
            raise TrainingDivergedError(epoch, f"non-finite validation loss at epoch {epoch}")
        log.train_l1.append(epoch_loss / max(1, n_batches))
        log.val_l1.append(val_l1)
        if val_l1 < best_val:
            best_val = val_l1
            best = ([w.copy() for w in ws], [b.copy() for b in bs])
            log.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                log.stopped_early = True
                break

    ws, bs = best
    if cfg.calibrate_output:
        _calibrate_output_scale(ws, bs, x_va, y_va)
    _, val_out = _forward(ws, bs, x_va)
    log.final_val_mse = float(np.mean((val_out - y_va) ** 2))
    return MlpWeights(tuple(ws), tuple(bs)), log


def _calibrate_output_scale(ws, bs, x_va, y_va):
    """Per-output scale fix for the dropout amplitude bias, fitted on
    validation data and applied only when it helps the validation L1."""
    _, pred = _forward(ws, bs, x_va)
    base_l1 = np.mean(np.abs(pred - y_va), axis=0)
    for k in range(pred.shape[1]):
        den = float(pred[:, k] @ pred[:, k])
        if den <= 0:
            continue
        scale = float(pred[:, k] @ y_va[:, k]) / den
        if not 0.5 <= scale <= 2.0:
            continue
        if np.mean(np.abs(scale * pred[:, k] - y_va[:, k])) <= base_l1[k]:
            ws[-1][:, k] *= scale
            bs[-1][k] *= scale


def infer_gradients(weights: MlpWeights, image: RasterImage,
                    domain: Optional[SegMask] = None) -> GradientField:
    """Predict the slope field of a tactile frame (dropout disabled).

    Pixels outside ``domain`` (or everything, when domain is None) get
    (0, 0).  The image must be 3-channel and the weights 5-in/2-out.
    """
    if image.channels != 3:
        raise TrainingError("inference needs a 3-channel frame")
    sizes = weights.layer_sizes
    if sizes[0] != 5 or sizes[-1] != 2:
        raise TrainingError(f"weights map {sizes[0]} -> {sizes[-1]}, expected 5 -> 2")
    h, w = image.height, image.width
    gu = np.zeros((h, w))
    gv = np.zeros((h, w))
    if domain is not None:
        require_same_shape(image, domain, "image and domain mask")
        rows, cols = np.nonzero(domain.values)
        if len(rows) == 0:
            return GradientField(gu, gv)
    else:
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        cols, rows = cols.ravel(), rows.ravel()
    un, vn = normalized_coords(cols, rows, w, h)
    rgb = image.data[rows, cols, :]
    x = np.column_stack([rgb[:, 0], rgb[:, 1], rgb[:, 2], un, vn])
    _, out = _forward(list(weights.weights), list(weights.biases), x)
    gu[rows, cols] = out[:, 0]
    gv[rows, cols] = out[:, 1]
    return GradientField(gu, gv)


def lookup_baseline(dataset: GradientDataset, image: RasterImage,
                    domain: Optional[SegMask] = None,
                    coord_weight: float = 0.25) -> GradientField:
    """Nearest-neighbor label lookup in (I_R, I_G, I_B, u, v) space.

    Position coordinates are down-weighted by ``coord_weight`` in the
    Euclidean metric.  Serves as the memorization oracle the trained network
    is compared against.
    """
    if len(dataset) == 0:
        raise TrainingError("empty lookup dataset")
    if image.channels != 3:
        raise TrainingError("lookup needs a 3-channel frame")
    scale = np.array([1.0, 1.0, 1.0, coord_weight, coord_weight])
    tree = cKDTree(dataset.inputs * scale)
    h, w = image.height, image.width
    gu = np.zeros((h, w))
    gv = np.zeros((h, w))
    if domain is not None:
        require_same_shape(image, domain, "image and domain mask")
        rows, cols = np.nonzero(domain.values)
        if len(rows) == 0:
            return GradientField(gu, gv)
    else:
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        cols, rows = cols.ravel(), rows.ravel()
    un, vn = normalized_coords(cols, rows, w, h)
    rgb = image.data[rows, cols, :]
    q = np.column_stack([rgb[:, 0], rgb[:, 1], rgb[:, 2], un, vn]) * scale
    _, idx = tree.query(q, k=1)
    gu[rows, cols] = dataset.labels[idx, 0]
    gv[rows, cols] = dataset.labels[idx, 1]
    return GradientField(gu, gv)


def save_weights(weights: MlpWeights, path) -> None:
    """Serialize weights: magic, u32 layer count, per-layer u32 dims, f32 data."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(weights.weights)))
        for w in weights.weights:
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(weights.weights, weights.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_weights(path) -> MlpWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise TrainingError(f"bad magic in {path}")
    (n_layers,) = struct.unpack("<I", blob[4:8])
    off = 8
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack("<II", blob[off:off + 8]))
        off += 8
    ws, bs = [], []
    for n_in, n_out in dims:
        w = np.frombuffer(blob[off:off + 4 * n_in * n_out], dtype="<f4")
        off += 4 * n_in * n_out
        b = np.frombuffer(blob[off:off + 4 * n_out], dtype="<f4")
        off += 4 * n_out
        if len(w) != n_in * n_out or len(b) != n_out:
            raise TrainingError(f"truncated weights file {path}")
        ws.append(w.astype(np.float64).reshape(n_in, n_out))
        bs.append(b.astype(np.float64))
    if off != len(blob):
        raise TrainingError(f"trailing bytes in weights file {path}")
    return MlpWeights(tuple(ws), tuple(bs))
