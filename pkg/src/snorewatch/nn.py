"""From-scratch convolutional network for two-class audio images.

Architecture: three 3x3 conv layers (8/16/32 filters, same padding), each
followed by ReLU and 2x2 max pooling, then four dense layers widening
16 -> 32 -> 64 -> 128 with ReLU and dropout, and a 2-way softmax output.
Everything is plain numpy in float64; parameters live on the float32 grid
so the weights file round-trips bit-exactly.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, FrameWindow, Label, stream_windows
from .errors import CorruptError, DataError, FormatError, ShapeError
from .features import FeatureImage, SpectrogramConfig, extract

CONV_CHANNELS = (8, 16, 32)
DENSE_WIDTHS = (16, 32, 64, 128)
N_CLASSES = 2
# class indexes match the wire codes: 0 = non-snoring, 1 = snoring
CLASS_LABELS = (Label.NON_SNORING, Label.SNORING)

DEFAULT_WINDOW_MS = 999
DEFAULT_HOP_MS = 333


def _f32_grid(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage."""
    return arr.astype(np.float32).astype(np.float64)


@dataclass(eq=False)
class ModelParams:
    """All weights of the network, plus the input side they expect."""

    input_side: int
    conv_kernels: list[np.ndarray]  # each (3, 3, c_in, c_out)
    conv_biases: list[np.ndarray]
    dense_weights: list[np.ndarray]  # 4 hidden + 1 output, each (n_in, n_out)
    dense_biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.conv_kernels) != 3 or len(self.conv_biases) != 3:
            raise ShapeError("expected exactly 3 conv layers")
        for k in self.conv_kernels:
            if k.shape[:2] != (3, 3):
                raise ShapeError("conv kernels must be 3x3")
        widths = tuple(w.shape[1] for w in self.dense_weights)
        if widths != DENSE_WIDTHS + (N_CLASSES,):
            raise ShapeError(f"dense widths must be {DENSE_WIDTHS} + ({N_CLASSES},), got {widths}")
        for arrs in (self.conv_kernels, self.conv_biases, self.dense_weights, self.dense_biases):
            for a in arrs:
                if not np.isfinite(a).all():
                    raise ValueError("parameters must be finite")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.input_side == other.input_side and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self) -> list[np.ndarray]:
        return [*self.conv_kernels, *self.conv_biases, *self.dense_weights, *self.dense_biases]

    def n_params(self) -> int:
        return sum(a.size for a in self._arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.input_side,
            [k.copy() for k in self.conv_kernels],
            [b.copy() for b in self.conv_biases],
            [w.copy() for w in self.dense_weights],
            [b.copy() for b in self.dense_biases],
        )


@dataclass(frozen=True)
class Gradients:
    conv_kernels: list[np.ndarray]
    conv_biases: list[np.ndarray]
    dense_weights: list[np.ndarray]
    dense_biases: list[np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters."""

    base_lr: float = 0.0005
    batch_size: int = 64
    epochs: int = 30
    dropout_rate: float = 0.25
    decay_rate: float = 1.0
    decay_steps: int = 1000
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class Prediction:
    p_snore: float
    p_non_snore: float
    inferred_class: Label
    latency_ms: float


@dataclass(frozen=True)
class EvalReport:
    """Clip-level classification quality, snoring as the positive class."""

    accuracy: float
    false_positive_rate: float
    false_negative_rate: float
    true_positives: int
    false_positives: int
    true_negatives: int
    false_negatives: int
    mean_latency_ms: float
    n_clips: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "false_positive_rate": self.false_positive_rate,
            "false_negative_rate": self.false_negative_rate,
            "confusion": {
                "tp": self.true_positives,
                "fp": self.false_positives,
                "tn": self.true_negatives,
                "fn": self.false_negatives,
            },
            "mean_latency_ms": self.mean_latency_ms,
            "n_clips": self.n_clips,
        }


def flat_size(input_side: int) -> int:
    """Flattened width after the three conv/pool blocks."""
    return (input_side // 8) ** 2 * CONV_CHANNELS[-1]


def init_params(input_side: int, seed: int) -> ModelParams:
    """He-initialized parameters on the float32 grid."""
    if input_side // 8 < 1:
        raise ShapeError(f"input side {input_side} too small for three 2x2 pools")
    rng = np.random.default_rng(seed)
    kernels, kbiases = [], []
    c_in = 1
    for c_out in CONV_CHANNELS:
        scale = np.sqrt(2.0 / (9 * c_in))
        kernels.append(_f32_grid(rng.normal(0.0, scale, size=(3, 3, c_in, c_out))))
        kbiases.append(np.zeros(c_out))
        c_in = c_out
    weights, biases = [], []
    n_in = flat_size(input_side)
    for n_out in DENSE_WIDTHS:
        weights.append(_f32_grid(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))))
        biases.append(np.zeros(n_out))
        n_in = n_out
    weights.append(_f32_grid(rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, N_CLASSES))))
    biases.append(np.zeros(N_CLASSES))
    return ModelParams(input_side, kernels, kbiases, weights, biases)


# --- forward / backward -------------------------------------------------


def _conv_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 same-padding convolution as one im2col matmul."""
    b, h, w, c_in = x.shape
    x_pad = np.zeros((b, h + 2, w + 2, c_in))
    x_pad[:, 1:-1, 1:-1, :] = x
    cols = np.lib.stride_tricks.sliding_window_view(x_pad, (3, 3), axis=(1, 2))
    cols = cols.reshape(b * h * w, c_in * 9)
    folded = kernel.transpose(2, 0, 1, 3).reshape(c_in * 9, -1)
    out = (cols @ folded).reshape(b, h, w, -1) + bias
    return out, x_pad


def _conv_backward(
    d_out: np.ndarray, x_pad: np.ndarray, kernel: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, h, w, c_out = d_out.shape
    d_kernel = np.empty_like(kernel)
    d_x_pad = np.zeros_like(x_pad)
    flat_out = d_out.reshape(-1, c_out)
    for di in range(3):
        for dj in range(3):
            patch = x_pad[:, di : di + h, dj : dj + w, :].reshape(-1, kernel.shape[2])
            d_kernel[di, dj] = patch.T @ flat_out
            d_x_pad[:, di : di + h, dj : dj + w, :] += d_out @ kernel[di, dj].T
    d_bias = flat_out.sum(axis=0)
    return d_x_pad[:, 1:-1, 1:-1, :], d_kernel, d_bias


def _maxpool(x: np.ndarray, want_indices: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """2x2/stride-2 max pool; odd trailing rows/columns are dropped.

    Index bookkeeping (for backprop routing) is skipped at inference.
    """
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    grouped = x[:, : 2 * h2, : 2 * w2, :].reshape(b, h2, 2, w2, 2, c)
    if not want_indices:
        return grouped.max(axis=(2, 4)), None
    grouped = grouped.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    idx = grouped.argmax(axis=4)
    out = np.take_along_axis(grouped, idx[..., None], axis=4)[..., 0]
    return out, idx


def _maxpool_backward(d_out: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    b, h, w, c = in_shape
    h2, w2 = h // 2, w // 2
    buf = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(buf, idx[..., None], d_out[..., None], axis=4)
    dx = np.zeros(in_shape)
    dx[:, : 2 * h2, : 2 * w2, :] = (
        buf.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    )
    return dx


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(
    params: ModelParams,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> tuple[np.ndarray, dict]:
    """Run the network on a (batch, side, side, 1) tensor.

    Returns class probabilities and, for training, the caches backprop
    needs (padded conv inputs, ReLU masks, pool routings, dropout masks).
    """
    if x.ndim != 4 or x.shape[1] != params.input_side or x.shape[2] != params.input_side:
        raise ShapeError(f"expected (batch, {params.input_side}, {params.input_side}, 1) input, got {x.shape}")
    if train and dropout_rate > 0.0 and rng is None:
        raise ValueError("training with dropout needs an rng")

    cache: dict = {"conv": [], "dense": []}
    for kernel, bias in zip(params.conv_kernels, params.conv_biases):
        z, x_pad = _conv_same(x, kernel, bias)
        if train:
            relu_mask = z > 0
            a = z * relu_mask
            pooled, pool_idx = _maxpool(a, want_indices=True)
            cache["conv"].append((x_pad, relu_mask, pool_idx, a.shape))
        else:
            a = np.maximum(z, 0.0, out=z)
            pooled, _ = _maxpool(a, want_indices=False)
        x = pooled

    h = x.reshape(x.shape[0], -1)
    cache["flat_shape"] = x.shape
    for w, bias in zip(params.dense_weights[:-1], params.dense_biases[:-1]):
        z = h @ w + bias
        if train:
            relu_mask = z > 0
            a = z * relu_mask
            if dropout_rate > 0.0:
                mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            else:
                mask = None
            cache["dense"].append((h, relu_mask, mask))
            h = a if mask is None else a * mask
        else:
            h = np.maximum(z, 0.0, out=z)

    logits = h @ params.dense_weights[-1] + params.dense_biases[-1]
    cache["last_hidden"] = h
    probs = _softmax(logits)
    return probs, cache


def forward(
    params: ModelParams,
    image: FeatureImage,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
):
    """Classify one feature image.

    In "infer" mode returns a Prediction (deterministic, dropout off). In
    "train" mode returns (Prediction, caches) with dropout applied.
    """
    if mode not in ("infer", "train"):
        raise ValueError("mode must be 'infer' or 'train'")
    if image.side != params.input_side:
        raise ShapeError(f"model expects {params.input_side}x{params.input_side}, image is {image.side}x{image.side}")
    x = image.values[None, :, :, None]
    start = time.perf_counter()
    train = mode == "train"
    probs, cache = _forward_batch(params, x, train=train, rng=rng, dropout_rate=dropout_rate if train else 0.0)
    latency_ms = (time.perf_counter() - start) * 1000.0
    pred = Prediction(
        p_snore=float(probs[0, 1]),
        p_non_snore=float(probs[0, 0]),
        inferred_class=CLASS_LABELS[int(probs[0].argmax())],
        latency_ms=latency_ms,
    )
    return (pred, cache) if train else pred


def batch_loss(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of a batch, dropout off. Finite-difference target."""
    probs, _ = _forward_batch(params, x)
    return float(-np.mean(np.log(probs[np.arange(len(y)), y] + 1e-300)))


def backward(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> tuple[Gradients, float]:
    """Gradients of the mean cross-entropy over a batch.

    The forward pass runs inside so the dropout masks used here are exactly
    the ones differentiated.
    """
    if len(x) == 0:
        raise DataError("empty batch")
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    probs, cache = _forward_batch(params, x, train=True, rng=rng, dropout_rate=dropout_rate)
    batch = len(x)
    loss = float(-np.mean(np.log(probs[np.arange(batch), y] + 1e-300)))

    d_logits = probs.copy()
    d_logits[np.arange(batch), y] -= 1.0
    d_logits /= batch

    d_dense_w = [None] * len(params.dense_weights)
    d_dense_b = [None] * len(params.dense_biases)
    d_dense_w[-1] = cache["last_hidden"].T @ d_logits
    d_dense_b[-1] = d_logits.sum(axis=0)
    dh = d_logits @ params.dense_weights[-1].T

    for i in range(len(DENSE_WIDTHS) - 1, -1, -1):
        h_in, relu_mask, mask = cache["dense"][i]
        if mask is not None:
            dh = dh * mask
        dz = dh * relu_mask
        d_dense_w[i] = h_in.T @ dz
        d_dense_b[i] = dz.sum(axis=0)
        dh = dz @ params.dense_weights[i].T

    dx = dh.reshape(cache["flat_shape"])
    d_kernels = [None] * 3
    d_kbiases = [None] * 3
    for i in range(2, -1, -1):
        x_pad, relu_mask, pool_idx, act_shape = cache["conv"][i]
        da = _maxpool_backward(dx, pool_idx, act_shape)
        dz = da * relu_mask
        dx, d_kernels[i], d_kbiases[i] = _conv_backward(dz, x_pad, params.conv_kernels[i])

    return Gradients(d_kernels, d_kbiases, d_dense_w, d_dense_b), loss


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Inverse-time decay: base_lr / (1 + decay_rate * step / decay_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.base_lr / (1.0 + cfg.decay_rate * step / cfg.decay_steps)


def _apply_update(params: ModelParams, grads: Gradients, lr: float) -> None:
    for p, g in zip(params.conv_kernels, grads.conv_kernels):
        p -= lr * g
    for p, g in zip(params.conv_biases, grads.conv_biases):
        p -= lr * g
    for p, g in zip(params.dense_weights, grads.dense_weights):
        p -= lr * g
    for p, g in zip(params.dense_biases, grads.dense_biases):
        p -= lr * g


def clip_windows(clip: AudioClip, window_len_ms: int, hop_ms: int) -> list[FrameWindow]:
    """Analysis windows of a clip; a too-short clip yields one padded window."""
    windows = stream_windows(clip, window_len_ms, hop_ms)
    if windows:
        return windows
    want = (window_len_ms * clip.sample_rate) // 1000
    padded = np.zeros(want)
    padded[: clip.samples.size] = clip.samples
    return [FrameWindow(samples=padded, start_time_ms=0, sample_rate=clip.sample_rate)]


def _corpus_images(
    clips: list[AudioClip],
    input_side: int,
    spec_cfg: SpectrogramConfig,
    window_len_ms: int,
    hop_ms: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window every clip and extract images. Returns (x, y, clip_index)."""
    images, labels, owners = [], [], []
    for i, clip in enumerate(clips):
        if clip.label is None:
            raise DataError("corpus clips must be labeled")
        for window in clip_windows(clip, window_len_ms, hop_ms):
            images.append(extract(window, spec_cfg, input_side).values)
            labels.append(CLASS_LABELS.index(clip.label))
            owners.append(i)
    x = np.asarray(images)[..., None]
    return x, np.asarray(labels), np.asarray(owners)


def train(
    clips: list[AudioClip],
    cfg: TrainConfig,
    input_side: int,
    spec_cfg: SpectrogramConfig | None = None,
    window_len_ms: int = DEFAULT_WINDOW_MS,
    hop_ms: int = DEFAULT_HOP_MS,
) -> tuple[ModelParams, list[dict]]:
    """Mini-batch SGD over a labeled corpus; deterministic for a given seed.

    Clips are split 80/20 stratified by class before windowing, so no clip
    leaks windows into both sides. History rows carry per-epoch training
    loss/accuracy and validation loss/accuracy (per window).
    """
    spec_cfg = spec_cfg or SpectrogramConfig()
    labels_present = {c.label for c in clips}
    if Label.SNORING not in labels_present or Label.NON_SNORING not in labels_present:
        raise DataError("training corpus must contain both classes")

    rng = np.random.default_rng(cfg.seed)
    train_clips, val_clips = [], []
    for label in CLASS_LABELS:
        members = [c for c in clips if c.label == label]
        order = rng.permutation(len(members))
        n_val = max(1, int(round(len(members) * cfg.val_fraction)))
        val_clips += [members[i] for i in order[:n_val]]
        train_clips += [members[i] for i in order[n_val:]]

    x_train, y_train, _ = _corpus_images(train_clips, input_side, spec_cfg, window_len_ms, hop_ms)
    x_val, y_val, _ = _corpus_images(val_clips, input_side, spec_cfg, window_len_ms, hop_ms)

    params = init_params(input_side, seed=int(rng.integers(2**31)))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        epoch_hits = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            probs, _ = _forward_batch(params, xb)
            epoch_hits += int((probs.argmax(axis=1) == yb).sum())
            grads, loss = backward(params, xb, yb, rng=rng, dropout_rate=cfg.dropout_rate)
            _apply_update(params, grads, lr_schedule(cfg, step))
            epoch_loss += loss * len(batch)
            step += 1
        val_probs, _ = _forward_batch(params, x_val)
        val_loss = float(-np.mean(np.log(val_probs[np.arange(len(y_val)), y_val] + 1e-300)))
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / len(order),
                "train_accuracy": epoch_hits / len(order),
                "val_loss": val_loss,
                "val_accuracy": float((val_probs.argmax(axis=1) == y_val).mean()),
                "lr": lr_schedule(cfg, step),
            }
        )

    for arrs in (params.conv_kernels, params.conv_biases, params.dense_weights, params.dense_biases):
        for i, a in enumerate(arrs):
            arrs[i] = _f32_grid(a)
    return params, history


def evaluate(
    params: ModelParams,
    clips: list[AudioClip],
    spec_cfg: SpectrogramConfig | None = None,
    window_len_ms: int = DEFAULT_WINDOW_MS,
    hop_ms: int = DEFAULT_HOP_MS,
) -> EvalReport:
    """Clip-level confusion report: a clip's class is the argmax of its mean
    window probabilities; latency is the mean single-window forward time."""
    if not clips:
        raise DataError("empty evaluation corpus")
    spec_cfg = spec_cfg or SpectrogramConfig()
    tp = fp = tn = fn = 0
    latencies = []
    for clip in clips:
        if clip.label is None:
            raise DataError("evaluation clips must be labeled")
        p_snore = []
        for window in clip_windows(clip, window_len_ms, hop_ms):
            pred = forward(params, extract(window, spec_cfg, params.input_side))
            p_snore.append(pred.p_snore)
            latencies.append(pred.latency_ms)
        predicted = Label.SNORING if float(np.mean(p_snore)) >= 0.5 else Label.NON_SNORING
        actual = clip.label
        if actual == Label.SNORING:
            tp += predicted == Label.SNORING
            fn += predicted != Label.SNORING
        else:
            tn += predicted == Label.NON_SNORING
            fp += predicted != Label.NON_SNORING
    total = tp + fp + tn + fn
    return EvalReport(
        accuracy=(tp + tn) / total,
        false_positive_rate=fp / (fp + tn) if fp + tn else 0.0,
        false_negative_rate=fn / (fn + tp) if fn + tp else 0.0,
        true_positives=int(tp),
        false_positives=int(fp),
        true_negatives=int(tn),
        false_negatives=int(fn),
        mean_latency_ms=float(np.mean(latencies)),
        n_clips=total,
    )


# --- weights file -------------------------------------------------------
#
# Layout (little-endian): magic "KWNN", version u16, input_side u16,
# conv-layer count u8 then (kh, kw, c_in, c_out) u16 each, dense-layer
# count u8 then (n_in u32, n_out u16) each, float32 weight block
# (kernel+bias per conv, weight+bias per dense, C order), crc32 of the
# weight block.

_MAGIC = b"KWNN"
_VERSION = 1


def save_params(params: ModelParams, path) -> None:
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<HH", _VERSION, params.input_side)
    header += struct.pack("<B", len(params.conv_kernels))
    for k in params.conv_kernels:
        header += struct.pack("<HHHH", *k.shape)
    header += struct.pack("<B", len(params.dense_weights))
    for w in params.dense_weights:
        header += struct.pack("<IH", w.shape[0], w.shape[1])
    body = bytearray()
    for k, b in zip(params.conv_kernels, params.conv_biases):
        body += k.astype("<f4").tobytes()
        body += b.astype("<f4").tobytes()
    for w, b in zip(params.dense_weights, params.dense_biases):
        body += w.astype("<f4").tobytes()
        body += b.astype("<f4").tobytes()
    trailer = struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(header) + bytes(body) + trailer)


def load_params(path, expected_side: int | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a KWNN weights file")
    version, input_side = struct.unpack_from("<HH", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expected_side is not None and input_side != expected_side:
        raise ShapeError(f"{path}: model is {input_side}x{input_side}, expected {expected_side}x{expected_side}")
    pos = 8
    (n_conv,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    conv_shapes = []
    for _ in range(n_conv):
        conv_shapes.append(struct.unpack_from("<HHHH", raw, pos))
        pos += 8
    (n_dense,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    dense_shapes = []
    for _ in range(n_dense):
        dense_shapes.append(struct.unpack_from("<IH", raw, pos))
        pos += 6

    body_len = 4 * sum(np.prod(s) + s[3] for s in conv_shapes)
    body_len += 4 * sum(n_in * n_out + n_out for n_in, n_out in dense_shapes)
    body = raw[pos : pos + body_len]
    if len(body) != body_len or len(raw) < pos + body_len + 4:
        raise FormatError(f"{path}: truncated weights file")
    (crc,) = struct.unpack_from("<I", raw, pos + body_len)
    if zlib.crc32(body) != crc:
        raise CorruptError(f"{path}: weight checksum mismatch")

    offset = 0

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).astype(np.float64)
        offset += 4 * n
        return arr.reshape(shape)

    kernels, kbiases, weights, biases = [], [], [], []
    for shape in conv_shapes:
        kernels.append(take(shape))
        kbiases.append(take((shape[3],)))
    for n_in, n_out in dense_shapes:
        weights.append(take((n_in, n_out)))
        biases.append(take((n_out,)))
    try:
        return ModelParams(int(input_side), kernels, kbiases, weights, biases)
    except ShapeError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
