"""Convolutional gaze regressor with handwritten backpropagation.

The network follows a small pre-activation residual design:

    stem conv 3x3 (bias-free)
    -> 3 residual stages (one block each by default; blocks entering
       stages 2 and 3 downsample with stride 2 and widen the channels,
       using a 1x1 projection on the shortcut)
    -> batch norm + ReLU -> global average pool
    -> fully connected + ReLU
    -> concatenate the head angle
    -> linear regression to 2 outputs

Each residual block is pre-activated: bn -> relu -> conv -> bn -> relu
-> conv, added to the shortcut. All convolutions are bias-free; the
batch norm shifts play that role. The training loss is the sum (or
mean) of per-sample Euclidean distances between prediction and target.

Convolutions run as matrix products over im2col patch rows, in batch
chunks so patch buffers stay bounded. Activations are kept in
channels-last order internally, which lets the products write their
outputs without transposition; the public Batch layout stays
channels-first. Batch norm keeps only per-channel statistics in the
cache and reconstructs what it needs in the backward pass from the
cached layer inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, StaleCacheError, ValidationError

__all__ = [
    "Batch",
    "NetworkConfig",
    "NetworkParams",
    "backward",
    "forward",
    "gradient_check",
    "init_network",
    "load_checkpoint",
    "loss",
    "loss_gradient",
    "save_checkpoint",
]

_REDUCTIONS = ("sum", "mean")
# Upper bound on im2col buffer elements per chunk (about 128 MB in f64).
_CHUNK_ELEMS = 16_000_000


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters."""

    input_shape: tuple = (36, 60)
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    fc_width: int = 64
    head_angle_dim: int = 2
    output_dim: int = 2
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        h, w = self.input_shape
        if h < 4 or w < 4:
            raise ValidationError("input shape must be at least 4x4")
        if h % 4 or w % 4:
            raise ValidationError("input sides must be divisible by 4 (two stride-2 stages)")
        if self.stem_channels < 1 or self.fc_width < 1 or self.blocks_per_stage < 1:
            raise ValidationError("channel and width counts must be positive")
        if len(self.stage_channels) != 3 or any(c < 1 for c in self.stage_channels):
            raise ValidationError("stage_channels must be three positive counts")
        if self.bn_epsilon <= 0.0:
            raise ValidationError("bn epsilon must be positive")
        object.__setattr__(self, "input_shape", (int(h), int(w)))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    @property
    def stem_param_count(self) -> int:
        return self.stem_channels * 1 * 3 * 3


def _block_specs(config: NetworkConfig):
    """Yield (name, in_channels, out_channels, stride, has_projection)."""
    in_ch = config.stem_channels
    for s, out_ch in enumerate(config.stage_channels):
        for b in range(config.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            project = stride != 1 or in_ch != out_ch
            yield f"stage{s + 1}.block{b + 1}", in_ch, out_ch, stride, project
            in_ch = out_ch


def _weight_layout(config: NetworkConfig):
    """Canonical (name, shape) list for the trainable arrays."""
    layout = [("stem.w", (config.stem_channels, 1, 3, 3))]
    for name, in_ch, out_ch, _, project in _block_specs(config):
        layout.append((f"{name}.bn1.gamma", (in_ch,)))
        layout.append((f"{name}.bn1.beta", (in_ch,)))
        layout.append((f"{name}.conv1.w", (out_ch, in_ch, 3, 3)))
        layout.append((f"{name}.bn2.gamma", (out_ch,)))
        layout.append((f"{name}.bn2.beta", (out_ch,)))
        layout.append((f"{name}.conv2.w", (out_ch, out_ch, 3, 3)))
        if project:
            layout.append((f"{name}.proj.w", (out_ch, in_ch, 1, 1)))
    last = config.stage_channels[-1]
    layout.append(("final_bn.gamma", (last,)))
    layout.append(("final_bn.beta", (last,)))
    layout.append(("fc.w", (config.fc_width, last)))
    layout.append(("fc.b", (config.fc_width,)))
    layout.append(("reg.w", (config.output_dim, config.fc_width + config.head_angle_dim)))
    layout.append(("reg.b", (config.output_dim,)))
    return layout


def _running_layout(config: NetworkConfig):
    layout = []
    for name, in_ch, out_ch, _, _ in _block_specs(config):
        layout.append((f"{name}.bn1.mean", (in_ch,)))
        layout.append((f"{name}.bn1.var", (in_ch,)))
        layout.append((f"{name}.bn2.mean", (out_ch,)))
        layout.append((f"{name}.bn2.var", (out_ch,)))
    last = config.stage_channels[-1]
    layout.append(("final_bn.mean", (last,)))
    layout.append(("final_bn.var", (last,)))
    return layout


@dataclass
class NetworkParams:
    """Trainable weights plus batch-norm running statistics."""

    config: NetworkConfig
    weights: dict
    running: dict

    def validate(self) -> None:
        for layout, arrays, label in (
            (_weight_layout(self.config), self.weights, "weights"),
            (_running_layout(self.config), self.running, "running stats"),
        ):
            expected = dict(layout)
            if set(arrays) != set(expected):
                missing = set(expected) - set(arrays)
                extra = set(arrays) - set(expected)
                raise ValidationError(f"{label} keys mismatch (missing {missing}, extra {extra})")
            for name, shape in expected.items():
                if arrays[name].shape != shape:
                    raise ValidationError(
                        f"{label} array {name} must have shape {shape}, "
                        f"got {arrays[name].shape}"
                    )
        for name in self.running:
            if name.endswith(".var") and not (self.running[name] > 0.0).all():
                raise ValidationError(f"running variance {name} must stay positive")

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            config=self.config,
            weights={k: v.copy() for k, v in self.weights.items()},
            running={k: v.copy() for k, v in self.running.items()},
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            config=self.config,
            weights={k: v.astype(dtype) for k, v in self.weights.items()},
            running={k: v.astype(dtype) for k, v in self.running.items()},
        )


def init_network(config: NetworkConfig, seed: int) -> NetworkParams:
    """He-normal weights, zero biases and shifts, unit running variance."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _weight_layout(config):
        if name.endswith(".w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".w"):
            weights[name] = rng.standard_normal(shape) * np.sqrt(2.0 / shape[1])
        elif name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        else:  # beta and biases
            weights[name] = np.zeros(shape)
    running = {}
    for name, shape in _running_layout(config):
        running[name] = np.zeros(shape) if name.endswith(".mean") else np.ones(shape)
    return NetworkParams(config=config, weights=weights, running=running)


@dataclass
class Batch:
    """Network inputs: images scaled to [0, 1], head angles, targets."""

    images: np.ndarray
    head_angles: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.images)
        if img.ndim != 4 or img.shape[1] != 1:
            raise ValidationError(f"images must be Bx1xHxW, got {img.shape}")
        if img.shape[0] < 1:
            raise ValidationError("batch must hold at least one sample")
        n = img.shape[0]
        head = np.asarray(self.head_angles)
        tgt = np.asarray(self.targets)
        if head.ndim != 2 or head.shape[0] != n:
            raise ValidationError(f"head angles must be Bx2, got {head.shape}")
        if tgt.ndim != 2 or tgt.shape[0] != n:
            raise ValidationError(f"targets must be Bx2, got {tgt.shape}")
        self.images, self.head_angles, self.targets = img, head, tgt

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# Convolution via im2col (channels-last activations, FxCxKHxKW weights)


def _chunk_slices(total: int, per_chunk: int):
    for start in range(0, total, per_chunk):
        yield slice(start, min(start + per_chunk, total))


def _gather_cols(xp: np.ndarray, oh: int, ow: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch rows of padded channels-last input: (B * OH * OW, kh * kw * C)."""
    nb, c = xp.shape[0], xp.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    # (nb, oh, ow, c, kh, kw) -> rows flatten as (c, kh, kw); the reshape
    # materializes the patches in one gather.
    return windows.reshape(nb * oh * ow, c * kh * kw)


def _conv_out_hw(h: int, w: int, k: int, stride: int, pad: int):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    f, c, kh, kw = w.shape
    # Rows flatten as (c, kh, kw), matching _gather_cols.
    return np.ascontiguousarray(w.transpose(1, 2, 3, 0).reshape(c * kh * kw, f))


def _conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    b, h, wid, c = x.shape
    f, _, kh, kw = w.shape
    oh, ow = _conv_out_hw(h, wid, kh, stride, pad)
    w_mat = _weight_matrix(w)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.empty((b, oh, ow, f), dtype=x.dtype)
    per_chunk = max(1, _CHUNK_ELEMS // max(1, oh * ow * c * kh * kw))
    for sl in _chunk_slices(b, per_chunk):
        cols = _gather_cols(xp[sl], oh, ow, kh, kw, stride)
        nb = sl.stop - sl.start
        np.matmul(cols, w_mat, out=out[sl].reshape(nb * oh * ow, f))
    return out


def _conv2d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride: int, pad: int, need_dx: bool = True
):
    """Gradients (dx, dw) for y = conv(x, w); dx is None when not needed."""
    b, h, wid, c = x.shape
    f, _, kh, kw = w.shape
    oh, ow = dy.shape[1], dy.shape[2]
    w_mat = _weight_matrix(w)
    dw_mat = np.zeros_like(w_mat)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    dxp = (
        np.zeros((b, h + 2 * pad, wid + 2 * pad, c), dtype=x.dtype) if need_dx else None
    )
    per_chunk = max(1, _CHUNK_ELEMS // max(1, oh * ow * c * kh * kw))
    for sl in _chunk_slices(b, per_chunk):
        nb = sl.stop - sl.start
        dy_mat = dy[sl].reshape(nb * oh * ow, f)
        cols = _gather_cols(xp[sl], oh, ow, kh, kw, stride)
        dw_mat += cols.T @ dy_mat
        if not need_dx:
            continue
        dcols = (dy_mat @ w_mat.T).reshape(nb, oh, ow, c, kh, kw)
        # Scatter patch gradients back onto the padded input.
        for i in range(kh):
            for j in range(kw):
                dxp[sl, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    dcols[:, :, :, :, i, j]
                )
    dw = dw_mat.reshape(c, kh, kw, f).transpose(3, 0, 1, 2)
    if not need_dx:
        return None, dw
    dx = dxp[:, pad : pad + h, pad : pad + wid] if pad else dxp
    return dx, dw


# ---------------------------------------------------------------------------
# Batch normalization (channels-last; statistics over B, H, W)


def _channel_moments(x: np.ndarray):
    """Per-channel mean and biased variance in one data pass."""
    flat = x.reshape(-1, x.shape[-1])
    n = flat.shape[0]
    mean = flat.mean(axis=0)
    sq = np.einsum("nc,nc->c", flat, flat) / n
    var = np.maximum(sq - mean * mean, 0.0)
    return mean, var


def _bn_relu_forward(x, params, key, mode, bn_momentum, update_running, cache):
    """y = relu(gamma * normalize(x) + beta), as one affine pass."""
    w, r = params.weights, params.running
    gamma, beta = w[f"{key}.gamma"], w[f"{key}.beta"]
    eps = params.config.bn_epsilon
    if mode == "train":
        mean, var = _channel_moments(x)
        if update_running:
            r[f"{key}.mean"][:] = bn_momentum * r[f"{key}.mean"] + (1.0 - bn_momentum) * mean
            r[f"{key}.var"][:] = bn_momentum * r[f"{key}.var"] + (1.0 - bn_momentum) * var
        if cache is not None:
            cache[f"{key}.in"] = x
            cache[f"{key}.mean"] = mean
            cache[f"{key}.inv_std"] = 1.0 / np.sqrt(var + eps)
    else:
        mean, var = r[f"{key}.mean"], r[f"{key}.var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv_std
    shift = beta - mean * scale
    y = x * scale
    y += shift
    np.maximum(y, 0.0, out=y)
    return y


def _bn_backward_from_input(dy, x, mean, inv_std, gamma):
    """BN gradients reconstructed from the layer input.

    Uses the per-channel affine identity
    dx = p * dy + q * x + r with p = gamma * inv_std,
    q = -gamma * inv_std^2 * dgamma / m, r = -(p * dbeta / m) - q * mean,
    which avoids materializing the normalized tensor. ``dy`` is consumed
    in place and returned as dx.
    """
    c = dy.shape[-1]
    dyf = dy.reshape(-1, c)
    xf = x.reshape(-1, c)
    m = dyf.shape[0]
    dbeta = dyf.sum(axis=0)
    dy_x = np.einsum("nc,nc->c", dyf, xf)
    dgamma = inv_std * (dy_x - mean * dbeta)
    p = gamma * inv_std
    q = -(gamma * inv_std * inv_std * dgamma) / m
    r = -(p * dbeta) / m - q * mean
    dy *= p
    dy += x * q
    dy += r
    return dy, dgamma, dbeta


# ---------------------------------------------------------------------------
# Forward and backward passes


class _ForwardCache:
    """Intermediate tensors of one training-mode forward pass."""

    def __init__(self, params, batch):
        self.params = params
        self.batch = batch
        self.tensors = {}

    def __setitem__(self, key, value):
        self.tensors[key] = value

    def __getitem__(self, key):
        return self.tensors[key]


def forward(
    params: NetworkParams,
    batch: Batch,
    mode: str = "eval",
    bn_momentum: float = 0.9,
    update_running: bool = True,
):
    """Run the network. Returns predictions, plus the cache in train mode.

    Train mode normalizes with batch statistics and (unless
    ``update_running`` is false) folds them into the running statistics
    with the given momentum; eval mode uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= bn_momentum <= 1.0:
        raise ValidationError("bn momentum must lie in [0, 1]")
    params.validate()
    config = params.config
    dtype = params.weights["stem.w"].dtype

    images = np.asarray(batch.images)
    if images.shape[2:] != config.input_shape:
        raise ValidationError(f"images must be {config.input_shape}, got {images.shape[2:]}")
    h = np.ascontiguousarray(batch.head_angles, dtype=dtype)
    if h.shape != (images.shape[0], config.head_angle_dim):
        raise ValidationError(f"head angles must be Bx{config.head_angle_dim}, got {h.shape}")
    # Channels-last internally; the transpose copies once per pass.
    x = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=dtype)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(h)):
        raise ValidationError("network inputs contain non-finite values")

    train = mode == "train"
    cache = _ForwardCache(params, batch) if train else None
    w = params.weights

    if train:
        cache["stem.in"] = x
    t = _conv2d(x, w["stem.w"], stride=1, pad=1)

    for name, _, _, stride, project in _block_specs(config):
        shortcut = t
        a1 = _bn_relu_forward(t, params, f"{name}.bn1", mode, bn_momentum, update_running, cache)
        y1 = _conv2d(a1, w[f"{name}.conv1.w"], stride=stride, pad=1)
        a2 = _bn_relu_forward(y1, params, f"{name}.bn2", mode, bn_momentum, update_running, cache)
        y2 = _conv2d(a2, w[f"{name}.conv2.w"], stride=1, pad=1)
        if project:
            shortcut = _conv2d(a1, w[f"{name}.proj.w"], stride=stride, pad=0)
        if train:
            cache[f"{name}.a1"] = a1
            cache[f"{name}.a2"] = a2
        y2 += shortcut
        t = y2

    t = _bn_relu_forward(t, params, "final_bn", mode, bn_momentum, update_running, cache)
    if train:
        cache["final.act"] = t

    pooled = t.mean(axis=(1, 2))
    fc_pre = pooled @ w["fc.w"].T + w["fc.b"]
    fc_act = np.maximum(fc_pre, 0.0)
    joint = np.concatenate([fc_act, h], axis=1)
    preds = joint @ w["reg.w"].T + w["reg.b"]

    if train:
        cache["pooled"] = pooled
        cache["fc_act"] = fc_act
        cache["joint"] = joint
        cache["preds"] = preds
        return preds, cache
    return preds


def loss(predictions, targets, reduction: str = "sum") -> float:
    """Sum (or mean) of per-sample Euclidean distances."""
    if reduction not in _REDUCTIONS:
        raise ValidationError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")
    preds = np.asarray(predictions, dtype=np.float64)
    tgts = np.asarray(targets, dtype=np.float64)
    if preds.shape != tgts.shape or preds.ndim != 2:
        raise ValidationError(
            f"predictions and targets must share a Bx2 shape, got {preds.shape} vs {tgts.shape}"
        )
    if not np.all(np.isfinite(preds)) or not np.all(np.isfinite(tgts)):
        raise ValidationError("loss inputs contain non-finite values")
    dist = np.linalg.norm(preds - tgts, axis=1)
    return float(dist.sum() if reduction == "sum" else dist.mean())


def loss_gradient(predictions, targets, reduction: str = "sum") -> np.ndarray:
    """Gradient of the distance loss: unit vectors towards the prediction.

    At a zero distance the subgradient 0 is used.
    """
    if reduction not in _REDUCTIONS:
        raise ValidationError(f"reduction must be one of {_REDUCTIONS}, got {reduction!r}")
    preds = np.asarray(predictions, dtype=np.float64)
    tgts = np.asarray(targets, dtype=np.float64)
    if preds.shape != tgts.shape or preds.ndim != 2:
        raise ValidationError(
            f"predictions and targets must share a Bx2 shape, got {preds.shape} vs {tgts.shape}"
        )
    diff = preds - tgts
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0.0, dist, 1.0)
    grad = diff / safe[:, None]
    grad[dist == 0.0] = 0.0
    if reduction == "mean":
        grad /= preds.shape[0]
    return grad


def backward(params: NetworkParams, batch: Batch, cache, reduction: str = "sum") -> dict:
    """Gradients of the distance loss for every weight array."""
    if not isinstance(cache, _ForwardCache):
        raise StaleCacheError("backward requires the cache from a train-mode forward")
    if cache.params is not params or cache.batch is not batch:
        raise StaleCacheError("cache was built from different params or batch")
    targets = np.asarray(batch.targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ValidationError("targets contain non-finite values")

    config = params.config
    w = params.weights
    dtype = w["stem.w"].dtype
    grads = {}

    dpred = loss_gradient(cache["preds"], targets, reduction).astype(dtype, copy=False)
    grads["reg.w"] = dpred.T @ cache["joint"]
    grads["reg.b"] = dpred.sum(axis=0)
    djoint = dpred @ w["reg.w"]
    dfc_act = djoint[:, : config.fc_width]
    dfc_pre = dfc_act * (cache["fc_act"] > 0.0)
    grads["fc.w"] = dfc_pre.T @ cache["pooled"]
    grads["fc.b"] = dfc_pre.sum(axis=0)
    dpooled = dfc_pre @ w["fc.w"]

    act = cache["final.act"]
    hw = act.shape[1] * act.shape[2]
    dt = np.broadcast_to(dpooled[:, None, None, :] / hw, act.shape) * (act > 0.0)
    dt, grads["final_bn.gamma"], grads["final_bn.beta"] = _bn_backward_from_input(
        dt,
        cache["final_bn.in"],
        cache["final_bn.mean"],
        cache["final_bn.inv_std"],
        w["final_bn.gamma"],
    )

    for name, _, _, stride, project in reversed(list(_block_specs(config))):
        a1 = cache[f"{name}.a1"]
        a2 = cache[f"{name}.a2"]
        if project:
            da1, grads[f"{name}.proj.w"] = _conv2d_backward(
                a1, w[f"{name}.proj.w"], dt, stride=stride, pad=0
            )
            dx = None
        else:
            da1 = None
            dx = dt  # identity shortcut passes the gradient straight through
        dy2, grads[f"{name}.conv2.w"] = _conv2d_backward(
            a2, w[f"{name}.conv2.w"], dt, stride=1, pad=1
        )
        dy2 *= a2 > 0.0
        dy1, grads[f"{name}.bn2.gamma"], grads[f"{name}.bn2.beta"] = _bn_backward_from_input(
            dy2,
            cache[f"{name}.bn2.in"],
            cache[f"{name}.bn2.mean"],
            cache[f"{name}.bn2.inv_std"],
            w[f"{name}.bn2.gamma"],
        )
        da1_main, grads[f"{name}.conv1.w"] = _conv2d_backward(
            a1, w[f"{name}.conv1.w"], dy1, stride=stride, pad=1
        )
        da1 = da1_main if da1 is None else da1 + da1_main
        da1 *= a1 > 0.0
        dbn1, grads[f"{name}.bn1.gamma"], grads[f"{name}.bn1.beta"] = _bn_backward_from_input(
            da1,
            cache[f"{name}.bn1.in"],
            cache[f"{name}.bn1.mean"],
            cache[f"{name}.bn1.inv_std"],
            w[f"{name}.bn1.gamma"],
        )
        dt = dbn1 if dx is None else dx + dbn1

    _, grads["stem.w"] = _conv2d_backward(
        cache["stem.in"], w["stem.w"], dt, stride=1, pad=1, need_dx=False
    )

    return {name: grads[name] for name, _ in _weight_layout(config)}


def gradient_check(
    params: NetworkParams,
    batch: Batch,
    epsilon: float = 1e-4,
    num_coordinates: int = 200,
    seed: int = 0,
    reduction: str = "sum",
) -> float:
    """Largest relative error between analytic and central-difference grads.

    Checks a random subset of weight coordinates. Runs in train mode
    with running-statistic updates disabled, so repeated calls with the
    same seed give identical results.
    """
    if epsilon <= 0.0:
        raise ValidationError("epsilon must be positive")
    if num_coordinates < 1:
        raise ValidationError("need at least one coordinate to check")

    _, cache = forward(params, batch, mode="train", update_running=False)
    analytic = backward(params, batch, cache, reduction=reduction)

    names = [name for name, _ in _weight_layout(params.config)]
    sizes = np.array([params.weights[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    count = min(num_coordinates, total)
    flat_indices = rng.choice(total, size=count, replace=False)

    work = params.copy()
    worst = 0.0
    for flat in sorted(int(i) for i in flat_indices):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        idx = flat - int(offsets[slot])
        arr = work.weights[name]
        original = arr.flat[idx]

        arr.flat[idx] = original + epsilon
        up = loss(
            forward(work, batch, mode="train", update_running=False)[0],
            batch.targets,
            reduction,
        )
        arr.flat[idx] = original - epsilon
        down = loss(
            forward(work, batch, mode="train", update_running=False)[0],
            batch.targets,
            reduction,
        )
        arr.flat[idx] = original

        numeric = (up - down) / (2.0 * epsilon)
        exact = float(analytic[name].flat[idx])
        scale = max(abs(numeric), abs(exact), 1e-8)
        worst = max(worst, abs(numeric - exact) / scale)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"GZNT"
_CKPT_VERSION = 1


def save_checkpoint(path, params: NetworkParams) -> None:
    """Serialize parameters (as float64) with their architecture."""
    params.validate()
    config = params.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(
            struct.pack(
                "<8I",
                config.stem_channels,
                *config.stage_channels,
                config.blocks_per_stage,
                config.fc_width,
                config.input_shape[0],
                config.input_shape[1],
            )
        )
        fh.write(struct.pack("<2Id", config.head_angle_dim, config.output_dim, config.bn_epsilon))
        entries = [(n, params.weights[n]) for n, _ in _weight_layout(config)]
        entries += [(n, params.running[n]) for n, _ in _running_layout(config)]
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> NetworkParams:
    """Read a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a network checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        fields = struct.unpack_from("<8I", data, 8)
        head_dim, out_dim, bn_eps = struct.unpack_from("<2Id", data, 8 + 32)
        config = NetworkConfig(
            stem_channels=fields[0],
            stage_channels=tuple(fields[1:4]),
            blocks_per_stage=fields[4],
            fc_width=fields[5],
            input_shape=(fields[6], fields[7]),
            head_angle_dim=head_dim,
            output_dim=out_dim,
            bn_epsilon=bn_eps,
        )
    except (struct.error, ValidationError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header: {exc}") from exc

    offset = 8 + 32 + 16
    layout = dict(_weight_layout(config) + _running_layout(config))
    try:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            if name not in layout:
                raise FormatError(f"{path}: unexpected array {name!r}")
            shape = layout[name]
            n_items = int(np.prod(shape))
            if offset + n_items * 8 > len(data):
                raise FormatError(f"{path}: truncated array {name!r}")
            arrays[name] = (
                np.frombuffer(data, dtype="<f8", count=n_items, offset=offset)
                .reshape(shape)
                .copy()
            )
            offset += n_items * 8
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint body: {exc}") from exc
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after checkpoint body")

    weights = {n: arrays[n] for n, _ in _weight_layout(config) if n in arrays}
    running = {n: arrays[n] for n, _ in _running_layout(config) if n in arrays}
    params = NetworkParams(config=config, weights=weights, running=running)
    params.validate()
    return params
