"""Per-slice convolutional encoder, cross-slice max aggregation, dual head.

Each slice runs through a small stack of conv3x3 / ReLU / maxpool2 blocks and
global average pooling, giving one feature vector per slice. The volume-level
feature is the per-dimension maximum over slices, which routes gradient to
exactly one slice per dimension; a linear head produces two logits
(severity, covid positivity) trained with a summed binary cross entropy.

Everything is float64 numpy with hand-written backward passes so the analytic
gradients can be checked against finite differences. The two stock encoders
are variant "A" (three blocks, a small stand-in for a deeper backbone) and
variant "B" (two blocks, a small stand-in for a lighter one); arbitrary
block counts are allowed for experiments and tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import SliceStack

CHECKPOINT_VERSION = 1

VARIANT_BLOCKS = {"A": 3, "B": 2}
DEFAULT_CHANNELS = {"A": (8, 16, 32), "B": (8, 24)}

# windowed inputs live in [0, 1]; the encoder subtracts the midpoint so the
# first conv sees roughly zero-mean data. Without this the pooled features
# share a large common offset that badly conditions SGD on the linear head.
INPUT_CENTER = 0.5


class ShapeMismatch(ValueError):
    """Input or parameter shapes disagree with the encoder configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    in_hw: tuple[int, int]
    channels: tuple[int, ...] = (8, 16, 32)
    variant: str = "A"

    def __post_init__(self) -> None:
        object.__setattr__(self, "in_hw", (int(self.in_hw[0]), int(self.in_hw[1])))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        expected = VARIANT_BLOCKS.get(self.variant)
        if expected is not None and len(self.channels) != expected:
            raise ValueError(
                f"variant {self.variant} has {expected} blocks, got {len(self.channels)} "
                "channel counts (use variant='custom' for other depths)"
            )
        # each block halves the spatial size; every block needs >= 1 pixel left
        if min(self.in_hw) < 2 ** len(self.channels):
            raise ValueError(f"input {self.in_hw} too small for {len(self.channels)} blocks")

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


def variant_a(in_hw: tuple[int, int]) -> EncoderConfig:
    return EncoderConfig(in_hw=in_hw, channels=DEFAULT_CHANNELS["A"], variant="A")


def variant_b(in_hw: tuple[int, int]) -> EncoderConfig:
    return EncoderConfig(in_hw=in_hw, channels=DEFAULT_CHANNELS["B"], variant="B")


@dataclass
class ModelParams:
    """Encoder kernels/biases plus the linear head; also reused as the
    container for gradients and momentum velocities."""

    config: EncoderConfig
    kernels: list[np.ndarray] = field(repr=False)   # (c_out, c_in, 3, 3) each
    biases: list[np.ndarray] = field(repr=False)    # (c_out,) each
    head_w: np.ndarray = field(repr=False)          # (D, 2)
    head_b: np.ndarray = field(repr=False)          # (2,)

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )

    def n_params(self) -> int:
        return int(flatten_params(self).size)


def init_params(config: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    """He-style scaled normal kernels, zero biases, zero head.

    The head starts at zero so the first useful gradient direction is the
    class-mean difference of the pooled features rather than their shared
    offset; random heads made early training wander for a long time.
    """
    kernels, biases = [], []
    c_in = 1
    for c_out in config.channels:
        std = np.sqrt(2.0 / (c_in * 9))
        kernels.append(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)))
        biases.append(np.zeros(c_out))
        c_in = c_out
    d = config.feature_dim
    head_w = np.zeros((d, 2))
    head_b = np.zeros(2)
    return ModelParams(config, kernels, biases, head_w, head_b)


def zeros_like_params(p: ModelParams) -> ModelParams:
    return ModelParams(
        config=p.config,
        kernels=[np.zeros_like(k) for k in p.kernels],
        biases=[np.zeros_like(b) for b in p.biases],
        head_w=np.zeros_like(p.head_w),
        head_b=np.zeros_like(p.head_b),
    )


def map_params(fn, *params: ModelParams) -> ModelParams:
    """Apply fn leafwise across parameter containers with a shared config."""
    first = params[0]
    return ModelParams(
        config=first.config,
        kernels=[fn(*ks) for ks in zip(*(p.kernels for p in params))],
        biases=[fn(*bs) for bs in zip(*(p.biases for p in params))],
        head_w=fn(*(p.head_w for p in params)),
        head_b=fn(*(p.head_b for p in params)),
    )


def flatten_params(p: ModelParams) -> np.ndarray:
    """All parameters as one float64 vector, in declared order."""
    parts = []
    for k, b in zip(p.kernels, p.biases):
        parts.append(k.ravel())
        parts.append(b.ravel())
    parts.append(p.head_w.ravel())
    parts.append(p.head_b.ravel())
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, config: EncoderConfig) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    kernels, biases = [], []
    pos = 0
    c_in = 1
    for c_out in config.channels:
        size = c_out * c_in * 9
        kernels.append(vec[pos : pos + size].reshape(c_out, c_in, 3, 3).copy())
        pos += size
        biases.append(vec[pos : pos + c_out].copy())
        pos += c_out
        c_in = c_out
    d = config.feature_dim
    head_w = vec[pos : pos + d * 2].reshape(d, 2).copy()
    pos += d * 2
    head_b = vec[pos : pos + 2].copy()
    pos += 2
    if pos != vec.size:
        raise ShapeMismatch(f"vector length {vec.size} does not match config (need {pos})")
    return ModelParams(config, kernels, biases, head_w, head_b)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """3x3 cross-correlation with zero padding 1; returns output and the
    im2col matrix kept for the backward pass."""
    n, c_in, h, w = x.shape
    c_out = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c_in * 9)
    out = cols @ kernel.reshape(c_out, c_in * 9).T + bias
    return out.transpose(0, 2, 1).reshape(n, c_out, h, w), cols


def _col2im(dcols: np.ndarray, in_shape: tuple[int, int, int, int]) -> np.ndarray:
    n, c_in, h, w = in_shape
    d6 = dcols.reshape(n, h, w, c_in, 3, 3)
    dxp = np.zeros((n, c_in, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += d6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def _maxpool_forward(x: np.ndarray):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped.

    Returns pooled values and the flat within-window argmax (the first
    maximum, i.e. lowest window index, wins on ties)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :, : h2 * 2, : w2 * 2]
    win = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    dwin = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(in_shape)
    dx[:, :, : h2 * 2, : w2 * 2] = (
        dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    )
    return dx


def _check_stack(stack: SliceStack, config: EncoderConfig) -> None:
    if (stack.height, stack.width) != config.in_hw:
        raise ShapeMismatch(
            f"stack is {stack.height}x{stack.width}, encoder expects "
            f"{config.in_hw[0]}x{config.in_hw[1]}"
        )
    if stack.n_slices < 1:
        raise ShapeMismatch("stack has no slices")


def _encoder_forward(data: np.ndarray, p: ModelParams, keep_cache: bool):
    x = data[:, None, :, :].astype(np.float64, copy=False) - INPUT_CENTER
    cache = []
    for kernel, bias in zip(p.kernels, p.biases):
        in_shape = x.shape
        pre, cols = _conv_forward(x, kernel, bias)
        act = np.maximum(pre, 0.0)
        pooled, idx = _maxpool_forward(act)
        if keep_cache:
            cache.append((cols, pre > 0, in_shape, idx, act.shape))
        x = pooled
    feats = x.mean(axis=(2, 3))
    return feats, x.shape, cache


def encode_slices(stack: SliceStack, p: ModelParams) -> np.ndarray:
    """Per-slice feature matrix of shape (n_slices, feature_dim)."""
    _check_stack(stack, p.config)
    feats, _, _ = _encoder_forward(stack.data, p, keep_cache=False)
    return feats


def max_aggregate(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension max over slices and the slice index attaining it.

    np.argmax takes the first maximum, so ties break to the lowest index;
    that index is exactly where the backward pass routes the gradient.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeMismatch(f"expected (n_slices, D) features, got {features.shape}")
    return features.max(axis=0), features.argmax(axis=0)


def head_forward(z: np.ndarray, p: ModelParams) -> np.ndarray:
    """Logits (severity, covid) from an aggregated feature vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (p.config.feature_dim,):
        raise ShapeMismatch(f"feature vector {z.shape}, expected ({p.config.feature_dim},)")
    return p.head_w.T @ z + p.head_b


def loss_bce(logits: np.ndarray, y: tuple[float, float]) -> float:
    """Sum of the two heads' binary cross entropies; soft labels allowed.

    Uses the log-sum-exp form max(z,0) - z*y + log(1 + exp(-|z|)), which stays
    finite for |z| up to the float64 range.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64)
    if z.shape != (2,) or t.shape != (2,):
        raise ShapeMismatch("loss expects two logits and two targets")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"targets must lie in [0, 1], got {y}")
    per_head = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per_head.sum())


def predict_stack(stack: SliceStack, p: ModelParams) -> tuple[float, float]:
    """(prob_severe, prob_covid) for one preprocessed stack."""
    z, _ = max_aggregate(encode_slices(stack, p))
    probs = sigmoid(head_forward(z, p))
    return float(probs[0]), float(probs[1])


def loss_and_grads(
    stack: SliceStack, y: tuple[float, float], p: ModelParams
) -> tuple[float, ModelParams]:
    """Loss and its exact gradient with respect to every parameter."""
    _check_stack(stack, p.config)
    feats, pooled_shape, cache = _encoder_forward(stack.data, p, keep_cache=True)
    z, routes = max_aggregate(feats)
    logits = head_forward(z, p)
    loss = loss_bce(logits, y)

    dlogits = sigmoid(logits) - np.asarray(y, dtype=np.float64)
    g_head_w = np.outer(z, dlogits)
    g_head_b = dlogits.copy()
    dz = p.head_w @ dlogits

    # each feature dimension routes its gradient to the single argmax slice
    dfeats = np.zeros_like(feats)
    dfeats[routes, np.arange(feats.shape[1])] = dz

    # global average pool spreads gradient uniformly over the last pooled map
    n, c, ph, pw = pooled_shape
    dx = np.broadcast_to(dfeats[:, :, None, None] / (ph * pw), pooled_shape).copy()

    g_kernels: list[np.ndarray] = [None] * len(p.kernels)   # type: ignore[list-item]
    g_biases: list[np.ndarray] = [None] * len(p.biases)     # type: ignore[list-item]
    for b in reversed(range(len(p.kernels))):
        cols, relu_mask, in_shape, idx, act_shape = cache[b]
        dact = _maxpool_backward(dx, idx, act_shape)
        dpre = dact * relu_mask
        nb, c_out, h, w = dpre.shape
        dout = dpre.reshape(nb, c_out, h * w).transpose(0, 2, 1)
        g_kernels[b] = np.einsum("nhc,nhk->ck", dout, cols).reshape(p.kernels[b].shape)
        g_biases[b] = dout.sum(axis=(0, 1))
        dcols = dout @ p.kernels[b].reshape(c_out, -1)
        dx = _col2im(dcols, in_shape)

    grads = ModelParams(p.config, g_kernels, g_biases, g_head_w, g_head_b)
    return loss, grads


def backward(stack: SliceStack, y: tuple[float, float], p: ModelParams) -> ModelParams:
    """Gradient of loss_bce(predict path) with respect to all parameters."""
    return loss_and_grads(stack, y, p)[1]


def sgd_step(
    p: ModelParams,
    grads: ModelParams,
    lr: float = 0.01,
    momentum: float = 0.9,
    state: ModelParams | None = None,
) -> tuple[ModelParams, ModelParams]:
    """One classical-momentum step: v <- momentum*v + g; p <- p - lr*v.

    `state` holds the velocities (zeros when None); returns new params and
    the updated state without touching the inputs.
    """
    if state is None:
        state = zeros_like_params(p)
    new_state = map_params(lambda v, g: momentum * v + g, state, grads)
    new_params = map_params(lambda w, v: w - lr * v, p, new_state)
    return new_params, new_state


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    velocity: ModelParams | None = None,
    pipeline: dict | None = None,
) -> None:
    """Write a JSON checkpoint: config, parameters, optimizer state, version.

    Parameters and velocities are stored as one flat array each, in the
    declared order (per block kernel then bias, then head weight, head bias).
    json serializes float64 via repr, so load_checkpoint reproduces every
    value bit for bit.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": {
            "in_hw": list(params.config.in_hw),
            "channels": list(params.config.channels),
            "variant": params.config.variant,
        },
        "pipeline": pipeline or {},
        "params": flatten_params(params).tolist(),
        "optimizer": (
            {"velocity": flatten_params(velocity).tolist()} if velocity is not None else None
        ),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelParams | None, dict]:
    """Read a checkpoint; returns (params, velocity-or-None, pipeline dict)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    enc = doc["encoder"]
    config = EncoderConfig(
        in_hw=tuple(enc["in_hw"]), channels=tuple(enc["channels"]), variant=enc["variant"]
    )
    params = unflatten_params(np.asarray(doc["params"], dtype=np.float64), config)
    velocity = None
    if doc.get("optimizer"):
        velocity = unflatten_params(
            np.asarray(doc["optimizer"]["velocity"], dtype=np.float64), config
        )
    return params, velocity, doc.get("pipeline", {})
