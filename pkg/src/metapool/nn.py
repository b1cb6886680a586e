"""Non-pooling layers, losses and optimizers for the character-recognition
network: 3x3 convolution, batch normalization, fully connected + softmax,
cross-entropy / mean-squared-error, SGD and Adam.

Layers come in two flavours: the reference single-image forms (CHW layout,
matching the documented contracts) and task-batched NHWC forms used by the
meta-learning loop, where a leading axis enumerates tasks so a whole task
minibatch runs through one computation record.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from metapool import pooling as P
from metapool import tensor as T
from metapool.tensor import Record, ShapeError, Tensor, matmul


class NNError(Exception):
    pass


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad_spatial(x: Tensor, h_axis: int, w_axis: int) -> Tensor:
    """Zero-pad one pixel on both sides of the H and W axes."""
    shape = list(x.shape)
    for axis in (h_axis, w_axis):
        z = list(shape)
        z[axis] = 1
        zero = Tensor(np.zeros(z))
        x = T.concatenate([zero, x, zero], axis=axis)
        shape = list(x.shape)
    return x


def conv2d(image, kernels, bias) -> Tensor:
    """3x3 cross-correlation with padding 1 and stride 1.

    ``image`` is C_in x H x W, ``kernels`` C_out x C_in x 3 x 3,
    ``bias`` has one entry per output channel; output is C_out x H x W.
    """
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=float))
    ker = kernels if isinstance(kernels, Tensor) else Tensor(np.asarray(kernels, dtype=float))
    b = bias if isinstance(bias, Tensor) else Tensor(np.asarray(bias, dtype=float))
    if img.ndim != 3 or ker.ndim != 4 or ker.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects CHW image and (C_out, C_in, 3, 3) kernels")
    c_in, h, w = img.shape
    c_out = ker.shape[0]
    if ker.shape[1] != c_in:
        raise ShapeError(f"channel mismatch: image {c_in}, kernels {ker.shape[1]}")

    padded = _pad_spatial(img, 1, 2)
    cols = []
    for ci in range(c_in):  # ci-major to match the kernels' row-major flattening
        for kh in range(3):
            for kw in range(3):
                sl = T.slice_axes(padded, (ci, kh, kw), (ci + 1, kh + h, kw + w))
                cols.append(sl.reshape((h * w, 1)))
    col = T.concatenate(cols, axis=1)                      # (H*W, C_in*9)
    out = matmul(ker.reshape((c_out, c_in * 9)), col, transpose_b=True)
    return out.reshape((c_out, h, w)) + b.reshape((c_out, 1, 1))


def conv3x3_batched(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Task-batched NHWC convolution: x is (n, B, H, W, C_in), kernels
    (n, 3, 3, C_in, C_out), bias (n, C_out); output (n, B, H, W, C_out)."""
    n, bsz, h, w, c_in = x.shape
    c_out = kernels.shape[-1]
    padded = _pad_spatial(x, 2, 3)
    cols = []
    for kh in range(3):  # k-major, channel-minor: matches (3,3,C_in) flattening
        for kw in range(3):
            sl = T.slice_axes(padded, (0, 0, kh, kw, 0),
                              (n, bsz, kh + h, kw + w, c_in))
            cols.append(sl.reshape((n, bsz * h * w, c_in)))
    col = T.concatenate(cols, axis=2)                      # (n, B*H*W, 9*C_in)
    out = matmul(col, kernels.reshape((n, 9 * c_in, c_out)))
    return out.reshape((n, bsz, h, w, c_out)) + bias.reshape((n, 1, 1, 1, c_out))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_core(x: Tensor, scale: Tensor, shift: Tensor, axes: tuple[int, ...],
             mode: str, running_mean, running_var, momentum: float, eps: float):
    """Normalize over ``axes``; scale/shift/running stats must already
    broadcast against x. Returns (y, (batch_mean, batch_var) or None)."""
    if mode == "train":
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise NNError("batch normalization needs >= 2 values per channel in training mode")
        m = x.mean(axes=axes, keepdims=True)
        centered = x - m
        v = (centered * centered).mean(axes=axes, keepdims=True)
        y = centered / ((v + eps) ** 0.5) * scale + shift
        return y, (m.numpy(), v.numpy())
    rm = running_mean if isinstance(running_mean, Tensor) else Tensor(np.asarray(running_mean, dtype=float))
    rv = running_var if isinstance(running_var, Tensor) else Tensor(np.asarray(running_var, dtype=float))
    y = (x - rm) / ((rv + eps) ** 0.5) * scale + shift
    return y, None


def batchnorm(batch, scale, shift, mode: str, running_mean, running_var,
              momentum: float = 0.1, eps: float = 1e-5):
    """Reference form on B x C x H x W batches with per-channel parameters.

    Training mode normalizes by batch statistics and returns updated running
    statistics; evaluation mode normalizes by the running statistics and
    leaves them untouched.  Returns (output, running_mean, running_var).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=float))
    if x.ndim != 4:
        raise ShapeError(f"expected B x C x H x W, got {x.shape}")
    c = x.shape[1]
    sc = (scale if isinstance(scale, Tensor) else Tensor(np.asarray(scale, dtype=float))).reshape((1, c, 1, 1))
    sh = (shift if isinstance(shift, Tensor) else Tensor(np.asarray(shift, dtype=float))).reshape((1, c, 1, 1))
    rm = np.asarray(running_mean, dtype=float).reshape(1, c, 1, 1)
    rv = np.asarray(running_var, dtype=float).reshape(1, c, 1, 1)
    if mode == "train":
        y, (bm, bv) = _bn_core(x, sc, sh, (0, 2, 3), "train", None, None, momentum, eps)
        new_mean = (1 - momentum) * rm + momentum * bm
        new_var = (1 - momentum) * rv + momentum * bv
        return y, new_mean.reshape(c), new_var.reshape(c)
    y, _ = _bn_core(x, sc, sh, (0, 2, 3), "eval", rm, rv, momentum, eps)
    return y, np.asarray(running_mean, dtype=float), np.asarray(running_var, dtype=float)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise NNError(f"label out of range for {classes} classes")
    out = np.zeros(labels.shape + (classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def log_softmax(logits: Tensor) -> Tensor:
    m = logits.max(axis=-1, keepdims=True)
    return logits - ((logits - m).exp().sum(axes=-1, keepdims=True).log() + m)


def linear_softmax_xent(features, weights, bias, labels):
    """Fully connected layer + softmax + mean cross-entropy.

    Returns (scalar loss, class probabilities).
    """
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=float))
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=float))
    b = bias if isinstance(bias, Tensor) else Tensor(np.asarray(bias, dtype=float))
    logits = matmul(f, w) + b.reshape((1, w.shape[1]))
    logp = log_softmax(logits)
    oh = Tensor(one_hot(labels, w.shape[1]))
    loss = -(logp * oh).sum() / float(f.shape[0])
    return loss, logp.exp()


def xent_per_task(logits: Tensor, labels_onehot: Tensor) -> Tensor:
    """Mean cross-entropy per task: logits (n, B, K) -> losses (n,)."""
    logp = log_softmax(logits)
    picked = (logp * labels_onehot).sum(axes=(1, 2))
    return -picked / float(logits.shape[1])


def mse_loss(prediction, target) -> Tensor:
    p = prediction if isinstance(prediction, Tensor) else Tensor(np.asarray(prediction, dtype=float))
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=float))
    if p.shape != t.shape:
        raise ShapeError(f"mse shapes differ: {p.shape} vs {t.shape}")
    d = p - t
    return (d * d).mean()


def mse_per_task(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error per task: (n, ...) -> (n,)."""
    d = prediction - target
    axes = tuple(range(1, d.ndim))
    return (d * d).mean(axes=axes)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(params: Tensor, grads: Tensor, lr: float) -> Tensor:
    """One traced SGD step; differentiable through the update."""
    if params.shape != grads.shape:
        raise ShapeError(f"sgd shapes differ: {params.shape} vs {grads.shape}")
    return params - lr * grads


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adam_step(state: AdamState, params: np.ndarray,
              grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """Standard bias-corrected Adam update on raw arrays."""
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return state, params - state.lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Adam over a dict of named parameter arrays."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self._proto = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self._states: dict[str, AdamState] = {}

    def update(self, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for key in params:
            state = self._states.setdefault(key, AdamState(**self._proto))
            self._states[key], out[key] = adam_step(state, params[key], grads[key])
        return out


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params, grads):
        return {k: params[k] - self.lr * grads[k] for k in params}


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    """Weights of the non-pooling layers plus the pooling parameters."""

    layers: tuple[str, ...]
    theta: dict[str, np.ndarray]
    pooling: Union[P.PoolingParams, P.WindowedPoolingParams, str]


class DensePoolModel:
    """Single dense-form pooling layer: (n, B, J) -> (n, B, I)."""

    meta_keys = ("w_tilde", "p_tilde")

    def __init__(self, in_dim: int, out_dim: int, temperature: float):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.temperature = temperature

    def prepare_inputs(self, x: np.ndarray) -> np.ndarray:
        return x

    def prepare_targets(self, y: np.ndarray) -> np.ndarray:
        return y

    def init_meta(self, seed: int) -> dict[str, np.ndarray]:
        params = P.init_pooling_params(self.out_dim, self.in_dim,
                                       self.temperature, seed)
        return {"w_tilde": np.asarray(params.w_tilde),
                "p_tilde": np.asarray(params.p_tilde)}

    def init_theta(self, seed: int) -> dict[str, np.ndarray]:
        return {}

    def pooling_params(self, meta: dict[str, np.ndarray], mode: str) -> P.PoolingParams:
        return P.PoolingParams(meta["w_tilde"], meta["p_tilde"],
                               self.temperature, mode)

    def forward(self, x: Tensor, theta: dict[str, Tensor],
                meta: dict[str, Tensor], mode: str) -> Tensor:
        n, bsz, j = x.shape
        i = self.out_dim
        logw = P.traced_log_shape(meta["w_tilde"], self.temperature, mode)
        p = meta["p_tilde"].exp().reshape((n, 1, i, 1))
        lx = P._clamp_floor(x).log()
        scores = logw.reshape((n, 1, i, j)) + lx.reshape((n, bsz, 1, j)) * p
        return P._pool_from_scores(scores, p, axes=(3,), area=j)

    def loss_per_task(self, pred: Tensor, y: Tensor) -> Tensor:
        return mse_per_task(pred, y)


class WindowPoolModel:
    """Single windowed pooling layer on images: (n, B, H, W) -> (n, B, gh, gw)."""

    meta_keys = ("w_tilde", "p_tilde")

    def __init__(self, image: tuple[int, int], window: tuple[int, int],
                 temperature: float):
        self.image = image
        self.window = window
        self.grid = (image[0] // window[0], image[1] // window[1])
        if (self.grid[0] * window[0], self.grid[1] * window[1]) != tuple(image):
            raise ShapeError("windows must tile the image")
        self.temperature = temperature

    def prepare_inputs(self, x: np.ndarray) -> np.ndarray:
        return x

    def prepare_targets(self, y: np.ndarray) -> np.ndarray:
        return y

    def init_meta(self, seed: int) -> dict[str, np.ndarray]:
        params = P.init_windowed_params(self.grid, self.window, self.temperature, seed)
        return {"w_tilde": np.asarray(params.w_tilde),
                "p_tilde": np.asarray(params.p_tilde)}

    def init_theta(self, seed: int) -> dict[str, np.ndarray]:
        return {}

    def pooling_params(self, meta, mode: str) -> P.WindowedPoolingParams:
        return P.WindowedPoolingParams(self.window, self.window[0], meta["w_tilde"],
                                       meta["p_tilde"], self.temperature, mode)

    def forward(self, x: Tensor, theta, meta, mode: str) -> Tensor:
        n, bsz = x.shape[:2]
        gh, gw = self.grid
        wh, ww = self.window
        logw = P.traced_log_shape(meta["w_tilde"], self.temperature, mode)
        p = meta["p_tilde"].exp().reshape((n, 1, gh, 1, gw, 1))
        xr = x.reshape((n, bsz, gh, wh, gw, ww))
        lx = P._clamp_floor(xr).log()
        scores = logw.reshape((n, 1, gh, wh, gw, ww)) + lx * p
        return P._pool_from_scores(scores, p, axes=(3, 5), area=wh * ww)

    def loss_per_task(self, pred: Tensor, y: Tensor) -> Tensor:
        return mse_per_task(pred, y)


class ConvPoolClassifier:
    """conv3x3 -> batchnorm -> ReLU -> 2x2 pooling -> fully connected softmax.

    The pooling slot holds either meta-learned windowed parameters or one of
    the "max" / "avg" baselines.  Inputs are (n, B, H, W, 1).
    """

    meta_keys = ("w_tilde", "p_tilde")

    def __init__(self, image_size: int, filters: int, way: int,
                 temperature: float, pooling_kind: str = "meta",
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 bn_adapt_stats: bool = True):
        if image_size % 2:
            raise ShapeError("image size must be even for 2x2/stride-2 pooling")
        self.image_size = image_size
        self.filters = filters
        self.way = way
        self.temperature = temperature
        self.pooling_kind = pooling_kind
        self.grid = (image_size // 2, image_size // 2)
        self.feature_dim = self.grid[0] * self.grid[1] * filters
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        # if False, adaptation freezes normalization statistics at init
        self.bn_adapt_stats = bn_adapt_stats

    def prepare_inputs(self, x: np.ndarray) -> np.ndarray:
        return x[..., None]  # add the channel axis

    def prepare_targets(self, y: np.ndarray) -> np.ndarray:
        return one_hot(y, self.way)

    def init_meta(self, seed: int) -> dict[str, np.ndarray]:
        params = P.init_windowed_params(self.grid, (2, 2), self.temperature, seed)
        return {"w_tilde": np.asarray(params.w_tilde),
                "p_tilde": np.asarray(params.p_tilde)}

    def init_theta(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        c, f, k = self.filters, self.feature_dim, self.way
        s_conv = 1.0 / np.sqrt(9.0)
        s_fc = 1.0 / np.sqrt(f)
        return {
            "conv_w": rng.uniform(-s_conv, s_conv, size=(3, 3, 1, c)),
            "conv_b": np.zeros(c),
            "bn_scale": np.ones(c),
            "bn_shift": np.zeros(c),
            "fc_w": rng.uniform(-s_fc, s_fc, size=(f, k)),
            "fc_b": np.zeros(k),
        }

    def fresh_bn_stats(self) -> dict[str, np.ndarray]:
        return {"mean": np.zeros(self.filters), "var": np.ones(self.filters)}

    def pooling_params(self, meta, mode: str) -> P.WindowedPoolingParams:
        return P.WindowedPoolingParams((2, 2), 2, meta["w_tilde"], meta["p_tilde"],
                                       self.temperature, mode)

    def forward(self, x: Tensor, theta: dict[str, Tensor],
                meta: Optional[dict[str, Tensor]], mode: str,
                bn_mode: str = "train",
                bn_stats: Optional[dict[str, np.ndarray]] = None):
        """Returns (logits (n, B, way), batch bn stats or None)."""
        n, bsz = x.shape[:2]
        h = self.image_size
        c = self.filters
        out = conv3x3_batched(x, theta["conv_w"], theta["conv_b"])
        scale = theta["bn_scale"].reshape((n, 1, 1, 1, c))
        shift = theta["bn_shift"].reshape((n, 1, 1, 1, c))
        if bn_mode == "train":
            out, stats = _bn_core(out, scale, shift, (1, 2, 3), "train",
                                  None, None, self.bn_momentum, self.bn_eps)
        else:
            rm = bn_stats["mean"].reshape(1, 1, 1, 1, c)
            rv = bn_stats["var"].reshape(1, 1, 1, 1, c)
            out, stats = _bn_core(out, scale, shift, (1, 2, 3), "eval",
                                  rm, rv, self.bn_momentum, self.bn_eps)
        out = out.relu()
        out = self._pool(out, meta, mode)
        feats = out.reshape((n, bsz, self.feature_dim))
        logits = matmul(feats, theta["fc_w"]) + theta["fc_b"].reshape((n, 1, self.way))
        return logits, stats

    def _pool(self, x: Tensor, meta, mode: str) -> Tensor:
        n, bsz, h, w, c = x.shape
        gh, gw = self.grid
        xr = x.reshape((n, bsz, gh, 2, gw, 2, c))
        if self.pooling_kind == "max":
            return xr.max(axis=5).max(axis=3)
        if self.pooling_kind == "avg":
            return xr.sum(axes=(3, 5)) / 4.0
        logw = P.traced_log_shape(meta["w_tilde"], self.temperature, mode)
        p = meta["p_tilde"].exp()
        n_meta = meta["p_tilde"].shape[0]
        logw = logw.reshape((n_meta, 1, gh, 2, gw, 2, 1))
        p = p.reshape((n_meta, 1, gh, 1, gw, 1, 1))
        lx = P._clamp_floor(xr).log()
        return P._pool_from_scores(logw + lx * p, p, axes=(3, 5), area=4)

    def loss_per_task(self, logits: Tensor, labels_onehot: Tensor) -> Tensor:
        return xent_per_task(logits, labels_onehot)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str, arrays: dict[str, np.ndarray],
                    manifest_extra: Optional[dict] = None) -> None:
    """Directory checkpoint: manifest.json plus one MPT1 blob per tensor."""
    os.makedirs(path, exist_ok=True)
    manifest = {"tensors": {}, **(manifest_extra or {})}
    for name, arr in sorted(arrays.items()):
        arr = np.asarray(arr, dtype=np.float64)
        manifest["tensors"][name] = list(arr.shape)
        T.save_mpt(Tensor(arr), os.path.join(path, f"{name}.mpt"))
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, shape in manifest["tensors"].items():
        arr = T.load_mpt(os.path.join(path, f"{name}.mpt")).numpy()
        if list(arr.shape) != shape:
            raise NNError(f"checkpoint tensor {name} has shape {arr.shape}, "
                          f"manifest says {shape}")
        arrays[name] = arr
    return arrays, manifest
