"""Parameterized pooling: a trainable kernel-shape matrix and per-output Lp
exponents, plus the max/average baselines.

The layer computes, for positive inputs x of length J,

    f_i = ((1/J) * sum_j W_ij * x_j^(p_i)) ** (1/p_i)

where W is derived from auxiliary variables W~ through a temperature-scaled
sigmoid while meta-training (binary step function otherwise) and p = exp(p~).
Everything is evaluated in log space so that exponents in the thousands stay
finite: direct powering overflows for p beyond a few hundred.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from metapool import tensor as T
from metapool.tensor import Record, ShapeError, DomainError, Tensor

MODE_META = "meta-training"
MODE_EVAL = "evaluation"

# inputs are clamped to this floor before exponentiation; ReLU feeds exact
# zeros into the layer and log(0) must never happen
INPUT_FLOOR = 1e-6

# stand-in for log(0) of excluded (zero-weight) terms in evaluation mode
_LOG_ZERO = -1e30

ArrayOrTensor = Union[np.ndarray, Tensor]


class PoolingError(Exception):
    pass


@dataclass
class PoolingParams:
    """Dense-form parameters: W~ is I x J, p~ has one entry per output."""

    w_tilde: ArrayOrTensor
    p_tilde: ArrayOrTensor
    temperature: float
    mode: str = MODE_META

    def __post_init__(self):
        if self.temperature <= 0:
            raise PoolingError("temperature must be positive")
        if self.mode not in (MODE_META, MODE_EVAL):
            raise PoolingError(f"unknown mode {self.mode!r}")

    @property
    def out_dim(self) -> int:
        return _shape_of(self.w_tilde)[0]

    @property
    def in_dim(self) -> int:
        return _shape_of(self.w_tilde)[1]

    def shape_matrix(self) -> np.ndarray:
        return transform_shape(_values_of(self.w_tilde), self.temperature, self.mode)

    def exponents(self) -> np.ndarray:
        return transform_operation(_values_of(self.p_tilde))

    def evaluation(self) -> "PoolingParams":
        return replace(self, mode=MODE_EVAL)


@dataclass
class WindowedPoolingParams:
    """Sliding-window parameters: one W row (J = window area) and one p per
    window position, shared across channels.

    ``w_tilde`` is stored as (grid_h, win_h, grid_w, win_w) and ``p_tilde`` as
    (grid_h, 1, grid_w, 1) so both broadcast straight onto an image reshaped
    to (..., grid_h, win_h, grid_w, win_w).
    """

    window: tuple[int, int]
    stride: int
    w_tilde: ArrayOrTensor
    p_tilde: ArrayOrTensor
    temperature: float
    mode: str = MODE_META
    channel_shared: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise PoolingError("temperature must be positive")
        if self.mode not in (MODE_META, MODE_EVAL):
            raise PoolingError(f"unknown mode {self.mode!r}")
        gh, wh, gw, ww = _shape_of(self.w_tilde)
        if (wh, ww) != tuple(self.window):
            raise PoolingError("w_tilde window extents do not match the window")
        if _shape_of(self.p_tilde) != (gh, 1, gw, 1):
            raise PoolingError("p_tilde must be (grid_h, 1, grid_w, 1)")

    @property
    def grid(self) -> tuple[int, int]:
        s = _shape_of(self.w_tilde)
        return (s[0], s[2])

    @property
    def window_area(self) -> int:
        return self.window[0] * self.window[1]

    def window_row(self, r: int, c: int) -> PoolingParams:
        """Dense-form view (I=1, J=window area) of one window position."""
        w = _values_of(self.w_tilde)[r, :, c, :].reshape(1, -1)
        p = _values_of(self.p_tilde)[r, 0, c, 0].reshape(1)
        return PoolingParams(w, p, self.temperature, self.mode)

    def shape_matrix(self) -> np.ndarray:
        """Binary/relaxed W in window raster order: (grid_h*grid_w, area)."""
        w = transform_shape(_values_of(self.w_tilde), self.temperature, self.mode)
        gh, wh, gw, ww = w.shape
        return w.transpose(0, 2, 1, 3).reshape(gh * gw, wh * ww)

    def exponents(self) -> np.ndarray:
        return transform_operation(_values_of(self.p_tilde)).reshape(self.grid)

    def evaluation(self) -> "WindowedPoolingParams":
        return replace(self, mode=MODE_EVAL)


def _shape_of(x: ArrayOrTensor) -> tuple[int, ...]:
    return tuple(x.shape)


def _values_of(x: ArrayOrTensor) -> np.ndarray:
    return x.numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# reparameterizations
# ---------------------------------------------------------------------------

def transform_shape(w_tilde: np.ndarray, temperature: float, mode: str) -> np.ndarray:
    """Shape matrix from auxiliary variables: sigmoid((W~-0.5)/T) while
    meta-training, Step(W~-0.5) otherwise (Step(0) = 1)."""
    if temperature <= 0:
        raise PoolingError("temperature must be positive")
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    if mode == MODE_META:
        z = (w_tilde - 0.5) / temperature
        return np.where(z >= 0, 1 / (1 + np.exp(-z)),
                        np.exp(np.minimum(z, 0)) / (1 + np.exp(np.minimum(z, 0))))
    if mode == MODE_EVAL:
        return (w_tilde >= 0.5).astype(np.float64)
    raise PoolingError(f"unknown mode {mode!r}")


def transform_operation(p_tilde: np.ndarray) -> np.ndarray:
    """Exponents p = exp(p~) > 0."""
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    if not np.isfinite(p_tilde).all():
        raise PoolingError("p_tilde must be finite")
    return np.exp(p_tilde)


def init_pooling_params(out_dim: int, in_dim: int, temperature: float,
                        seed: int) -> PoolingParams:
    """Dense-form init: W~ ~ U(0.4, 0.6) i.i.d., p~ = 0 (so p = 1)."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.4, 0.6, size=(out_dim, in_dim))
    return PoolingParams(w, np.zeros(out_dim), temperature)


def init_windowed_params(grid: tuple[int, int], window: tuple[int, int],
                         temperature: float, seed: int,
                         stride: Optional[int] = None) -> WindowedPoolingParams:
    rng = np.random.default_rng(seed)
    gh, gw = grid
    wh, ww = window
    w = rng.uniform(0.4, 0.6, size=(gh, wh, gw, ww))
    p = np.zeros((gh, 1, gw, 1))
    return WindowedPoolingParams((wh, ww), stride if stride is not None else wh,
                                 w, p, temperature)


# ---------------------------------------------------------------------------
# traced building blocks
# ---------------------------------------------------------------------------

def _clamp_floor(x: Tensor, floor: float = INPUT_FLOOR) -> Tensor:
    return (x - floor).relu() + floor


def _log_sigmoid(z: Tensor) -> Tensor:
    # log sigmoid(z) = z - relu(z) - log1p(exp(-|z|)); stable for any z
    abs_z = z.relu() + (-z).relu()
    return z - z.relu() - (1.0 + (-abs_z).exp()).log()


def traced_log_shape(w_tilde: ArrayOrTensor, temperature: float, mode: str) -> Tensor:
    """log W as a traced tensor.

    Meta-training: log sigmoid((W~-0.5)/T), differentiable in W~.
    Evaluation: constant 0 for selected entries and a large negative stand-in
    for excluded ones, so they vanish from the log-sum-exp.
    """
    if mode == MODE_META:
        wt = w_tilde if isinstance(w_tilde, Tensor) else Tensor(np.asarray(w_tilde))
        return _log_sigmoid((wt - 0.5) / temperature)
    binary = transform_shape(_values_of(w_tilde), temperature, MODE_EVAL)
    return Tensor(np.where(binary > 0, 0.0, _LOG_ZERO))


def _lse(scores: Tensor, axis: int) -> Tensor:
    """Max-shifted log-sum-exp along one axis (keeps the axis as size 1)."""
    m = scores.max(axis=axis, keepdims=True)
    return ((scores - m).exp().sum(axes=axis, keepdims=True)).log() + m


def _pool_from_scores(scores: Tensor, p: Tensor, axes: tuple[int, ...],
                      area: int) -> Tensor:
    """exp((LSE(scores) - log J) / p) with the window axes reduced away.

    ``scores`` = log W + p * log x; ``axes`` index the window dimensions;
    ``p`` must broadcast against the LSE result (reduced axes kept at 1).
    """
    lse = scores
    for ax in sorted(axes):
        lse = _lse(lse, ax)
    logf = (lse - float(np.log(area))) / p
    out = logf.exp()
    # drop the reduced axes (now all extent 1)
    kept = [d for i, d in enumerate(out.shape) if i not in axes]
    return out.reshape(kept)


# ---------------------------------------------------------------------------
# public pooling operations
# ---------------------------------------------------------------------------

def pool_dense(x, params: PoolingParams) -> Tensor:
    """Dense-form parameterized pooling of a vector (or batch of vectors).

    ``x`` has shape (..., J); the result has shape (..., I).  Inputs must be
    non-negative; they are clamped to a small positive floor so ReLU zeros
    keep the log-space evaluation finite.
    """
    rec_needed = not isinstance(x, Tensor)
    xv = _values_of(x)
    if np.any(xv < 0):
        raise DomainError("pool_dense input must be non-negative")
    if xv.shape[-1] != params.in_dim:
        raise ShapeError(
            f"input length {xv.shape[-1]} != params J = {params.in_dim}")
    xt = x if isinstance(x, Tensor) else Tensor(xv)

    logw = traced_log_shape(params.w_tilde, params.temperature, params.mode)
    pt = params.p_tilde if isinstance(params.p_tilde, Tensor) else Tensor(_values_of(params.p_tilde))
    p = pt.exp()

    lx = _clamp_floor(xt).log()
    lead = lx.shape[:-1]
    p_col = p.reshape((params.out_dim, 1))
    scores = logw + lx.reshape(lead + (1, params.in_dim)) * p_col
    return _pool_from_scores(scores, p_col, axes=(scores.ndim - 1,),
                             area=params.in_dim)


def pool_windows(image, params: WindowedPoolingParams) -> Tensor:
    """Sliding-window pooling of a C x H x W image.

    Each window position applies the dense form with its own W row and p;
    with channel sharing the same parameters pool every channel.  Windows
    must tile the image exactly (stride equal to the window extent).
    """
    if not params.channel_shared:
        raise PoolingError("pool_windows requires the channel-sharing flag set")
    xv = _values_of(image)
    if xv.ndim != 3:
        raise ShapeError(f"expected C x H x W, got shape {xv.shape}")
    if np.any(xv < 0):
        raise DomainError("pool_windows input must be non-negative")
    wh, ww = params.window
    gh, gw = params.grid
    if params.stride != wh or params.stride != ww:
        raise PoolingError("pool_windows supports non-overlapping tiling only "
                           "(stride equal to the window extents)")
    c, h, w = xv.shape
    if (h, w) != (gh * wh, gw * ww):
        raise ShapeError(
            f"geometry mismatch: image {h}x{w}, grid {gh}x{gw} of {wh}x{ww} windows")

    xt = image if isinstance(image, Tensor) else Tensor(xv)
    xr = xt.reshape((c, gh, wh, gw, ww))
    logw = traced_log_shape(params.w_tilde, params.temperature, params.mode)
    pt = params.p_tilde if isinstance(params.p_tilde, Tensor) else Tensor(_values_of(params.p_tilde))
    p = pt.exp()

    lx = _clamp_floor(xr).log()
    scores = logw + lx * p  # (C, gh, wh, gw, ww); params broadcast over C
    return _pool_from_scores(scores, p, axes=(2, 4), area=params.window_area)


def _window_reshape(xv_shape: tuple[int, int, int], window: tuple[int, int],
                    stride: int) -> tuple[int, int]:
    c, h, w = xv_shape
    wh, ww = window
    if stride <= 0 or (h - wh) % stride or (w - ww) % stride:
        raise ShapeError(f"window {window} stride {stride} does not tile {h}x{w}")
    return (h - wh) // stride + 1, (w - ww) // stride + 1


def _pool_reduce(image, window: tuple[int, int], stride: int, kind: str) -> Tensor:
    xv = _values_of(image)
    if xv.ndim != 3:
        raise ShapeError(f"expected C x H x W, got shape {xv.shape}")
    wh, ww = window
    c, h, w = xv.shape
    oh, ow = _window_reshape(xv.shape, window, stride)
    xt = image if isinstance(image, Tensor) else Tensor(xv)

    if stride == wh == ww and h == oh * wh and w == ow * ww:
        xr = xt.reshape((c, oh, wh, ow, ww))
        if kind == "max":
            return xr.max(axis=4).max(axis=2)
        return xr.sum(axes=(2, 4)) / float(wh * ww)

    # general stride: gather one strided slice per in-window offset
    parts = []
    for di in range(wh):
        for dj in range(ww):
            sl = T.slice_axes(xt, (0, di, dj),
                              (c, di + (oh - 1) * stride + 1, dj + (ow - 1) * stride + 1),
                              (1, stride, stride))
            parts.append(sl.reshape((c, oh, ow, 1)))
    stack = T.concatenate(parts, axis=3)
    if kind == "max":
        return stack.max(axis=3)
    return stack.sum(axes=3) / float(wh * ww)


def max_pool(image, window: tuple[int, int], stride: int) -> Tensor:
    """Sliding-window maximum per channel."""
    return _pool_reduce(image, window, stride, "max")


def avg_pool(image, window: tuple[int, int], stride: int) -> Tensor:
    """Sliding-window arithmetic mean per channel."""
    return _pool_reduce(image, window, stride, "avg")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _write_pgm(path: str, values: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalized."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def export_params(params: Union[PoolingParams, WindowedPoolingParams],
                  out_dir: str) -> dict:
    """Write W.csv / p.csv (evaluation-mode values), PGM heatmaps, and a small
    metadata file; returns the metadata."""
    os.makedirs(out_dir, exist_ok=True)
    eval_params = params.evaluation()
    w = eval_params.shape_matrix()
    p = eval_params.exponents()

    if isinstance(params, WindowedPoolingParams):
        w_csv = w  # one row per window, raster order
        p_csv = p.reshape(-1, 1)
        gh, gw = params.grid
        wh, ww = params.window
        w_img = transform_shape(_values_of(params.w_tilde), params.temperature,
                                MODE_EVAL)  # (gh, wh, gw, ww)
        # place window entries at their image positions
        composed = np.zeros((gh * wh, gw * ww))
        for r in range(gh):
            for c in range(gw):
                composed[r * wh:(r + 1) * wh, c * ww:(c + 1) * ww] = w_img[r, :, c, :]
        heat_w, heat_p = composed, p
    else:
        w_csv = w
        p_csv = p.reshape(-1, 1)
        heat_w, heat_p = w, p.reshape(-1, 1)

    T.save_csv(w_csv, os.path.join(out_dir, "W.csv"))
    T.save_csv(p_csv, os.path.join(out_dir, "p.csv"))
    _write_pgm(os.path.join(out_dir, "W.pgm"), heat_w)
    _write_pgm(os.path.join(out_dir, "p.pgm"), heat_p)

    empty_rows = [int(i) for i in np.flatnonzero(w_csv.sum(axis=1) == 0)]
    meta = {
        "form": "windowed" if isinstance(params, WindowedPoolingParams) else "dense",
        "temperature": params.temperature,
        "empty_rows": empty_rows,  # zero rows pool to 0; intent undefined upstream
        "normalization": "window-area (J)",
    }
    with open(os.path.join(out_dir, "pooling_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta
