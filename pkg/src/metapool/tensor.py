"""Dense float64 tensors with a replayable computation record and reverse-mode
automatic differentiation.

Every primitive applied under an active :class:`Record` is appended to that
record as ``(op tag, static params, operand node ids, result node id)``.
Gradients are computed by walking the record backwards; the vector-Jacobian
rules are themselves expressed through recorded primitives, so the tensors
returned by :func:`grad` live on the same record and can be differentiated
again.  This is what makes one-inner-step meta-gradients (gradients of
gradients) work.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes do not conform."""


class DomainError(TensorError):
    """An operation produced or was fed values outside its domain."""


class ReplayError(TensorError):
    """Re-execution of a record did not reproduce the stored values."""


_MAGIC = b"MPT1"

# Context of active records. Distinct records may be driven from distinct
# threads; a single record must only ever be used from one thread at a time.
_STATE = threading.local()


def _record_stack() -> list["Record"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_record() -> "Record":
    stack = _record_stack()
    if not stack:
        raise TensorError("no active Record; wrap the computation in 'with Record():'")
    return stack[-1]


@dataclass(frozen=True)
class Entry:
    """One primitive application stored in a record."""

    op: str
    params: tuple
    input_ids: tuple[int, ...]
    out_id: int


class Record:
    """Ordered, acyclic, replayable sequence of primitive applications."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        # index of the entry that produced each node (None for leaves)
        self._producer: list[Optional[int]] = []
        self.entries: list[Entry] = []

    # -- context management -------------------------------------------------
    def __enter__(self) -> "Record":
        _record_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _record_stack()
        assert stack and stack[-1] is self
        stack.pop()

    # -- node management ----------------------------------------------------
    def _add_node(self, values: np.ndarray, entry_idx: Optional[int]) -> int:
        self._values.append(values)
        self._producer.append(entry_idx)
        return len(self._values) - 1

    def leaf(self, values) -> "Tensor":
        """Register a constant/input node and return a tensor bound to it."""
        arr = _as_array(values)
        nid = self._add_node(arr, None)
        return Tensor(arr, record=self, node_id=nid)

    def _result(self, op: str, params: tuple, input_ids: tuple[int, ...],
                values: np.ndarray) -> "Tensor":
        nid = self._add_node(values, len(self.entries))
        self.entries.append(Entry(op, params, input_ids, nid))
        return Tensor(values, record=self, node_id=nid)

    def value_of(self, node_id: int) -> np.ndarray:
        return self._values[node_id]

    def tensor_of(self, node_id: int) -> "Tensor":
        return Tensor(self._values[node_id], record=self, node_id=node_id)

    def __len__(self) -> int:
        return len(self.entries)

    # -- replay -------------------------------------------------------------
    def replay(self) -> None:
        """Re-execute every entry from the leaf values.

        Raises :class:`ReplayError` unless every recomputed result is
        bit-identical to the stored one.
        """
        for idx, entry in enumerate(self.entries):
            args = [self._values[i] for i in entry.input_ids]
            got = _KERNELS[entry.op](*args, *entry.params)
            want = self._values[entry.out_id]
            if got.shape != want.shape or not np.array_equal(got, want):
                raise ReplayError(f"entry {idx} ({entry.op}) did not replay bit-identically")


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable n-dimensional float64 array, optionally bound to a record node."""

    __slots__ = ("values", "_rec", "_id")

    def __init__(self, values, record: Optional[Record] = None,
                 node_id: Optional[int] = None) -> None:
        if isinstance(values, np.ndarray) and not values.flags.writeable:
            self.values = values
        else:
            self.values = _as_array(values)
        self._rec = record
        self._id = node_id

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def node_id(self) -> Optional[int]:
        return self._id

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of this tensor with no record binding (constant under grad)."""
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self._id is not None})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", self, other)

    def __radd__(self, other):
        return apply_primitive("add", other, self)

    def __sub__(self, other):
        return apply_primitive("subtract", self, other)

    def __rsub__(self, other):
        return apply_primitive("subtract", other, self)

    def __mul__(self, other):
        return apply_primitive("multiply", self, other)

    def __rmul__(self, other):
        return apply_primitive("multiply", other, self)

    def __truediv__(self, other):
        return apply_primitive("divide", self, other)

    def __rtruediv__(self, other):
        return apply_primitive("divide", other, self)

    def __pow__(self, other):
        return apply_primitive("power", self, other)

    def __neg__(self):
        return apply_primitive("multiply", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return apply_primitive("exp", self)

    def log(self):
        return apply_primitive("log", self)

    def sigmoid(self):
        return apply_primitive("sigmoid", self)

    def relu(self):
        return apply_primitive("relu", self)

    def sum(self, axes=None, keepdims=False):
        return sum_reduce(self, axes=axes, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_reduce(self, axis=axis, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        count = self.size if axes is None else int(
            np.prod([self.shape[a] for a in _norm_axes(axes, self.ndim)]))
        return sum_reduce(self, axes=axes, keepdims=keepdims) / float(count)

    def reshape(self, shape):
        return reshape(self, shape)

    def broadcast(self, shape):
        return broadcast_to(self, shape)


# ---------------------------------------------------------------------------
# forward kernels (also used for replay)
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _k_sum(a, axes, keepdims):
    return np.sum(a, axis=axes, keepdims=keepdims)


def _k_max(a, axis, keepdims):
    if axis is None:
        # ties: np.argmax picks the lowest linear index
        out = a.reshape(-1)[np.argmax(a)]
        return np.full((1,) * a.ndim, out) if keepdims else np.asarray(out)
    return np.max(a, axis=axis, keepdims=keepdims)


def _k_matmul(a, b, ta, tb):
    if ta:
        a = np.swapaxes(a, -1, -2)
    if tb:
        b = np.swapaxes(b, -1, -2)
    return np.matmul(a, b)


def _k_slice(a, starts, stops, steps):
    sl = tuple(slice(b, e, s) for b, e, s in zip(starts, stops, steps))
    return a[sl]


def _k_unslice(g, starts, stops, steps, shape):
    out = np.zeros(shape)
    sl = tuple(slice(b, e, s) for b, e, s in zip(starts, stops, steps))
    out[sl] = g
    return out


def _k_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


_KERNELS: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda a, b: a + b,
    "subtract": lambda a, b: a - b,
    "multiply": lambda a, b: a * b,
    "divide": lambda a, b: a / b,
    "power": lambda a, b: a ** b,
    "exp": np.exp,
    "log": np.log,
    "sigmoid": _k_sigmoid,
    "relu": lambda a: np.maximum(a, 0.0),
    "matrix-multiply": _k_matmul,
    "sum-reduce": _k_sum,
    "max-reduce": _k_max,
    "broadcast": lambda a, shape: np.broadcast_to(a, shape),
    "reshape": lambda a, shape: np.reshape(a, shape),
    "slice": _k_slice,
    "unslice": _k_unslice,
    "concatenate": lambda *args: np.concatenate(args[:-1], axis=args[-1]),
}

_ELEMENTWISE_BINARY = ("add", "subtract", "multiply", "divide", "power")
_UNARY = ("exp", "log", "sigmoid", "relu")

PRIMITIVES = tuple(_KERNELS)


def _lift(rec: Record, x) -> Tensor:
    """Bind ``x`` to ``rec``: reuse its node if already there, else add a leaf."""
    if isinstance(x, Tensor):
        if x._rec is rec and x._id is not None:
            return x
        return rec.leaf(x.values)
    return rec.leaf(x)


def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Trailing-dimension broadcast; anything fancier is rejected."""
    out = []
    for da, db in zip(reversed((1,) * max(0, len(sb) - len(sa)) + sa),
                      reversed((1,) * max(0, len(sa) - len(sb)) + sb)):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast")
    return tuple(reversed(out))


# Selection and layout primitives map finite inputs to finite outputs, so the
# finiteness invariant is preserved without inspecting their results.
_SAFE_OPS = frozenset({"relu", "sigmoid", "max-reduce", "broadcast", "reshape",
                       "slice", "unslice", "concatenate"})


def _check_finite(op: str, rec: Record, values: np.ndarray,
                  operands: Sequence[Tensor]) -> None:
    if op in _SAFE_OPS:
        return
    # one-pass screen: any NaN/Inf element makes the sum non-finite; a sum
    # overflow of finite values is caught by the exact check below
    with np.errstate(all="ignore"):
        if np.isfinite(values.sum()) or np.isfinite(values).all():
            return
    where = f"op '{op}' at record position {len(rec.entries)}"
    if op == "log" and np.any(operands[0].values <= 0):
        raise DomainError(f"log of non-positive operand in {where}")
    if op == "divide" and np.any(operands[1].values == 0):
        raise DomainError(f"division by zero in {where}")
    raise DomainError(f"non-finite result from {where}")


def apply_primitive(op: str, *operands, **params) -> Tensor:
    """Apply one primitive, register it in the active record, return the result.

    Elementwise binaries broadcast their operands with trailing-dimension
    alignment (explicit ``broadcast`` entries are inserted so the stored
    primitive applications always see conforming shapes).
    """
    if op not in _KERNELS:
        raise TensorError(f"unknown primitive '{op}'")
    rec = _active_record()
    ts = [_lift(rec, x) for x in operands]

    if op in _ELEMENTWISE_BINARY:
        target = _broadcast_shape(ts[0].shape, ts[1].shape)
        ts = [t if t.shape == target else _register(rec, "broadcast", (t,), (target,))
              for t in ts]
        return _register(rec, op, ts, ())
    if op in _UNARY:
        return _register(rec, op, ts, ())
    raise TensorError(f"primitive '{op}' takes static parameters; use its named function")


def _register(rec: Record, op: str, ts: Sequence[Tensor], params: tuple) -> Tensor:
    with np.errstate(all="ignore"):  # violations surface as DomainError below
        values = _KERNELS[op](*[t.values for t in ts], *params)
    values = np.asarray(values, dtype=np.float64)
    _check_finite(op, rec, values, ts)
    values.setflags(write=False)
    return rec._result(op, params, tuple(t._id for t in ts), values)


# -- primitives with static parameters --------------------------------------

def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    rec = _active_record()
    ta, tb = _lift(rec, a), _lift(rec, b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError("matrix-multiply needs operands of rank >= 2")
    return _register(rec, "matrix-multiply", (ta, tb), (transpose_a, transpose_b))


def sum_reduce(a, axes=None, keepdims: bool = False) -> Tensor:
    rec = _active_record()
    t = _lift(rec, a)
    return _register(rec, "sum-reduce", (t,), (_norm_axes(axes, t.ndim), keepdims))


def max_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    rec = _active_record()
    t = _lift(rec, a)
    if axis is not None:
        axis = axis % t.ndim
    return _register(rec, "max-reduce", (t,), (axis, keepdims))


def broadcast_to(a, shape) -> Tensor:
    rec = _active_record()
    t = _lift(rec, a)
    shape = tuple(int(s) for s in shape)
    if _broadcast_shape(t.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}")
    return _register(rec, "broadcast", (t,), (shape,))


def reshape(a, shape) -> Tensor:
    rec = _active_record()
    t = _lift(rec, a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}")
    return _register(rec, "reshape", (t,), (shape,))


def slice_axes(a, starts, stops, steps=None) -> Tensor:
    """Basic strided slice over all axes (starts/stops/steps one per axis)."""
    rec = _active_record()
    t = _lift(rec, a)
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    steps = tuple(1 for _ in starts) if steps is None else tuple(int(s) for s in steps)
    if not (len(starts) == len(stops) == len(steps) == t.ndim):
        raise ShapeError("slice bounds must cover every axis")
    for b, e, s, n in zip(starts, stops, steps, t.shape):
        if s < 1 or not (0 <= b <= e <= n):
            raise ShapeError(f"invalid slice [{b}:{e}:{s}] for extent {n}")
    return _register(rec, "slice", (t,), (starts, stops, steps))


def concatenate(tensors, axis: int = 0) -> Tensor:
    rec = _active_record()
    ts = [_lift(rec, t) for t in tensors]
    if len(ts) < 2:
        raise ShapeError("concatenate needs at least two operands")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise ShapeError("concatenate operands must share rank")
    return _register(rec, "concatenate", ts, (axis,))


def _unslice(g: Tensor, starts, stops, steps, shape) -> Tensor:
    # adjoint of slice: scatter into a zero tensor (internal primitive)
    rec = _active_record()
    t = _lift(rec, g)
    return _register(rec, "unslice", (t,), (starts, stops, steps, tuple(shape)))


# ---------------------------------------------------------------------------
# reverse-mode differentiation
# ---------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a gradient with the broadcast target shape back to ``shape``."""
    if g.shape == shape:
        return g
    pad = g.ndim - len(shape)
    axes = list(range(pad))
    for i, d in enumerate(shape):
        if d == 1 and g.shape[pad + i] != 1:
            axes.append(pad + i)
    out = sum_reduce(g, axes=tuple(axes), keepdims=True) if axes else g
    return reshape(out, shape)


def _vjp(rec: Record, entry: Entry, g: Tensor,
         needs: Sequence[bool]) -> list[Optional[Tensor]]:
    op = entry.op
    xs = [rec.tensor_of(i) for i in entry.input_ids]
    out = rec.tensor_of(entry.out_id)

    if op == "add":
        return [g if n else None for n in needs]
    if op == "subtract":
        return [g if needs[0] else None, -g if needs[1] else None]
    if op == "multiply":
        return [g * xs[1] if needs[0] else None, g * xs[0] if needs[1] else None]
    if op == "divide":
        da = g / xs[1] if needs[0] else None
        db = g * (-out / xs[1]) if needs[1] else None
        return [da, db]
    if op == "power":
        da = g * xs[1] * (xs[0] ** (xs[1] - 1.0)) if needs[0] else None
        db = g * out * xs[0].log() if needs[1] else None
        return [da, db]
    if op == "exp":
        return [g * out]
    if op == "log":
        return [g / xs[0]]
    if op == "sigmoid":
        return [g * out * (1.0 - out)]
    if op == "relu":
        mask = rec.leaf((xs[0].values > 0).astype(np.float64))
        return [g * mask]
    if op == "matrix-multiply":
        ta, tb = entry.params
        a, b = xs
        if needs[0]:
            if not ta:
                da = matmul(g, b, transpose_b=not tb)
            else:
                da = matmul(b, g, transpose_a=tb, transpose_b=True)
            da = _unbroadcast_matmul(da, a.shape)
        else:
            da = None
        if needs[1]:
            if not tb:
                db = matmul(a, g, transpose_a=not ta)
            else:
                db = matmul(g, a, transpose_a=True, transpose_b=ta)
            db = _unbroadcast_matmul(db, b.shape)
        else:
            db = None
        return [da, db]
    if op == "sum-reduce":
        axes, keepdims = entry.params
        if not keepdims:
            kept = list(out.shape)
            for a in axes:
                kept.insert(a, 1)
            g = reshape(g, kept)
        return [broadcast_to(g, xs[0].shape)]
    if op == "max-reduce":
        axis, keepdims = entry.params
        mask = rec.leaf(_argmax_mask(xs[0].values, axis))
        if not keepdims:
            kept = list(out.shape)
            if axis is None:
                kept = [1] * xs[0].ndim
            else:
                kept.insert(axis, 1)
            g = reshape(g, kept)
        return [broadcast_to(g, xs[0].shape) * mask]
    if op == "broadcast":
        return [_unbroadcast(g, xs[0].shape)]
    if op == "reshape":
        return [reshape(g, xs[0].shape)]
    if op == "slice":
        starts, stops, steps = entry.params
        return [_unslice(g, starts, stops, steps, xs[0].shape)]
    if op == "unslice":
        starts, stops, steps, _ = entry.params
        return [slice_axes(g, starts, stops, steps)]
    if op == "concatenate":
        axis = entry.params[0]
        outs: list[Optional[Tensor]] = []
        offset = 0
        for t, n in zip(xs, needs):
            extent = t.shape[axis]
            if n:
                starts = [0] * t.ndim
                stops = list(g.shape)
                starts[axis] = offset
                stops[axis] = offset + extent
                outs.append(slice_axes(g, starts, stops))
            else:
                outs.append(None)
            offset += extent
        return outs
    raise TensorError(f"no gradient rule for '{op}'")


def _unbroadcast_matmul(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Collapse broadcast batch dimensions of a matmul gradient."""
    if g.shape == shape:
        return g
    return _unbroadcast(g, shape)


def _argmax_mask(values: np.ndarray, axis: Optional[int]) -> np.ndarray:
    # ties resolve to the lowest linear index; gradient routes entirely there
    mask = np.zeros_like(values)
    if axis is None:
        mask.reshape(-1)[np.argmax(values)] = 1.0
    else:
        idx = np.expand_dims(np.argmax(values, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar output w.r.t. each input.

    The returned tensors are registered in the same record, so expressions
    built from them (including further ``grad`` calls) stay differentiable.
    Inputs that the output does not depend on get zero tensors.
    """
    if output._rec is None or output._id is None:
        raise TensorError("output is not part of a computation record")
    rec = output._rec
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    input_ids = []
    for t in inputs:
        if t._rec is not rec or t._id is None:
            raise TensorError("grad input is not in the output's record")
        input_ids.append(t._id)

    # ancestors of the output
    anc = {output._id}
    stack = [output._id]
    while stack:
        nid = stack.pop()
        eidx = rec._producer[nid]
        if eidx is None:
            continue
        for iid in rec.entries[eidx].input_ids:
            if iid not in anc:
                anc.add(iid)
                stack.append(iid)
    # descendants of the inputs (entries are topologically ordered)
    desc = set(input_ids)
    entries = list(rec.entries)
    for entry in entries:
        if entry.out_id not in desc and any(i in desc for i in entry.input_ids):
            desc.add(entry.out_id)
    active = anc & desc

    adjoint: dict[int, Tensor] = {output._id: rec.leaf(np.ones(output.shape))}
    for entry in reversed(entries):
        g = adjoint.get(entry.out_id)
        if g is None or entry.out_id not in active:
            continue
        needs = [iid in active for iid in entry.input_ids]
        if not any(needs):
            continue
        parts = _vjp(rec, entry, g, needs)
        for iid, part in zip(entry.input_ids, parts):
            if part is None:
                continue
            held = adjoint.get(iid)
            adjoint[iid] = part if held is None else held + part

    results = []
    for t, iid in zip(inputs, input_ids):
        got = adjoint.get(iid)
        if got is None:
            got = rec.leaf(np.zeros(t.shape))
        elif got.shape != t.shape:
            got = reshape(got, t.shape)
        results.append(got)
    return results


def finite_difference_check(fn: Callable[[Tensor], Tensor], point,
                            step: float) -> float:
    """Max relative error between ``grad`` and central finite differences.

    ``fn`` must map a tensor to a scalar tensor and be evaluable at the
    perturbed points ``x +- step * e_i``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)

    with Record() as rec:
        x = rec.leaf(point)
        y = fn(x)
        if y.size != 1:
            raise ShapeError("finite_difference_check needs a scalar-valued function")
        g = grad(y, [x])[0].numpy()

    def evaluate(values: np.ndarray) -> float:
        with Record() as r:
            return fn(r.leaf(values)).item()

    fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        fd.reshape(-1)[i] = (evaluate(hi.reshape(point.shape))
                             - evaluate(lo.reshape(point.shape))) / (2 * step)

    scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(g - fd) / scale))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _format_value(v: float) -> str:
    if abs(v) < 1e6:
        return np.format_float_positional(v, unique=True, trim="0")
    return np.format_float_scientific(v, unique=True, trim="0")


def to_csv(tensor) -> str:
    """2-D CSV: one row per line, '.' decimal, no exponent for |v| < 1e6."""
    arr = tensor.numpy() if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"CSV serialization is 2-D only, got rank {arr.ndim}")
    return "\n".join(",".join(_format_value(v) for v in row) for row in arr) + "\n"


def from_csv(text: str) -> Tensor:
    rows = [[float(tok) for tok in line.split(",")]
            for line in text.strip().splitlines() if line.strip()]
    if not rows:
        raise TensorError("empty CSV input")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError("ragged CSV rows")
    return Tensor(np.array(rows, dtype=np.float64))


def save_csv(tensor, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_csv(tensor))


def load_csv(path) -> Tensor:
    with open(path) as fh:
        return from_csv(fh.read())


def to_bytes(tensor) -> bytes:
    """Binary container: magic 'MPT1', u32 rank, u64 extents, raw LE float64."""
    arr = tensor.numpy() if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    head = _MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def from_bytes(blob: bytes) -> Tensor:
    if blob[:4] != _MAGIC:
        raise TensorError("bad magic; not an MPT1 container")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return Tensor(data.astype(np.float64).reshape(shape))


def save_mpt(tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(tensor))


def load_mpt(path) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
