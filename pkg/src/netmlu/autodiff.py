"""Tape-based reverse-mode differentiation on dense float64 arrays.

Forward ops compute with numpy and append a record (op kind, inputs, output,
saved context) to a Tape whenever gradients will be needed; ``backward``
walks the records in exact reverse order, accumulating into ``.grad``. The
op set is exactly what the model layers need: matrix products (including a
stacked per-row variant), elementwise arithmetic, gather/concat/reshape
plumbing, segment reductions for neighborhood aggregation, the two ReLU
flavors, and an MSE loss. Adam, finite-difference gradient checking, and a
JSON checkpoint format round out the training tool chain.

Segment ops require segment ids sorted non-decreasing; callers lay out their
edge arrays accordingly, which lets the reductions run as contiguous
``reduceat`` passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .util import write_text_atomic

__all__ = [
    "Tensor",
    "Tape",
    "Record",
    "parameter",
    "constant",
    "matmul",
    "rowwise_matmul",
    "add",
    "mul",
    "scalar_mul",
    "concat",
    "gather_rows",
    "segment_sum",
    "segment_softmax",
    "relu",
    "leaky_relu",
    "reduce_sum",
    "reshape",
    "mse_loss",
    "backward",
    "AdamState",
    "adam_step",
    "zero_grads",
    "gradcheck",
    "glorot",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class Tensor:
    """Dense float64 array plus gradient slot.

    ``tid`` is assigned when the tensor first appears in a Tape record;
    ``from_op`` marks tensors produced by an op (gradients flow through
    them even though they are not leaves).
    """

    __slots__ = ("values", "requires_grad", "grad", "tid", "from_op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tid: int | None = None
        self.from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    _next_tid: int = 0

    def _register(self, t: Tensor) -> None:
        if t.tid is None:
            t.tid = self._next_tid
            self._next_tid += 1

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, ctx: dict) -> None:
        if not any(t.requires_grad or t.from_op for t in inputs):
            return
        for t in inputs:
            self._register(t)
        self._register(output)
        output.from_op = True
        self.records.append(Record(op, inputs, output, ctx))


def _shape_error(op: str, detail: str) -> ValidationError:
    return ValidationError(f"{op}: {detail}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Forward ops. Each returns a fresh Tensor and records onto the tape.
# ---------------------------------------------------------------------------


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise _shape_error("matmul", f"operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = Tensor(a.values @ b.values)
    except ValueError as exc:
        raise _shape_error("matmul", f"{a.shape} @ {b.shape}: {exc}") from None
    tape.record("matmul", (a, b), out, {})
    return out


def rowwise_matmul(tape: Tape, a: Tensor, w: Tensor) -> Tensor:
    """Per-row matrix product: out[..., e, :] = a[..., e, :] @ w[e].

    ``w`` stacks one (d_in, d_out) matrix per row, so a single call applies
    a different linear map to every edge.
    """
    if w.values.ndim != 3:
        raise _shape_error("rowwise_matmul", f"stacked matrices must be 3-D, got {w.shape}")
    if a.values.ndim < 2 or a.shape[-1] != w.shape[1] or a.shape[-2] != w.shape[0]:
        raise _shape_error(
            "rowwise_matmul", f"rows/features mismatch: {a.shape} vs stacked {w.shape}"
        )
    out = Tensor(np.einsum("...ei,eio->...eo", a.values, w.values))
    tape.record("rowwise_matmul", (a, w), out, {})
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.values + b.values)
    except ValueError:
        raise _shape_error("add", f"shapes do not broadcast: {a.shape} + {b.shape}") from None
    tape.record("add", (a, b), out, {})
    return out


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.values * b.values)
    except ValueError:
        raise _shape_error("mul", f"shapes do not broadcast: {a.shape} * {b.shape}") from None
    tape.record("mul", (a, b), out, {})
    return out


def scalar_mul(tape: Tape, a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * c)
    tape.record("scalar_mul", (a,), out, {"c": float(c)})
    return out


def concat(tape: Tape, tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise _shape_error("concat", "no inputs")
    try:
        out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    except ValueError as exc:
        raise _shape_error("concat", f"{[t.shape for t in tensors]}: {exc}") from None
    sizes = [t.values.shape[axis] for t in tensors]
    tape.record("concat", tuple(tensors), out, {"axis": axis, "sizes": sizes})
    return out


def gather_rows(tape: Tape, a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows by integer index along ``axis`` (0 or 1)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise _shape_error("gather_rows", f"indices must be 1-D, got shape {idx.shape}")
    if axis not in (0, 1):
        raise _shape_error("gather_rows", f"axis must be 0 or 1, got {axis}")
    if a.values.ndim <= axis:
        raise _shape_error("gather_rows", f"axis {axis} out of range for shape {a.shape}")
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise _shape_error("gather_rows", f"index out of range for shape {a.shape}")
    out = Tensor(a.values[idx] if axis == 0 else a.values[:, idx])
    tape.record("gather_rows", (a,), out, {"idx": idx, "axis": axis})
    return out


def _segment_starts(op: str, seg: np.ndarray, length: int, num_segments: int):
    if seg.ndim != 1 or len(seg) != length:
        raise _shape_error(op, f"segment ids must be 1-D of length {length}")
    if len(seg) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), seg
    if np.any(seg[1:] < seg[:-1]):
        raise _shape_error(op, "segment ids must be sorted non-decreasing")
    if seg[0] < 0 or seg[-1] >= num_segments:
        raise _shape_error(op, f"segment id out of range [0, {num_segments})")
    first = np.ones(len(seg), dtype=bool)
    first[1:] = seg[1:] != seg[:-1]
    starts = np.flatnonzero(first)
    # position of each element's segment among the present segments
    gpos = np.cumsum(first) - 1
    return starts, gpos, seg


def segment_sum(tape: Tape, values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows (second-to-last axis) into their segments.

    Output has ``num_segments`` rows; segments without members are zero.
    """
    if values.values.ndim < 2:
        raise _shape_error("segment_sum", f"values must be >= 2-D, got {values.shape}")
    seg = np.asarray(segment_ids, dtype=np.int64)
    starts, _, seg = _segment_starts("segment_sum", seg, values.shape[-2], num_segments)
    out_shape = values.shape[:-2] + (num_segments,) + values.shape[-1:]
    out_values = np.zeros(out_shape)
    if len(seg):
        sums = np.add.reduceat(values.values, starts, axis=-2)
        out_values[..., seg[starts], :] = sums
    out = Tensor(out_values)
    tape.record("segment_sum", (values,), out, {"seg": seg})
    return out


def segment_softmax(tape: Tape, scores: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax within each segment along the last axis.

    Scores in one segment are shifted by the segment max before
    exponentiation; outputs are nonnegative and sum to 1 per segment.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    starts, gpos, seg = _segment_starts(
        "segment_softmax", seg, scores.shape[-1] if scores.values.ndim else 0, num_segments
    )
    if len(seg) == 0:
        out = Tensor(scores.values.copy())
        tape.record("segment_softmax", (scores,), out, {"probs": out.values, "starts": starts, "gpos": gpos})
        return out
    mx = np.maximum.reduceat(scores.values, starts, axis=-1)
    shifted = scores.values - mx[..., gpos]
    ex = np.exp(shifted)
    denom = np.add.reduceat(ex, starts, axis=-1)
    probs = ex / denom[..., gpos]
    out = Tensor(probs)
    tape.record("segment_softmax", (scores,), out, {"probs": probs, "starts": starts, "gpos": gpos})
    return out


def relu(tape: Tape, a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))
    tape.record("relu", (a,), out, {})
    return out


def leaky_relu(tape: Tape, a: Tensor, slope: float = 0.2) -> Tensor:
    out = Tensor(np.where(a.values > 0, a.values, slope * a.values))
    tape.record("leaky_relu", (a,), out, {"slope": float(slope)})
    return out


def reduce_sum(tape: Tape, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))
    tape.record("reduce_sum", (a,), out, {"axis": axis, "keepdims": keepdims})
    return out


def reshape(tape: Tape, a: Tensor, shape) -> Tensor:
    try:
        out = Tensor(a.values.reshape(shape))
    except ValueError:
        raise _shape_error("reshape", f"cannot reshape {a.shape} to {shape}") from None
    tape.record("reshape", (a,), out, {})
    return out


def mse_loss(tape: Tape, pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise _shape_error("mse_loss", f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    out = Tensor(np.mean(diff * diff))
    tape.record("mse_loss", (pred, target), out, {"diff": diff})
    return out


# ---------------------------------------------------------------------------
# Backward dispatch
# ---------------------------------------------------------------------------


def _bw_matmul(rec: Record, g: np.ndarray):
    a, b = rec.inputs
    ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
    return ga, gb


def _bw_rowwise_matmul(rec: Record, g: np.ndarray):
    a, w = rec.inputs
    ga = np.einsum("...eo,eio->...ei", g, w.values)
    e, i, o = w.shape
    flat_a = a.values.reshape(-1, e, i)
    flat_g = g.reshape(-1, e, o)
    gw = np.einsum("bei,beo->eio", flat_a, flat_g)
    return ga, gw


def _bw_add(rec: Record, g: np.ndarray):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_mul(rec: Record, g: np.ndarray):
    a, b = rec.inputs
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def _bw_scalar_mul(rec: Record, g: np.ndarray):
    return (g * rec.ctx["c"],)


def _bw_concat(rec: Record, g: np.ndarray):
    axis, sizes = rec.ctx["axis"], rec.ctx["sizes"]
    offsets = np.cumsum([0] + sizes)
    return tuple(
        np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
        for i in range(len(sizes))
    )


def _bw_gather_rows(rec: Record, g: np.ndarray):
    (a,) = rec.inputs
    idx, axis = rec.ctx["idx"], rec.ctx["axis"]
    ga = np.zeros(a.shape)
    if axis == 0:
        np.add.at(ga, idx, g)
    else:
        np.add.at(ga, (slice(None), idx), g)
    return (ga,)


def _bw_segment_sum(rec: Record, g: np.ndarray):
    seg = rec.ctx["seg"]
    return (g[..., seg, :],)


def _bw_segment_softmax(rec: Record, g: np.ndarray):
    probs, starts, gpos = rec.ctx["probs"], rec.ctx["starts"], rec.ctx["gpos"]
    if len(gpos) == 0:
        return (np.zeros_like(g),)
    pg = probs * g
    inner = np.add.reduceat(pg, starts, axis=-1)
    return (probs * (g - inner[..., gpos]),)


def _bw_relu(rec: Record, g: np.ndarray):
    (a,) = rec.inputs
    return (g * (a.values > 0),)


def _bw_leaky_relu(rec: Record, g: np.ndarray):
    (a,) = rec.inputs
    slope = rec.ctx["slope"]
    return (g * np.where(a.values > 0, 1.0, slope),)


def _bw_reduce_sum(rec: Record, g: np.ndarray):
    (a,) = rec.inputs
    axis, keepdims = rec.ctx["axis"], rec.ctx["keepdims"]
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _bw_reshape(rec: Record, g: np.ndarray):
    (a,) = rec.inputs
    return (g.reshape(a.shape),)


def _bw_mse_loss(rec: Record, g: np.ndarray):
    pred, target = rec.inputs
    scale = float(g) * 2.0 / rec.ctx["diff"].size
    gp = scale * rec.ctx["diff"]
    return gp, -gp


_BACKWARD = {
    "matmul": _bw_matmul,
    "rowwise_matmul": _bw_rowwise_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "scalar_mul": _bw_scalar_mul,
    "concat": _bw_concat,
    "gather_rows": _bw_gather_rows,
    "segment_sum": _bw_segment_sum,
    "segment_softmax": _bw_segment_softmax,
    "relu": _bw_relu,
    "leaky_relu": _bw_leaky_relu,
    "reduce_sum": _bw_reduce_sum,
    "reshape": _bw_reshape,
    "mse_loss": _bw_mse_loss,
}


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every tensor that
    requires a gradient and contributed to ``loss``.
    """
    if loss.values.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.values)
    loss.grad = loss.grad + np.ones_like(loss.values)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = _BACKWARD[rec.op](rec, g)
        for tensor, grad in zip(rec.inputs, grads):
            if not (tensor.requires_grad or tensor.from_op):
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros(tensor.shape)
            tensor.grad = tensor.grad + grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per named parameter, plus step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros(p.shape) for k, p in params.items()},
            v={k: np.zeros(p.shape) for k, p in params.items()},
            **kwargs,
        )


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Verification and persistence
# ---------------------------------------------------------------------------


def gradcheck(
    fn,
    params: dict[str, Tensor],
    rng: np.random.Generator,
    n_samples: int = 100,
    h: float = 1e-5,
) -> float:
    """Max relative error between backward and central finite differences.

    ``fn(tape)`` must rebuild the scalar loss from ``params`` on the given
    tape, deterministically. At least ``n_samples`` coordinates are checked
    (all of them when the parameters are smaller than that); the relative
    error denominator is floored so near-zero gradients compare absolutely.
    """
    zero_grads(params)
    tape = Tape()
    loss = fn(tape)
    backward(tape, loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

    coords: list[tuple[str, int]] = []
    for name, p in sorted(params.items()):
        coords.extend((name, i) for i in range(p.values.size))
    if len(coords) > n_samples:
        picked = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for name, flat_index in coords:
        p = params[name]
        flat = p.values.reshape(-1)
        original = flat[flat_index]
        flat[flat_index] = original + h
        hi = fn(Tape()).item()
        flat[flat_index] = original - h
        lo = fn(Tape()).item()
        flat[flat_index] = original
        numeric = (hi - lo) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[flat_index])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
        worst = max(worst, err)
    return worst


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    """Uniform Glorot sample; fans default to the trailing two dimensions."""
    if fan_in is None:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
    if fan_out is None:
        fan_out = shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def save_checkpoint(path: str, params: dict[str, Tensor], meta: dict | None = None) -> None:
    obj = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    write_text_atomic(path, json.dumps(obj, sort_keys=True) + "\n")


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {obj.get('version')!r}")
    tensors = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in obj["tensors"].items()
    }
    return tensors, obj["meta"]
