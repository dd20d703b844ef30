"""Dense float64 tensors, a reverse-mode gradient tape, and binary tensor IO.

Every value flowing through the engine is a Tensor wrapping a C-order
float64 numpy array. Differentiable operations record one entry on the
active GradTape; ``backward`` replays the records in reverse order and
accumulates gradients per tensor identity, so a parameter referenced by k
recorded operations receives exactly k additive contributions. Tensors are
treated as immutable once produced by an op; tapes are single-threaded.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import BroadcastError, ContractError, FormatError, ShapeError

Array = np.ndarray


class Tensor:
    """Dense N-dimensional float64 array in row-major layout."""

    __slots__ = ("data",)

    def __init__(self, values):
        self.data = np.ascontiguousarray(values, dtype=np.float64)

    @classmethod
    def full(cls, shape: Sequence[int], fill: float) -> "Tensor":
        """Create a tensor of the given extents, every element == fill."""
        shape = tuple(int(s) for s in shape)
        for d, extent in enumerate(shape):
            if extent < 1:
                raise ShapeError(f"extent {extent} at dim {d} must be >= 1")
        out = cls.__new__(cls)
        out.data = np.full(shape, float(fill), dtype=np.float64)
        return out

    @classmethod
    def wrap(cls, arr: Array) -> "Tensor":
        """Wrap an existing float64 C-order array without copying."""
        out = cls.__new__(cls)
        if arr.dtype != np.float64 or not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A trainable tensor. ``decay`` marks weight-decay eligibility."""

    __slots__ = ("name", "decay")

    def __init__(self, values, name: str = "", decay: bool = True):
        super().__init__(values)
        self.name = name
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape})"


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

class TapeRecord:
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out_id, inputs, backward):
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block record
    themselves. Replaying in reverse yields gradients for every tensor
    reachable from the loss.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, output: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[Array], Sequence[Optional[Array]]]) -> None:
        oid = id(output)
        self.records.append(TapeRecord(oid, tuple(inputs), backward))
        self._out_ids.add(oid)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._out_ids


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(output: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(output, inputs, backward)
    return output


class Gradients:
    """Gradient map keyed by tensor identity."""

    def __init__(self, by_id: dict[int, Array]):
        self._by_id = by_id

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def __getitem__(self, t: Tensor) -> Array:
        try:
            return self._by_id[id(t)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None

    def get(self, t: Tensor, default=None):
        return self._by_id.get(id(t), default)

    def __len__(self) -> int:
        return len(self._by_id)


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Replay the tape in reverse; return d(loss)/d(tensor) for all inputs.

    The loss must be a scalar produced on this tape. Tensors used as
    inputs to several records accumulate the sum of their contributions.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gout = grads.get(rec.out_id)
        if gout is None:
            continue
        gins = rec.backward(gout)
        for t, g in zip(rec.inputs, gins):
            if g is None:
                continue
            if g.shape != t.data.shape:
                raise ContractError(
                    f"backward produced grad of shape {g.shape} for input "
                    f"of shape {t.data.shape}")
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g
    return Gradients(grads)


# --------------------------------------------------------------------------
# Broadcasting helpers
# --------------------------------------------------------------------------

def broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape under trailing-dimension alignment.

    Raises BroadcastError naming the offending output dimension.
    """
    ra, rb = len(sa), len(sb)
    rank = max(ra, rb)
    out = [0] * rank
    for i in range(1, rank + 1):
        da = sa[-i] if i <= ra else 1
        db = sb[-i] if i <= rb else 1
        if da != db and da != 1 and db != 1:
            raise BroadcastError(
                f"cannot broadcast {sa} with {sb}: extents {da} vs {db} "
                f"at output dim {rank - i}")
        out[rank - i] = max(da, db)
    return tuple(out)


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Elementwise / linear-algebra ops (each records its own backward rule)
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    out = Tensor.wrap(a.data + b.data)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record_op(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply with trailing-alignment broadcasting."""
    broadcast_shape(a.shape, b.shape)
    out = Tensor.wrap(a.data * b.data)

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record_op(out, (a, b), back)


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor.wrap(a.data + c)
    return record_op(out, (a,), lambda g: (g.copy(),))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor.wrap(a.data * c)
    return record_op(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor.wrap(a.data @ b.data)

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(out, (a, b), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor.wrap(a.data.reshape(shape))
    return record_op(out, (a,), lambda g: (g.reshape(a.data.shape),))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor.wrap(np.array(a.data.sum()))
    return record_op(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor.wrap(np.array(a.data.mean()))
    return record_op(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


# --------------------------------------------------------------------------
# Binary serialization: magic "KTNS", u32 rank, u32 extents, f64 payload,
# all little-endian. Used by checkpoints and test fixtures.
# --------------------------------------------------------------------------

MAGIC = b"KTNS"


def write_array(fh, arr: Array) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def read_array(fh) -> Array:
    base = fh.tell()
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {base}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated rank field at byte {base + 4}")
    rank = struct.unpack("<I", raw)[0]
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError(f"truncated extents at byte {base + 8}")
    shape = struct.unpack(f"<{rank}I", raw) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(
            f"truncated payload at byte {base + 8 + 4 * rank}: "
            f"expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_array(fh, t.data)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor.wrap(read_array(fh))
