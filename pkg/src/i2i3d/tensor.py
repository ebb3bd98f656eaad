"""Dense tensors and a reverse-mode differentiation tape.

Tensors wrap a numpy buffer. Rank-5 tensors use the (N, C, D, H, W) layout
with W varying fastest. Operations in :mod:`i2i3d.ops` record a node on the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient; :meth:`Tape.backward` then walks the nodes in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPE = np.float32
_tapes: list["Tape"] = []


def default_dtype() -> np.dtype:
    return np.dtype(_FLOAT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Switch between float32 (training) and float64 (verification)."""
    global _FLOAT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _FLOAT_DTYPE = dtype.type


class precision:
    """Context manager that temporarily changes the default float dtype."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self._saved = default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)


class Tensor:
    """A numpy buffer that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim == 5 and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Offset of ``index`` in a C-ordered buffer (last axis fastest)."""
    if len(shape) != len(index):
        raise ValueError(f"index {tuple(index)} does not match rank of {tuple(shape)}")
    offset = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of range for {tuple(shape)}")
        offset = offset * extent + i
    return offset


def unflat_index(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    total = int(np.prod(shape))
    if not 0 <= offset < total:
        raise IndexError(f"offset {offset} out of range for {tuple(shape)}")
    out = []
    for extent in reversed(shape):
        out.append(offset % extent)
        offset //= extent
    return tuple(reversed(out))


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


class Tape:
    """Records executed operations so gradients can be computed afterwards.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: dict[int, Node] = {}

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced[id(node.output)] = node

    def watched(self) -> list[Tensor]:
        """Leaf tensors on this tape that require gradients, in first-use order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Reverse-mode gradients of a scalar ``loss``.

        Returns a map from tensor to gradient array for every tensor in
        ``wrt`` (default: all watched leaves). Tensors the loss does not
        depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        stop = self.nodes.index(self._produced[id(loss)])
        for node in reversed(self.nodes[: stop + 1]):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise AssertionError(f"{node.op}: gradient shape {g.shape} != tensor shape {t.shape}")
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        targets = self.watched() if wrt is None else list(wrt)
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when gradients are needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(tuple(inputs), out, grad_fn, op))
    return out
