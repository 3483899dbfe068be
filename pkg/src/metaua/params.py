"""Flat parameter storage with named blocks, and layer-wise partitions.

Every weight, update and gradient in the simulator is a :class:`ParamVector`:
one contiguous float64 array plus the block layout describing which slice
belongs to which model tensor.  Two vectors can only be combined when their
layouts are identical ("congruent").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class CongruenceError(ValueError):
    """Raised when two ParamVectors with different block layouts are combined."""


class PartitionError(ValueError):
    """Raised when a partition is not a disjoint cover of the model blocks."""


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


def make_layout(shapes: Iterable[tuple[str, Sequence[int]]]) -> tuple[Block, ...]:
    """Lay out named tensors back to back, in the order given."""
    blocks = []
    offset = 0
    seen = set()
    for name, shape in shapes:
        if name in seen:
            raise ValueError(f"duplicate block name {name!r}")
        seen.add(name)
        shape = tuple(int(s) for s in shape)
        length = int(np.prod(shape)) if shape else 1
        blocks.append(Block(name, offset, length, shape))
        offset += length
    return tuple(blocks)


def _check_layout(blocks: tuple[Block, ...], size: int) -> None:
    offset = 0
    for b in blocks:
        if b.offset != offset or b.length < 0:
            raise ValueError(f"block {b.name!r} does not tile the value array")
        expected = int(np.prod(b.shape)) if b.shape else 1
        if expected != b.length:
            raise ValueError(f"block {b.name!r}: shape {b.shape} != length {b.length}")
        offset = b.stop
    if offset != size:
        raise ValueError(f"blocks cover {offset} values, array has {size}")


class ParamVector:
    """Immutable flat float64 vector with named-block metadata."""

    __slots__ = ("_values", "blocks", "_index")

    def __init__(self, values, blocks: tuple[Block, ...], *, copy: bool = True):
        arr = np.array(values, dtype=np.float64, copy=copy).reshape(-1)
        blocks = tuple(blocks)
        _check_layout(blocks, arr.size)
        arr.flags.writeable = False
        self._values = arr
        self.blocks = blocks
        self._index = {b.name: b for b in blocks}

    @classmethod
    def zeros(cls, blocks: tuple[Block, ...]) -> "ParamVector":
        size = blocks[-1].stop if blocks else 0
        return cls(np.zeros(size), blocks, copy=False)

    def _new(self, values: np.ndarray) -> "ParamVector":
        # layout already validated; skip the check on hot paths
        out = object.__new__(ParamVector)
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        values.flags.writeable = False
        out._values = values
        out.blocks = self.blocks
        out._index = self._index
        return out

    def with_values(self, values) -> "ParamVector":
        values = np.array(values, dtype=np.float64)
        if values.size != self.size:
            raise CongruenceError(f"expected {self.size} values, got {values.size}")
        return self._new(values)

    def zeros_like(self) -> "ParamVector":
        return self._new(np.zeros(self.size))

    @property
    def values(self) -> np.ndarray:
        """Read-only view of the flat values."""
        return self._values

    @property
    def size(self) -> int:
        return self._values.size

    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.blocks]

    def block(self, name: str) -> np.ndarray:
        """Read-only view of one block reshaped to its tensor shape."""
        b = self._index[name]
        return self._values[b.slice].reshape(b.shape)

    def block_info(self, name: str) -> Block:
        return self._index[name]

    def congruent(self, other: "ParamVector") -> bool:
        return self.blocks is other.blocks or self.blocks == other.blocks

    def check_congruent(self, other: "ParamVector") -> None:
        if not self.congruent(other):
            raise CongruenceError("ParamVectors have different block layouts")

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, ParamVector):
            return elementwise("hadamard", self, other)
        return elementwise("scale", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self._new(-self._values)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.congruent(other) and np.array_equal(self._values, other._values)

    __hash__ = None

    def digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for b in self.blocks:
            h.update(repr((b.name, b.offset, b.shape)).encode())
        h.update(self._values.tobytes())
        return h.digest()

    def __repr__(self):
        return f"ParamVector(size={self.size}, blocks={self.block_names})"


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def elementwise(op: str, a: ParamVector, b=None):
    """Apply one of the vector-algebra primitives.

    ``op`` is one of ``add``, ``sub``, ``scale``, ``hadamard``, ``dot`` or
    ``sq_l2_norm``.  ``scale`` takes a scalar for ``b``; ``sq_l2_norm`` ignores
    ``b``.  Vector results are new ParamVectors, scalar results are floats.
    """
    if op == "scale":
        return a._new(a.values * float(b))
    if op == "sq_l2_norm":
        return _dot(a.values, a.values)
    if not isinstance(b, ParamVector):
        raise TypeError(f"{op} needs a ParamVector operand")
    a.check_congruent(b)
    if op == "add":
        return a._new(a.values + b.values)
    if op == "sub":
        return a._new(a.values - b.values)
    if op == "hadamard":
        return a._new(a.values * b.values)
    if op == "dot":
        return _dot(a.values, b.values)
    raise ValueError(f"unknown op {op!r}")


def dot(a: ParamVector, b: ParamVector) -> float:
    return elementwise("dot", a, b)


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """sum_k weights[k] * vectors[k], accumulated in list order."""
    if not vectors:
        raise ValueError("weighted_sum of an empty list")
    first = vectors[0]
    acc = np.zeros(first.size)
    for v, c in zip(vectors, weights):
        first.check_congruent(v)
        acc += float(c) * v.values
    return first._new(acc)


# -- partitions ---------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    name: str
    blocks: tuple[str, ...]


class Partition:
    """A disjoint cover of a model's blocks; each cell owns its meta-parameters."""

    def __init__(self, cells: Iterable[tuple[str, Sequence[str]]]):
        self.cells = tuple(Cell(name, tuple(blocks)) for name, blocks in cells)
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise PartitionError("duplicate cell names")
        self._slices: dict[tuple, list[list[slice]]] = {}

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cells]

    def validate(self, blocks: tuple[Block, ...]) -> None:
        """Raise PartitionError unless the cells exactly tile ``blocks``."""
        all_blocks = {b.name for b in blocks}
        seen: set[str] = set()
        for cell in self.cells:
            cell_set = set(cell.blocks)
            if len(cell_set) != len(cell.blocks):
                raise PartitionError(f"cell {cell.name!r} lists a block twice")
            overlap = seen & cell_set
            if overlap:
                raise PartitionError(f"blocks {sorted(overlap)} appear in more than one cell")
            unknown = cell_set - all_blocks
            if unknown:
                raise PartitionError(f"cell {cell.name!r} names unknown blocks {sorted(unknown)}")
            seen |= cell_set
        missing = all_blocks - seen
        if missing:
            raise PartitionError(f"blocks {sorted(missing)} are not covered")

    def slices(self, blocks: tuple[Block, ...]) -> list[list[slice]]:
        """Per cell, the value slices it owns (cached per layout)."""
        key = blocks
        if key not in self._slices:
            self.validate(blocks)
            index = {b.name: b for b in blocks}
            self._slices[key] = [[index[n].slice for n in c.blocks] for c in self.cells]
        return self._slices[key]

    def gather(self, v: ParamVector, cell: int) -> np.ndarray:
        """Values of ``v`` restricted to one cell, concatenated in block order."""
        parts = [v.values[s] for s in self.slices(v.blocks)[cell]]
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def __repr__(self):
        return f"Partition({self.names})"


def layerwise_partition(spec) -> Partition:
    """One cell per model tensor (each embedding table, weight matrix and bias)."""
    return Partition((b.name, (b.name,)) for b in spec.layout())
