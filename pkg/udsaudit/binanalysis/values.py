"""Abstract values, byte-addressed memory and machine state for the dataflow."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from udsaudit.binanalysis.records import Cred

MASK64 = (1 << 64) - 1
GLOBAL = -1  # region of absolute addresses; stack frames use their call depth


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Pointer:
    """Address ``offset`` bytes from the entry stack pointer of frame ``region``."""

    region: int
    offset: int


@dataclass(frozen=True)
class Taint:
    cred: Cred
    source: int


@dataclass(frozen=True)
class RetVal:
    """Opaque result of an unmodelled call."""

    callsite: int


class _Top:
    __slots__ = ()

    def __repr__(self) -> str:
        return "TOP"

    def __reduce__(self):
        return "TOP"


TOP = _Top()

Value = Union[Const, Pointer, Taint, RetVal, _Top]


def to_signed(value: int, bits: int = 64) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def add(a: Value, b: Value) -> Value:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const((a.value + b.value) & MASK64)
    if isinstance(a, Pointer) and isinstance(b, Const):
        return Pointer(a.region, a.offset + to_signed(b.value))
    if isinstance(a, Const) and isinstance(b, Pointer):
        return Pointer(b.region, b.offset + to_signed(a.value))
    return TOP


def sub(a: Value, b: Value) -> Value:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const((a.value - b.value) & MASK64)
    if isinstance(a, Pointer) and isinstance(b, Const):
        return Pointer(a.region, a.offset - to_signed(b.value))
    if isinstance(a, Pointer) and isinstance(b, Pointer) and a.region == b.region:
        return Const((a.offset - b.offset) & MASK64)
    return TOP


def truncate(value: Value, size: int) -> Value:
    """Value as seen through a ``size``-byte register or memory access."""
    if size >= 8:
        return value
    if isinstance(value, Const):
        return Const(value.value & ((1 << (8 * size)) - 1))
    if isinstance(value, (Taint, RetVal)):
        return value
    return TOP


def location(value: Value) -> Optional[Tuple[int, int]]:
    if isinstance(value, Pointer):
        return value.region, value.offset
    if isinstance(value, Const):
        return GLOBAL, value.value
    return None


@dataclass(frozen=True)
class Word:
    """A non-constant value occupying ``size`` bytes from its start offset."""

    value: Value
    size: int


@dataclass(frozen=True)
class Cont:
    start: int


class Memory:
    """Byte-granular store keyed by ``(region, offset)``.

    Constant data is kept as individual byte values; other values are kept
    whole. A missing global byte falls back to the binary's section data.
    """

    __slots__ = ("cells",)

    def __init__(self, cells: Optional[Dict[Tuple[int, int], object]] = None):
        self.cells: Dict[Tuple[int, int], object] = dict(cells) if cells else {}

    def copy(self) -> "Memory":
        return Memory(self.cells)

    def __eq__(self, other) -> bool:
        return isinstance(other, Memory) and self.cells == other.cells

    def fingerprint(self) -> frozenset:
        return frozenset(self.cells.items())

    def join(self, other: "Memory") -> "Memory":
        if self.cells == other.cells:
            return self.copy()
        # a cell written on one side only is unknown, never the section's original bytes
        joined = Memory()
        for key in self.cells.keys() | other.cells.keys():
            cell = self.cells.get(key)
            joined.cells[key] = cell if cell is not None and other.cells.get(key) == cell else TOP
        for (region, offset), cell in list(joined.cells.items()):
            if isinstance(cell, Word) and any(
                joined.cells.get((region, offset + i)) != Cont(offset) for i in range(1, cell.size)
            ):
                joined.cells[(region, offset)] = TOP
        for (region, offset), cell in list(joined.cells.items()):
            if isinstance(cell, Cont) and not isinstance(joined.cells.get((region, cell.start)), Word):
                joined.cells[(region, offset)] = TOP
        return joined

    def invalidate_from(self, region: int, offset: int) -> None:
        """Forget every known cell of ``region`` at or above ``offset``."""
        for key in [k for k in self.cells if k[0] == region and k[1] >= offset]:
            self.cells[key] = TOP

    def drop_regions_above(self, depth: int) -> None:
        for key in [k for k in self.cells if k[0] > depth]:
            del self.cells[key]

    def _evict(self, region: int, offset: int, size: int) -> None:
        for pos in range(offset, offset + size):
            cell = self.cells.get((region, pos))
            if isinstance(cell, Word):
                start = pos
            elif isinstance(cell, Cont):
                start = cell.start
            else:
                continue
            word = self.cells.get((region, start))
            width = word.size if isinstance(word, Word) else 1
            for q in range(start, start + width):
                self.cells[(region, q)] = TOP

    def store(self, region: int, offset: int, value: Value, size: int) -> None:
        self._evict(region, offset, size)
        if isinstance(value, Const):
            raw = value.value & ((1 << (8 * size)) - 1)
            for i in range(size):
                self.cells[(region, offset + i)] = (raw >> (8 * i)) & 0xFF
        elif value is TOP or size <= 0:
            for i in range(size):
                self.cells[(region, offset + i)] = TOP
        else:
            self.cells[(region, offset)] = Word(value, size)
            for i in range(1, size):
                self.cells[(region, offset + i)] = Cont(offset)

    def write_bytes(self, region: int, offset: int, data: bytes) -> None:
        self._evict(region, offset, len(data))
        for i, byte in enumerate(data):
            self.cells[(region, offset + i)] = byte

    def write_unknown(self, region: int, offset: int, size: int) -> None:
        self.store(region, offset, TOP, size)

    def byte_at(self, region: int, offset: int, image=None) -> Optional[int]:
        cell = self.cells.get((region, offset), None)
        if isinstance(cell, int):
            return cell
        if cell is None and region == GLOBAL and image is not None:
            raw = image.read(offset, 1)
            return raw[0] if raw else None
        return None

    def load(self, region: int, offset: int, size: int, image=None) -> Value:
        cell = self.cells.get((region, offset))
        if isinstance(cell, Word):
            return cell.value if cell.size == size else truncate(cell.value, size) if size < cell.size else TOP
        raw = 0
        for i in range(size):
            byte = self.byte_at(region, offset + i, image)
            if byte is None:
                return TOP
            raw |= byte << (8 * i)
        return Const(raw)

    def read_bytes(self, region: int, offset: int, size: int, image=None) -> List[Optional[int]]:
        return [self.byte_at(region, offset + i, image) for i in range(size)]

    def read_cstring(self, region: int, offset: int, image=None, limit: int = 512) -> Tuple[bytes, bool]:
        """Known prefix of the NUL-terminated string and whether it is complete."""
        out = bytearray()
        for i in range(limit):
            byte = self.byte_at(region, offset + i, image)
            if byte is None:
                return bytes(out), False
            if byte == 0:
                return bytes(out), True
            out.append(byte)
        return bytes(out), False

    def copy_range(self, src: Tuple[int, int], dst: Tuple[int, int], size: int, image=None) -> None:
        (s_region, s_off), (d_region, d_off) = src, dst
        staged = []
        i = 0
        while i < size:
            cell = self.cells.get((s_region, s_off + i))
            if isinstance(cell, Word) and i + cell.size <= size:
                staged.append((i, cell.value, cell.size))
                i += cell.size
                continue
            byte = self.byte_at(s_region, s_off + i, image)
            staged.append((i, Const(byte) if byte is not None else TOP, 1))
            i += 1
        for i, value, width in staged:
            self.store(d_region, d_off + i, value, width)


@dataclass
class State:
    regs: Dict[str, Value] = field(default_factory=dict)
    mem: Memory = field(default_factory=Memory)
    degraded: bool = False

    def get(self, reg: str) -> Value:
        return self.regs.get(reg, TOP)

    def set(self, reg: str, value: Value) -> None:
        if value is TOP:
            self.regs.pop(reg, None)
        else:
            self.regs[reg] = value

    def copy(self) -> "State":
        return State(dict(self.regs), self.mem.copy(), self.degraded)

    def join(self, other: "State") -> "State":
        regs = {r: v for r, v in self.regs.items() if other.regs.get(r) == v}
        return State(regs, self.mem.join(other.mem), self.degraded or other.degraded)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, State)
            and self.regs == other.regs
            and self.degraded == other.degraded
            and self.mem == other.mem
        )

    def load(self, address: Value, size: int, image=None) -> Value:
        loc = location(address)
        if loc is None:
            return TOP
        return self.mem.load(loc[0], loc[1], size, image)

    def store(self, address: Value, value: Value, size: int) -> None:
        loc = location(address)
        if loc is None:
            return
        self.mem.store(loc[0], loc[1], value, size)
