"""Per-architecture decoding and instruction semantics over abstract values."""

import logging
import re
from enum import Enum
from typing import Dict, Optional, Protocol, Tuple

from capstone import (
    CS_AC_WRITE,
    CS_ARCH_ARM64,
    CS_ARCH_X86,
    CS_GRP_JUMP,
    CS_MODE_ARM,
    CS_MODE_64,
    Cs,
    CsError,
)
from capstone.arm64 import ARM64_OP_IMM, ARM64_OP_MEM, ARM64_OP_REG, ARM64_SFT_LSL
from capstone.x86 import X86_OP_IMM, X86_OP_MEM, X86_OP_REG

from udsaudit.binanalysis.elf import Arch
from udsaudit.binanalysis.values import (
    MASK64,
    TOP,
    Const,
    Pointer,
    State,
    Value,
    add,
    sub,
    to_signed,
    truncate,
)
from udsaudit.errors import UnsupportedArch

logger = logging.getLogger(__name__)


class BranchKind(str, Enum):
    NONE = "none"
    CALL = "call"
    INDIRECT_CALL = "indirect_call"
    JUMP = "jump"
    COND_JUMP = "cond_jump"
    INDIRECT_JUMP = "indirect_jump"
    RETURN = "return"
    HALT = "halt"


ENDS_BLOCK = frozenset(
    {BranchKind.JUMP, BranchKind.COND_JUMP, BranchKind.INDIRECT_JUMP, BranchKind.RETURN, BranchKind.HALT}
)


class CompareObserver(Protocol):
    def on_compare(self, address: int, left: Value, right: Value) -> None: ...


def _fold(op, a: Value, b: Value) -> Value:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(op(a.value, b.value) & MASK64)
    return TOP


class Semantics:
    """Common interface: decoding, calling convention and transfer function."""

    arch: Arch
    arg_regs: Tuple[str, ...]
    ret_reg: str
    sp: str
    caller_saved: Tuple[str, ...]

    def __init__(self, cs_arch: int, cs_mode: int):
        self.md = Cs(cs_arch, cs_mode)
        self.md.detail = True

    def decode(self, code: bytes, address: int):
        return next(self.md.disasm(code, address, count=1), None)

    def entry_state(self, depth: int, state: Optional[State] = None) -> State:
        fresh = State() if state is None else State({}, state.mem.copy(), state.degraded)
        fresh.set(self.sp, Pointer(depth, 0))
        return fresh

    def clobber_caller_saved(self, state: State) -> None:
        for reg in self.caller_saved:
            state.set(reg, TOP)

    def branch_kind(self, insn) -> BranchKind:
        raise NotImplementedError

    def branch_target(self, insn) -> Optional[int]:
        raise NotImplementedError

    def execute(self, insn, state: State, image=None, observer: Optional[CompareObserver] = None) -> None:
        raise NotImplementedError

    def canonical(self, name: str) -> Tuple[str, int]:
        raise NotImplementedError

    def clobber(self, insn, state: State) -> None:
        try:
            _, written = insn.regs_access()
        except CsError:
            written = []
        for reg_id in written:
            name, _ = self.canonical(insn.reg_name(reg_id))
            state.set(name, TOP)


# ---------------------------------------------------------------------------
# x86-64

_X86_FAMILIES = {
    "rax": ("eax", "ax", "al"),
    "rbx": ("ebx", "bx", "bl"),
    "rcx": ("ecx", "cx", "cl"),
    "rdx": ("edx", "dx", "dl"),
    "rsi": ("esi", "si", "sil"),
    "rdi": ("edi", "di", "dil"),
    "rbp": ("ebp", "bp", "bpl"),
    "rsp": ("esp", "sp", "spl"),
}
_X86_REGS: Dict[str, Tuple[str, int]] = {}
for _full, (_d, _w, _b) in _X86_FAMILIES.items():
    _X86_REGS.update({_full: (_full, 8), _d: (_full, 4), _w: (_full, 2), _b: (_full, 1)})
for _n in range(8, 16):
    _r = f"r{_n}"
    _X86_REGS.update({_r: (_r, 8), f"{_r}d": (_r, 4), f"{_r}w": (_r, 2), f"{_r}b": (_r, 1)})
_X86_HIGH_BYTE = {"ah": "rax", "bh": "rbx", "ch": "rcx", "dh": "rdx"}

_X86_MOVES = frozenset(
    {"mov", "movabs", "movaps", "movups", "movdqa", "movdqu", "vmovdqa", "vmovdqu", "vmovaps", "vmovups"}
)
_X86_NOPS = frozenset({"nop", "endbr64", "endbr32", "hlt", "ud2", "int3", "ret", "jmp", "call"})


class X86_64Semantics(Semantics):
    arch = Arch.X86_64
    arg_regs = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
    ret_reg = "rax"
    sp = "rsp"
    caller_saved = ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")

    def __init__(self):
        super().__init__(CS_ARCH_X86, CS_MODE_64)

    def canonical(self, name: str) -> Tuple[str, int]:
        if name in _X86_REGS:
            return _X86_REGS[name]
        if name in _X86_HIGH_BYTE:
            return _X86_HIGH_BYTE[name], 1
        if name.startswith(("xmm", "ymm")):
            return name.replace("ymm", "xmm"), 16
        return name, 8

    @staticmethod
    def _base_mnemonic(insn) -> str:
        # drop bnd/notrack/rep prefixes
        return insn.mnemonic.split()[-1]

    def branch_kind(self, insn) -> BranchKind:
        m = self._base_mnemonic(insn)
        has_imm = bool(insn.operands) and insn.operands[0].type == X86_OP_IMM
        if m == "call":
            return BranchKind.CALL if has_imm else BranchKind.INDIRECT_CALL
        if m in ("ret", "retf", "iretq"):
            return BranchKind.RETURN
        if m in ("hlt", "ud2"):
            return BranchKind.HALT
        if m == "jmp":
            return BranchKind.JUMP if has_imm else BranchKind.INDIRECT_JUMP
        if insn.group(CS_GRP_JUMP):
            return BranchKind.COND_JUMP
        return BranchKind.NONE

    def branch_target(self, insn) -> Optional[int]:
        if insn.operands and insn.operands[0].type == X86_OP_IMM:
            return insn.operands[0].imm & MASK64
        return None

    def _read_reg(self, insn, reg_id: int, state: State) -> Value:
        raw = insn.reg_name(reg_id)
        if raw == "rip":
            return Const(insn.address + insn.size)
        if raw in _X86_HIGH_BYTE:
            value = state.get(_X86_HIGH_BYTE[raw])
            return Const((value.value >> 8) & 0xFF) if isinstance(value, Const) else TOP
        name, width = self.canonical(raw)
        return truncate(state.get(name), width)

    def _write_reg(self, insn, reg_id: int, state: State, value: Value) -> None:
        raw = insn.reg_name(reg_id)
        if raw in _X86_HIGH_BYTE:
            state.set(_X86_HIGH_BYTE[raw], TOP)
            return
        name, width = self.canonical(raw)
        if width >= 8:
            state.set(name, value)
        elif width == 4:
            # 32-bit writes zero-extend
            state.set(name, truncate(value, 4))
        else:
            old = state.get(name)
            if isinstance(old, Const) and isinstance(value, Const):
                mask = (1 << (8 * width)) - 1
                state.set(name, Const((old.value & ~mask) | (value.value & mask)))
            else:
                state.set(name, TOP)

    def effective_address(self, insn, op, state: State) -> Value:
        mem = op.mem
        if mem.segment:
            return TOP
        base = self._read_reg(insn, mem.base, state) if mem.base else Const(0)
        if mem.index:
            index = self._read_reg(insn, mem.index, state)
            if not isinstance(index, Const):
                return TOP
            base = add(base, Const((index.value * mem.scale) & MASK64))
        return add(base, Const(mem.disp & MASK64))

    def read(self, insn, op, state: State, image=None, size: Optional[int] = None) -> Value:
        if op.type == X86_OP_REG:
            return self._read_reg(insn, op.reg, state)
        if op.type == X86_OP_IMM:
            width = size or op.size or 8
            return Const(op.imm & ((1 << (8 * width)) - 1))
        if op.type == X86_OP_MEM:
            return state.load(self.effective_address(insn, op, state), op.size, image)
        return TOP

    def write(self, insn, op, state: State, value: Value) -> None:
        if op.type == X86_OP_REG:
            self._write_reg(insn, op.reg, state, value)
        elif op.type == X86_OP_MEM:
            state.store(self.effective_address(insn, op, state), truncate(value, op.size), op.size)

    def execute(self, insn, state: State, image=None, observer: Optional[CompareObserver] = None) -> None:
        m = self._base_mnemonic(insn)
        ops = insn.operands
        if m in _X86_MOVES and len(ops) == 2:
            self.write(insn, ops[0], state, self.read(insn, ops[1], state, image, ops[0].size))
        elif m == "movzx" and len(ops) == 2:
            self.write(insn, ops[0], state, self.read(insn, ops[1], state, image))
        elif m in ("movsx", "movsxd") and len(ops) == 2:
            value = self.read(insn, ops[1], state, image)
            if isinstance(value, Const):
                value = Const(to_signed(value.value, 8 * ops[1].size) & MASK64)
            self.write(insn, ops[0], state, value)
        elif m == "lea":
            self.write(insn, ops[0], state, self.effective_address(insn, ops[1], state))
        elif m in ("add", "sub") and len(ops) == 2:
            left = self.read(insn, ops[0], state, image)
            right = self.read(insn, ops[1], state, image, ops[0].size)
            self.write(insn, ops[0], state, add(left, right) if m == "add" else sub(left, right))
        elif m == "xor" and len(ops) == 2:
            if ops[0].type == X86_OP_REG and ops[1].type == X86_OP_REG and ops[0].reg == ops[1].reg:
                self.write(insn, ops[0], state, Const(0))
            else:
                self.write(insn, ops[0], state, _fold(lambda a, b: a ^ b, self.read(insn, ops[0], state, image),
                                                      self.read(insn, ops[1], state, image, ops[0].size)))
        elif m in ("and", "or") and len(ops) == 2:
            left = self.read(insn, ops[0], state, image)
            right = self.read(insn, ops[1], state, image, ops[0].size)
            if m == "and" and isinstance(left, Pointer) and isinstance(right, Const):
                # stack realignment
                self.write(insn, ops[0], state, Pointer(left.region, left.offset & to_signed(right.value)))
            else:
                fn = (lambda a, b: a & b) if m == "and" else (lambda a, b: a | b)
                self.write(insn, ops[0], state, _fold(fn, left, right))
        elif m == "push" and ops:
            value = self.read(insn, ops[0], state, image, 8)
            top = sub(state.get("rsp"), Const(8))
            state.set("rsp", top)
            state.store(top, value, 8)
        elif m == "pop" and ops:
            top = state.get("rsp")
            self.write(insn, ops[0], state, state.load(top, 8, image))
            state.set("rsp", add(top, Const(8)))
        elif m == "leave":
            frame = state.get("rbp")
            state.set("rbp", state.load(frame, 8, image))
            state.set("rsp", add(frame, Const(8)))
        elif m in ("cmp", "test") and len(ops) == 2:
            if observer is not None:
                left = self.read(insn, ops[0], state, image)
                if m == "test" and ops[1].type == X86_OP_REG and ops[0].type == X86_OP_REG and ops[0].reg == ops[1].reg:
                    right: Value = Const(0)
                else:
                    right = self.read(insn, ops[1], state, image, ops[0].size)
                observer.on_compare(insn.address, left, right)
        elif m in _X86_NOPS or m.startswith("j"):
            pass
        else:
            self.clobber(insn, state)
            for op in ops:
                if op.type == X86_OP_MEM and op.access & CS_AC_WRITE:
                    state.store(self.effective_address(insn, op, state), TOP, op.size)


# ---------------------------------------------------------------------------
# AArch64

_POST_INDEX = re.compile(r"\],\s*#(-?(?:0x[0-9a-fA-F]+|\d+))$")
_A64_CMP = frozenset({"cmp", "cmn", "tst", "ccmp"})
_A64_NOPS = frozenset({"nop", "hint", "bti", "paciasp", "autiasp", "pacibsp", "autibsp", "ret", "b", "bl", "br", "blr"})


def _a64_access_size(mnemonic: str, reg_width: int) -> int:
    stem = mnemonic.rstrip("0123456789")
    if stem.endswith(("rb", "rsb", "urb", "ursb")):
        return 1
    if stem.endswith(("rh", "rsh", "urh", "ursh")):
        return 2
    if stem.endswith(("rsw", "ursw")):
        return 4
    return reg_width


class Aarch64Semantics(Semantics):
    arch = Arch.AARCH64
    arg_regs = tuple(f"x{i}" for i in range(8))
    ret_reg = "x0"
    sp = "sp"
    caller_saved = tuple(f"x{i}" for i in range(19)) + ("x30",)

    def __init__(self):
        super().__init__(CS_ARCH_ARM64, CS_MODE_ARM)

    def canonical(self, name: str) -> Tuple[str, int]:
        if name in ("sp", "wsp"):
            return "sp", 8 if name == "sp" else 4
        if name in ("xzr", "wzr"):
            return "xzr", 8 if name == "xzr" else 4
        if name == "fp":
            return "x29", 8
        if name == "lr":
            return "x30", 8
        if name[:1] == "w" and name[1:].isdigit():
            return "x" + name[1:], 4
        if name[:1] in ("q", "d", "s", "h", "b", "v") and name[1:].isdigit():
            return "v" + name[1:], {"q": 16, "v": 16, "d": 8, "s": 4, "h": 2, "b": 1}[name[0]]
        return name, 8

    def branch_kind(self, insn) -> BranchKind:
        m = insn.mnemonic
        if m == "bl":
            return BranchKind.CALL
        if m.startswith("blr"):
            return BranchKind.INDIRECT_CALL
        if m.startswith("ret"):
            return BranchKind.RETURN
        if m == "b":
            return BranchKind.JUMP
        if m.startswith("br"):
            return BranchKind.INDIRECT_JUMP
        if m.startswith("b.") or m in ("cbz", "cbnz", "tbz", "tbnz"):
            return BranchKind.COND_JUMP
        if m in ("brk", "udf", "hlt"):
            return BranchKind.HALT
        return BranchKind.NONE

    def branch_target(self, insn) -> Optional[int]:
        if insn.operands and insn.operands[-1].type == ARM64_OP_IMM:
            return insn.operands[-1].imm & MASK64
        return None

    def _read_reg(self, insn, reg_id: int, state: State) -> Value:
        name, width = self.canonical(insn.reg_name(reg_id))
        if name == "xzr":
            return Const(0)
        if name.startswith("v"):
            return TOP
        return truncate(state.get(name), width)

    def _write_reg(self, insn, reg_id: int, state: State, value: Value) -> None:
        name, width = self.canonical(insn.reg_name(reg_id))
        if name == "xzr":
            return
        if name.startswith("v"):
            state.set(name, TOP)
            return
        state.set(name, truncate(value, width))

    def read(self, insn, op, state: State) -> Value:
        if op.type == ARM64_OP_REG:
            value = self._read_reg(insn, op.reg, state)
        elif op.type == ARM64_OP_IMM:
            value = Const(op.imm & MASK64)
        else:
            return TOP
        if op.shift.type and op.shift.value:
            if op.shift.type != ARM64_SFT_LSL or not isinstance(value, Const):
                return TOP
            value = Const((value.value << op.shift.value) & MASK64)
        if getattr(op, "ext", 0):
            return value if isinstance(value, Const) else TOP
        return value

    def _address(self, insn, op, state: State) -> Tuple[Value, Optional[Tuple[int, int]]]:
        """Access address plus an optional (base register, increment) writeback."""
        mem = op.mem
        base = self._read_reg(insn, mem.base, state)
        post = _POST_INDEX.search(insn.op_str)
        if post:
            return base, (mem.base, int(post.group(1), 0))
        address = base
        if mem.index:
            index = self._read_reg(insn, mem.index, state)
            address = add(address, index) if isinstance(index, Const) else TOP
        address = add(address, Const(mem.disp & MASK64))
        if insn.op_str.rstrip().endswith("!"):
            return address, (mem.base, mem.disp)
        return address, None

    def _writeback(self, insn, state: State, wb: Optional[Tuple[int, int]]) -> None:
        if wb is None:
            return
        reg_id, delta = wb
        current = self._read_reg(insn, reg_id, state)
        self._write_reg(insn, reg_id, state, add(current, Const(delta & MASK64)))

    def _width(self, insn, op) -> int:
        return self.canonical(insn.reg_name(op.reg))[1] if op.type == ARM64_OP_REG else 8

    def execute(self, insn, state: State, image=None, observer: Optional[CompareObserver] = None) -> None:
        m = insn.mnemonic
        ops = insn.operands
        if m in ("mov", "movz") and len(ops) == 2:
            self._write_reg(insn, ops[0].reg, state, self.read(insn, ops[1], state))
        elif m == "movk" and len(ops) == 2:
            old = self._read_reg(insn, ops[0].reg, state)
            shift = ops[1].shift.value if ops[1].shift.type == ARM64_SFT_LSL else 0
            if isinstance(old, Const):
                chunk = 0xFFFF << shift
                self._write_reg(insn, ops[0].reg, state, Const((old.value & ~chunk) | ((ops[1].imm << shift) & chunk)))
            else:
                self._write_reg(insn, ops[0].reg, state, TOP)
        elif m == "movn" and len(ops) == 2:
            shift = ops[1].shift.value if ops[1].shift.type == ARM64_SFT_LSL else 0
            self._write_reg(insn, ops[0].reg, state, Const(~(ops[1].imm << shift) & MASK64))
        elif m in ("adrp", "adr"):
            self._write_reg(insn, ops[0].reg, state, Const(ops[1].imm & MASK64))
        elif m in ("add", "sub") and len(ops) == 3:
            left, right = self.read(insn, ops[1], state), self.read(insn, ops[2], state)
            self._write_reg(insn, ops[0].reg, state, add(left, right) if m == "add" else sub(left, right))
        elif m in ("orr", "eor", "and") and len(ops) == 3:
            fn = {"orr": lambda a, b: a | b, "eor": lambda a, b: a ^ b, "and": lambda a, b: a & b}[m]
            self._write_reg(insn, ops[0].reg, state, _fold(fn, self.read(insn, ops[1], state), self.read(insn, ops[2], state)))
        elif m in ("ldp", "stp", "ldnp", "stnp", "ldpsw") and len(ops) >= 3:
            width = 4 if m == "ldpsw" else self._width(insn, ops[0])
            address, wb = self._address(insn, ops[2], state)
            for i, reg_op in enumerate(ops[:2]):
                slot = add(address, Const(i * width))
                if m.startswith("st"):
                    state.store(slot, truncate(self.read(insn, reg_op, state), width), width)
                else:
                    self._write_reg(insn, reg_op.reg, state, state.load(slot, width, image))
            self._writeback(insn, state, wb)
        elif m.startswith(("ldr", "ldur")) and len(ops) >= 2:
            size = _a64_access_size(m, self._width(insn, ops[0]))
            if ops[1].type == ARM64_OP_IMM:
                address, wb = Const(ops[1].imm & MASK64), None
            elif ops[1].type == ARM64_OP_MEM:
                address, wb = self._address(insn, ops[1], state)
            else:
                address, wb = TOP, None
            value = state.load(address, size, image)
            if isinstance(value, Const) and "s" in m[3:]:
                value = Const(to_signed(value.value, 8 * size) & MASK64)
            self._write_reg(insn, ops[0].reg, state, value)
            self._writeback(insn, state, wb)
        elif m.startswith(("str", "stur")) and len(ops) >= 2 and ops[1].type == ARM64_OP_MEM:
            size = _a64_access_size(m, self._width(insn, ops[0]))
            address, wb = self._address(insn, ops[1], state)
            state.store(address, truncate(self.read(insn, ops[0], state), size), size)
            self._writeback(insn, state, wb)
        elif m in _A64_CMP and len(ops) >= 2:
            if observer is not None:
                observer.on_compare(insn.address, self.read(insn, ops[0], state), self.read(insn, ops[1], state))
        elif m in _A64_NOPS or m.startswith("b.") or m in ("cbz", "cbnz", "tbz", "tbnz"):
            pass
        else:
            self.clobber(insn, state)
            if m.startswith("st"):
                for op in ops:
                    if op.type == ARM64_OP_MEM:
                        address, _ = self._address(insn, op, state)
                        state.store(address, TOP, 8)


_SEMANTICS = {Arch.X86_64: X86_64Semantics, Arch.AARCH64: Aarch64Semantics}


def semantics_for(arch: Arch) -> Semantics:
    try:
        return _SEMANTICS[arch]()
    except KeyError:
        raise UnsupportedArch(str(arch))

