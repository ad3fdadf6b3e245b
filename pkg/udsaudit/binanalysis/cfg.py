"""Recursive-descent control-flow recovery with capstone."""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

import networkx as nx

from udsaudit.binanalysis.elf import Arch, BinaryImage
from udsaudit.binanalysis.isa import ENDS_BLOCK, BranchKind, Semantics, semantics_for

logger = logging.getLogger(__name__)

MAX_INSN = 16

_X86_PROLOGUE = b"\x55\x48\x89\xe5"  # push rbp; mov rbp, rsp
_X86_ENDBR64 = b"\xf3\x0f\x1e\xfa"
_A64_STP_FP_LR = (0xFFC07FFF, 0xA9807BFD)  # stp x29, x30, [sp, #-N]!
_A64_PACIASP = 0xD503233F

NORETURN = frozenset({"exit", "_exit", "abort", "__stack_chk_fail", "__assert_fail", "pthread_exit", "err", "errx"})


@dataclass
class BasicBlock:
    start: int
    insns: list = field(default_factory=list)

    @property
    def end(self) -> int:
        last = self.insns[-1]
        return last.address + last.size

    @property
    def last(self):
        return self.insns[-1]


@dataclass(frozen=True)
class CallSite:
    address: int
    function: int
    target: Optional[int] = None
    symbol: Optional[str] = None
    indirect: bool = False

    @property
    def callee(self) -> Optional[str]:
        if self.symbol:
            return self.symbol
        if self.target is not None:
            return f"0x{self.target:x}"
        return None


@dataclass
class Function:
    entry: int
    name: Optional[str]
    blocks: Dict[int, BasicBlock] = field(default_factory=dict)
    graph: nx.DiGraph = field(default_factory=nx.DiGraph)
    exits: Set[int] = field(default_factory=set)
    insn_block: Dict[int, int] = field(default_factory=dict)

    def block_of(self, address: int) -> Optional[int]:
        return self.insn_block.get(address)


@dataclass
class Cfg:
    image: BinaryImage
    isa: Semantics
    functions: Dict[int, Function] = field(default_factory=dict)
    callsites: Dict[int, CallSite] = field(default_factory=dict)
    unresolved: List[int] = field(default_factory=list)
    undecodable: int = 0
    facts: dict = field(default_factory=dict, repr=False)
    engine: Optional[object] = field(default=None, repr=False)

    def callsites_in(self, entry: int) -> List[CallSite]:
        return sorted((s for s in self.callsites.values() if s.function == entry), key=lambda s: s.address)


def scan_prologues(image: BinaryImage) -> List[int]:
    """Function entries of a stripped binary found by their frame-setup prologue."""
    entries = []
    for section in image.code_sections():
        data = section.data
        if image.arch == Arch.X86_64:
            pos = data.find(_X86_PROLOGUE)
            while pos >= 0:
                start = pos - 4 if pos >= 4 and data[pos - 4:pos] == _X86_ENDBR64 else pos
                entries.append(section.vaddr + start)
                pos = data.find(_X86_PROLOGUE, pos + 1)
        else:
            mask, want = _A64_STP_FP_LR
            for off in range(0, len(data) - 3, 4):
                (word,) = struct.unpack_from("<I", data, off)
                if word & mask == want:
                    prev = struct.unpack_from("<I", data, off - 4)[0] if off >= 4 else None
                    entries.append(section.vaddr + (off - 4 if prev == _A64_PACIASP else off))
    return sorted(set(entries))


class _Builder:
    def __init__(self, image: BinaryImage, isa: Semantics):
        self.image = image
        self.isa = isa
        self.cfg = Cfg(image=image, isa=isa)
        self.known_entries: Set[int] = set()
        self._bad: Set[int] = set()

    def decode(self, address: int):
        section = self.image.section_at(address)
        if section is None or not section.executable:
            return None
        off = address - section.vaddr
        insn = self.isa.decode(section.data[off:off + MAX_INSN], address)
        if insn is None and address not in self._bad:
            self._bad.add(address)
            self.cfg.undecodable += 1
        return insn

    def _leaders(self, entry: int) -> Dict[int, list]:
        """Decode everything reachable from ``entry`` and return instructions by address."""
        insns: Dict[int, object] = {}
        work = [entry]
        while work:
            address = work.pop()
            while address not in insns and self.image.is_code(address):
                insn = self.decode(address)
                if insn is None:
                    break
                insns[address] = insn
                kind = self.isa.branch_kind(insn)
                target = self.isa.branch_target(insn)
                if kind in (BranchKind.JUMP, BranchKind.COND_JUMP) and target is not None:
                    if not self._is_tail_target(entry, target):
                        work.append(target)
                if kind in (BranchKind.JUMP, BranchKind.INDIRECT_JUMP, BranchKind.RETURN, BranchKind.HALT):
                    break
                if self._noreturn(insn):
                    break
                address = insn.address + insn.size
        return insns

    def _noreturn(self, insn) -> bool:
        if self.isa.branch_kind(insn) != BranchKind.CALL:
            return False
        return self.image.imports.get(self.isa.branch_target(insn)) in NORETURN

    def _ends_block(self, insn) -> bool:
        return self.isa.branch_kind(insn) in ENDS_BLOCK or self._noreturn(insn)

    def _is_tail_target(self, entry: int, target: int) -> bool:
        return target in self.image.imports or (target != entry and target in self.known_entries)

    def build_function(self, entry: int) -> Function:
        insns = self._leaders(entry)
        starts = {entry}
        for insn in insns.values():
            kind = self.isa.branch_kind(insn)
            target = self.isa.branch_target(insn)
            if kind in (BranchKind.JUMP, BranchKind.COND_JUMP) and target in insns:
                starts.add(target)
            if self._ends_block(insn):
                starts.add(insn.address + insn.size)

        func = Function(entry=entry, name=self.image.function_name(entry))
        for start in sorted(s for s in starts if s in insns):
            block = BasicBlock(start)
            address = start
            while address in insns:
                insn = insns[address]
                block.insns.append(insn)
                func.insn_block[address] = start
                address = insn.address + insn.size
                if self._ends_block(insn) or address in starts:
                    break
            func.blocks[start] = block
            func.graph.add_node(start)

        for start, block in func.blocks.items():
            insn = block.last
            kind = self.isa.branch_kind(insn)
            target = self.isa.branch_target(insn)
            fallthrough = block.end
            for candidate in block.insns:
                self._record_call(func, candidate)
            if self._noreturn(insn) or kind == BranchKind.HALT:
                continue
            if kind in (BranchKind.RETURN, BranchKind.INDIRECT_JUMP):
                func.exits.add(start)
                continue
            if kind == BranchKind.JUMP:
                if target in func.blocks:
                    func.graph.add_edge(start, target)
                else:
                    func.exits.add(start)
                continue
            if kind == BranchKind.COND_JUMP and target in func.blocks:
                func.graph.add_edge(start, target)
            if fallthrough in func.blocks:
                func.graph.add_edge(start, fallthrough)
            elif kind != BranchKind.COND_JUMP:
                func.exits.add(start)
        return func

    def _record_call(self, func: Function, insn) -> None:
        kind = self.isa.branch_kind(insn)
        target = self.isa.branch_target(insn)
        tail = kind == BranchKind.JUMP and target is not None and self._is_tail_target(func.entry, target)
        if kind not in (BranchKind.CALL, BranchKind.INDIRECT_CALL) and not tail:
            return
        if kind == BranchKind.INDIRECT_CALL or target is None:
            site = CallSite(insn.address, func.entry, indirect=True)
            if insn.address not in self.cfg.callsites:
                self.cfg.unresolved.append(insn.address)
        else:
            symbol = self.image.imports.get(target) or self.image.function_name(target)
            site = CallSite(insn.address, func.entry, target=target, symbol=symbol)
        self.cfg.callsites.setdefault(insn.address, site)

    def run(self, entries: Iterable[int]) -> Cfg:
        work = sorted(set(entries))
        self.known_entries.update(work)
        while work:
            entry = work.pop(0)
            if entry in self.cfg.functions:
                continue
            func = self.build_function(entry)
            self.cfg.functions[entry] = func
            for site in self.cfg.callsites_in(entry):
                target = site.target
                if target is None or target in self.image.imports or not self.image.is_code(target):
                    continue
                if target not in self.cfg.functions and target not in work:
                    self.known_entries.add(target)
                    work.append(target)
        return self.cfg


def build_cfg(image: BinaryImage, isa: Optional[Semantics] = None) -> Cfg:
    isa = isa or semantics_for(image.arch)
    entries = {addr for addr in image.functions.values() if image.is_code(addr)}
    if image.is_code(image.entry):
        entries.add(image.entry)
    if image.stripped:
        entries.update(scan_prologues(image))
    cfg = _Builder(image, isa).run(entries)
    logger.debug(
        f"cfg_built path={image.path} functions={len(cfg.functions)} callsites={len(cfg.callsites)} "
        f"unresolved={len(cfg.unresolved)} undecodable={cfg.undecodable}"
    )
    return cfg
