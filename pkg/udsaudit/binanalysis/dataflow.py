"""Forward constant, pointer and taint propagation over recovered functions.

Each function is solved to a fixpoint from an empty frame, then replayed once
with a recorder attached so callers can inspect argument values and memory
at every call site and the operands of every comparison. Internal callees
are descended into up to a configurable depth; summaries are memoized on the
callee, its arguments and the memory it sees.
"""

import heapq
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import networkx as nx

from udsaudit.binanalysis.cfg import Cfg, CallSite, Function
from udsaudit.binanalysis.records import Cred
from udsaudit.binanalysis.values import (
    GLOBAL,
    TOP,
    Const,
    Pointer,
    RetVal,
    State,
    Taint,
    Value,
    location,
    to_signed,
)
from udsaudit.config import get_settings

logger = logging.getLogger(__name__)

SO_PEERCRED = 0x11
# struct ucred { pid_t pid; uid_t uid; gid_t gid; }
UCRED_FIELDS = ((Cred.PID, 0), (Cred.UID, 4), (Cred.GID, 8))

MAX_COPY = 4096

_FORMAT = re.compile(rb"%([-+ #0]*)(\d*)(?:\.(\d+))?(hh|h|ll|l|z|j|t)?([diouxXcs%])")
_LENGTH_BITS = {None: 32, b"hh": 8, b"h": 16, b"l": 64, b"ll": 64, b"z": 64, b"j": 64, b"t": 64}


@dataclass
class CallFacts:
    site: CallSite
    args: Tuple[Value, ...]
    state: State


@dataclass
class FunctionFacts:
    entry: int
    calls: Dict[int, CallFacts] = field(default_factory=dict)
    compares: List[Tuple[int, Value, Value]] = field(default_factory=list)
    degraded: bool = False


class _Recorder:
    def __init__(self, facts: FunctionFacts):
        self.facts = facts

    def on_call(self, site: CallSite, state: State, args: Tuple[Value, ...]) -> None:
        self.facts.calls.setdefault(site.address, CallFacts(site, args, state.copy()))

    def on_compare(self, address: int, left: Value, right: Value) -> None:
        self.facts.compares.append((address, left, right))


# ---------------------------------------------------------------------------
# libc models


def read_string(image, state: State, value: Value) -> Tuple[bytes, bool]:
    loc = location(value)
    if loc is None:
        return b"", False
    return state.mem.read_cstring(loc[0], loc[1], image)


def _emit(state: State, dst: Value, data: bytes, complete: bool, limit: Optional[int] = None) -> None:
    loc = location(dst)
    if loc is None:
        return
    region, offset = loc
    if limit is not None:
        if limit <= 0:
            return
        if len(data) >= limit:
            data, complete = data[:limit - 1], True
    if complete:
        state.mem.write_bytes(region, offset, data + b"\x00")
    else:
        state.mem.write_bytes(region, offset, data)
        state.mem.write_unknown(region, offset + len(data), 1)


def format_string(engine: "DataflowEngine", state: State, fmt: bytes, varargs) -> Tuple[bytes, bool]:
    """printf-style formatting; the flag is False once an argument is unknown."""
    out = bytearray()
    pos = 0
    consumed = 0
    while pos < len(fmt):
        pct = fmt.find(b"%", pos)
        if pct < 0:
            out += fmt[pos:]
            break
        out += fmt[pos:pct]
        m = _FORMAT.match(fmt, pct)
        if m is None:
            return bytes(out), False
        pos = m.end()
        flags, width, precision, length, conv = m.groups()
        if conv == b"%":
            out += b"%"
            continue
        if consumed >= len(varargs):
            return bytes(out), False
        value = varargs[consumed]
        consumed += 1
        spec = b"%" + flags + width + (b"." + precision if precision is not None else b"")
        if conv == b"s":
            text, ok = read_string(engine.image, state, value)
            if not ok:
                out += text
                return bytes(out), False
            out += (spec + b"s") % text
            continue
        if not isinstance(value, Const):
            return bytes(out), False
        bits = _LENGTH_BITS.get(length, 32)
        number = value.value & ((1 << bits) - 1)
        if conv in (b"d", b"i"):
            number = to_signed(number, bits)
        if conv == b"c":
            number &= 0xFF
        out += (spec + (b"d" if conv in (b"i", b"u") else conv)) % number
    return bytes(out), True


def _strcpy(engine, state, args, site):
    text, ok = read_string(engine.image, state, args[1])
    _emit(state, args[0], text, ok)
    return args[0]


def _strncpy(engine, state, args, site):
    text, ok = read_string(engine.image, state, args[1])
    n = args[2]
    loc = location(args[0])
    if not isinstance(n, Const) or loc is None:
        _emit(state, args[0], text, False)
        return args[0]
    n = min(n.value, MAX_COPY)
    data = text[:n]
    state.mem.write_bytes(loc[0], loc[1], data)
    if len(data) < n:
        if ok:
            state.mem.write_bytes(loc[0], loc[1] + len(data), bytes(n - len(data)))
        else:
            state.mem.write_unknown(loc[0], loc[1] + len(data), n - len(data))
    return args[0]


def _strcat(engine, state, args, site):
    existing, ok = read_string(engine.image, state, args[0])
    loc = location(args[0])
    if loc is None:
        return args[0]
    tail = Pointer(loc[0], loc[1] + len(existing)) if loc[0] >= 0 else Const(loc[1] + len(existing))
    if not ok:
        _emit(state, tail, b"", False)
        return args[0]
    text, ok = read_string(engine.image, state, args[1])
    _emit(state, tail, text, ok)
    return args[0]


def _sprintf(engine, state, args, site, fmt_index=1, limit_index=None):
    fmt, ok = read_string(engine.image, state, args[fmt_index])
    if ok:
        data, complete = format_string(engine, state, fmt, args[fmt_index + 1:])
    else:
        data, complete = b"", False
    limit = None
    if limit_index is not None:
        bound = args[limit_index]
        limit = bound.value if isinstance(bound, Const) else None
    _emit(state, args[0], data, complete, limit)
    return Const(len(data)) if complete else TOP


def _snprintf(engine, state, args, site):
    return _sprintf(engine, state, args, site, fmt_index=2, limit_index=1)


def _memcpy(engine, state, args, site):
    src, dst, n = location(args[1]), location(args[0]), args[2]
    if dst is None:
        return args[0]
    if src is None or not isinstance(n, Const):
        state.mem.write_unknown(dst[0], dst[1], 1)
        state.degraded = True
        return args[0]
    state.mem.copy_range(src, dst, min(n.value, MAX_COPY), engine.image)
    return args[0]


def _memset(engine, state, args, site):
    dst, fill, n = location(args[0]), args[1], args[2]
    if dst is None:
        return args[0]
    if not isinstance(n, Const):
        state.mem.write_unknown(dst[0], dst[1], 1)
        return args[0]
    size = min(n.value, MAX_COPY)
    if isinstance(fill, Const):
        state.mem.write_bytes(dst[0], dst[1], bytes([fill.value & 0xFF]) * size)
    else:
        state.mem.write_unknown(dst[0], dst[1], size)
    return args[0]


def _strlen(engine, state, args, site):
    text, ok = read_string(engine.image, state, args[0])
    return Const(len(text)) if ok else TOP


def _getsockopt(engine, state, args, site):
    if args[2] != Const(SO_PEERCRED):
        return None
    loc = location(args[3])
    if loc is not None:
        for cred, offset in UCRED_FIELDS:
            state.mem.store(loc[0], loc[1] + offset, Taint(cred, site.address), 4)
    return Const(0)


LIBC_MODELS: Dict[str, Callable] = {
    "strcpy": _strcpy,
    "stpcpy": _strcpy,
    "strncpy": _strncpy,
    "strlcpy": _strncpy,
    "strcat": _strcat,
    "sprintf": _sprintf,
    "snprintf": _snprintf,
    "memcpy": _memcpy,
    "memmove": _memcpy,
    "memset": _memset,
    "strlen": _strlen,
    "getsockopt": _getsockopt,
}


# ---------------------------------------------------------------------------
# engine


class DataflowEngine:
    def __init__(self, cfg: Cfg, depth_limit: int = 3, max_visits: int = 64):
        self.cfg = cfg
        self.isa = cfg.isa
        self.image = cfg.image
        self.depth_limit = depth_limit
        self.max_visits = max_visits
        self._summaries: Dict[tuple, Tuple[Value, Optional[object], bool]] = {}
        self._active: set = set()

    def _run_block(self, func: Function, start: int, state: State, depth: int, recorder=None) -> None:
        for insn in func.blocks[start].insns:
            site = self.cfg.callsites.get(insn.address)
            if site is not None:
                self._call(site, state, depth, recorder)
            else:
                self.isa.execute(insn, state, self.image, recorder)

    def _fixpoint(self, func: Function, entry_state: State, depth: int) -> Dict[int, State]:
        order = {n: i for i, n in enumerate(reversed(list(nx.dfs_postorder_nodes(func.graph, func.entry))))}
        in_states = {func.entry: entry_state}
        heap = [(0, func.entry)]
        queued = {func.entry}
        visits: Dict[int, int] = defaultdict(int)
        while heap:
            _, start = heapq.heappop(heap)
            queued.discard(start)
            visits[start] += 1
            state = in_states[start].copy()
            self._run_block(func, start, state, depth)
            for succ in func.graph.successors(start):
                old = in_states.get(succ)
                new = state if old is None else old.join(state)
                if old is not None and new == old:
                    continue
                if visits[succ] >= self.max_visits:
                    logger.debug(f"fixpoint_visit_cap function=0x{func.entry:x} block=0x{succ:x}")
                    continue
                in_states[succ] = new
                if succ not in queued:
                    queued.add(succ)
                    heapq.heappush(heap, (order.get(succ, len(order)), succ))
        return in_states

    def _exit_state(self, func: Function, in_states: Dict[int, State], depth: int) -> Optional[State]:
        out = None
        for start in sorted(func.exits):
            if start not in in_states:
                continue
            state = in_states[start].copy()
            self._run_block(func, start, state, depth)
            out = state if out is None else out.join(state)
        return out

    def _descend(self, target: int, state: State, args: Tuple[Value, ...], depth: int) -> Value:
        key = (target, depth, args, state.mem.fingerprint())
        summary = self._summaries.get(key)
        if summary is None:
            func = self.cfg.functions[target]
            entry = self.isa.entry_state(depth + 1, state)
            for reg, value in zip(self.isa.arg_regs, args):
                entry.set(reg, value)
            self._active.add(target)
            try:
                in_states = self._fixpoint(func, entry, depth + 1)
                exit_state = self._exit_state(func, in_states, depth + 1)
            finally:
                self._active.discard(target)
            if exit_state is None:
                summary = (TOP, None, True)
            else:
                ret = exit_state.get(self.isa.ret_reg)
                if isinstance(ret, Pointer) and ret.region > depth:
                    ret = TOP
                exit_state.mem.drop_regions_above(depth)
                summary = (ret, exit_state.mem, exit_state.degraded)
            self._summaries[key] = summary
        ret, mem, degraded = summary
        if mem is not None:
            state.mem = mem.copy()
        state.degraded = state.degraded or degraded
        return ret

    def _forget_reachable(self, state: State, args: Tuple[Value, ...]) -> None:
        """Memory an unanalyzed callee could write through its arguments becomes unknown."""
        for value in args:
            if isinstance(value, Pointer):
                state.mem.invalidate_from(value.region, value.offset)
            elif isinstance(value, Const):
                section = self.image.section_at(value.value)
                if section is not None and section.writable:
                    size = min(section.end - value.value, MAX_COPY)
                    state.mem.write_unknown(GLOBAL, value.value, size)

    def _call(self, site: CallSite, state: State, depth: int, recorder=None) -> None:
        args = tuple(state.get(reg) for reg in self.isa.arg_regs)
        if recorder is not None:
            recorder.on_call(site, state, args)
        result: Value = RetVal(site.address)
        model = LIBC_MODELS.get(site.symbol or "")
        if model is not None:
            modelled = model(self, state, args, site)
            if modelled is not None:
                result = modelled
        elif site.indirect:
            result = TOP
        elif site.target in self.cfg.functions:
            if depth < self.depth_limit and site.target not in self._active:
                result = self._descend(site.target, state, args, depth)
            else:
                self._forget_reachable(state, args)
                state.degraded = True
                result = TOP
        self.isa.clobber_caller_saved(state)
        state.set(self.isa.ret_reg, result)

    def run_function(self, entry: int) -> FunctionFacts:
        func = self.cfg.functions[entry]
        facts = FunctionFacts(entry)
        recorder = _Recorder(facts)
        self._active.add(entry)
        try:
            in_states = self._fixpoint(func, self.isa.entry_state(0), 0)
            for start in sorted(in_states):
                state = in_states[start].copy()
                self._run_block(func, start, state, 0, recorder)
                facts.degraded = facts.degraded or state.degraded
        finally:
            self._active.discard(entry)
        logger.debug(
            f"function_solved entry=0x{entry:x} blocks={len(in_states)} calls={len(facts.calls)} "
            f"compares={len(facts.compares)} degraded={facts.degraded}"
        )
        return facts


def engine_for(cfg: Cfg, depth_limit: Optional[int] = None) -> DataflowEngine:
    """The engine cached on ``cfg``; a different explicit depth starts a fresh one."""
    engine = cfg.engine
    if isinstance(engine, DataflowEngine) and depth_limit in (None, engine.depth_limit):
        return engine
    if depth_limit is None:
        depth_limit = get_settings().interprocedural_depth
    engine = DataflowEngine(cfg, depth_limit)
    cfg.engine = engine
    cfg.facts.clear()
    return engine


def function_facts(cfg: Cfg, entry: int, depth_limit: Optional[int] = None) -> FunctionFacts:
    engine = engine_for(cfg, depth_limit)
    facts = cfg.facts.get(entry)
    if facts is None:
        facts = engine.run_function(entry)
        cfg.facts[entry] = facts
    return facts
