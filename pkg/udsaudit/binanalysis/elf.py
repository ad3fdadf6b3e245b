"""ELF loading with pyelftools."""

import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection
from elftools.elf.sections import SymbolTableSection

from udsaudit.errors import MalformedElf, UnsupportedArch

logger = logging.getLogger(__name__)

SHF_WRITE = 0x1
SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4

PLT_SECTIONS = (".plt", ".plt.sec", ".plt.got")


class Arch(str, Enum):
    AARCH64 = "aarch64"
    X86_64 = "x86_64"


_MACHINES = {"EM_AARCH64": Arch.AARCH64, "EM_X86_64": Arch.X86_64}

# (offset of the first stub, stub size) inside .plt
_PLT_LAYOUT = {Arch.X86_64: (16, 16), Arch.AARCH64: (32, 16)}


@dataclass(frozen=True)
class Section:
    name: str
    vaddr: int
    data: bytes
    flags: int

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)

    @property
    def executable(self) -> bool:
        return bool(self.flags & SHF_EXECINSTR)

    @property
    def writable(self) -> bool:
        return bool(self.flags & SHF_WRITE)

    def contains(self, addr: int) -> bool:
        return self.vaddr <= addr < self.end


@dataclass
class BinaryImage:
    arch: Arch
    little_endian: bool
    entry: int
    sections: List[Section]
    dynamic_symbols: Dict[str, int] = field(default_factory=dict)
    imports: Dict[int, str] = field(default_factory=dict)
    functions: Dict[str, int] = field(default_factory=dict)
    is_static: bool = False
    stripped: bool = False
    path: str = ""

    def section_at(self, addr: int) -> Optional[Section]:
        for section in self.sections:
            if section.contains(addr):
                return section
        return None

    def read(self, addr: int, size: int) -> Optional[bytes]:
        section = self.section_at(addr)
        if section is None or addr + size > section.end:
            return None
        offset = addr - section.vaddr
        return section.data[offset:offset + size]

    def code_sections(self) -> List[Section]:
        return [s for s in self.sections if s.executable and s.name not in PLT_SECTIONS]

    def is_code(self, addr: int) -> bool:
        return any(s.contains(addr) for s in self.code_sections())

    def function_name(self, addr: int) -> Optional[str]:
        for name, value in self.functions.items():
            if value == addr:
                return name
        return None


def _plt_stubs(elf: ELFFile, arch: Arch) -> Dict[int, str]:
    """Map PLT stub addresses to imported symbol names.

    Stubs follow the order of ``.rela.plt`` entries sorted by GOT slot.
    """
    rela = elf.get_section_by_name(".rela.plt")
    dynsym = elf.get_section_by_name(".dynsym")
    if not isinstance(rela, RelocationSection) or not isinstance(dynsym, SymbolTableSection):
        return {}
    plt_sec = elf.get_section_by_name(".plt.sec")
    if plt_sec is not None:
        base, stride = plt_sec["sh_addr"], 16
    else:
        plt = elf.get_section_by_name(".plt")
        if plt is None:
            return {}
        first, stride = _PLT_LAYOUT[arch]
        base = plt["sh_addr"] + first

    relocations = sorted(rela.iter_relocations(), key=lambda r: r["r_offset"])
    stubs = {}
    for index, reloc in enumerate(relocations):
        symbol = dynsym.get_symbol(reloc["r_info_sym"])
        if symbol is not None and symbol.name:
            stubs[base + index * stride] = symbol.name
    return stubs


def _defined_functions(elf: ELFFile) -> Dict[str, int]:
    functions: Dict[str, int] = {}
    for name in (".dynsym", ".symtab"):
        table = elf.get_section_by_name(name)
        if not isinstance(table, SymbolTableSection):
            continue
        for symbol in table.iter_symbols():
            if symbol["st_info"]["type"] != "STT_FUNC" or symbol["st_shndx"] == "SHN_UNDEF":
                continue
            if symbol.name and symbol["st_value"]:
                functions.setdefault(symbol.name, symbol["st_value"])
    return functions


def load_elf(data: bytes, path: str = "") -> BinaryImage:
    if len(data) < 16 or not data.startswith(b"\x7fELF"):
        raise MalformedElf(f"not an ELF file: {path or '<bytes>'}")
    try:
        elf = ELFFile(io.BytesIO(data))
        machine = elf["e_machine"]
        little_endian = elf.little_endian
    except Exception as e:
        raise MalformedElf(f"{path or '<bytes>'}: {e}")

    arch = _MACHINES.get(machine)
    if arch is None or not little_endian or elf.elfclass != 64:
        raise UnsupportedArch(f"{path or '<bytes>'}: {machine} class={elf.elfclass} le={little_endian}")

    try:
        sections = []
        for section in elf.iter_sections():
            if not section["sh_flags"] & SHF_ALLOC or not section["sh_addr"]:
                continue
            if section["sh_type"] == "SHT_NOBITS":
                payload = bytes(section["sh_size"])
            else:
                payload = section.data()
            sections.append(Section(section.name, section["sh_addr"], payload, section["sh_flags"]))
        sections.sort(key=lambda s: s.vaddr)

        dynamic_symbols: Dict[str, int] = {}
        dynsym = elf.get_section_by_name(".dynsym")
        if isinstance(dynsym, SymbolTableSection):
            for symbol in dynsym.iter_symbols():
                if symbol.name:
                    dynamic_symbols[symbol.name] = symbol["st_value"]

        imports = _plt_stubs(elf, arch)
        functions = _defined_functions(elf)
        has_interp = any(seg["p_type"] == "PT_INTERP" for seg in elf.iter_segments())
        is_static = not (has_interp or elf.get_section_by_name(".dynamic") is not None or dynamic_symbols)
        stripped = elf.get_section_by_name(".symtab") is None
        entry = elf["e_entry"]
    except (UnsupportedArch, MalformedElf):
        raise
    except Exception as e:
        raise MalformedElf(f"{path or '<bytes>'}: {e}")

    image = BinaryImage(
        arch=arch,
        little_endian=little_endian,
        entry=entry,
        sections=sections,
        dynamic_symbols=dynamic_symbols,
        imports=imports,
        functions=functions,
        is_static=is_static,
        stripped=stripped,
        path=path,
    )
    logger.debug(
        f"elf_loaded path={path} arch={arch.value} sections={len(sections)} imports={len(imports)} "
        f"functions={len(functions)} static={is_static} stripped={stripped}"
    )
    return image
