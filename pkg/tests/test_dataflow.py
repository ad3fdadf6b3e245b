import pytest

from udsaudit.binanalysis.cfg import build_cfg
from udsaudit.binanalysis.dataflow import engine_for, function_facts
from udsaudit.binanalysis.elf import SHF_ALLOC, SHF_WRITE, Arch, BinaryImage, Section, load_elf
from udsaudit.binanalysis.extract import extract_bind_addresses
from udsaudit.binanalysis.records import Confidence, NamespaceHint
from udsaudit.binanalysis.values import GLOBAL, TOP, Memory, Pointer

from tests import programs
from tests.elf_builder import build_elf

DATA = 0x1000


@pytest.fixture
def data_image() -> BinaryImage:
    section = Section(".data", DATA, b"/old\x00", SHF_ALLOC | SHF_WRITE)
    return BinaryImage(arch=Arch.X86_64, little_endian=True, entry=0, sections=[section])


def _bind_at_depth(gen, depth):
    cfg = build_cfg(load_elf(build_elf(gen), path="/system/bin/fixture"))
    engine_for(cfg, depth)
    binds = extract_bind_addresses(cfg, apis=("bind",))
    assert len(binds) == 1
    return cfg, binds[0]


# ---------------------------------------------------------------------------
# Memory.join


@pytest.mark.parametrize("written_first", [True, False], ids=["left", "right"])
def test_join_forgets_global_written_on_one_branch(data_image, written_first):
    written = Memory()
    written.write_bytes(GLOBAL, DATA, b"/new\x00")
    joined = written.join(Memory()) if written_first else Memory().join(written)

    assert joined.read_cstring(GLOBAL, DATA, data_image) == (b"", False)
    assert joined.read_bytes(GLOBAL, DATA, 5, data_image) == [None] * 5


def test_join_keeps_agreeing_bytes(data_image):
    left, right = Memory(), Memory()
    left.write_bytes(GLOBAL, DATA, b"/new\x00")
    right.write_bytes(GLOBAL, DATA, b"/new\x00")
    right.write_bytes(3, 0, b"x")

    joined = left.join(right)
    assert joined.read_cstring(GLOBAL, DATA, data_image) == (b"/new", True)
    assert joined.byte_at(3, 0) is None


def test_untouched_global_still_reads_section_data(data_image):
    assert Memory().join(Memory()).read_cstring(GLOBAL, DATA, data_image) == (b"/old", True)


def test_join_drops_word_missing_on_one_side():
    left, right = Memory(), Memory()
    left.store(0, -0x20, Pointer(0, -0x80), 8)
    right.store(0, -0x20, Pointer(0, -0x80), 8)
    right.write_bytes(0, -0x1C, b"\x00")

    joined = left.join(right)
    assert joined.load(0, -0x20, 8) is TOP
    assert left.join(Memory()).load(0, -0x20, 8) is TOP


# ---------------------------------------------------------------------------
# interprocedural depth


def test_helper_rewriting_sun_path_is_followed(arch):
    cfg, bind = _bind_at_depth(programs.bind_after_helper(arch), 3)

    assert bind.address_bytes == b"/dev/socket/fresh"
    assert bind.confidence == Confidence.EXACT
    assert not function_facts(cfg, bind.function).degraded


def test_depth_limit_forgets_buffer_passed_to_helper(arch):
    cfg, bind = _bind_at_depth(programs.bind_after_helper(arch), 0)

    assert b"stale" not in bind.address_bytes
    assert bind.address_bytes == b""
    assert bind.confidence == Confidence.SYMBOLIC
    assert function_facts(cfg, bind.function).degraded


def test_depth_limit_downgrades_exact_bind(arch):
    _, deep = _bind_at_depth(programs.bind_after_helper(arch, rewrite=False), 3)
    _, shallow = _bind_at_depth(programs.bind_after_helper(arch, rewrite=False), 0)

    assert deep.confidence == Confidence.EXACT
    assert shallow.address_bytes == b"/dev/socket/stale"
    assert shallow.namespace_hint == NamespaceHint.FILESYSTEM
    assert shallow.confidence == Confidence.PARTIAL
