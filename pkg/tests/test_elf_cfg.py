import pytest

from udsaudit.binanalysis.analyzer import SkipReason, analyze_binary
from udsaudit.binanalysis.cfg import build_cfg, scan_prologues
from udsaudit.binanalysis.elf import Arch, load_elf
from udsaudit.errors import MalformedElf, UnsupportedArch

from tests import programs
from tests.elf_builder import EM_ARM, X86_64, build_elf


def _load(gen, **kw):
    return load_elf(build_elf(gen, **kw), path="/system/bin/test")


def test_imports_resolve_through_plt(arch):
    image = _load(programs.bind_direct(arch))

    assert image.arch == (Arch.X86_64 if arch == X86_64 else Arch.AARCH64)
    assert {"socket", "strcpy", "bind", "accept", "getsockopt", "close"} <= set(image.imports.values())
    assert image.functions["main"] == image.entry
    assert not image.is_static
    assert not image.stripped


@pytest.mark.parametrize("data", [b"", b"\x7fEL", b"\x7fELF", b"\x7fELF" + b"\xff" * 60, b"MZ" + b"\x00" * 100])
def test_malformed_input(data):
    with pytest.raises(MalformedElf):
        load_elf(data)


def test_unsupported_machine():
    with pytest.raises(UnsupportedArch):
        load_elf(build_elf(programs.empty(X86_64), machine=EM_ARM))


def test_unsupported_machine_is_a_skip(settings):
    findings = analyze_binary("/vendor/bin/arm32", build_elf(programs.empty(X86_64), machine=EM_ARM), settings)
    assert findings.skip_reason == SkipReason.UNSUPPORTED_ARCH


def test_empty_text_has_no_functions(arch):
    cfg = build_cfg(_load(programs.empty(arch)))
    assert cfg.functions == {}
    assert cfg.callsites == {}


def test_callsites_name_their_targets(arch):
    cfg = build_cfg(_load(programs.bind_direct(arch)))

    main = cfg.image.functions["main"]
    symbols = [site.symbol for site in cfg.callsites_in(main)]
    assert symbols == ["socket", "strcpy", "bind", "accept", "getsockopt", "close"]
    assert all(not site.indirect for site in cfg.callsites.values())


def test_indirect_call_is_unresolved(arch):
    cfg = build_cfg(_load(programs.indirect_call(arch)))

    assert len(cfg.unresolved) == 1
    site = cfg.callsites[cfg.unresolved[0]]
    assert site.indirect and site.target is None
    # the walk continues past the indirect call
    assert "bind" in {s.symbol for s in cfg.callsites.values()}


def test_local_callee_is_a_function(arch):
    gen = programs.peer_check(arch, "comm")
    cfg = build_cfg(_load(gen))

    assert set(cfg.functions) == {gen.functions["main"], gen.functions["check_comm"]}
    calls = {s.symbol: s for s in cfg.callsites.values()}
    assert calls["check_comm"].target == gen.functions["check_comm"]


@pytest.mark.parametrize("build", [lambda a: programs.peer_check(a, "comm"), programs.netd_daemon], ids=["plain", "bti"])
def test_prologue_scan_finds_stripped_functions(arch, build):
    gen = build(arch)
    image = _load(gen, stripped=True)

    assert image.stripped
    assert image.functions == {}
    assert set(gen.functions.values()) <= set(scan_prologues(image))
    assert set(gen.functions.values()) <= set(build_cfg(image).functions)


def test_static_binary_with_symbols(arch):
    image = _load(programs.static_daemon(arch), static=True)

    assert image.is_static
    assert not image.stripped
    assert image.imports == {}
    assert {"main", "socket", "strcpy", "bind"} <= set(image.functions)


def test_static_stripped_binary_is_skipped(settings):
    data = build_elf(programs.adbd_daemon(X86_64), static=True, stripped=True)
    findings = analyze_binary("/sbin/adbd", data, settings)

    assert findings.skip_reason == SkipReason.SKIPPED_STATIC
    assert findings.arch == "x86_64"
    assert findings.binds == ()


def test_static_daemon_with_symbols_is_analyzed(arch, settings):
    findings = analyze_binary("/sbin/adbd", build_elf(programs.static_daemon(arch), static=True), settings)

    assert findings.skip_reason is None
    assert [f.bind.address_bytes for f in findings.binds] == [b"/dev/socket/adbd_ctl"]


def test_stripped_dynamic_binary_is_analyzed(arch, settings):
    data = build_elf(programs.bind_direct(arch), stripped=True)
    findings = analyze_binary("/system/bin/nims", data, settings)

    assert findings.skip_reason is None
    assert [f.bind.address_bytes for f in findings.binds] == [b"/dev/socket/nims_direct"]


def test_analysis_reports_cfg_counters(arch, settings):
    findings = analyze_binary("/system/bin/x", build_elf(programs.indirect_call(arch)), settings)

    assert findings.functions == 1
    assert findings.unresolved_calls == 1
    assert findings.undecodable == 0
    assert findings.arch == arch
