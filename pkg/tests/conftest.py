from pathlib import Path

import pytest

from udsaudit.config import AnalysisSettings
from udsaudit.firmware import FileContextRule, FileKind, FirmwareImage, FsEntry
from udsaudit.sepolicy import build_dataflow_graph, parse_policy

from tests.elf_builder import AARCH64, X86_64
from tests.mini_aosp import POLICY, build_mini_aosp

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(params=[X86_64, AARCH64])
def arch(request) -> str:
    return request.param


@pytest.fixture
def settings() -> AnalysisSettings:
    return AnalysisSettings()


@pytest.fixture
def mini_aosp(tmp_path) -> Path:
    return build_mini_aosp(tmp_path)


@pytest.fixture
def mini_aosp_no_adbd(tmp_path) -> Path:
    return build_mini_aosp(tmp_path, include_adbd=False)


@pytest.fixture(scope="session")
def mini_policy():
    return parse_policy(POLICY)


@pytest.fixture(scope="session")
def mini_graph(mini_policy):
    return build_dataflow_graph(mini_policy)


def make_image(entries, contexts=(), **kw) -> FirmwareImage:
    """FirmwareImage from ``(path, mode, uid, gid, label, kind)`` tuples."""
    built = {}
    for path, mode, uid, gid, label, kind in entries:
        built[path] = FsEntry(path=path, mode=mode, uid=uid, gid=gid, selabel=label, kind=FileKind(kind))
    rules = tuple(FileContextRule(pattern=p, context=c) for p, c in contexts)
    return FirmwareImage(image_id="test", entries={p: built[p] for p in sorted(built)}, file_contexts=rules, **kw)
