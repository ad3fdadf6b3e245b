"""A small extracted image: six daemons, a policy, file contexts and init RC files.

``build_mini_aosp`` writes ``<parent>/mini-aosp/{manifest.tsv,rootfs/...}``
and returns the image directory.
"""

from pathlib import Path
from typing import List, Tuple

from tests import programs
from tests.elf_builder import AARCH64, X86_64, build_elf

IMAGE_NAME = "mini-aosp"

POLICY = """\
# mini-aosp policy
attribute domain;
attribute appdomain;
attribute file_type;

type init, domain;
type untrusted_app, domain, appdomain;
type netd, domain;
type cand, domain;
type fmhal, domain;
type mm_qcamera_daemon, domain;
type cnd, domain;
type adbd, domain;

type netd_exec, file_type;
type cand_exec, file_type;
type fmhal_exec, file_type;
type mm_qcamera_daemon_exec, file_type;
type cnd_exec, file_type;
type adbd_exec, file_type;
type dnsproxyd_socket, file_type;
type cnd_socket, file_type;
type camera_data_file, file_type;
type app_data_file, file_type;

role r;

type_transition init netd_exec:process netd;
type_transition init cand_exec:process cand;
type_transition init mm_qcamera_daemon_exec:process mm_qcamera_daemon;
type_transition init cnd_exec:process cnd;

allow untrusted_app { netd cnd }:unix_stream_socket connectto;
allow untrusted_app { cand fmhal mm_qcamera_daemon adbd }:unix_stream_socket connectto;
allow untrusted_app { dnsproxyd_socket cnd_socket }:sock_file write;
allow untrusted_app app_data_file:file { read write open };

allow netd self:unix_stream_socket { create bind listen accept };
allow cand self:unix_stream_socket { create bind listen accept };
allow fmhal self:unix_stream_socket { create bind listen accept };
allow mm_qcamera_daemon self:unix_stream_socket { create bind listen accept };
allow cnd self:unix_stream_socket { create bind listen accept };
allow adbd self:unix_stream_socket { create bind listen accept };

allow mm_qcamera_daemon camera_data_file:sock_file { create write setattr };
allow mm_qcamera_daemon camera_data_file:dir { search write add_name };

allow init { netd_exec cand_exec mm_qcamera_daemon_exec cnd_exec }:file { read execute };

neverallow untrusted_app camera_data_file:sock_file write;
dontaudit untrusted_app self:capability sys_admin;
"""

FILE_CONTEXTS = """\
/                           u:object_r:rootfs:s0
/sbin(/.*)?                 u:object_r:rootfs:s0
/sbin/adbd                  u:object_r:adbd_exec:s0
/system(/.*)?               u:object_r:system_file:s0
/system/bin/netd            u:object_r:netd_exec:s0
/system/bin/cand            u:object_r:cand_exec:s0
/system/bin/cnd             u:object_r:cnd_exec:s0
/vendor(/.*)?               u:object_r:vendor_file:s0
/vendor/bin/fmhal_service   u:object_r:fmhal_exec:s0
/vendor/bin/mm-qcamera-daemon   u:object_r:mm_qcamera_daemon_exec:s0
/dev(/.*)?                  u:object_r:device:s0
/dev/socket(/.*)?           u:object_r:socket_device:s0
/dev/socket/dnsproxyd       u:object_r:dnsproxyd_socket:s0
/dev/socket/cnd             u:object_r:cnd_socket:s0
/data(/.*)?                 u:object_r:system_data_file:s0
/data/vendor/qcam(/.*)?     u:object_r:camera_data_file:s0
"""

INIT_RC = """\
import /system/etc/init
import /vendor/etc/init

on early-init
    mkdir /dev/socket 0755 root root

on post-fs-data
    mkdir /data/vendor 0771 root root
    mkdir /data/vendor/qcam 0770 camera camera
    restorecon /data/vendor
"""

ADBD_RC = """
service adbd /sbin/adbd
    class core
    disabled
    seclabel u:r:adbd:s0
"""

LOGD_RC = """
service logd /system/bin/logd
    socket logdw dgram+passcred 0222 logd logd
    user logd
    group logd system
"""

RC_FILES = {
    "system/etc/init/netd.rc": """\
service netd /system/bin/netd
    class main
    socket dnsproxyd stream 0660 root inet
""",
    "system/etc/init/cand.rc": """\
service cand /system/bin/cand
    class main
    user system
    group system
""",
    "system/etc/init/cnd.rc": """\
service cnd /system/bin/cnd
    class main
    socket cnd stream 0660 root inet
    user system
    group system inet
""",
    "vendor/etc/init/fmhal.rc": """\
service fmhal_service /vendor/bin/fmhal_service
    class late_start
    user system
    group system bluetooth
    seclabel u:r:fmhal:s0

on property:vendor.fm.enable=0
    stop fmhal_service

on property:vendor.fm.enable=1
    start fmhal_service
""",
    "vendor/etc/init/camera.rc": """\
service qcamerasvr /vendor/bin/mm-qcamera-daemon
    class late_start
    user camera
    group camera system inet input graphics
""",
}

DIRECTORIES: List[Tuple[str, str, int, int]] = [
    ("/", "755", 0, 0),
    ("/data", "771", 1000, 1000),
    ("/dev", "755", 0, 0),
    ("/dev/socket", "755", 0, 0),
    ("/sbin", "750", 0, 2000),
    ("/system", "755", 0, 0),
    ("/system/bin", "755", 0, 2000),
    ("/vendor", "755", 0, 2000),
    ("/vendor/bin", "755", 0, 2000),
]


def daemon_binaries(include_adbd: bool = True) -> List[Tuple[str, str, bytes]]:
    """``(path, selabel, elf bytes)`` for every daemon in the image."""
    daemons = [
        ("/system/bin/netd", "-", build_elf(programs.netd_daemon(X86_64))),
        ("/system/bin/cand", "-", build_elf(programs.cand_daemon(AARCH64))),
        ("/system/bin/cnd", "u:object_r:cnd_exec:s0", build_elf(programs.cnd_daemon(X86_64))),
        ("/vendor/bin/fmhal_service", "-", build_elf(programs.fmhal_daemon(AARCH64))),
        ("/vendor/bin/mm-qcamera-daemon", "-", build_elf(programs.qcamera_daemon(AARCH64))),
    ]
    if include_adbd:
        adbd = build_elf(programs.adbd_daemon(X86_64), static=True, stripped=True)
        daemons.append(("/sbin/adbd", "-", adbd))
    return daemons


def manifest_text(binaries: List[Tuple[str, str, bytes]]) -> str:
    rows = [f"{path}\t{mode}\t{uid}\t{gid}\t-\tdirectory" for path, mode, uid, gid in DIRECTORIES]
    for path, label, _ in binaries:
        mode = "750" if path.startswith("/sbin/") else "755"
        rows.append(f"{path}\t{mode}\t0\t2000\t{label}\tregular")
    return "# path\tmode\tuid\tgid\tlabel\tkind\n" + "\n".join(rows) + "\n"


def build_mini_aosp(parent: Path, include_adbd: bool = True, policy: str = POLICY) -> Path:
    image_dir = Path(parent) / IMAGE_NAME
    rootfs = image_dir / "rootfs"
    rootfs.mkdir(parents=True)

    binaries = daemon_binaries(include_adbd)
    (image_dir / "manifest.tsv").write_text(manifest_text(binaries), encoding="utf-8")
    if policy:
        (rootfs / "sepolicy.conf").write_text(policy, encoding="utf-8")
    (rootfs / "file_contexts").write_text(FILE_CONTEXTS, encoding="utf-8")

    init_rc = INIT_RC + (ADBD_RC if include_adbd else "") + LOGD_RC
    (rootfs / "init.rc").write_text(init_rc, encoding="utf-8")
    for rel, text in RC_FILES.items():
        target = rootfs / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")

    for path, _, data in binaries:
        target = rootfs / path.lstrip("/")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    return image_dir
