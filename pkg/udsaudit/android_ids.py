"""Android AID table and name→id resolution."""

import logging
from typing import Dict, Optional, Union

logger = logging.getLogger(__name__)

AID_APP_START = 10000

ANDROID_IDS: Dict[str, int] = {
    "root": 0,
    "system": 1000,
    "radio": 1001,
    "bluetooth": 1002,
    "graphics": 1003,
    "input": 1004,
    "audio": 1005,
    "camera": 1006,
    "log": 1007,
    "compass": 1008,
    "mount": 1009,
    "wifi": 1010,
    "adb": 1011,
    "install": 1012,
    "media": 1013,
    "dhcp": 1014,
    "sdcard_rw": 1015,
    "vpn": 1016,
    "keystore": 1017,
    "usb": 1018,
    "drm": 1019,
    "mdnsr": 1020,
    "gps": 1021,
    "media_rw": 1023,
    "mtp": 1024,
    "drmrpc": 1026,
    "nfc": 1027,
    "sdcard_r": 1028,
    "clat": 1029,
    "loop_radio": 1030,
    "mediadrm": 1031,
    "package_info": 1032,
    "sdcard_pics": 1033,
    "sdcard_av": 1034,
    "sdcard_all": 1035,
    "logd": 1036,
    "shared_relro": 1037,
    "dbus": 1038,
    "tlsdate": 1039,
    "mediaex": 1040,
    "audioserver": 1041,
    "metrics_coll": 1042,
    "metricsd": 1043,
    "webserv": 1044,
    "debuggerd": 1045,
    "mediacodec": 1046,
    "cameraserver": 1047,
    "firewall": 1048,
    "trunks": 1049,
    "nvram": 1050,
    "dns": 1051,
    "dns_tether": 1052,
    "webview_zygote": 1053,
    "vehicle_network": 1054,
    "media_audio": 1055,
    "media_video": 1056,
    "media_image": 1057,
    "tombstoned": 1058,
    "media_obb": 1059,
    "ese": 1060,
    "ota_update": 1061,
    "automotive_evs": 1062,
    "lowpan": 1063,
    "hsm": 1064,
    "reserved_disk": 1065,
    "statsd": 1066,
    "incidentd": 1067,
    "secure_element": 1068,
    "lmkd": 1069,
    "llkd": 1070,
    "iorapd": 1071,
    "gpu_service": 1072,
    "network_stack": 1073,
    "external_storage": 1077,
    "shell": 2000,
    "cache": 2001,
    "diag": 2002,
    "net_bt_admin": 3001,
    "net_bt": 3002,
    "inet": 3003,
    "net_raw": 3004,
    "net_admin": 3005,
    "net_bw_stats": 3006,
    "net_bw_acct": 3007,
    "readproc": 3009,
    "wakelock": 3010,
    "uhid": 3011,
    "everybody": 9997,
    "misc": 9998,
    "nobody": 9999,
    "app": AID_APP_START,
}


def _parse_colon_file(text: str) -> Dict[str, int]:
    """``name:x:id:...`` lines, as in /etc/passwd and /etc/group."""
    ids: Dict[str, int] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(":")
        if len(fields) < 3:
            continue
        try:
            ids[fields[0]] = int(fields[2])
        except ValueError:
            logger.warning(f"id_override_skipped line={line}")
    return ids


class IdResolver:
    """Resolves init ``user``/``group`` names, preferring per-image overrides."""

    def __init__(self, passwd_source: str = "", group_source: str = ""):
        self.users = dict(ANDROID_IDS)
        self.users.update(_parse_colon_file(passwd_source))
        self.groups = dict(ANDROID_IDS)
        self.groups.update(_parse_colon_file(group_source))

    @staticmethod
    def _lookup(table: Dict[str, int], name: Optional[Union[str, int]], kind: str) -> Optional[int]:
        if name is None:
            return None
        if isinstance(name, int):
            return name
        if name.isdigit():
            return int(name)
        if name in table:
            return table[name]
        # vendor_<name> style aliases fall back to the bare name
        if name.startswith("vendor_") and name[len("vendor_"):] in table:
            return table[name[len("vendor_"):]]
        logger.warning(f"id_unresolved kind={kind} name={name}")
        return None

    def uid(self, name: Optional[Union[str, int]], default: int = 0) -> int:
        resolved = self._lookup(self.users, name, "user")
        return default if resolved is None else resolved

    def gid(self, name: Optional[Union[str, int]], default: int = 0) -> int:
        resolved = self._lookup(self.groups, name, "group")
        return default if resolved is None else resolved
