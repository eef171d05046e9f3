"""Device abstraction: enumeration plus a simulated capacity-limited device.

Only the simulated provider is implemented; a real-hardware provider just
has to offer enumerate() -> list[DeviceSpec] and can be dropped in without
touching any other module.

The simulated device is the ground-truth oracle for the whole framework:
sim_alloc refuses an allocation iff capacity is genuinely exhausted, so
under correct co-scheduling a granted client can never see DEVICE_OOM.
Its state lives in a small companion shared segment (mmap'd tmpfs file) so
allocations from many OS processes draw down one "physical" device. The
companion segment has its own flock, never taken while holding the ledger
lock (fixed lock order: ledger lock strictly outside, or not at all).
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import mmap
import os
import struct
from dataclasses import dataclass

from . import procs
from .errors import BadHandleError, DeviceOOMError, ParseError, SchemaError

MIB = 1024 * 1024

_SIM_MAGIC = b"MSHRSIM1"
_SIM_MAX_HANDLES = 1024
# magic, ndev, n_handles, next_handle
_SIM_HDR = struct.Struct("<8sHH4xQ")
_SIM_DEV = struct.Struct("<QQ")
# handle, pid, start_token, device, nbytes
_SIM_ENT = struct.Struct("<QIQHQ2x")


@dataclass(frozen=True)
class DeviceSpec:
    index: int
    name: str
    total_bytes: int


def load_device_spec(path: str) -> list[DeviceSpec]:
    """Parse a device config file: {"devices":[{"name": str, "mib": int}]}."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_device_config(doc)


def parse_device_config(doc) -> list[DeviceSpec]:
    if not isinstance(doc, dict) or not isinstance(doc.get("devices"), list):
        raise SchemaError('expected {"devices": [...]}')
    entries = doc["devices"]
    if not entries:
        raise SchemaError("devices list is empty")
    specs = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "mib" not in e:
            raise SchemaError(f"device {i}: expected an object with 'mib'")
        mib = e["mib"]
        if not isinstance(mib, int) or mib <= 0:
            raise SchemaError(f"device {i}: 'mib' must be a positive integer")
        specs.append(DeviceSpec(i, str(e.get("name", f"sim{i}")), mib * MIB))
    return specs


def config_hash(specs: list[DeviceSpec]) -> str:
    """Stable short hash of a device list; embedded in the segment name so
    clients with mismatched configs cannot attach to each other's ledger."""
    blob = json.dumps([(s.index, s.name, s.total_bytes) for s in specs],
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class StaticProvider:
    """Provider over a fixed device list (the simulated stand-in for NVML)."""

    def __init__(self, specs: list[DeviceSpec]):
        self._specs = list(specs)

    def enumerate(self) -> list[DeviceSpec]:
        return list(self._specs)


class SimDevice:
    """Capacity-enforcing fake device shared across processes."""

    def __init__(self, path: str, specs: list[DeviceSpec]):
        self.path = path
        self.specs = list(specs)
        self._size = (_SIM_HDR.size + _SIM_DEV.size * len(specs)
                      + _SIM_ENT.size * _SIM_MAX_HANDLES)
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
        self._lock_fd = os.open(path + ".lock", os.O_RDWR | os.O_CREAT, 0o600)
        os.ftruncate(self._fd, self._size)
        self._mm = mmap.mmap(self._fd, self._size)
        with self._locked():
            if bytes(self._mm[:8]) != _SIM_MAGIC:
                self._store([[s.total_bytes, 0] for s in specs], [], 1)

    def _locked(self):
        return _Flock(self._lock_fd)

    def _load(self):
        raw = bytes(self._mm)
        magic, ndev, n_handles, next_handle = _SIM_HDR.unpack_from(raw, 0)
        off = _SIM_HDR.size
        devs = []
        for _ in range(ndev):
            total, used = _SIM_DEV.unpack_from(raw, off)
            devs.append([total, used])
            off += _SIM_DEV.size
        handles = []
        for _ in range(n_handles):
            h, pid, tok, dev, nbytes = _SIM_ENT.unpack_from(raw, off)
            handles.append([h, pid, tok, dev, nbytes])
            off += _SIM_ENT.size
        return devs, handles, next_handle

    def _store(self, devs, handles, next_handle) -> None:
        buf = bytearray(self._size)
        _SIM_HDR.pack_into(buf, 0, _SIM_MAGIC, len(devs), len(handles), next_handle)
        off = _SIM_HDR.size
        for total, used in devs:
            _SIM_DEV.pack_into(buf, off, total, used)
            off += _SIM_DEV.size
        for h, pid, tok, dev, nbytes in handles:
            _SIM_ENT.pack_into(buf, off, h, pid, tok, dev, nbytes)
            off += _SIM_ENT.size
        self._mm[:] = bytes(buf)

    def sim_alloc(self, device: int, nbytes: int) -> int:
        """Allocate ``nbytes``; returns an opaque handle or raises DEVICE_OOM."""
        if nbytes <= 0:
            raise ValueError("nbytes must be positive")
        pid, tok = os.getpid(), procs.self_token()
        with self._locked():
            devs, handles, next_handle = self._load()
            if device >= len(devs):
                raise BadHandleError(f"no such device {device}")
            total, used = devs[device]
            if used + nbytes > total:
                # a real device reclaims dead processes' memory; mirror that
                reclaimed = self._reap_locked(devs, handles)
                total, used = devs[device]
                if used + nbytes > total:
                    if reclaimed:
                        self._store(devs, handles, next_handle)
                    raise DeviceOOMError(
                        f"device {device}: {nbytes} requested, {total - used} free"
                    )
            if len(handles) >= _SIM_MAX_HANDLES:
                raise DeviceOOMError("handle table full")
            h = next_handle
            handles.append([h, pid, tok, device, nbytes])
            devs[device][1] = used + nbytes
            self._store(devs, handles, next_handle + 1)
            return h

    def sim_free(self, device: int, handle: int) -> None:
        with self._locked():
            devs, handles, next_handle = self._load()
            for i, (h, pid, tok, dev, nbytes) in enumerate(handles):
                if h == handle and dev == device:
                    del handles[i]
                    devs[dev][1] -= nbytes
                    self._store(devs, handles, next_handle)
                    return
            raise BadHandleError(f"unknown handle {handle} on device {device}")

    def used(self, device: int) -> int:
        with self._locked():
            devs, _, _ = self._load()
            return devs[device][1]

    def reap_dead(self) -> int:
        """Drop allocations owned by dead processes; returns bytes reclaimed."""
        with self._locked():
            devs, handles, next_handle = self._load()
            reclaimed = self._reap_locked(devs, handles)
            if reclaimed:
                self._store(devs, handles, next_handle)
            return reclaimed

    @staticmethod
    def _reap_locked(devs, handles) -> int:
        reclaimed = 0
        for ent in list(handles):
            _, pid, tok, dev, nbytes = ent
            if not procs.is_alive(pid, tok):
                handles.remove(ent)
                devs[dev][1] -= nbytes
                reclaimed += nbytes
        return reclaimed

    def close(self) -> None:
        if self._mm is not None:
            self._mm.close()
            os.close(self._fd)
            os.close(self._lock_fd)
            self._mm = None

    def destroy(self) -> None:
        self.close()
        for p in (self.path, self.path + ".lock"):
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass


class _Flock:
    def __init__(self, fd: int):
        self._fd = fd

    def __enter__(self):
        fcntl.flock(self._fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._fd, fcntl.LOCK_UN)
