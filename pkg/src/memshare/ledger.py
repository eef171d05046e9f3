"""Shared ledger of device memory: global totals, itemised holdings, wait queue.

The ledger lives in a memory-mapped file (tmpfs by default) shared by every
client process on the node. All mutation happens under the coordination lock
(see coord); this module only defines the data structure, its bit-exact
serialized layout, integrity checking and backup.

Layout (little-endian, fixed offsets, see docs/format.md):

    header   magic "MSHRLDG1", version, policy, ndev, n_allocs, n_waits, next_seq
    devices  ndev x (total_bytes u64, used_bytes u64)
    allocs   256 slots x 24 bytes, first n_allocs populated, rest zero
    waits    256 slots x 48 bytes, first n_waits populated, rest zero
    trailer  checksum u64 (blake2b-64 of everything before it)

Unused slots are zeroed so serialization is byte-deterministic: two ledgers
with equal field values always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import math
import mmap
import os
import struct
from dataclasses import dataclass, field

from .errors import (
    BackupInvalidError,
    InsufficientError,
    ProviderEmptyError,
    SegmentCorruptError,
    SegmentPermissionError,
)

MAGIC = b"MSHRLDG1"
VERSION = 1
MAX_ALLOCS = 256
MAX_WAITS = 256

WAITING = 0
GRANTED = 1

# magic, version, policy, pad, ndev, n_allocs, n_waits, pad, next_seq
_HDR = struct.Struct("<8sHBxHHH6xQ")
_DEV = struct.Struct("<QQ")
# pid, start_token, seq, device, nbytes
_ALLOC = struct.Struct("<IQHHQ")
# pid, start_token, seq, device, nbytes, priority, enqueue_seq, deadline, state
_WAIT = struct.Struct("<IQHHQIQdB3x")
_CKSUM = struct.Struct("<Q")

# deadline sentinel for "wait forever" (doubles cannot round-trip math.inf
# through every consumer cleanly, so we keep inf and test for it explicitly)
NO_DEADLINE = math.inf


@dataclass(frozen=True)
class ClientId:
    pid: int
    start_token: int
    seq: int


@dataclass
class AllocationRecord:
    client: ClientId
    device: int
    nbytes: int


@dataclass
class WaitEntry:
    client: ClientId
    device: int
    nbytes: int
    priority: int
    enqueue_seq: int
    deadline: float
    state: int = WAITING


@dataclass
class DeviceState:
    total: int
    used: int


@dataclass
class Ledger:
    policy: int
    devices: list[DeviceState]
    allocations: list[AllocationRecord] = field(default_factory=list)
    wait_queue: list[WaitEntry] = field(default_factory=list)
    next_seq: int = 0

    def free(self, device: int) -> int:
        d = self.devices[device]
        return d.total - d.used

    # -- mutators (caller must hold the coordination lock) --

    def add_alloc(self, client: ClientId, device: int, nbytes: int) -> None:
        if nbytes <= 0:
            raise ValueError("nbytes must be positive")
        if self.free(device) < nbytes:
            raise InsufficientError(
                f"device {device}: need {nbytes}, free {self.free(device)}"
            )
        for rec in self.allocations:
            if rec.client == client and rec.device == device:
                rec.nbytes += nbytes
                break
        else:
            if len(self.allocations) >= MAX_ALLOCS:
                raise InsufficientError("allocation table full")
            self.allocations.append(AllocationRecord(client, device, nbytes))
        self.devices[device].used += nbytes

    def remove_alloc(self, client: ClientId, device: int, nbytes: int) -> tuple[int, bool]:
        """Release up to ``nbytes`` of the client's holding on ``device``.

        Returns (bytes actually freed, clamped). An over-free is clamped to
        the itemised holding rather than corrupting totals.
        """
        for i, rec in enumerate(self.allocations):
            if rec.client == client and rec.device == device:
                freed = min(nbytes, rec.nbytes)
                rec.nbytes -= freed
                if rec.nbytes == 0:
                    del self.allocations[i]
                self.devices[device].used -= freed
                return freed, freed < nbytes
        return 0, nbytes > 0

    def holding(self, client: ClientId, device: int) -> int:
        for rec in self.allocations:
            if rec.client == client and rec.device == device:
                return rec.nbytes
        return 0

    def enqueue(self, client: ClientId, device: int, nbytes: int,
                priority: int, deadline: float) -> WaitEntry:
        if len(self.wait_queue) >= MAX_WAITS:
            raise InsufficientError("wait queue full")
        self.next_seq += 1
        entry = WaitEntry(client, device, nbytes, priority, self.next_seq, deadline)
        self.wait_queue.append(entry)
        return entry

    def find_entry(self, client: ClientId, device: int | None = None) -> WaitEntry | None:
        for e in self.wait_queue:
            if e.client == client and (device is None or e.device == device):
                return e
        return None

    def remove_entry(self, entry: WaitEntry) -> None:
        self.wait_queue.remove(entry)

    def absorb_grant(self, entry: WaitEntry) -> None:
        """Convert a GRANTED reservation into an itemised allocation record.

        The bytes are already counted in total_used (reservation-at-notify),
        so only the itemisation moves."""
        assert entry.state == GRANTED
        self.wait_queue.remove(entry)
        for rec in self.allocations:
            if rec.client == entry.client and rec.device == entry.device:
                rec.nbytes += entry.nbytes
                return
        self.allocations.append(
            AllocationRecord(entry.client, entry.device, entry.nbytes))

    def register(self) -> int:
        """Hand out a fresh 16-bit disambiguator for a new client."""
        self.next_seq += 1
        return self.next_seq & 0xFFFF

    # -- serialization --

    def to_bytes(self) -> bytes:
        buf = bytearray(segment_size(len(self.devices)))
        _HDR.pack_into(
            buf, 0, MAGIC, VERSION, self.policy, len(self.devices),
            len(self.allocations), len(self.wait_queue), self.next_seq,
        )
        off = _HDR.size
        for d in self.devices:
            _DEV.pack_into(buf, off, d.total, d.used)
            off += _DEV.size
        for rec in self.allocations:
            c = rec.client
            _ALLOC.pack_into(buf, off, c.pid, c.start_token, c.seq,
                             rec.device, rec.nbytes)
            off += _ALLOC.size
        off = _HDR.size + _DEV.size * len(self.devices) + _ALLOC.size * MAX_ALLOCS
        for e in self.wait_queue:
            c = e.client
            _WAIT.pack_into(buf, off, c.pid, c.start_token, c.seq, e.device,
                            e.nbytes, e.priority, e.enqueue_seq, e.deadline, e.state)
            off += _WAIT.size
        body_end = len(buf) - _CKSUM.size
        _CKSUM.pack_into(buf, body_end, checksum(bytes(buf[:body_end])))
        return bytes(buf)

    @classmethod
    def from_bytes(cls, raw: bytes, verify: bool = True) -> "Ledger":
        if len(raw) < _HDR.size + _CKSUM.size:
            raise SegmentCorruptError("segment too small")
        magic, version, policy, ndev, n_allocs, n_waits, next_seq = _HDR.unpack_from(raw, 0)
        if magic != MAGIC:
            raise SegmentCorruptError("bad magic")
        if version != VERSION:
            raise SegmentCorruptError(f"unsupported version {version}")
        if len(raw) != segment_size(ndev):
            raise SegmentCorruptError("segment size mismatch")
        if n_allocs > MAX_ALLOCS or n_waits > MAX_WAITS:
            raise SegmentCorruptError("table count out of range")
        if verify:
            body_end = len(raw) - _CKSUM.size
            (stored,) = _CKSUM.unpack_from(raw, body_end)
            if stored != checksum(raw[:body_end]):
                raise SegmentCorruptError("checksum mismatch")
        off = _HDR.size
        devices = []
        for _ in range(ndev):
            total, used = _DEV.unpack_from(raw, off)
            devices.append(DeviceState(total, used))
            off += _DEV.size
        allocations = []
        for _ in range(n_allocs):
            pid, tok, seq, dev, nbytes = _ALLOC.unpack_from(raw, off)
            allocations.append(AllocationRecord(ClientId(pid, tok, seq), dev, nbytes))
            off += _ALLOC.size
        off = _HDR.size + _DEV.size * ndev + _ALLOC.size * MAX_ALLOCS
        wait_queue = []
        for _ in range(n_waits):
            pid, tok, seq, dev, nbytes, prio, eseq, deadline, state = _WAIT.unpack_from(raw, off)
            wait_queue.append(WaitEntry(ClientId(pid, tok, seq), dev, nbytes,
                                        prio, eseq, deadline, state))
            off += _WAIT.size
        return cls(policy, devices, allocations, wait_queue, next_seq)

    def copy(self) -> "Ledger":
        return Ledger.from_bytes(self.to_bytes())


def segment_size(ndev: int) -> int:
    return (_HDR.size + _DEV.size * ndev + _ALLOC.size * MAX_ALLOCS
            + _WAIT.size * MAX_WAITS + _CKSUM.size)


def checksum(body: bytes) -> int:
    """64-bit digest of the serialized body (torn-write detection, not crypto)."""
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def audit(view: Ledger) -> list[str]:
    """Check every ledger invariant; return one descriptor per violation."""
    violations = []
    ndev = len(view.devices)
    for rec in view.allocations:
        if rec.device >= ndev:
            violations.append(f"BAD_DEVICE alloc {rec.client.pid} device {rec.device}")
        if rec.nbytes <= 0:
            violations.append(f"BAD_BYTES alloc {rec.client.pid} bytes {rec.nbytes}")
    for e in view.wait_queue:
        if e.device >= ndev:
            violations.append(f"BAD_DEVICE wait {e.client.pid} device {e.device}")
        if e.nbytes <= 0:
            violations.append(f"BAD_BYTES wait {e.client.pid} bytes {e.nbytes}")
    seqs = [e.enqueue_seq for e in view.wait_queue]
    if seqs != sorted(seqs) or len(set(seqs)) != len(seqs):
        violations.append("QUEUE_ORDER enqueue_seq not strictly increasing")
    for d in range(ndev):
        dev = view.devices[d]
        itemised = sum(r.nbytes for r in view.allocations if r.device == d)
        granted = sum(e.nbytes for e in view.wait_queue
                      if e.device == d and e.state == GRANTED)
        if dev.used != itemised + granted:
            violations.append(
                f"SUM_MISMATCH d{d} expected {itemised + granted} actual {dev.used}"
            )
        if not 0 <= dev.used <= dev.total:
            violations.append(f"OVERSUBSCRIBED d{d} used {dev.used} total {dev.total}")
    return violations


def write_backup(view: Ledger, path: str) -> None:
    """Atomically persist the ledger (write temp, rename).

    No fsync: the backup guards against *process* death, and the page cache
    survives that; the files normally live on tmpfs anyway. The checksum
    catches a torn backup, which is then simply ignored at restore time.
    """
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(view.to_bytes())
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def restore_backup(path: str) -> Ledger:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise BackupInvalidError(f"cannot read backup: {exc}") from exc
    try:
        return Ledger.from_bytes(raw)
    except SegmentCorruptError as exc:
        raise BackupInvalidError(str(exc)) from exc


class LedgerHandle:
    """One process's mapping of the shared segment.

    The handle is confined to its process; the underlying file is shared.
    load()/store() must only be called while holding the coordination lock.
    """

    def __init__(self, path: str, fd: int, mm: mmap.mmap, ndev: int):
        self.path = path
        self._fd = fd
        self._mm = mm
        self.ndev = ndev

    @classmethod
    def open_or_create(cls, path: str, provider, policy: int,
                       backup_path: str | None = None) -> tuple["LedgerHandle", str]:
        """Attach to the segment at ``path``, creating/recovering as needed.

        Caller must hold the coordination lock. Returns (handle, how) where
        how is one of "attached", "initialised", "recovered",
        "reinitialised" (segment and backup both unusable).
        """
        specs = provider.enumerate()
        if not specs:
            raise ProviderEmptyError("provider enumerated no devices")
        size = segment_size(len(specs))
        try:
            fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
        except OSError as exc:
            raise SegmentPermissionError(f"cannot open segment {path}: {exc}") from exc
        st = os.fstat(fd)
        fresh = st.st_size == 0
        if st.st_size not in (0, size):
            # wrong-size segment (e.g. different device count): treat as corrupt
            fresh = False
        os.ftruncate(fd, size)
        mm = mmap.mmap(fd, size)
        handle = cls(path, fd, mm, len(specs))

        def initialise() -> None:
            led = Ledger(policy, [DeviceState(s.total_bytes, 0) for s in specs])
            handle.store(led)

        if fresh or bytes(mm[:8]) == b"\x00" * 8:
            initialise()
            return handle, "initialised"
        try:
            led = handle.load()
            if audit(led):
                raise SegmentCorruptError("audit failed")
            return handle, "attached"
        except SegmentCorruptError:
            pass
        if backup_path:
            try:
                led = restore_backup(backup_path)
                if len(led.devices) == len(specs) and not audit(led):
                    handle.store(led)
                    return handle, "recovered"
            except BackupInvalidError:
                pass
        initialise()
        return handle, "reinitialised"

    def load(self, verify: bool = True) -> Ledger:
        return Ledger.from_bytes(bytes(self._mm), verify=verify)

    def store(self, led: Ledger) -> None:
        raw = led.to_bytes()
        if len(raw) != len(self._mm):
            raise ValueError("ledger/segment size mismatch")
        self._mm[:] = raw

    def record_alloc(self, client: ClientId, device: int, nbytes: int) -> None:
        led = self.load()
        led.add_alloc(client, device, nbytes)
        self.store(led)

    def record_free(self, client: ClientId, device: int, nbytes: int) -> tuple[int, bool]:
        led = self.load()
        freed, clamped = led.remove_alloc(client, device, nbytes)
        self.store(led)
        return freed, clamped

    def close(self) -> None:
        if self._mm is not None:
            self._mm.close()
            os.close(self._fd)
            self._mm = None

    def destroy(self) -> None:
        self.close()
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
