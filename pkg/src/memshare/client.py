"""Client lifecycle: init, pre-allocation, post-free, sanity check, shutdown.

A process reserves a byte budget in the shared ledger *before* touching the
device (pre-allocation) and returns it afterwards (post-free), so a granted
reservation guarantees the device allocations cannot fail for lack of
memory. Grants to waiting clients are committed by the notifier inside its
critical section (reservation-at-notify): by the time the wake signal goes
out, the waiter's bytes are already accounted in total_used, so no racing
third client can steal them while the waiter is waking up.

One session per process; the session API is single-threaded.
"""

from __future__ import annotations

import atexit
import enum
import logging
import math
import os
import time

from . import coord, procs
from .config import Settings
from .errors import DeviceOOMError, MemshareError, PolicyMismatchError
from .ledger import (
    GRANTED,
    WAITING,
    ClientId,
    Ledger,
    LedgerHandle,
    WaitEntry,
    write_backup,
)
from .policy import PolicyKind, select_grants

log = logging.getLogger("memshare")


class AllocOutcome(enum.Enum):
    GRANTED = "granted"
    NOT_READY = "not_ready"
    TIMED_OUT = "timed_out"
    INVALID_DEVICE = "invalid_device"
    TOO_LARGE = "too_large"


class Mode(enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


def sanity_check(led: Ledger) -> int:
    """Reclaim the holdings of dead clients. Caller holds the lock.

    Removes allocation records and GRANTED reservations whose owning process
    incarnation is gone, decrementing totals; dead WAITING entries are pruned
    too (they can never be woken and would clog the queue). Returns the
    number of bytes reclaimed.
    """
    reclaimed = 0
    for rec in list(led.allocations):
        if not procs.is_alive(rec.client.pid, rec.client.start_token):
            led.allocations.remove(rec)
            led.devices[rec.device].used -= rec.nbytes
            reclaimed += rec.nbytes
    for e in list(led.wait_queue):
        if not procs.is_alive(e.client.pid, e.client.start_token):
            led.wait_queue.remove(e)
            if e.state == GRANTED:
                led.devices[e.device].used -= e.nbytes
                reclaimed += e.nbytes
    return reclaimed


def _grant_round(led: Ledger, kind: PolicyKind) -> list[WaitEntry]:
    """Apply the policy on every device; mark selections GRANTED.

    Returns the newly granted entries (their bytes are now reserved in
    total_used). Loops to a fixpoint so bytes reclaimed from a dead waiter
    discovered mid-round are re-offered in the same call.
    """
    newly = []
    for dev in range(len(led.devices)):
        while True:
            waiting = [e for e in led.wait_queue
                       if e.device == dev and e.state == WAITING]
            grants = select_grants(waiting, led.free(dev), kind)
            if not grants:
                break
            for cid in grants:
                e = next(x for x in waiting if x.client == cid)
                e.state = GRANTED
                led.devices[dev].used += e.nbytes
                newly.append(e)
    return newly


def grant_and_notify(led: Ledger, handle: LedgerHandle, backend,
                     kind: PolicyKind) -> list[WaitEntry]:
    """Run grant rounds, persist, then signal the winners (lock still held).

    A target found dead at notify time has its reservation rolled back and
    the selection re-runs with the reclaimed bytes.
    """
    notified = []
    while True:
        newly = _grant_round(led, kind)
        handle.store(led)
        if not newly:
            return notified
        lost = False
        for e in newly:
            try:
                backend.notify(e.client)
                notified.append(e)
            except coord.DeadTargetError:
                led.remove_entry(e)
                led.devices[e.device].used -= e.nbytes
                lost = True
        if not lost:
            handle.store(led)
            return notified


class ClientSession:
    def __init__(self, settings: Settings, backend, handle: LedgerHandle,
                 client_id: ClientId, mode: Mode = Mode.EXPLICIT):
        self.settings = settings
        self.backend = backend
        self.handle = handle
        self.id = client_id
        self.policy = settings.policy
        self.mode = mode
        self.my_allocs: dict[int, int] = {}
        self.closed = False

    # -- pre-allocation --

    def pre_alloc(self, device: int, nbytes: int, blocking: bool = True,
                  timeout_ms: float | None = None,
                  priority: int | None = None) -> AllocOutcome:
        if nbytes <= 0:
            raise ValueError("nbytes must be positive")
        if priority is None:
            priority = self.settings.priority
        if timeout_ms is None:
            timeout_ms = self.settings.timeout_ms
        deadline = (math.inf if math.isinf(timeout_ms)
                    else time.monotonic() + timeout_ms / 1000.0)

        with self.backend.acquire():
            led = self.handle.load()
            if device >= len(led.devices):
                return AllocOutcome.INVALID_DEVICE
            if nbytes > led.devices[device].total:
                return AllocOutcome.TOO_LARGE
            if led.free(device) < nbytes:
                if sanity_check(led):
                    self.handle.store(led)
            if led.free(device) >= nbytes:
                led.add_alloc(self.id, device, nbytes)
                self.handle.store(led)
                self.my_allocs[device] = self.my_allocs.get(device, 0) + nbytes
                return AllocOutcome.GRANTED
            if not blocking:
                return AllocOutcome.NOT_READY
            led.enqueue(self.id, device, nbytes, priority, deadline)
            self.backend.clear_wake()
            self.handle.store(led)
        return self._wait_for_grant(device, nbytes, deadline, priority)

    def _wait_for_grant(self, device: int, nbytes: int,
                        deadline: float, priority: int) -> AllocOutcome:
        interval = self.settings.sanity_interval_ms / 1000.0
        while True:
            slice_end = min(deadline, time.monotonic() + interval)
            reason = self.backend.wait(slice_end)
            with self.backend.acquire():
                led = self.handle.load()
                e = led.find_entry(self.id, device)
                if e is not None and e.state == GRANTED:
                    led.absorb_grant(e)
                    self.handle.store(led)
                    self.my_allocs[device] = self.my_allocs.get(device, 0) + nbytes
                    return AllocOutcome.GRANTED
                if e is None:
                    # entry vanished without a grant (recovery reset); retry
                    # from scratch below by re-enqueueing
                    if time.monotonic() >= deadline:
                        return AllocOutcome.TIMED_OUT
                    led.enqueue(self.id, device, nbytes, priority, deadline)
                    self.handle.store(led)
                    continue
                if time.monotonic() >= deadline:
                    led.remove_entry(e)
                    self.handle.store(led)
                    return AllocOutcome.TIMED_OUT
                if reason is coord.WakeReason.TIMEOUT:
                    # periodic sanity pass: a holder may have died without
                    # ever post-freeing; reclaim and re-run selection
                    if sanity_check(led):
                        grant_and_notify(led, self.handle, self.backend,
                                         self.policy)
                        e = led.find_entry(self.id, device)
                        if e is not None and e.state == GRANTED:
                            led.absorb_grant(e)
                            self.handle.store(led)
                            self.my_allocs[device] = (
                                self.my_allocs.get(device, 0) + nbytes)
                            return AllocOutcome.GRANTED
                        self.handle.store(led)

    # -- post-free --

    def post_free(self, device: int, nbytes: int) -> None:
        if nbytes <= 0:
            raise ValueError("nbytes must be positive")
        with self.backend.acquire():
            led = self.handle.load()
            if device >= len(led.devices):
                raise MemshareError(f"invalid device {device}")
            freed, clamped = led.remove_alloc(self.id, device, nbytes)
            if clamped:
                log.warning("post_free of %d bytes exceeds holding on device %d; "
                            "clamped to %d", nbytes, device, freed)
            self.my_allocs[device] = max(0, self.my_allocs.get(device, 0) - nbytes)
            grant_and_notify(led, self.handle, self.backend, self.policy)

    # -- sanity / shutdown --

    def run_sanity(self) -> int:
        with self.backend.acquire():
            led = self.handle.load()
            reclaimed = sanity_check(led)
            grant_and_notify(led, self.handle, self.backend, self.policy)
            return reclaimed

    def shutdown(self) -> None:
        """Release everything this session holds. Safe to call repeatedly;
        never raises into the host application's exit path."""
        if self.id.pid != os.getpid():
            return  # inherited across fork: only the owning process may act
        if self.closed:
            return
        self.closed = True
        atexit.unregister(self.shutdown)
        global _session
        if _session is self:
            _session = None
        try:
            with self.backend.acquire():
                led = self.handle.load()
                for rec in list(led.allocations):
                    if rec.client == self.id:
                        led.remove_alloc(self.id, rec.device, rec.nbytes)
                for e in list(led.wait_queue):
                    if e.client == self.id:
                        if e.state == GRANTED:
                            led.devices[e.device].used -= e.nbytes
                        led.remove_entry(e)
                self.my_allocs.clear()
                sanity_check(led)
                grant_and_notify(led, self.handle, self.backend, self.policy)
                try:
                    write_backup(led, self.settings.backup_path)
                except OSError as exc:
                    log.warning("backup write failed: %s", exc)
        except Exception as exc:
            log.warning("shutdown error (ignored): %s", exc)
        finally:
            try:
                self.handle.close()
                self.backend.close()
            except Exception:
                pass


_session: ClientSession | None = None


def _reset_session_after_fork() -> None:
    global _session
    _session = None


os.register_at_fork(after_in_child=_reset_session_after_fork)


def sched_init(settings: Settings | None = None,
               mode: Mode = Mode.EXPLICIT) -> ClientSession:
    """Initialise this process's session. Idempotent: a second call returns
    the live session."""
    global _session
    if _session is not None and not _session.closed:
        return _session
    if settings is None:
        settings = Settings.from_env()
    if settings.backend == "server":
        from . import server
        _session = server.remote_session(settings, mode=mode)
        return _session

    backend = coord.make_backend(settings.lock_backend, settings.lock_path,
                                 settings.signum)
    backend.install_wake_handler()
    with backend.acquire():
        handle, how = LedgerHandle.open_or_create(
            settings.segment_path, settings.provider(),
            settings.policy.code, settings.backup_path)
        led = handle.load()
        if led.policy != settings.policy.code:
            handle.close()
            raise PolicyMismatchError(
                f"segment policy {PolicyKind.from_code(led.policy).value} != "
                f"requested {settings.policy.value}")
        if how == "recovered":
            try:
                write_backup(led, settings.backup_path)
            except OSError:
                pass
        seq = led.register()
        handle.store(led)
    client_id = ClientId(os.getpid(), procs.self_token(), seq)
    _session = ClientSession(settings, backend, handle, client_id, mode)
    atexit.register(_session.shutdown)
    return _session


# module-level API mirroring the three-function lifecycle


def pre_alloc(session: ClientSession, device: int, nbytes: int,
              blocking: bool = True, timeout_ms: float | None = None,
              priority: int | None = None) -> AllocOutcome:
    return session.pre_alloc(device, nbytes, blocking, timeout_ms, priority)


def post_free(session: ClientSession, device: int, nbytes: int) -> None:
    session.post_free(device, nbytes)


def shutdown(session: ClientSession) -> None:
    session.shutdown()


class ManagedDevice:
    """Implicit-mode wrapper: device alloc/free with the reservation protocol
    spliced in, so unmodified application code never sees a device OOM."""

    def __init__(self, session: ClientSession, sim, timeout_ms: float | None = None):
        self.session = session
        self.sim = sim
        self.timeout_ms = timeout_ms
        self._handles: dict[int, tuple[int, int]] = {}

    def alloc(self, device: int, nbytes: int) -> int:
        outcome = self.session.pre_alloc(device, nbytes, blocking=True,
                                         timeout_ms=self.timeout_ms)
        if outcome is not AllocOutcome.GRANTED:
            # the device API's out-of-memory analogue
            raise DeviceOOMError(f"pre-allocation failed: {outcome.value}")
        try:
            h = self.sim.sim_alloc(device, nbytes)
        except DeviceOOMError:
            self.session.post_free(device, nbytes)
            raise
        self._handles[h] = (device, nbytes)
        return h

    def free(self, handle: int) -> None:
        device, nbytes = self._handles.pop(handle)
        self.sim.sim_free(device, handle)
        self.session.post_free(device, nbytes)
