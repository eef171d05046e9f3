"""Cross-process mutual exclusion and wake notification.

Two backends with the same surface:

  FileLockBackend  (primary)  -- flock on a lock file plus a user signal for
      wakeups. The OS releases flock when the holder dies, so a crashed client
      never wedges the others; that is the whole point of this backend.

  MutexBackend  (alternate)   -- an O_EXCL sentinel file standing in for an
      interprocess mutex, with a polled wake file standing in for a condition
      variable. Functionally equivalent while everyone behaves, but a holder
      that dies leaves the sentinel behind and every other process blocks
      forever: the abandonment failure mode, kept around so the test suite
      can demonstrate it.

Within one process the wake machinery is a singleton: one designated signal,
one latched flag, one self-pipe. The signal handler only sets the flag; the
self-pipe (via signal.set_wakeup_fd) is what lets wait() return promptly.
"""

from __future__ import annotations

import enum
import errno
import fcntl
import os
import select
import signal
import time
from dataclasses import dataclass

from . import procs
from .errors import DeadTargetError, HandlerConflictError, LockTimeoutError
from .ledger import ClientId

DEFAULT_SIGNAL = signal.SIGUSR1
_BACKOFF_START = 0.00005
_BACKOFF_CAP = 0.001  # portable file-lock APIs lack timed acquire; bounded retry


class WakeReason(enum.Enum):
    NOTIFIED = "notified"
    TIMEOUT = "timeout"
    SPURIOUS = "spurious"


@dataclass
class LockGuard:
    lock_path: str
    acquired_at: float
    _release: callable = None

    def release(self) -> None:
        if self._release is not None:
            self._release()
            self._release = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


# process-local wake state (only _wake_flag is touched from signal context)
_wake_flag = False
_wake_pipe: tuple[int, int] | None = None
_installed_signum: int | None = None


def _on_wake(signum, frame):
    global _wake_flag
    _wake_flag = True


def install_wake_handler(signum: int = DEFAULT_SIGNAL) -> None:
    """Route ``signum`` to the latched wake flag. Idempotent per process."""
    global _wake_pipe, _installed_signum
    if _installed_signum == signum:
        return
    current = signal.getsignal(signum)
    if current not in (signal.SIG_DFL, signal.SIG_IGN, None, _on_wake):
        raise HandlerConflictError(
            f"signal {signum} already has a handler installed by the host application"
        )
    if _wake_pipe is None:
        r, w = os.pipe()
        os.set_blocking(r, False)
        os.set_blocking(w, False)
        _wake_pipe = (r, w)
    signal.set_wakeup_fd(_wake_pipe[1], warn_on_full_buffer=False)
    signal.signal(signum, _on_wake)
    _installed_signum = signum


def _reset_wake_state() -> None:
    # called after fork: the child must not inherit the parent's latch/pipe
    global _wake_flag, _wake_pipe, _installed_signum
    _wake_flag = False
    _wake_pipe = None
    _installed_signum = None


os.register_at_fork(after_in_child=_reset_wake_state)


def clear_wake() -> None:
    """Reset the latch. Call while holding the lock, before sleeping."""
    global _wake_flag
    _wake_flag = False
    if _wake_pipe is not None:
        _drain(_wake_pipe[0])


def _drain(fd: int) -> None:
    try:
        while os.read(fd, 512):
            pass
    except (BlockingIOError, InterruptedError):
        pass


def wake_pending() -> bool:
    return _wake_flag


def wait(deadline: float) -> WakeReason:
    """Sleep until the wake flag latches or ``deadline`` (epoch secs) passes.

    Spurious signal deliveries (anything that pokes the wakeup fd without our
    flag being set) are absorbed internally.
    """
    global _wake_flag
    if _wake_pipe is None:
        raise RuntimeError("install_wake_handler() not called")
    rfd = _wake_pipe[0]
    while True:
        if _wake_flag:
            _wake_flag = False
            _drain(rfd)
            return WakeReason.NOTIFIED
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return WakeReason.TIMEOUT
        try:
            select.select([rfd], [], [], min(remaining, 60.0))
        except InterruptedError:
            pass
        _drain(rfd)
        # loop re-checks the flag; a non-wake signal is a spurious wake


class FileLockBackend:
    """Exclusive lock via flock; wakeups via a user signal."""

    def __init__(self, lock_path: str, signum: int = DEFAULT_SIGNAL):
        self.lock_path = lock_path
        self.signum = signum
        self._fd: int | None = None

    def install_wake_handler(self) -> None:
        install_wake_handler(self.signum)

    def acquire(self, deadline: float | None = None) -> LockGuard:
        """Block (with bounded-backoff retry) until the flock is ours.

        If a previous holder died mid-critical-section the OS has already
        released the flock, so this succeeds without any recovery step.
        """
        if self._fd is None:
            self._fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT, 0o600)
        backoff = _BACKOFF_START
        while True:
            try:
                fcntl.flock(self._fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                return LockGuard(self.lock_path, time.monotonic(), self._unlock)
            except OSError as exc:
                if exc.errno not in (errno.EAGAIN, errno.EACCES):
                    raise
            if deadline is not None and time.monotonic() >= deadline:
                raise LockTimeoutError(f"could not acquire {self.lock_path}")
            time.sleep(backoff)
            backoff = min(backoff * 2, _BACKOFF_CAP)

    def _unlock(self) -> None:
        fcntl.flock(self._fd, fcntl.LOCK_UN)

    def notify(self, client: ClientId) -> None:
        """Signal ``client`` iff that exact process incarnation is alive.

        Caller holds the lock and has already marked the target's wait entry
        GRANTED; a DeadTargetError tells it to reclaim the reservation.
        """
        if not procs.is_alive(client.pid, client.start_token):
            raise DeadTargetError(f"client pid={client.pid} is gone")
        try:
            os.kill(client.pid, self.signum)
        except ProcessLookupError:
            raise DeadTargetError(f"client pid={client.pid} is gone")

    def wait(self, deadline: float) -> WakeReason:
        return wait(deadline)

    def clear_wake(self) -> None:
        clear_wake()

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class MutexBackend:
    """Interprocess-mutex-style lock: NOT crash-safe, by design.

    acquire() atomically creates a sentinel file; release() unlinks it. A
    holder killed mid-section leaves the sentinel behind and everyone else
    spins until their deadline: abandonment. Wakeups are per-client files
    polled by the waiter (the condition-variable analogue).
    """

    def __init__(self, lock_path: str, signum: int = DEFAULT_SIGNAL):
        self.lock_path = lock_path + ".mtx"
        self._wake_dir = lock_path + ".cond"
        self._poll = 0.002
        self._held = False

    def install_wake_handler(self) -> None:
        os.makedirs(self._wake_dir, exist_ok=True)

    def acquire(self, deadline: float | None = None) -> LockGuard:
        backoff = _BACKOFF_START
        while True:
            try:
                fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o600)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                self._held = True
                return LockGuard(self.lock_path, time.monotonic(), self._unlock)
            except FileExistsError:
                pass
            if deadline is not None and time.monotonic() >= deadline:
                raise LockTimeoutError(f"could not acquire {self.lock_path}")
            time.sleep(backoff)
            backoff = min(backoff * 2, _BACKOFF_CAP)

    def _unlock(self) -> None:
        self._held = False
        try:
            os.unlink(self.lock_path)
        except FileNotFoundError:
            pass

    def _wake_path(self, client: ClientId) -> str:
        return os.path.join(self._wake_dir, f"{client.pid}.{client.start_token}")

    def notify(self, client: ClientId) -> None:
        if not procs.is_alive(client.pid, client.start_token):
            raise DeadTargetError(f"client pid={client.pid} is gone")
        os.makedirs(self._wake_dir, exist_ok=True)
        with open(self._wake_path(client), "w"):
            pass

    def wait(self, deadline: float) -> WakeReason:
        me = ClientId(os.getpid(), procs.self_token(), 0)
        path = self._wake_path(me)
        while True:
            try:
                os.unlink(path)
                return WakeReason.NOTIFIED
            except FileNotFoundError:
                pass
            if time.monotonic() >= deadline:
                return WakeReason.TIMEOUT
            time.sleep(self._poll)

    def clear_wake(self) -> None:
        me = ClientId(os.getpid(), procs.self_token(), 0)
        try:
            os.unlink(self._wake_path(me))
        except FileNotFoundError:
            pass

    def close(self) -> None:
        pass


def make_backend(kind: str, lock_path: str, signum: int = DEFAULT_SIGNAL):
    if kind == "filelock":
        return FileLockBackend(lock_path, signum)
    if kind == "mutex":
        return MutexBackend(lock_path, signum)
    raise ValueError(f"unknown lock backend {kind!r}")
