"""Process liveness checks that survive pid reuse.

A process incarnation is identified by (pid, start token) where the start
token is the kernel's process start time in clock ticks since boot
(field 22 of /proc/<pid>/stat). A recycled pid gets a different token, so
a stale ClientId never matches a new process.
"""

import os


def start_token(pid: int) -> int | None:
    """Return the start token for ``pid``, or None if the process is gone."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as f:
            data = f.read()
    except (FileNotFoundError, ProcessLookupError, PermissionError):
        return None
    # comm may contain spaces/parens; fields resume after the last ')'
    rest = data.rsplit(b")", 1)[-1].split()
    # rest[0] is field 3 (state); starttime is field 22
    try:
        if rest[0] == b"Z":  # zombie: the process is dead, only unreaped
            return None
        return int(rest[19])
    except (IndexError, ValueError):
        return None


def self_token() -> int:
    tok = start_token(os.getpid())
    if tok is None:
        raise RuntimeError("cannot read own /proc entry")
    return tok


def is_alive(pid: int, token: int) -> bool:
    """True iff the process incarnation (pid, token) is still running."""
    return start_token(pid) == token
