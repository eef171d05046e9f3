"""Client-server backend: a daemon owns the ledger, clients talk over a
local stream socket.

Kept as the overhead-comparison foil and robustness counterexample: the
daemon is a single point of failure (if it dies, every client fails),
which is precisely what the shared-memory backend exists to avoid.

Wire protocol (little-endian, fixed layout, see docs/format.md):

    header  op u8, body_len u32
    INIT      pid u32, start_token u64, policy u8
      reply   status u8, seq u16, ndev u16, ndev x total_bytes u64
    PREALLOC  device u16, nbytes u64, blocking u8, timeout_ms f64, priority u32
      reply   status u8 (AllocOutcome code)
    POSTFREE  device u16, nbytes u64
      reply   status u8
    SHUTDOWN  (empty)
      reply   status u8

Requests and replies alternate strictly on each connection. A dropped
connection is treated as client death: its holdings are reclaimed and
waiters re-selected, mirroring the shared-memory sanity check.
"""

from __future__ import annotations

import logging
import math
import os
import socket
import socketserver
import struct
import threading
import time

from .client import AllocOutcome, Mode, _grant_round
from .config import Settings
from .errors import BindError, MemshareError
from .ledger import ClientId, DeviceState, Ledger
from .policy import PolicyKind

log = logging.getLogger("memshare.server")

OP_INIT = 1
OP_PREALLOC = 2
OP_POSTFREE = 3
OP_SHUTDOWN = 4
OP_REPLY = 5

_HDR = struct.Struct("<BI")
_INIT = struct.Struct("<IQB")
_INIT_REPLY_HEAD = struct.Struct("<BHH")
_PREALLOC = struct.Struct("<HQBdI")
_POSTFREE = struct.Struct("<HQ")
_STATUS = struct.Struct("<B")

_OUTCOME_CODE = {
    AllocOutcome.GRANTED: 0,
    AllocOutcome.NOT_READY: 1,
    AllocOutcome.TIMED_OUT: 2,
    AllocOutcome.INVALID_DEVICE: 3,
    AllocOutcome.TOO_LARGE: 4,
}
_CODE_OUTCOME = {v: k for k, v in _OUTCOME_CODE.items()}

STATUS_OK = 0
STATUS_ERR = 255


def send_msg(sock: socket.socket, op: int, body: bytes = b"") -> None:
    sock.sendall(_HDR.pack(op, len(body)) + body)


def recv_msg(sock: socket.socket) -> tuple[int, bytes]:
    hdr = _recv_exact(sock, _HDR.size)
    op, length = _HDR.unpack(hdr)
    return op, _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        data = sock.recv(n)
        if not data:
            raise ConnectionError("peer closed the connection")
        chunks.append(data)
        n -= len(data)
    return b"".join(chunks)


class SchedServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    """One handler thread per connection; ledger mutations serialized by an
    internal lock. Every commit reserializes and checksums the ledger through
    the same routine the shared segment uses, so the two backends share one
    integrity path."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, socket_path: str, provider, kind: PolicyKind):
        specs = provider.enumerate()
        if not specs:
            raise MemshareError("provider enumerated no devices")
        self.kind = kind
        self.cond = threading.Condition()
        # the serialized image is the state of record, exactly as it is for
        # the shared segment: every request deserializes, mutates and
        # reserializes through the same routines, so the two backends do
        # identical ledger work and differ only by the socket round trip
        self._image = Ledger(
            kind.code, [DeviceState(s.total_bytes, 0) for s in specs]
        ).to_bytes()
        try:
            if os.path.exists(socket_path):
                os.unlink(socket_path)
            super().__init__(socket_path, _Handler)
        except OSError as exc:
            raise BindError(f"cannot bind {socket_path}: {exc}") from exc

    def load(self) -> Ledger:
        # must hold self.cond
        return Ledger.from_bytes(self._image)

    def commit(self, led: Ledger) -> None:
        # must hold self.cond
        self._image = led.to_bytes()

    def cleanup_client(self, client: ClientId) -> None:
        with self.cond:
            led = self.load()
            for rec in list(led.allocations):
                if rec.client == client:
                    led.remove_alloc(client, rec.device, rec.nbytes)
            for e in list(led.wait_queue):
                if e.client == client:
                    if e.state == 1:  # GRANTED reservation never picked up
                        led.devices[e.device].used -= e.nbytes
                    led.wait_queue.remove(e)
            _grant_round(led, self.kind)
            self.commit(led)
            self.cond.notify_all()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: SchedServer = self.server
        client: ClientId | None = None
        sock = self.request
        try:
            while True:
                op, body = recv_msg(sock)
                if op == OP_INIT:
                    pid, token, policy_code = _INIT.unpack(body)
                    with server.cond:
                        if policy_code != server.kind.code:
                            send_msg(sock, OP_REPLY,
                                     _INIT_REPLY_HEAD.pack(STATUS_ERR, 0, 0))
                            continue
                        led = server.load()
                        seq = led.register()
                        server.commit(led)
                        client = ClientId(pid, token, seq)
                        totals = b"".join(
                            struct.pack("<Q", d.total) for d in led.devices)
                        reply = _INIT_REPLY_HEAD.pack(
                            STATUS_OK, seq, len(led.devices)) + totals
                    send_msg(sock, OP_REPLY, reply)
                elif op == OP_PREALLOC:
                    device, nbytes, blocking, timeout_ms, priority = _PREALLOC.unpack(body)
                    outcome = self._prealloc(server, client, device, nbytes,
                                             bool(blocking), timeout_ms, priority)
                    send_msg(sock, OP_REPLY, _STATUS.pack(_OUTCOME_CODE[outcome]))
                elif op == OP_POSTFREE:
                    device, nbytes = _POSTFREE.unpack(body)
                    with server.cond:
                        led = server.load()
                        led.remove_alloc(client, device, nbytes)
                        _grant_round(led, server.kind)
                        server.commit(led)
                        server.cond.notify_all()
                    send_msg(sock, OP_REPLY, _STATUS.pack(STATUS_OK))
                elif op == OP_SHUTDOWN:
                    if client is not None:
                        server.cleanup_client(client)
                    send_msg(sock, OP_REPLY, _STATUS.pack(STATUS_OK))
                    return
                else:
                    send_msg(sock, OP_REPLY, _STATUS.pack(STATUS_ERR))
        except ConnectionError:
            pass
        except Exception as exc:  # per-connection errors stay isolated
            log.warning("connection handler error: %s", exc)
        finally:
            if client is not None:
                server.cleanup_client(client)

    @staticmethod
    def _prealloc(server: SchedServer, client: ClientId, device: int,
                  nbytes: int, blocking: bool, timeout_ms: float,
                  priority: int) -> AllocOutcome:
        deadline = (math.inf if math.isinf(timeout_ms) or timeout_ms < 0
                    else time.monotonic() + timeout_ms / 1000.0)
        with server.cond:
            led = server.load()
            if device >= len(led.devices):
                return AllocOutcome.INVALID_DEVICE
            if nbytes > led.devices[device].total:
                return AllocOutcome.TOO_LARGE
            if led.free(device) >= nbytes:
                led.add_alloc(client, device, nbytes)
                server.commit(led)
                return AllocOutcome.GRANTED
            if not blocking:
                return AllocOutcome.NOT_READY
            led.enqueue(client, device, nbytes, priority, deadline)
            server.commit(led)
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    led = server.load()
                    entry = led.find_entry(client, device)
                    if entry is not None and entry.state == 1:
                        led.absorb_grant(entry)
                        server.commit(led)
                        return AllocOutcome.GRANTED
                    if entry is not None:
                        led.wait_queue.remove(entry)
                        server.commit(led)
                    return AllocOutcome.TIMED_OUT
                server.cond.wait(None if math.isinf(remaining) else remaining)
                led = server.load()  # grants land in the committed image
                entry = led.find_entry(client, device)
                if entry is not None and entry.state == 1:
                    led.absorb_grant(entry)
                    server.commit(led)
                    return AllocOutcome.GRANTED
                if entry is None:  # recovery reset; re-enqueue
                    led.enqueue(client, device, nbytes, priority, deadline)
                    server.commit(led)


def serve(socket_path: str, provider, kind: PolicyKind) -> SchedServer:
    """Build the server; caller drives serve_forever()."""
    return SchedServer(socket_path, provider, kind)


class RemoteSession:
    """Client-side session speaking the wire protocol; same outcomes as the
    shared-memory session so callers cannot tell the backends apart."""

    def __init__(self, settings: Settings, mode: Mode = Mode.EXPLICIT):
        from . import procs
        self.settings = settings
        self.policy = settings.policy
        self.mode = mode
        self.my_allocs: dict[int, int] = {}
        self.closed = False
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._sock.connect(settings.socket_path)
        except OSError as exc:
            raise MemshareError(
                f"cannot reach server at {settings.socket_path}: {exc}") from exc
        send_msg(self._sock, OP_INIT,
                 _INIT.pack(os.getpid(), procs.self_token(),
                            settings.policy.code))
        op, body = recv_msg(self._sock)
        status, seq, ndev = _INIT_REPLY_HEAD.unpack_from(body, 0)
        if status != STATUS_OK:
            self._sock.close()
            from .errors import PolicyMismatchError
            raise PolicyMismatchError("server rejected init (policy mismatch)")
        self.id = ClientId(os.getpid(), procs.self_token(), seq)
        self.device_totals = list(struct.unpack_from(f"<{ndev}Q", body,
                                                     _INIT_REPLY_HEAD.size))

    def pre_alloc(self, device: int, nbytes: int, blocking: bool = True,
                  timeout_ms: float | None = None,
                  priority: int | None = None) -> AllocOutcome:
        if timeout_ms is None:
            timeout_ms = self.settings.timeout_ms
        if priority is None:
            priority = self.settings.priority
        send_msg(self._sock, OP_PREALLOC,
                 _PREALLOC.pack(device, nbytes, int(blocking),
                                float(timeout_ms), priority))
        op, body = recv_msg(self._sock)
        outcome = _CODE_OUTCOME[_STATUS.unpack(body)[0]]
        if outcome is AllocOutcome.GRANTED:
            self.my_allocs[device] = self.my_allocs.get(device, 0) + nbytes
        return outcome

    def post_free(self, device: int, nbytes: int) -> None:
        send_msg(self._sock, OP_POSTFREE, _POSTFREE.pack(device, nbytes))
        recv_msg(self._sock)
        self.my_allocs[device] = max(0, self.my_allocs.get(device, 0) - nbytes)

    def shutdown(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            send_msg(self._sock, OP_SHUTDOWN)
            recv_msg(self._sock)
        except OSError:
            pass
        finally:
            self._sock.close()
        from . import client as client_mod
        if client_mod._session is self:
            client_mod._session = None


def remote_session(settings: Settings, mode: Mode = Mode.EXPLICIT) -> RemoteSession:
    return RemoteSession(settings, mode)


def main(argv=None) -> int:
    """Run the daemon: python -m memshare.server --socket S --device-config F."""
    import argparse

    from .device import load_device_spec, StaticProvider

    ap = argparse.ArgumentParser(prog="memshare-server")
    ap.add_argument("--socket", required=True)
    ap.add_argument("--device-config", required=True)
    ap.add_argument("--policy", default="fifo")
    args = ap.parse_args(argv)
    specs = load_device_spec(args.device_config)
    srv = serve(args.socket, StaticProvider(specs), PolicyKind.parse(args.policy))
    try:
        srv.serve_forever(poll_interval=0.05)
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
