"""memsharectl: operator tool for inspecting, recovering and benchmarking.

Exit codes are a stable scripting contract:
  0 ok, 1 usage error, 2 integrity failure, 3 refused, 4 runtime error.
Human-readable tables go to stderr; CSV/JSON payloads go to stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

from . import coord, procs
from .client import grant_and_notify, sanity_check
from .config import Settings
from .device import MIB, load_device_spec, parse_device_config
from .errors import MemshareError, SegmentCorruptError
from .harness import (
    DEFAULT_DEVICE,
    WorkloadSpec,
    bench_overhead,
    run_workload,
    sequential_baseline,
    simulate,
)
from .ledger import GRANTED, Ledger, LedgerHandle, audit, write_backup
from .policy import PolicyKind, select_grants

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_REFUSED = 3
EXIT_RUNTIME = 4


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _settings(args) -> Settings:
    if args.device_config:
        devices = load_device_spec(args.device_config)
    elif os.environ.get("MEMSHARE_DEVICE_CONFIG"):
        devices = load_device_spec(os.environ["MEMSHARE_DEVICE_CONFIG"])
    elif os.path.exists("./devices.json"):
        devices = load_device_spec("./devices.json")
    else:
        devices = parse_device_config(DEFAULT_DEVICE)
    overrides = {}
    if getattr(args, "policy", None):
        overrides["policy"] = PolicyKind.parse(args.policy)
    if getattr(args, "priority", None) is not None:
        overrides["priority"] = args.priority
    if getattr(args, "timeout_ms", None) is not None:
        overrides["timeout_ms"] = args.timeout_ms
    if getattr(args, "backend", None):
        overrides["backend"] = args.backend
    return Settings.from_env(devices=devices, **overrides)


def cmd_status(args) -> int:
    settings = _settings(args)
    if not os.path.exists(settings.segment_path):
        print("no segment; 0 clients, 0 waiting, audit OK", file=sys.stderr)
        return EXIT_OK
    backend = coord.FileLockBackend(settings.lock_path, settings.signum)
    with backend.acquire(deadline=time.monotonic() + 10):
        # read-only: status must never repair or reinitialise the segment
        with open(settings.segment_path, "rb") as f:
            raw = f.read()
    backend.close()
    try:
        led = Ledger.from_bytes(raw)
    except SegmentCorruptError as exc:
        print(f"audit FAILED: segment corrupt ({exc})", file=sys.stderr)
        return EXIT_INTEGRITY
    violations = audit(led)
    out = sys.stderr
    for i, d in enumerate(led.devices):
        print(f"device {i}: total {d.total // MIB} MiB, "
              f"used {d.used // MIB} MiB, free {(d.total - d.used) // MIB} MiB",
              file=out)
    for rec in led.allocations:
        alive = procs.is_alive(rec.client.pid, rec.client.start_token)
        mark = "live" if alive else "DEAD"
        print(f"  alloc pid {rec.client.pid} [{mark}] device {rec.device} "
              f"{rec.nbytes // MIB} MiB", file=out)
    for e in led.wait_queue:
        state = "GRANTED" if e.state == GRANTED else "waiting"
        dl = "inf" if math.isinf(e.deadline) else f"{e.deadline:.1f}"
        print(f"  wait pid {e.client.pid} device {e.device} "
              f"{e.nbytes // MIB} MiB prio {e.priority} deadline {dl} "
              f"[{state}]", file=out)
    nwait = len(led.wait_queue)
    if violations:
        print("audit FAILED: " + "; ".join(violations), file=out)
        return EXIT_INTEGRITY
    print(f"{len(led.allocations)} clients, {nwait} waiting, audit OK", file=out)
    return EXIT_OK


def cmd_recover(args) -> int:
    settings = _settings(args)
    backend = coord.FileLockBackend(settings.lock_path, settings.signum)
    with backend.acquire(deadline=time.monotonic() + 10):
        handle, how = LedgerHandle.open_or_create(
            settings.segment_path, settings.provider(),
            settings.policy.code, settings.backup_path)
        try:
            led = handle.load()
            reclaimed = sanity_check(led)
            grant_and_notify(led, handle, backend, settings.policy)
            violations = audit(led)
            if not violations:
                write_backup(led, settings.backup_path)
        finally:
            handle.close()
    backend.close()
    print(f"segment {how}; reclaimed {reclaimed} bytes", file=sys.stderr)
    if violations:
        print("audit FAILED: " + "; ".join(violations), file=sys.stderr)
        return EXIT_INTEGRITY
    print("audit OK", file=sys.stderr)
    return EXIT_OK


def cmd_reset(args) -> int:
    settings = _settings(args)
    if os.path.exists(settings.segment_path) and not args.force:
        backend = coord.FileLockBackend(settings.lock_path, settings.signum)
        with backend.acquire(deadline=time.monotonic() + 10):
            handle, _ = LedgerHandle.open_or_create(
                settings.segment_path, settings.provider(),
                settings.policy.code, settings.backup_path)
            try:
                led = handle.load()
            finally:
                handle.close()
        backend.close()
        live = {rec.client for rec in led.allocations
                if procs.is_alive(rec.client.pid, rec.client.start_token)}
        live |= {e.client for e in led.wait_queue
                 if procs.is_alive(e.client.pid, e.client.start_token)}
        if live:
            _err(f"refusing reset: {len(live)} live client(s); use --force")
            return EXIT_REFUSED
    for path in (settings.segment_path, settings.lock_path,
                 settings.backup_path, settings.sim_path,
                 settings.sim_path + ".lock"):
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass
    print("reset: segment, lock and backup removed", file=sys.stderr)
    return EXIT_OK


def _load_workload(args) -> WorkloadSpec:
    with open(args.workload) as f:
        doc = json.load(f)
    spec = WorkloadSpec.from_json(doc)
    if args.policy:
        spec.policy = PolicyKind.parse(args.policy)
    if args.timeout_ms is not None:
        spec.timeout_ms = args.timeout_ms
    if args.device_config:
        spec.devices = load_device_spec(args.device_config)
    return spec


def cmd_run(args) -> int:
    spec = _load_workload(args)
    report = run_workload(spec)
    sys.stdout.write(report.to_csv())
    print(report.to_json(), file=sys.stderr)
    if report.oom_count or report.final_audit:
        return EXIT_INTEGRITY
    return EXIT_OK


def cmd_seq(args) -> int:
    spec = _load_workload(args)
    report = sequential_baseline(spec)
    sys.stdout.write(report.to_csv())
    print(report.to_json(), file=sys.stderr)
    return EXIT_OK


def cmd_sim(args) -> int:
    spec = _load_workload(args)
    report = simulate(spec)
    sys.stdout.write(report.to_csv())
    print(report.to_json(), file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    backends = ("shm", "server") if args.backend in (None, "both") else (args.backend,)
    results = bench_overhead(iterations=args.iterations, backends=backends)
    print("backend,stage,median_ms,p95_ms")
    for backend, stages in results.items():
        for stage, stats in stages.items():
            if stage == "client_total_median_ms":
                continue
            print(f"{backend},{stage},{stats['median_ms']:.4f},{stats['p95_ms']:.4f}")
        print(f"{backend} client-stage total median: "
              f"{stages['client_total_median_ms']:.4f} ms", file=sys.stderr)
    return EXIT_OK


def cmd_policy_demo(args) -> int:
    class E:
        def __init__(self, name, nbytes, priority=0):
            self.client = name
            self.nbytes = nbytes
            self.priority = priority

    scenarios = [
        ("head blocks, 1600 free",
         [E("A", 3000), E("B", 1000), E("C", 500)], 1600),
        ("equal priority, 1500 free",
         [E("A", 3000, 2), E("B", 1000, 2)], 1500),
        ("mixed priority, 1500 free",
         [E("A", 500, 1), E("B", 1000, 2)], 1500),
    ]
    for label, queue, free in scenarios:
        print(f"# {label}")
        for kind in PolicyKind:
            picks = select_grants(queue, free, kind)
            print(f"{kind.value}: {picks or '[]'}")
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="memsharectl")
    ap.add_argument("--device-config", help="device config JSON path")
    ap.add_argument("--policy", help="fifo|mmu|pfifo|pmmu")
    ap.add_argument("--backend", help="shm|server|both (bench)")
    ap.add_argument("--timeout-ms", type=float, dest="timeout_ms")
    ap.add_argument("--priority", type=int)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("status")
    sub.add_parser("recover")
    p = sub.add_parser("reset")
    p.add_argument("--force", action="store_true")
    for name in ("run", "seq", "sim"):
        p = sub.add_parser(name)
        p.add_argument("--workload", required=True)
    p = sub.add_parser("bench")
    p.add_argument("--iterations", type=int, default=1000)
    sub.add_parser("policy-demo")

    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    handlers = {
        "status": cmd_status, "recover": cmd_recover, "reset": cmd_reset,
        "run": cmd_run, "seq": cmd_seq, "sim": cmd_sim, "bench": cmd_bench,
        "policy-demo": cmd_policy_demo,
    }
    try:
        return handlers[args.command](args)
    except MemshareError as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
