"""Multi-process workload runner and discrete-event prediction oracle.

Synthetic application profiles (CPU think time, reservation, device-busy
burst, release) are executed either as real OS processes driving the full
client API against the simulated device (REAL_PROCESS), or inside a
single-threaded discrete-event simulation applying the exact same policy
functions with idealised zero-overhead coordination (SIMULATED). Both
emit the same MetricsReport, so the simulation doubles as an oracle for
the real runs.

The per-instance event log is the single source of truth: every metric
(makespan, utilisation traces, concurrency, OOM count) is recomputed from
it, never measured on the side.
"""

from __future__ import annotations

import heapq
import json
import math
import multiprocessing
import os
import signal
import statistics
import tempfile
import time
from dataclasses import dataclass, field

from . import client as client_mod
from .config import Settings
from .device import MIB, DeviceSpec, SimDevice, StaticProvider, parse_device_config
from .errors import DeviceOOMError, SchemaError, SpawnError
from .ledger import LedgerHandle, audit
from .policy import PolicyKind, select_grants

TICK_MS = 100  # utilisation sampling tick


@dataclass
class Phase:
    cpu_ms: float = 0.0
    alloc_mib: int = 0
    busy_ms: float = 0.0
    free_mib: int = 0


@dataclass
class AppProfile:
    name: str
    phases: list[Phase]
    priority: int = 0

    def peak_mib(self) -> int:
        held = peak = 0
        for p in self.phases:
            held += p.alloc_mib
            peak = max(peak, held)
            held -= p.free_mib
        return peak

    def total_ms(self) -> float:
        return sum(p.cpu_ms + p.busy_ms for p in self.phases)


def builtin_profiles() -> dict[str, AppProfile]:
    """Desk-scale stand-ins for the three published use-case shapes:
    a long CPU phase with a short device burst at the end (~5% busy, 16%
    memory), an alternating half-and-half profile (~50% busy, 15% memory),
    and a device-heavy profile (~80% busy, 36% memory)."""
    ara = AppProfile("ara-like", [
        Phase(cpu_ms=9500),
        Phase(alloc_mib=768, busy_ms=500, free_mib=768),
    ])
    mummer = AppProfile("mummer-like",
                        [Phase(alloc_mib=720)]
                        + [Phase(cpu_ms=500), Phase(busy_ms=500)] * 10
                        + [Phase(free_mib=720)])
    blast = AppProfile("blast-like", [
        Phase(alloc_mib=1750, cpu_ms=1000),
        Phase(busy_ms=8000),
        Phase(cpu_ms=1000, free_mib=1750),
    ])
    return {p.name: p for p in (ara, mummer, blast)}


DEFAULT_DEVICE = {"devices": [{"name": "K20m-sim", "mib": 4799}]}


@dataclass
class WorkloadSpec:
    instances: list[AppProfile]  # one entry per instance, in queue order
    policy: PolicyKind = PolicyKind.FIFO
    backend: str = "shm"
    devices: list[DeviceSpec] = None
    seed: int = 0
    time_scale: float = 1.0
    timeout_ms: float = math.inf
    kill_plan: list[tuple[int, float]] = field(default_factory=list)  # (idx, after_ms)

    def __post_init__(self):
        if self.devices is None:
            self.devices = parse_device_config(DEFAULT_DEVICE)

    @classmethod
    def from_json(cls, doc: dict) -> "WorkloadSpec":
        profiles = dict(builtin_profiles())
        for p in doc.get("profiles", []):
            phases = [Phase(ph.get("cpu_ms", 0), ph.get("alloc_mib", 0),
                            ph.get("busy_ms", 0), ph.get("free_mib", 0))
                      for ph in p["phases"]]
            profiles[p["name"]] = AppProfile(p["name"], phases,
                                             p.get("priority", 0))
        instances = []
        for name, count in doc.get("instances", []):
            if name not in profiles:
                raise SchemaError(f"unknown profile {name!r}")
            prof = profiles[name]
            instances.extend([prof] * int(count))
        if not instances:
            raise SchemaError("workload has no instances")
        devices = parse_device_config(doc["device"]) if "device" in doc else None
        return cls(
            instances=instances,
            policy=PolicyKind.parse(doc.get("policy", "fifo")),
            backend=doc.get("backend", "shm"),
            devices=devices,
            seed=int(doc.get("seed", 0)),
            time_scale=float(doc.get("time_scale", 1.0)),
            timeout_ms=float(doc.get("timeout_ms", math.inf)),
        )


@dataclass
class MetricsReport:
    makespan_ms: float
    instances: dict[int, dict]  # idx -> {name, start_ms, end_ms, exit}
    events: list[dict]  # {t_ms, instance, event, device, bytes}
    mem_trace: list[tuple[float, float]]  # (t_ms, used fraction), per tick
    avg_mem_util_pct: float
    avg_device_util_pct: float
    oom_count: int
    max_concurrent_holders: int
    final_audit: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "makespan_ms": round(self.makespan_ms, 3),
            "avg_mem_util_pct": round(self.avg_mem_util_pct, 4),
            "avg_device_util_pct": round(self.avg_device_util_pct, 4),
            "oom_count": self.oom_count,
            "max_concurrent_holders": self.max_concurrent_holders,
            "instances": len(self.instances),
            "audit_ok": not self.final_audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def to_csv(self) -> str:
        # stable column order; one row per event, then one summary row
        lines = ["t_ms,instance,event,device,bytes"]
        for e in self.events:
            lines.append(f"{e['t_ms']:.3f},{e['instance']},{e['event']},"
                         f"{e['device']},{e['bytes']}")
        s = self.summary()
        lines.append(f"# makespan_ms={s['makespan_ms']} "
                     f"avg_mem_util_pct={s['avg_mem_util_pct']} "
                     f"avg_device_util_pct={s['avg_device_util_pct']} "
                     f"oom_count={s['oom_count']}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- real runs


def _emit(fh, t: float, inst: int, event: str, device: int = 0, nbytes: int = 0):
    fh.write(json.dumps({"t": t, "instance": inst, "event": event,
                         "device": device, "bytes": nbytes}) + "\n")
    fh.flush()


def _instance_main(idx: int, profile: AppProfile, settings_kw: dict,
                   devices_doc: list, workdir: str, barrier,
                   time_scale: float, timeout_ms: float) -> None:
    specs = [DeviceSpec(*t) for t in devices_doc]
    settings = Settings(devices=specs, **settings_kw)
    session = client_mod.sched_init(settings)
    sim = SimDevice(settings.sim_path, specs)
    logpath = os.path.join(workdir, f"inst{idx:03d}.jsonl")
    handles: dict[int, list[int]] = {}
    with open(logpath, "w") as fh:
        barrier.wait()
        _emit(fh, time.monotonic(), idx, "start")
        for phase in profile.phases:
            if phase.cpu_ms:
                time.sleep(phase.cpu_ms * time_scale / 1000.0)
            if phase.alloc_mib:
                nbytes = phase.alloc_mib * MIB
                _emit(fh, time.monotonic(), idx, "request", 0, nbytes)
                outcome = session.pre_alloc(0, nbytes, blocking=True,
                                            timeout_ms=timeout_ms,
                                            priority=profile.priority)
                if outcome is not client_mod.AllocOutcome.GRANTED:
                    _emit(fh, time.monotonic(), idx, outcome.value, 0, nbytes)
                else:
                    _emit(fh, time.monotonic(), idx, "grant", 0, nbytes)
                    try:
                        h = sim.sim_alloc(0, nbytes)
                        handles.setdefault(phase.alloc_mib, []).append(h)
                        _emit(fh, time.monotonic(), idx, "alloc", 0, nbytes)
                    except DeviceOOMError:
                        # must be unreachable under correct co-scheduling
                        _emit(fh, time.monotonic(), idx, "oom", 0, nbytes)
                        session.post_free(0, nbytes)
            if phase.busy_ms:
                _emit(fh, time.monotonic(), idx, "busy_start")
                time.sleep(phase.busy_ms * time_scale / 1000.0)
                _emit(fh, time.monotonic(), idx, "busy_end")
            if phase.free_mib:
                nbytes = phase.free_mib * MIB
                hs = handles.get(phase.free_mib, [])
                if hs:
                    sim.sim_free(0, hs.pop())
                    session.post_free(0, nbytes)
                    _emit(fh, time.monotonic(), idx, "free", 0, nbytes)
        _emit(fh, time.monotonic(), idx, "end")
    session.shutdown()
    sim.close()


def _fresh_settings(spec: WorkloadSpec, workdir: str) -> Settings:
    settings = Settings(devices=spec.devices, policy=spec.policy,
                        base_dir=workdir)
    for path in (settings.segment_path, settings.lock_path,
                 settings.backup_path, settings.sim_path,
                 settings.sim_path + ".lock"):
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass
    return settings


def _settings_kw(settings: Settings) -> dict:
    return dict(policy=settings.policy, base_dir=settings.base_dir,
                segment_path=settings.segment_path,
                lock_path=settings.lock_path,
                backup_path=settings.backup_path,
                sim_path=settings.sim_path,
                sanity_interval_ms=settings.sanity_interval_ms)


def run_workload(spec: WorkloadSpec, workdir: str | None = None) -> MetricsReport:
    """Execute one instance per OS process; all instances start together."""
    workdir = workdir or tempfile.mkdtemp(prefix="memshare-run-")
    os.makedirs(workdir, exist_ok=True)
    settings = _fresh_settings(spec, workdir)
    ctx = multiprocessing.get_context("fork")
    barrier = ctx.Barrier(len(spec.instances) + 1)
    devices_doc = [(s.index, s.name, s.total_bytes) for s in spec.devices]
    procs = []
    for idx, profile in enumerate(spec.instances):
        p = ctx.Process(target=_instance_main,
                        args=(idx, profile, _settings_kw(settings), devices_doc,
                              workdir, barrier, spec.time_scale, spec.timeout_ms),
                        daemon=False)
        try:
            p.start()
        except OSError as exc:
            raise SpawnError(str(exc)) from exc
        procs.append(p)
    try:
        barrier.wait(timeout=120)
    except Exception as exc:
        for p in procs:
            p.kill()
        raise SpawnError(f"instances failed to reach the start barrier: {exc}")
    t0 = time.monotonic()
    for idx, after_ms in sorted(spec.kill_plan, key=lambda k: k[1]):
        delay = t0 + after_ms * spec.time_scale / 1000.0 - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        if procs[idx].is_alive():
            os.kill(procs[idx].pid, signal.SIGKILL)
    budget = _join_budget(spec)
    exits = {}
    for idx, p in enumerate(procs):
        p.join(timeout=max(1.0, budget - (time.monotonic() - t0)))
        if p.is_alive():
            p.kill()
            p.join()
        exits[idx] = p.exitcode
    report = _report_from_logs(spec, workdir, exits)
    report.final_audit = _final_audit(settings)
    return report


def _join_budget(spec: WorkloadSpec) -> float:
    longest = max(p.total_ms() for p in spec.instances)
    total = sum(p.total_ms() for p in spec.instances)
    base = (longest + total) * spec.time_scale / 1000.0
    if not math.isinf(spec.timeout_ms):
        base += spec.timeout_ms / 1000.0
    return base + 60.0


def _final_audit(settings: Settings) -> list[str]:
    from . import coord
    backend = coord.FileLockBackend(settings.lock_path)
    try:
        with backend.acquire(deadline=time.monotonic() + 10):
            handle, _ = LedgerHandle.open_or_create(
                settings.segment_path, settings.provider(),
                settings.policy.code, settings.backup_path)
            violations = audit(handle.load())
            handle.close()
            return violations
    finally:
        backend.close()


def sequential_baseline(spec: WorkloadSpec, workdir: str | None = None) -> MetricsReport:
    """Run the same instances strictly one at a time."""
    workdir = workdir or tempfile.mkdtemp(prefix="memshare-seq-")
    os.makedirs(workdir, exist_ok=True)
    settings = _fresh_settings(spec, workdir)
    ctx = multiprocessing.get_context("fork")
    devices_doc = [(s.index, s.name, s.total_bytes) for s in spec.devices]
    exits = {}
    for idx, profile in enumerate(spec.instances):
        barrier = ctx.Barrier(2)
        p = ctx.Process(target=_instance_main,
                        args=(idx, profile, _settings_kw(settings), devices_doc,
                              workdir, barrier, spec.time_scale, spec.timeout_ms))
        p.start()
        barrier.wait(timeout=120)
        p.join(timeout=_join_budget(spec))
        if p.is_alive():
            p.kill()
            p.join()
        exits[idx] = p.exitcode
    report = _report_from_logs(spec, workdir, exits)
    report.final_audit = _final_audit(settings)
    return report


def _report_from_logs(spec: WorkloadSpec, workdir: str,
                      exits: dict[int, int]) -> MetricsReport:
    events = []
    for idx in range(len(spec.instances)):
        path = os.path.join(workdir, f"inst{idx:03d}.jsonl")
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError:
                    pass  # torn final line from a killed instance
    events.sort(key=lambda e: e["t"])
    capacity = spec.devices[0].total_bytes
    report = _metrics_from_events(events, capacity)
    for idx, code in exits.items():
        report.instances.setdefault(idx, {})["exit"] = code
        report.instances[idx].setdefault(
            "name", spec.instances[idx].name)
    return report


def _metrics_from_events(events: list[dict], capacity: int) -> MetricsReport:
    if not events:
        return MetricsReport(0.0, {}, [], [], 0.0, 0.0, 0, 0)
    t0 = min(e["t"] for e in events)
    t_end = max(e["t"] for e in events)
    makespan_s = max(t_end - t0, 1e-9)
    out_events = [{"t_ms": (e["t"] - t0) * 1000.0, "instance": e["instance"],
                   "event": e["event"], "device": e.get("device", 0),
                   "bytes": e.get("bytes", 0)} for e in events]

    instances: dict[int, dict] = {}
    oom = 0
    # memory integral + holder concurrency
    mem_points = []  # (t_rel_s, delta_bytes)
    busy_delta = []  # (t_rel_s, +-1)
    holders: dict[int, int] = {}
    max_holders = 0
    for e in events:
        t = e["t"] - t0
        idx = e["instance"]
        inst = instances.setdefault(idx, {})
        kind = e["event"]
        if kind == "start":
            inst["start_ms"] = t * 1000.0
        elif kind == "end":
            inst["end_ms"] = t * 1000.0
        elif kind == "alloc":
            mem_points.append((t, e["bytes"]))
            holders[idx] = holders.get(idx, 0) + e["bytes"]
            max_holders = max(max_holders,
                              sum(1 for v in holders.values() if v > 0))
        elif kind == "free":
            mem_points.append((t, -e["bytes"]))
            holders[idx] = holders.get(idx, 0) - e["bytes"]
        elif kind == "busy_start":
            busy_delta.append((t, 1))
        elif kind == "busy_end":
            busy_delta.append((t, -1))
        elif kind == "oom":
            oom += 1

    def integral(deltas, span):
        # exact time integral of a step function given (t, delta) points
        total = 0.0
        level = 0
        prev = 0.0
        for t, d in deltas:
            total += level * (t - prev)
            level += d
            prev = t
        total += level * (span - prev)
        return total

    mem_integral = integral(mem_points, makespan_s)  # byte-seconds
    avg_mem_pct = 100.0 * mem_integral / (capacity * makespan_s)
    # device util: fraction of time with at least one busy interval
    busy_time = 0.0
    level = 0
    prev = 0.0
    for t, d in sorted(busy_delta):
        if level > 0:
            busy_time += t - prev
        level += d
        prev = t
    avg_busy_pct = 100.0 * busy_time / makespan_s

    # sampled memory trace at the tick for the report
    trace = []
    level = 0
    pts = iter(sorted(mem_points))
    nxt = next(pts, None)
    t = 0.0
    while t <= makespan_s + 1e-9:
        while nxt is not None and nxt[0] <= t:
            level += nxt[1]
            nxt = next(pts, None)
        trace.append((t * 1000.0, level / capacity))
        t += TICK_MS / 1000.0

    return MetricsReport(
        makespan_ms=makespan_s * 1000.0,
        instances=instances,
        events=out_events,
        mem_trace=trace,
        avg_mem_util_pct=avg_mem_pct,
        avg_device_util_pct=avg_busy_pct,
        oom_count=oom,
        max_concurrent_holders=max_holders,
    )


# ---------------------------------------------------------------- simulation


@dataclass
class _SimEntry:
    client: int  # instance index stands in for ClientId
    nbytes: int
    priority: int
    enqueue_seq: int


def simulate(spec: WorkloadSpec) -> MetricsReport:
    """Discrete-event prediction: same profiles, same policy functions,
    zero-cost coordination. Deterministic for a given spec."""
    steps: list[list[tuple]] = []
    for prof in spec.instances:
        flat = []
        for ph in prof.phases:
            if ph.cpu_ms:
                flat.append(("cpu", ph.cpu_ms * spec.time_scale / 1000.0))
            if ph.alloc_mib:
                flat.append(("alloc", ph.alloc_mib * MIB))
            if ph.busy_ms:
                flat.append(("busy", ph.busy_ms * spec.time_scale / 1000.0))
            if ph.free_mib:
                flat.append(("free", ph.free_mib * MIB))
        steps.append(flat)

    capacity = spec.devices[0].total_bytes
    used = 0
    queue: list[_SimEntry] = []
    pc = [0] * len(spec.instances)
    events: list[dict] = []
    heap: list[tuple] = []
    counter = 0
    enqueue_seq = 0

    def emit(t, idx, kind, nbytes=0):
        events.append({"t": t, "instance": idx, "event": kind,
                       "device": 0, "bytes": nbytes})

    def push(t, idx):
        nonlocal counter
        counter += 1
        heapq.heappush(heap, (t, counter, idx))

    def advance(idx, now):
        nonlocal used, enqueue_seq
        while pc[idx] < len(steps[idx]):
            kind, arg = steps[idx][pc[idx]]
            if kind in ("cpu", "busy"):
                if kind == "busy":
                    emit(now, idx, "busy_start")
                    emit(now + arg, idx, "busy_end")
                pc[idx] += 1
                push(now + arg, idx)
                return
            if kind == "alloc":
                # a newly arriving request takes free memory if any exists,
                # exactly as the live pre-allocation path does; only a
                # shortage sends it to the queue
                emit(now, idx, "request", arg)
                if used + arg <= capacity:
                    used += arg
                    pc[idx] += 1
                    emit(now, idx, "grant", arg)
                    emit(now, idx, "alloc", arg)
                    continue
                enqueue_seq += 1
                queue.append(_SimEntry(idx, arg,
                                       spec.instances[idx].priority,
                                       enqueue_seq))
                return
            if kind == "free":
                used -= arg
                pc[idx] += 1
                emit(now, idx, "free", arg)
                grant_waiters(now)
                continue
        emit(now, idx, "end")

    def grant_waiters(now):
        nonlocal used
        while True:
            grants = select_grants(queue, capacity - used, spec.policy)
            if not grants:
                return
            for cid in grants:
                entry = next(e for e in queue if e.client == cid)
                queue.remove(entry)
                used += entry.nbytes
                emit(now, entry.client, "grant", entry.nbytes)
                emit(now, entry.client, "alloc", entry.nbytes)
                pc[entry.client] += 1
                push(now, entry.client)

    for idx in range(len(spec.instances)):
        emit(0.0, idx, "start")
        push(0.0, idx)
    while heap:
        now, _, idx = heapq.heappop(heap)
        advance(idx, now)

    events.sort(key=lambda e: e["t"])
    report = _metrics_from_events(events, capacity)
    for idx, prof in enumerate(spec.instances):
        report.instances.setdefault(idx, {})["name"] = prof.name
        report.instances[idx]["exit"] = 0
    return report


# ---------------------------------------------------------------- bench


def bench_overhead(iterations: int = 1000, backends=("shm", "server"),
                   devices: list[DeviceSpec] | None = None,
                   workdir: str | None = None) -> dict:
    """Per-stage lifecycle timings (median and p95 ms) for each backend."""
    devices = devices or parse_device_config(DEFAULT_DEVICE)
    workdir = workdir or tempfile.mkdtemp(prefix="memshare-bench-")
    os.makedirs(workdir, exist_ok=True)
    nbytes = 100 * MIB
    results: dict = {}

    if "shm" in backends:
        settings = _fresh_settings(
            WorkloadSpec(instances=[builtin_profiles()["ara-like"]],
                         devices=devices), workdir)
        stages = {"init": [], "pre_alloc": [], "post_free": [], "shutdown": []}
        for _ in range(iterations):
            t0 = time.perf_counter()
            session = client_mod.sched_init(
                Settings(devices=devices, **_settings_kw(settings)))
            t1 = time.perf_counter()
            session.pre_alloc(0, nbytes)
            t2 = time.perf_counter()
            session.post_free(0, nbytes)
            t3 = time.perf_counter()
            session.shutdown()
            t4 = time.perf_counter()
            stages["init"].append(t1 - t0)
            stages["pre_alloc"].append(t2 - t1)
            stages["post_free"].append(t3 - t2)
            stages["shutdown"].append(t4 - t3)
        results["shm"] = _stage_stats(stages)

    if "server" in backends:
        sock_path = os.path.join(workdir, "bench.sock")
        proc, settings = start_server_process(sock_path, devices, workdir)
        try:
            stages = {"init": [], "pre_alloc": [], "post_free": [], "shutdown": []}
            from .server import RemoteSession
            for _ in range(iterations):
                t0 = time.perf_counter()
                session = RemoteSession(settings)
                t1 = time.perf_counter()
                session.pre_alloc(0, nbytes)
                t2 = time.perf_counter()
                session.post_free(0, nbytes)
                t3 = time.perf_counter()
                session.shutdown()
                t4 = time.perf_counter()
                stages["init"].append(t1 - t0)
                stages["pre_alloc"].append(t2 - t1)
                stages["post_free"].append(t3 - t2)
                stages["shutdown"].append(t4 - t3)
            results["server"] = _stage_stats(stages)
        finally:
            proc.terminate()
            proc.join(timeout=10)
    return results


def _stage_stats(stages: dict[str, list[float]]) -> dict:
    out = {}
    for name, samples in stages.items():
        ms = sorted(s * 1000.0 for s in samples)
        out[name] = {
            "median_ms": statistics.median(ms),
            "p95_ms": ms[min(len(ms) - 1, int(0.95 * len(ms)))],
        }
    out["client_total_median_ms"] = sum(v["median_ms"] for v in out.values())
    return out


def _server_main(sock_path: str, devices_doc: list, policy_value: str) -> None:
    from .server import serve
    specs = [DeviceSpec(*t) for t in devices_doc]
    srv = serve(sock_path, StaticProvider(specs), PolicyKind.parse(policy_value))
    srv.serve_forever(poll_interval=0.05)


def start_server_process(sock_path: str, devices: list[DeviceSpec],
                         workdir: str, policy: PolicyKind = PolicyKind.FIFO):
    """Spawn the daemon and wait for its socket; returns (process, settings)."""
    ctx = multiprocessing.get_context("fork")
    devices_doc = [(s.index, s.name, s.total_bytes) for s in devices]
    proc = ctx.Process(target=_server_main,
                       args=(sock_path, devices_doc, policy.value), daemon=True)
    proc.start()
    settings = Settings(devices=devices, policy=policy, base_dir=workdir,
                        socket_path=sock_path, backend="server")
    deadline = time.monotonic() + 15
    import socket as socketlib
    while time.monotonic() < deadline:
        s = socketlib.socket(socketlib.AF_UNIX, socketlib.SOCK_STREAM)
        try:
            s.connect(sock_path)
            s.close()
            return proc, settings
        except OSError:
            s.close()
            time.sleep(0.01)
    proc.terminate()
    raise SpawnError("server process did not come up")
