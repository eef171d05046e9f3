"""Acceptance suite: ten directional/structural criteria for the framework.

Each test appends one PASS/FAIL line (echoed after the pytest summary via
the conftest hook) and asserts the criterion at its stated tolerance.
Synthetic desk-scale profiles stand in for the original applications, so
the criteria check directions, orderings and invariants rather than
absolute wall-clock numbers.
"""

import dataclasses
import os
import random
import shutil
import signal
import tempfile
import threading
import time

import numpy as np
import pytest

import conftest
from memshare import coord, procs
from memshare.config import runtime_dir
from memshare.client import AllocOutcome, sched_init
from memshare.device import MIB, parse_device_config
from memshare.errors import LockTimeoutError
from memshare.harness import (
    WorkloadSpec,
    bench_overhead,
    builtin_profiles,
    run_workload,
    sequential_baseline,
    simulate,
    start_server_process,
)
from memshare.ledger import audit
from memshare.policy import PolicyKind, select_grants
from memshare.server import RemoteSession

from conftest import make_settings, mp, run_child

SEED = 20260823


def report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.acceptance_lines.append(line)
    assert ok, line


# --------------------------------------------------------- shared heavy runs


@pytest.fixture(scope="module")
def shm_root():
    """tmpfs-backed scratch space (the production default location): keeps
    segment, log and backup I/O off disk-backed filesystems whose writeback
    stalls would pollute the timing-sensitive runs."""
    root = tempfile.mkdtemp(prefix="memshare-accept-", dir=runtime_dir())
    yield root
    shutil.rmtree(root, ignore_errors=True)


@pytest.fixture(scope="module")
def fidelity_runs(shm_root):
    """Four REAL_PROCESS workloads plus their simulated predictions; shared
    by criteria 2 and 7. The alternating profile runs at a coarser time
    scale because it has by far the most sleep boundaries, and per-boundary
    OS jitter is constant while the makespan scales."""
    p = builtin_profiles()
    mixed = [p["ara-like"]] * 4 + [p["mummer-like"]] * 4 + [p["blast-like"]] * 4
    specs = {
        "ara-like x12": WorkloadSpec(instances=[p["ara-like"]] * 12,
                                     time_scale=0.15),
        "mummer-like x12": WorkloadSpec(instances=[p["mummer-like"]] * 12,
                                        time_scale=0.3),
        "blast-like x12": WorkloadSpec(instances=[p["blast-like"]] * 12,
                                       time_scale=0.15),
        "mixed 4+4+4": WorkloadSpec(instances=mixed, time_scale=0.15),
    }
    out = {}
    for i, (name, spec) in enumerate(specs.items()):
        out[name] = (run_workload(spec, workdir=os.path.join(shm_root, f"w{i}")),
                     simulate(spec))
    return out


@pytest.fixture(scope="module")
def speedup_runs(shm_root):
    """Concurrent vs sequential 12-instance runs per profile at time_scale
    0.05 (ratios are scale-invariant; the sequential baselines dominate the
    runtime); shared by criteria 3 and 4."""
    out = {}
    for i, name in enumerate(("ara-like", "mummer-like", "blast-like")):
        spec = WorkloadSpec(instances=[builtin_profiles()[name]] * 12,
                            time_scale=0.05)
        conc = run_workload(spec, workdir=os.path.join(shm_root, f"c{i}"))
        seq = sequential_baseline(spec, workdir=os.path.join(shm_root, f"s{i}"))
        out[name] = (conc, seq)
    return out


# ------------------------------------------------------------------ criteria


def test_criterion_01_memory_safety(shm_root):
    """50 randomized multi-process workloads (mixed profiles, all four
    policies, kill-injection on ~20%): zero device OOMs, every final audit
    clean."""
    rng = random.Random(SEED)
    profiles = list(builtin_profiles().values())
    policies = list(PolicyKind)
    failures = []
    kills = 0
    for run in range(50):
        n = rng.randint(3, 6)
        inst = []
        for _ in range(n):
            prof = rng.choice(profiles)
            if rng.random() < 0.5:
                prof = dataclasses.replace(prof, priority=rng.randint(0, 2))
            inst.append(prof)
        spec = WorkloadSpec(instances=inst, policy=policies[run % 4],
                            time_scale=0.03)
        if rng.random() < 0.2:
            kills += 1
            spec.kill_plan = [(rng.randrange(n), rng.uniform(500, 5000))]
        rep = run_workload(spec, workdir=os.path.join(shm_root, f"r{run:02d}"))
        if rep.oom_count or rep.final_audit:
            failures.append((run, rep.oom_count, rep.final_audit))
    report(1, not failures,
           f"50 randomized runs ({kills} kill-injected), "
           f"{len(failures)} with OOM or audit violations (require 0)")


def test_criterion_02_max_concurrency(fidelity_runs):
    """12 footprint-profile instances on the 4799 MiB device never exceed
    6 simultaneous holders (event-log assertion, exact)."""
    real, _ = fidelity_runs["ara-like x12"]
    report(2, real.max_concurrent_holders <= 6 and real.oom_count == 0,
           f"max concurrent holders {real.max_concurrent_holders} (limit 6), "
           f"oom {real.oom_count}")


def test_criterion_03_speedup(speedup_runs):
    """Concurrent makespan beats sequential by at least 5x / 1.8x / 1.2x for
    the three profiles, and the speed-ups fall strictly with the
    device-busy fraction."""
    floors = {"ara-like": 5.0, "mummer-like": 1.8, "blast-like": 1.2}
    speedups = {}
    ok = True
    for name, (conc, seq) in speedup_runs.items():
        s = seq.makespan_ms / conc.makespan_ms
        speedups[name] = s
        ok &= s >= floors[name]
    ok &= (speedups["ara-like"] > speedups["mummer-like"]
           > speedups["blast-like"])
    detail = ", ".join(f"{n} {speedups[n]:.2f}x (floor {floors[n]}x)"
                       for n in floors)
    report(3, ok, detail + "; ordering strict")


def test_criterion_04_utilisation_uplift(speedup_runs):
    """Average memory utilisation of the concurrent footprint-profile run is
    at least 3x the sequential baseline's."""
    conc, seq = speedup_runs["ara-like"]
    ratio = conc.avg_mem_util_pct / max(seq.avg_mem_util_pct, 1e-9)
    report(4, ratio >= 3.0,
           f"avg mem util {conc.avg_mem_util_pct:.2f}% concurrent vs "
           f"{seq.avg_mem_util_pct:.2f}% sequential = {ratio:.1f}x (floor 3x)")


def test_criterion_05_policy_oracle():
    """select_grants matches a brute-force oracle (exhaustive subset/prefix
    enumeration) on 1e5 random queues; exact match required."""

    masks_by_n = {}
    for n in range(1, 9):
        masks = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(np.int64)
        pref = masks @ (1 << np.arange(n)[::-1])  # earlier index dominates
        masks_by_n[n] = (masks, pref)

    def brute(sizes, prios, free, kind):
        if kind in (PolicyKind.PRIORITY_FIFO, PolicyKind.PRIORITY_MMU):
            if not sizes:
                return []
            top = max(prios)
            idx = [i for i, p in enumerate(prios) if p == top]
            base = (PolicyKind.FIFO if kind is PolicyKind.PRIORITY_FIFO
                    else PolicyKind.MMU)
            sub = brute([sizes[i] for i in idx], [0] * len(idx), free, base)
            return [idx[i] for i in sub]
        n = len(sizes)
        if n == 0:
            return []
        if kind is PolicyKind.FIFO:
            k = int(np.searchsorted(np.cumsum(sizes), free, side="right"))
            return list(range(k))
        masks, pref = masks_by_n[n]
        feasible = np.flatnonzero(masks @ np.asarray(sizes) <= free)
        win = int(feasible[np.argmax(pref[feasible])])
        return [i for i in range(n) if win >> i & 1]

    class E:
        __slots__ = ("client", "nbytes", "priority")

        def __init__(self, c, b, p):
            self.client, self.nbytes, self.priority = c, b, p

    rng = random.Random(SEED)
    mismatches = 0
    trials = 100_000
    for _ in range(trials):
        n = rng.randint(0, 8)
        sizes = [rng.randint(1, 2000) for _ in range(n)]
        prios = [rng.randint(0, 3) for _ in range(n)]
        free = rng.randint(0, 6000)
        q = [E(i, sizes[i], prios[i]) for i in range(n)]
        for kind in PolicyKind:
            got = select_grants(q, free, kind)
            want = brute(sizes, prios, free, kind)
            if got != want:
                mismatches += 1
    report(5, mismatches == 0,
           f"{trials} random queues x 4 policies: {mismatches} mismatches")


def test_criterion_06_policy_ordering():
    """Simulated mixed workload (4+4+4, high priority on the longest
    profile, tight 2400 MiB device): makespan(FIFO) >= makespan(MMU) >=
    makespan(PriorityMMU), each inequality with 2% slack."""
    p = builtin_profiles()
    hi = dataclasses.replace(p["mummer-like"], priority=2)
    inst = [p["ara-like"]] * 4 + [hi] * 4 + [p["blast-like"]] * 4
    dev = parse_device_config({"devices": [{"name": "tight", "mib": 2400}]})
    ms = {}
    for kind in (PolicyKind.FIFO, PolicyKind.MMU, PolicyKind.PRIORITY_MMU):
        ms[kind] = simulate(WorkloadSpec(instances=inst, policy=kind,
                                         devices=dev)).makespan_ms
    f, m, pm = (ms[PolicyKind.FIFO], ms[PolicyKind.MMU],
                ms[PolicyKind.PRIORITY_MMU])
    ok = f >= 0.98 * m and m >= 0.98 * pm
    report(6, ok,
           f"makespans fifo {f:.0f} >= mmu {m:.0f} >= pmmu {pm:.0f} ms "
           f"(2% slack)")


def test_criterion_07_oracle_fidelity(fidelity_runs):
    """Real-process makespan within 15% of the discrete-event prediction for
    each of the four workloads."""
    ok = True
    parts = []
    for name, (real, sim) in fidelity_runs.items():
        err = abs(real.makespan_ms - sim.makespan_ms) / sim.makespan_ms
        ok &= err <= 0.15
        parts.append(f"{name} {err * 100:.1f}%")
    report(7, ok, "real vs simulated makespan error: "
           + ", ".join(parts) + " (limit 15%)")


def test_criterion_08_overhead(shm_root):
    """Daemon-backend client-stage total exceeds the shared-memory total
    (medians over 1000 iterations); shared-memory reservation median under
    1 ms."""
    results = bench_overhead(iterations=1000,
                             workdir=os.path.join(shm_root, "bench"))
    shm_total = results["shm"]["client_total_median_ms"]
    srv_total = results["server"]["client_total_median_ms"]
    pre = results["shm"]["pre_alloc"]["median_ms"]
    ok = srv_total > shm_total and pre < 1.0
    report(8, ok,
           f"client-stage median totals: server {srv_total:.3f} ms > "
           f"shm {shm_total:.3f} ms; shm reservation {pre:.4f} ms < 1 ms")


def test_criterion_09a_filelock_survives_holder_death(workdir):
    """Kill the lock holder mid-critical-section: another client acquires
    within 1 s and the audit recovers."""
    settings = make_settings(workdir)
    held = mp.Event()

    def holder():
        session = sched_init(settings)
        session.pre_alloc(0, 500 * MIB)
        session.backend.acquire()  # die inside the critical section
        held.set()
        time.sleep(60)

    p = run_child(holder)
    assert held.wait(timeout=10)
    os.kill(p.pid, signal.SIGKILL)
    p.join()
    t0 = time.monotonic()
    session = sched_init(settings)  # takes the lock during init
    acquired_in = time.monotonic() - t0
    session.run_sanity()
    with session.backend.acquire():
        violations = audit(session.handle.load())
    ok = acquired_in < 1.0 and not violations
    report(9, ok,
           f"(a) flock reacquired {acquired_in * 1000:.0f} ms after holder "
           f"kill (limit 1 s), audit clean after recovery")
    session.shutdown()


def test_criterion_09b_mutex_abandonment(workdir):
    """Same scenario on the interprocess-mutex backend deadlocks until the
    5 s watchdog fires: the documented failure mode this project avoids."""
    lock_path = os.path.join(workdir, "mutex-demo")
    held = mp.Event()

    def holder():
        backend = coord.MutexBackend(lock_path)
        backend.acquire()
        held.set()
        time.sleep(60)

    p = run_child(holder)
    assert held.wait(timeout=10)
    os.kill(p.pid, signal.SIGKILL)
    p.join()
    backend = coord.MutexBackend(lock_path)
    t0 = time.monotonic()
    deadlocked = False
    try:
        backend.acquire(deadline=t0 + 5.0)
    except LockTimeoutError:
        deadlocked = True
    elapsed = time.monotonic() - t0
    report(9, deadlocked and elapsed >= 4.9,
           f"(b) mutex backend deadlocked after holder kill; watchdog fired "
           f"at {elapsed:.1f} s (expected-failure demonstration)")


def test_criterion_09c_holder_death_unblocks_waiter(workdir):
    """Kill a memory holder while a waiter sleeps: the periodic sanity pass
    grants the waiter within one retry interval."""
    interval_ms = 300
    settings = make_settings(workdir, sanity_interval_ms=interval_ms)
    held = mp.Event()

    def holder():
        session = sched_init(settings)
        session.pre_alloc(0, 4000 * MIB)
        held.set()
        time.sleep(60)

    p = run_child(holder)
    assert held.wait(timeout=10)
    parent = sched_init(settings)
    log = {}

    def waiter():
        log["outcome"] = parent.pre_alloc(0, 4000 * MIB, timeout_ms=15_000)
        log["granted_at"] = time.monotonic()

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.5)  # waiter is enqueued and asleep
    killed_at = time.monotonic()
    os.kill(p.pid, signal.SIGKILL)
    p.join()
    t.join(timeout=20)
    wait_ms = (log["granted_at"] - killed_at) * 1000
    ok = (log["outcome"] is AllocOutcome.GRANTED
          and wait_ms <= 2 * interval_ms + 200)
    report(9, ok,
           f"(c) waiter granted {wait_ms:.0f} ms after holder kill "
           f"(one {interval_ms} ms sanity retry)")
    parent.shutdown()


def test_criterion_10_backend_equivalence(workdir, tmp_path):
    """One scripted client trace produces identical outcome sequences on the
    shared-memory and daemon backends."""
    cap_mib = 4799

    def run_trace(session):
        out = [
            session.pre_alloc(0, 768 * MIB),
            session.pre_alloc(0, (cap_mib + 1) * MIB),
            session.pre_alloc(9, MIB),
            session.pre_alloc(0, 4400 * MIB, blocking=False),
            None,  # post_free below
            session.post_free(0, 768 * MIB),
            session.pre_alloc(0, 4400 * MIB, blocking=False),
            session.pre_alloc(0, 1000 * MIB, timeout_ms=200),
            session.post_free(0, 4400 * MIB),
        ]
        return [o for o in out if isinstance(o, AllocOutcome)]

    shm = sched_init(make_settings(workdir))
    shm_trace = run_trace(shm)
    shm.shutdown()

    sock = os.path.join(str(tmp_path), "equiv.sock")
    base = make_settings(str(tmp_path))
    proc, settings = start_server_process(sock, base.devices, str(tmp_path))
    try:
        remote = RemoteSession(settings)
        srv_trace = run_trace(remote)
        remote.shutdown()
    finally:
        proc.terminate()
        proc.join(timeout=10)

    expected = [AllocOutcome.GRANTED, AllocOutcome.TOO_LARGE,
                AllocOutcome.INVALID_DEVICE, AllocOutcome.NOT_READY,
                AllocOutcome.GRANTED, AllocOutcome.TIMED_OUT]
    ok = shm_trace == srv_trace == expected
    report(10, ok,
           f"outcome sequences identical across backends: "
           f"{[o.value for o in shm_trace]}")
