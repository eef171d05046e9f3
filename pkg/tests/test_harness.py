"""Workload runner, discrete-event simulator and overhead bench.

Frozen simulator values below were derived by hand from the profile
shapes (waves of concurrent holders limited by the 4799 MiB capacity),
not copied from the implementation's output.
"""

import json
import math

import pytest

from memshare.device import MIB, parse_device_config
from memshare.errors import SchemaError
from memshare.harness import (
    MetricsReport,
    Phase,
    WorkloadSpec,
    _metrics_from_events,
    bench_overhead,
    builtin_profiles,
    run_workload,
    sequential_baseline,
    simulate,
)
from memshare.policy import PolicyKind


class TestProfiles:
    def test_shapes(self):
        p = builtin_profiles()
        assert set(p) == {"ara-like", "mummer-like", "blast-like"}
        # one short burst at the end vs alternating vs device-heavy
        assert p["ara-like"].peak_mib() == 768
        assert p["ara-like"].total_ms() == 10_000
        assert p["mummer-like"].peak_mib() == 720
        assert p["mummer-like"].total_ms() == 10_000
        assert p["blast-like"].peak_mib() == 1750
        assert p["blast-like"].total_ms() == 10_000

    def test_busy_fractions(self):
        p = builtin_profiles()
        frac = lambda prof: (sum(ph.busy_ms for ph in prof.phases)
                             / prof.total_ms())
        assert frac(p["ara-like"]) == 0.05
        assert frac(p["mummer-like"]) == 0.5
        assert frac(p["blast-like"]) == 0.8


class TestWorkloadJson:
    def test_counts_and_fields(self):
        spec = WorkloadSpec.from_json({
            "instances": [["ara-like", 2], ["blast-like", 1]],
            "policy": "mmu", "time_scale": 0.25, "seed": 9,
        })
        assert [p.name for p in spec.instances] == \
            ["ara-like", "ara-like", "blast-like"]
        assert spec.policy is PolicyKind.MMU
        assert spec.time_scale == 0.25

    def test_custom_profile(self):
        spec = WorkloadSpec.from_json({
            "profiles": [{"name": "tiny", "priority": 3, "phases": [
                {"alloc_mib": 10, "busy_ms": 50, "free_mib": 10}]}],
            "instances": [["tiny", 2]],
        })
        assert spec.instances[0].priority == 3
        assert spec.instances[0].peak_mib() == 10

    def test_unknown_profile(self):
        with pytest.raises(SchemaError):
            WorkloadSpec.from_json({"instances": [["nope", 1]]})

    def test_no_instances(self):
        with pytest.raises(SchemaError):
            WorkloadSpec.from_json({"instances": []})

    def test_custom_device(self):
        spec = WorkloadSpec.from_json({
            "instances": [["ara-like", 1]],
            "device": {"devices": [{"mib": 1000}]},
        })
        assert spec.devices[0].total_bytes == 1000 * MIB


class TestSimulator:
    def test_deterministic(self):
        spec = WorkloadSpec(instances=[builtin_profiles()["mummer-like"]] * 6)
        a, b = simulate(spec), simulate(spec)
        assert a.summary() == b.summary()
        assert a.events == b.events

    def test_single_instance_makespans(self):
        for name in ("ara-like", "mummer-like", "blast-like"):
            spec = WorkloadSpec(instances=[builtin_profiles()[name]])
            assert simulate(spec).makespan_ms == 10_000

    def test_twelve_ara_wave_structure(self):
        # 6 fit at once (6*768 < 4799 < 7*768); the 500 ms bursts start at
        # 9.5 s, second wave of six runs 10.0-10.5 s
        r = simulate(WorkloadSpec(instances=[builtin_profiles()["ara-like"]] * 12))
        assert r.makespan_ms == 10_500
        assert r.max_concurrent_holders == 6
        assert r.oom_count == 0

    def test_twelve_mummer_two_waves(self):
        # 6*720 fits; two full 10 s waves back to back
        r = simulate(WorkloadSpec(instances=[builtin_profiles()["mummer-like"]] * 12))
        assert r.makespan_ms == 20_000
        assert r.max_concurrent_holders == 6

    def test_twelve_blast_pairwise(self):
        # only 2*1750 fit: six waves, each wave starts at the previous free
        # (9 s in) and finishes 10 s later => 9*5 + 10
        r = simulate(WorkloadSpec(instances=[builtin_profiles()["blast-like"]] * 12))
        assert r.makespan_ms == 55_000
        assert r.max_concurrent_holders == 2

    def test_speedup_ordering(self):
        # sequential = 12 * 10 s for all three; speed-up must fall with the
        # device-busy fraction
        speedups = {}
        for name in ("ara-like", "mummer-like", "blast-like"):
            spec = WorkloadSpec(instances=[builtin_profiles()[name]] * 12)
            speedups[name] = 120_000 / simulate(spec).makespan_ms
        assert speedups["ara-like"] > speedups["mummer-like"] > speedups["blast-like"]

    def test_time_scale_scales_makespan(self):
        base = WorkloadSpec(instances=[builtin_profiles()["ara-like"]] * 12)
        scaled = WorkloadSpec(instances=base.instances, time_scale=0.1)
        assert simulate(scaled).makespan_ms == pytest.approx(
            simulate(base).makespan_ms * 0.1)

    def test_policy_separation_on_tight_device(self):
        # on a 2400 MiB device the queue head (1750 MiB) blocks smaller
        # requests under the blocking policy; the gap-filler finishes sooner
        dev = parse_device_config({"devices": [{"mib": 2400}]})
        p = builtin_profiles()
        inst = [p["ara-like"]] * 4 + [p["mummer-like"]] * 4 + [p["blast-like"]] * 4
        ms = {k: simulate(WorkloadSpec(instances=inst, policy=k, devices=dev)).makespan_ms
              for k in (PolicyKind.FIFO, PolicyKind.MMU)}
        assert ms[PolicyKind.FIFO] > ms[PolicyKind.MMU]


class TestMetrics:
    def test_exact_integrals_from_hand_built_events(self):
        cap = 1000
        events = [
            {"t": 0.0, "instance": 0, "event": "start"},
            {"t": 0.0, "instance": 0, "event": "alloc", "device": 0, "bytes": 500},
            {"t": 0.0, "instance": 0, "event": "busy_start"},
            {"t": 4.0, "instance": 0, "event": "busy_end"},
            {"t": 8.0, "instance": 0, "event": "free", "device": 0, "bytes": 500},
            {"t": 10.0, "instance": 0, "event": "end"},
        ]
        r = _metrics_from_events(events, cap)
        assert r.makespan_ms == pytest.approx(10_000)
        # 500/1000 held for 8 of 10 s => 40%
        assert r.avg_mem_util_pct == pytest.approx(40.0)
        # busy 4 of 10 s
        assert r.avg_device_util_pct == pytest.approx(40.0)
        assert r.max_concurrent_holders == 1
        assert r.oom_count == 0

    def test_empty_events(self):
        r = _metrics_from_events([], 1000)
        assert r.makespan_ms == 0.0 and r.instances == {}

    def test_csv_and_json_shapes(self):
        spec = WorkloadSpec(instances=[builtin_profiles()["ara-like"]])
        r = simulate(spec)
        csv = r.to_csv()
        assert csv.splitlines()[0] == "t_ms,instance,event,device,bytes"
        assert csv.splitlines()[-1].startswith("# makespan_ms=")
        summary = json.loads(r.to_json())
        assert summary["oom_count"] == 0 and summary["audit_ok"] is True


class TestRealRuns:
    def test_small_run_matches_simulation(self, tmp_path):
        spec = WorkloadSpec(instances=[builtin_profiles()["ara-like"]] * 3,
                            time_scale=0.05)
        real = run_workload(spec, workdir=str(tmp_path / "run"))
        sim = simulate(spec)
        assert real.oom_count == 0
        assert real.final_audit == []
        assert all(v["exit"] == 0 for v in real.instances.values())
        # loose bounds: this is a pipeline smoke test, fidelity is checked
        # on larger runs where constant per-process overhead amortises
        assert real.makespan_ms >= 0.9 * sim.makespan_ms
        assert real.makespan_ms <= sim.makespan_ms + 2000

    def test_sequential_baseline_sums_instances(self, tmp_path):
        spec = WorkloadSpec(instances=[builtin_profiles()["mummer-like"]] * 2,
                            time_scale=0.03)
        seq = sequential_baseline(spec, workdir=str(tmp_path / "seq"))
        single = 10_000 * 0.03
        assert seq.makespan_ms >= 1.9 * single
        assert seq.max_concurrent_holders == 1
        assert seq.final_audit == []

    def test_kill_plan_reports_and_audit_recovers(self, tmp_path):
        spec = WorkloadSpec(instances=[builtin_profiles()["mummer-like"]] * 2,
                            time_scale=0.05,
                            kill_plan=[(1, 2000)])  # mid-run, while holding
        report = run_workload(spec, workdir=str(tmp_path / "kill"))
        assert report.instances[1]["exit"] != 0  # SIGKILLed
        assert report.instances[0]["exit"] == 0
        assert report.oom_count == 0
        # survivor's shutdown sanity pass cleans the dead holder's records
        assert report.final_audit == []


class TestBench:
    def test_smoke_both_backends(self, tmp_path):
        results = bench_overhead(iterations=3, workdir=str(tmp_path))
        for backend in ("shm", "server"):
            stages = results[backend]
            for stage in ("init", "pre_alloc", "post_free", "shutdown"):
                assert stages[stage]["median_ms"] > 0
                assert stages[stage]["p95_ms"] >= stages[stage]["median_ms"]
            assert stages["client_total_median_ms"] > 0
