import io
import statistics

import pytest

from tmano.authority import measure
from tmano.exceptions import GateFailure, SimulationError, UnknownSliceError
from tmano.nfvsim import (
    BENCH_COLUMNS,
    BOMB_SCRIPT,
    BenchReport,
    EventKind,
    Scheduler,
    SimEvent,
    SliceDescriptor,
    VmDescriptor,
    VmStatus,
    VnfDescriptor,
    dump_descriptor,
    format_pct,
    load_descriptor,
    logic_bomb_scenario,
    overhead_ratio,
    parse_schedule,
    run_opd_benchmark,
    write_bench_csv,
)
from tmano.trustmgr import TrustStatus


def entries(log, tick=None):
    return [(e.kind, e.subject, e.detail) for e in log if tick is None or e.tick == tick]


def start(sim, scenario):
    sim.create_slice(scenario.descriptor)
    sim.deploy_slice(scenario.descriptor.slice_id)
    for ev in scenario.events:
        sim.inject_event(ev)


def test_logic_bomb_timeline(bomb_sim):
    sim, sc = bomb_sim
    start(sim, sc)
    assert entries(sim.log, 0) == [
        ("create", "NS001", "2 members staged"),
        ("verdict", "NS001", "pre_deployment trusted"),
        ("deploy", "NS001", "2 members deployed"),
        ("inject", "VM002", "trigger_logic_bomb@10"),
    ]

    sim.advance(20)
    assert entries(sim.log, 5) == [("verdict", "NS001", "active trusted")]
    # the periodic evaluation was scheduled first, so it sees the VM before the bomb goes off
    assert entries(sim.log, 10) == [
        ("verdict", "NS001", "active trusted"),
        ("event", "VM002", "trigger_logic_bomb"),
    ]
    assert entries(sim.log, 15) == [
        ("verdict", "NS001", "active untrusted flagged=VNF001/VM002"),
        ("alert", "NS001", "trusted->untrusted"),
        ("isolate", "VM002", ""),
        ("verdict", "NS001", "pre_deployment trusted"),
        ("replace", "VM002", "-> VM002_r1"),
        ("verdict", "NS001", "active trusted"),
    ]
    assert entries(sim.log, 20) == [("verdict", "NS001", "active trusted")]

    [record] = sim.mitigations
    assert record.ok
    assert (record.vnf_id, record.vm_id, record.replacement) == ("VNF001", "VM002", "VM002_r1")
    assert (record.isolated_at, record.replaced_at, record.reevaluated_at) == (15, 15, 15)
    assert record.status is TrustStatus.TRUSTED

    desc = sim.slices["NS001"]
    assert desc.version == 2
    assert [str(m) for m in desc.members()] == ["VNF001/VM001", "VNF001/VM002_r1"]
    assert sim.vms["VM002"].status is VmStatus.REPLACED
    assert sim.vms["VM002_r1"].status is VmStatus.DEPLOYED
    assert sim.tm.last_status["NS001"] is TrustStatus.TRUSTED

    sub = sim.tm.subscription("NS001")
    assert [v.status for v in sub.verdicts] == [
        TrustStatus.TRUSTED, TrustStatus.TRUSTED, TrustStatus.UNTRUSTED, TrustStatus.TRUSTED,
    ]


def test_timeline_is_deterministic(make_sim):
    runs = []
    for _ in range(2):
        sc = logic_bomb_scenario()
        sim = make_sim(sc)
        start(sim, sc)
        sim.advance(30)
        runs.append([e.line() for e in sim.log])
    assert runs[0] == runs[1]


def test_events_on_isolated_vms_are_dropped(bomb_sim):
    sim, sc = bomb_sim
    start(sim, sc)
    sim.inject_event(SimEvent(17, EventKind.CUSTOM, "VM002", {"add_process": "evil.sh"}))
    new = sim.advance(20)
    assert ("dropped", "VM002", "custom") in entries(new)
    assert "evil.sh" not in sim.vms["VM002_r1"].live.processes


def test_mitigation_without_a_clean_image(bomb_sim):
    sim, sc = bomb_sim
    start(sim, sc)
    sim.advance(12)
    del sim.images["linux-zsh"]
    sim.advance(8)
    assert ("mitigation", "VM002", "failed: no clean replacement image") in entries(sim.log, 15)
    [record] = sim.mitigations
    assert not record.ok
    assert record.replacement is None
    assert sim.vms["VM002"].status is VmStatus.ISOLATED
    # still untrusted at 20, but no second alert
    assert [k for k, _, _ in entries(sim.log) if k == "alert"] == ["alert"]
    assert sim.tm.last_status["NS001"] is TrustStatus.UNTRUSTED


def test_no_mitigation_when_disabled(make_sim):
    sc = logic_bomb_scenario()
    sim = make_sim(sc, auto_mitigate=False)
    start(sim, sc)
    sim.advance(20)
    assert sim.mitigations == []
    assert sim.vms["VM002"].status is VmStatus.DEPLOYED
    assert sim.tm.last_status["NS001"] is TrustStatus.UNTRUSTED


def test_ns400_shared_slice(ns400_sim):
    sim, sc = ns400_sim
    result = sim.create_and_deploy_slice(sc.descriptor)
    assert result.deployed
    assert result.verdict.status is TrustStatus.TRUSTED
    assert len(result.verdict.members) == 6
    assert sim.realm("NS400") == "Domain 1"
    assert [str(m) for m in sim.locate("VNF2")] == ["VNF2/VM03", "VNF2/VM04", "VNF2/VM05"]

    for ev in sc.events:
        sim.inject_event(ev)
    sim.advance(15)
    assert ("verdict", "NS400", "active untrusted flagged=VNF3/VM06") in entries(sim.log, 15)
    assert ("replace", "VM06", "-> VM06_r1") in entries(sim.log, 15)
    assert sim.tm.last_status["NS400"] is TrustStatus.TRUSTED


def test_gate_rejects_tampered_images(bomb_sim):
    sim, sc = bomb_sim
    sim.create_slice(sc.descriptor)
    sim.inject_event(SimEvent(1, EventKind.TAMPER_IMAGE, "VM001"))
    sim.advance(1)
    with pytest.raises(GateFailure) as exc:
        sim.deploy_slice("NS001")
    assert exc.value.failing == ["VNF001/VM001:hash"]
    assert entries(sim.log)[-1] == ("gate", "NS001", "failed VNF001/VM001:hash")
    assert sim.vms["VM001"].status is VmStatus.STAGED
    assert sim.tm.subscription("NS001") is None


def test_create_and_deploy_is_all_or_nothing(bomb_sim):
    sim, _ = bomb_sim
    desc = SliceDescriptor(
        "NS002", "Domain 1", ("tenant-b",),
        (VnfDescriptor("VNF777", "router", "OF", (VmDescriptor("VM777", "yuzu", "linux-base"),)),),
    )
    with pytest.raises(GateFailure) as exc:
        sim.create_and_deploy_slice(desc)
    assert exc.value.failing == ["VNF777/VM777:hash"]
    assert "NS002" not in sim.slices
    assert "VM777" not in sim.vms


def test_lifecycle_errors(bomb_sim):
    sim, sc = bomb_sim
    with pytest.raises(UnknownSliceError):
        sim.deploy_slice("NS001")
    sim.create_slice(sc.descriptor)
    with pytest.raises(SimulationError):
        sim.create_slice(sc.descriptor)
    with pytest.raises(SimulationError):
        sim.inject_event(SimEvent(5, EventKind.CUSTOM, "VM999"))
    sim.deploy_slice("NS001")
    with pytest.raises(SimulationError):
        sim.deploy_slice("NS001")
    with pytest.raises(SimulationError):
        sim.inject_event(SimEvent(0, EventKind.CUSTOM, "VM001"))

    other = SliceDescriptor(
        "NS003", "Domain 1", (), (VnfDescriptor("VNF9", "r", "OF", (VmDescriptor("VM9", "x", "nope"),)),)
    )
    with pytest.raises(SimulationError):
        sim.create_slice(other)

    reused = SliceDescriptor(
        "NS004", "Domain 1", (), (VnfDescriptor("VNF001", "r", "OF", (VmDescriptor("VM41", "x", "linux-base"),)),)
    )
    with pytest.raises(SimulationError, match="VNF001"):
        sim.create_slice(reused)
    assert "VM41" not in sim.vms
    assert "NS004" not in sim.slices


def test_scheduler_orders_by_tick_then_insertion():
    s = Scheduler()
    fired = []
    periodic = s.every(5, lambda t: fired.append(("p", t)))
    s.at(10, lambda t: fired.append(("e", t)))
    s.at(5, lambda t: fired.append(("x", t)))
    s.advance(10)
    assert fired == [("p", 5), ("x", 5), ("p", 10), ("e", 10)]
    assert s.now == 10
    assert s.pending() == 1

    with pytest.raises(SimulationError):
        s.at(10, lambda t: None)
    with pytest.raises(SimulationError):
        s.advance(0)
    with pytest.raises(SimulationError):
        s.every(0, lambda t: None)

    s.cancel(periodic)
    s.advance(10)
    assert fired[-1] == ("e", 10)
    assert s.pending() == 0
    assert s.now == 20


def test_parse_schedule():
    events = parse_schedule(
        """
        # bomb first
        10 trigger_logic_bomb VM002 aslr=false shell=zsh
        12 custom VM001 add_process=evil.sh memory_leakage=TRUE count=3
        14 tamper_image VM001
        """
    )
    assert [(e.tick, e.kind, e.target) for e in events] == [
        (10, EventKind.TRIGGER_LOGIC_BOMB, "VM002"),
        (12, EventKind.CUSTOM, "VM001"),
        (14, EventKind.TAMPER_IMAGE, "VM001"),
    ]
    assert events[0].payload == {"aslr": False, "shell": "zsh"}
    assert events[1].payload == {"add_process": "evil.sh", "memory_leakage": True, "count": 3}

    for bad in ("x custom VM1", "5 explode VM1", "5 custom", "5 custom VM1 novalue"):
        with pytest.raises(SimulationError):
            parse_schedule(bad)


def test_descriptor_files():
    sc = logic_bomb_scenario()
    text = dump_descriptor(sc.descriptor, sc.images)
    desc, images = load_descriptor(text)
    assert desc == sc.descriptor
    assert images == list(sc.images)

    desc, images = load_descriptor("slice: NS9\nrealm: Domain 2\nvnfs:\n  - id: V1\n    vms:\n      - id: M1\n        image: linux-base\n")
    assert desc.members()[0].vm_id == "M1"
    assert desc.vnfs[0].vms[0].name == "M1"
    assert images == []

    for bad in ("- a\n- b\n", "slice: NS9\n", "slice: NS9\nrealm: D\nvnfs: []\n", "slice: [unclosed\n"):
        with pytest.raises(SimulationError):
            load_descriptor(bad)


def test_slice_descriptor_validation():
    vm = VmDescriptor("VM1", "a", "img")
    with pytest.raises(SimulationError):
        SliceDescriptor("NS1", "D", (), ())
    with pytest.raises(SimulationError):
        SliceDescriptor("NS1", "D", (), (VnfDescriptor("V1", "r", "OF", ()),))
    with pytest.raises(SimulationError):
        SliceDescriptor("NS1", "D", (), (VnfDescriptor("V1", "r", "OF", (vm,)), VnfDescriptor("V2", "r", "OF", (vm,))))
    desc = SliceDescriptor("NS1", "D", (), (VnfDescriptor("V1", "r", "OF", (vm,)),))
    swapped = desc.swap_vm("VM1", VmDescriptor("VM1_r1", "a", "img"))
    assert swapped.version == 2
    assert [m.vm_id for m in swapped.members()] == ["VM1_r1"]
    with pytest.raises(SimulationError):
        desc.vnf("V9")


def test_overhead_ratio():
    assert format_pct(overhead_ratio(453.64, 478.56)) == "5.49%"
    assert overhead_ratio(2.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        overhead_ratio(0.0, 1.0)


def test_opd_benchmark_grid():
    reports = run_opd_benchmark([1, 2], [0, 3], repetitions=2, image_size=1024)
    assert [(r.vms, r.properties) for r in reports] == [(1, 0), (1, 3), (2, 0), (2, 3)]
    for r in reports:
        assert r.runs == 2
        assert r.base_opd == statistics.fmean(r.base_samples)
        assert all(t >= b for b, t in zip(r.base_samples, r.trust_samples))
        assert r.attest_opd > 0.0
        if r.properties == 0:
            # binary attestation alone separates the two columns
            assert r.trust_opd > r.base_opd
            assert r.trust_opd - r.base_opd == pytest.approx(r.attest_opd, abs=1e-9)
            assert r.property_opd == pytest.approx(0.0, abs=1e-9)
            assert r.cpu_time == 0.0
            assert r.overhead_pct > 0.0
        else:
            assert r.property_opd > 0.0

    out = io.StringIO()
    write_bench_csv(reports, out)
    rows = out.getvalue().splitlines()
    assert rows[0] == ",".join(BENCH_COLUMNS)
    assert len(rows) == 5
    assert rows[1].startswith("1,0,")


def test_benchmark_arguments():
    with pytest.raises(ValueError):
        run_opd_benchmark([0], [1])
    with pytest.raises(ValueError):
        run_opd_benchmark([1], [1], repetitions=0)
    with pytest.raises(SimulationError):
        BenchReport(1, 1, (), ())


def test_trust_opd_grows_with_properties_and_vms():
    by_props = run_opd_benchmark([2], [0, 50, 200], repetitions=2, image_size=1024)
    opd = [r.trust_opd for r in by_props]
    assert opd == sorted(opd)
    assert opd[0] < opd[-1]

    by_vms = run_opd_benchmark([1, 8], [50], repetitions=2, image_size=1024)
    assert by_vms[0].trust_opd < by_vms[1].trust_opd


def test_tampered_running_vm_leaves_service(make_sim):
    sc = logic_bomb_scenario()
    sim = make_sim(sc, interval=None, auto_mitigate=False)
    sim.create_and_deploy_slice(sc.descriptor)
    sim.inject_event(SimEvent(1, EventKind.TAMPER_IMAGE, "VM001"))
    new = sim.advance(1)
    assert entries(new) == [
        ("event", "VM001", "tamper_image"),
        ("integrity", "VM001", "digest mismatch"),
        ("isolate", "VM001", ""),
    ]
    assert sim.vms["VM001"].status is VmStatus.ISOLATED
    for vm in sim.vms.values():
        if vm.status is VmStatus.DEPLOYED:
            assert measure(vm.content) == sim.authority.references.get(vm.image).digest


def test_tampered_running_vm_is_replaced(make_sim):
    sc = logic_bomb_scenario()
    sim = make_sim(sc, interval=None)
    sim.create_and_deploy_slice(sc.descriptor)
    sim.inject_event(SimEvent(1, EventKind.TAMPER_IMAGE, "VM001", {"bytes": "rootkit"}))
    new = sim.advance(1)
    assert entries(new) == [
        ("event", "VM001", "tamper_image"),
        ("integrity", "VM001", "digest mismatch"),
        ("isolate", "VM001", ""),
        ("verdict", "NS001", "pre_deployment trusted"),
        ("replace", "VM001", "-> VM001_r1"),
        ("verdict", "NS001", "active trusted"),
    ]
    [record] = sim.mitigations
    assert (record.vm_id, record.replacement, record.ok) == ("VM001", "VM001_r1", True)
    desc = sim.slices["NS001"]
    assert desc.version == 2
    assert [str(m) for m in desc.members()] == ["VNF001/VM001_r1", "VNF001/VM002"]
    deployed = [vm for vm in sim.vms.values() if vm.status is VmStatus.DEPLOYED]
    assert sorted(vm.vm_id for vm in deployed) == ["VM001_r1", "VM002"]
    assert all(measure(vm.content) == sim.authority.references.get(vm.image).digest for vm in deployed)


def test_logic_bomb_needs_a_dormant_script(make_sim):
    sc = logic_bomb_scenario()
    sim = make_sim(sc, interval=None)
    sim.create_and_deploy_slice(sc.descriptor)
    before = sim.vms["VM001"].live
    assert sim.vms["VM001"].dormant == ()
    assert BOMB_SCRIPT in sim.vms["VM002"].dormant

    sim.inject_event(SimEvent(1, EventKind.TRIGGER_LOGIC_BOMB, "VM001"))
    sim.inject_event(SimEvent(2, EventKind.TRIGGER_LOGIC_BOMB, "VM002", {"script": "other.sh"}))
    sim.inject_event(SimEvent(3, EventKind.TRIGGER_LOGIC_BOMB, "VM002"))
    new = sim.advance(3)
    assert entries(new) == [
        ("dropped", "VM001", f"trigger_logic_bomb {BOMB_SCRIPT} not in image"),
        ("dropped", "VM002", "trigger_logic_bomb other.sh not in image"),
        ("event", "VM002", "trigger_logic_bomb"),
    ]
    assert sim.vms["VM001"].live == before
    assert sim.vms["VM002"].live.processes[-1] == BOMB_SCRIPT


def test_second_mitigation_of_the_same_alert_is_a_no_op(bomb_sim):
    sim, sc = bomb_sim
    alerts = []
    sim.tm.add_alert_listener(alerts.append)
    start(sim, sc)
    sim.advance(15)
    [alert] = alerts
    [record] = sim.mitigations
    statuses = {vm_id: vm.status for vm_id, vm in sim.vms.items()}
    log_size = len(sim.log)

    assert sim.mitigate(alert) == []
    assert sim.mitigations == [record]
    assert {vm_id: vm.status for vm_id, vm in sim.vms.items()} == statuses
    assert len(sim.log) == log_size
    assert sim.slices["NS001"].version == 2
    assert len(sim.members("NS001")) == len(sc.descriptor.members())
