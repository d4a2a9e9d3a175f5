import dataclasses
import datetime
import itertools

import pytest

from tmano.authority import Phase
from tmano.credentials import Requirements, SubjectKind, Verdict, verify_signature
from tmano.exceptions import DuplicateSubscriptionError, SignatureError, TmanoError, UnknownSliceError
from tmano.lopat import Literal, Predicate, parse_rules
from tmano.nfvsim import SIM_EPOCH, EventKind, SimEvent, default_policy, logic_bomb_scenario
from tmano.resolution import FactBase, Query
from tmano.trustmgr import (
    AuditEvent,
    AuditLog,
    InfoSnapshot,
    Member,
    SliceVerdict,
    TrustStatus,
    VnfVerdict,
    find_conflicts,
    requirement_constants,
    rule_applies,
)

STATUSES = (TrustStatus.TRUSTED, TrustStatus.UNCERTAIN, TrustStatus.UNTRUSTED)


def verdict_of(i, status):
    failing = ("no_malware",) if status is TrustStatus.UNTRUSTED else ()
    return VnfVerdict(f"VNF{i}", f"VM{i}", status, failing)


def test_slice_status_is_the_worst_member():
    for combo in itertools.product(STATUSES, repeat=4):
        v = SliceVerdict.aggregate("NS1", [verdict_of(i, s) for i, s in enumerate(combo)], SIM_EPOCH)
        if TrustStatus.UNTRUSTED in combo:
            expected = TrustStatus.UNTRUSTED
        elif TrustStatus.UNCERTAIN in combo:
            expected = TrustStatus.UNCERTAIN
        else:
            expected = TrustStatus.TRUSTED
        assert v.status is expected, combo
        assert len(v.flagged) == sum(s is not TrustStatus.TRUSTED for s in combo)


def test_empty_slice_is_trusted():
    assert TrustStatus.supremum([]) is TrustStatus.TRUSTED


def test_verdict_invariants():
    with pytest.raises(TmanoError):
        VnfVerdict("VNF1", "VM1", TrustStatus.UNTRUSTED)
    with pytest.raises(TmanoError):
        VnfVerdict("VNF1", "VM1", TrustStatus.TRUSTED, ("no_malware",))


def test_requirement_constants_by_phase():
    rule = default_policy().rules[0]
    assert requirement_constants(rule, SubjectKind.VNF, Phase.PRE_DEPLOYMENT) == [
        "hash_is_valid",
        "digital_signature_is_valid",
    ]
    assert requirement_constants(rule, SubjectKind.SERVICE_VM, Phase.ACTIVE) == [
        "hash_is_valid",
        "no_memory_leakage",
        "trusted_processes_are_running",
        "no_external_software_call",
        "address_randomisation_enabled",
    ]


def test_action_labels():
    rule = default_policy().rules[0]
    assert rule_applies(rule, Phase.PRE_DEPLOYMENT) is Verdict.TRUSTED
    assert rule_applies(rule, Phase.ACTIVE) is Verdict.TRUSTED
    run_untrusted = dataclasses.replace(rule, run_time=Verdict.UNTRUSTED)
    assert rule_applies(run_untrusted, Phase.PRE_DEPLOYMENT) is Verdict.TRUSTED
    assert rule_applies(run_untrusted, Phase.ACTIVE) is Verdict.UNTRUSTED


def test_conflicting_facts():
    facts = FactBase.from_text("SatC(c1,malware_true). SatC(c1,malware_false). SatC(c2,malware_true).")
    assert find_conflicts(facts) == ["c1:malware"]


@pytest.fixture
def quiet_sim(make_sim):
    """NS001 created and deployed, no periodic evaluation, no mitigation."""
    sim = make_sim(logic_bomb_scenario(), interval=None, auto_mitigate=False)
    sim.create_slice(logic_bomb_scenario().descriptor)
    sim.deploy_slice("NS001")
    return sim


def test_clean_slice_is_trusted(quiet_sim):
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.TRUSTED
    assert v.phase is Phase.ACTIVE
    assert [str(m.member) for m in v.members] == ["VNF001/VM001", "VNF001/VM002"]
    assert all(m.certificate_id for m in v.members)
    assert quiet_sim.tm.last_status["NS001"] is TrustStatus.TRUSTED


def test_missing_property_makes_the_member_untrusted(quiet_sim):
    quiet_sim.inject_event(SimEvent(1, EventKind.CUSTOM, "VM001", {"add_process": "evil.sh"}))
    quiet_sim.advance(1)
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNTRUSTED
    bad = v.members[0]
    assert bad.status is TrustStatus.UNTRUSTED
    assert bad.failing == ("no_malware",)
    assert bad.reason == "policy 01: no derivation"
    assert v.members[1].status is TrustStatus.TRUSTED


def test_audit_timeline_per_member(quiet_sim):
    v = quiet_sim.tm.evaluate_slice("NS001")
    by_member = {}
    for ev in v.audit:
        by_member.setdefault(ev.subject, []).append(ev.step)
    expected = [f"S{i}" for i in range(1, 11)]
    assert by_member == {"VNF001/VM001": expected, "VNF001/VM002": expected}
    assert [ev.subject for ev in v.audit] == ["VNF001/VM001"] * 10 + ["VNF001/VM002"] * 10
    assert quiet_sim.tm.audit.lines()[-1].endswith("S10 VNF001/VM002 trusted")


def test_audit_log_sink():
    lines = []
    log = AuditLog(lines.append)
    log.append(AuditEvent(SIM_EPOCH, "S1", "VNF1/VM1", "evaluate slice NS1"))
    assert lines == ["2020-01-01T00:00:00Z S1 VNF1/VM1 evaluate slice NS1"]
    assert len(log) == 1


def test_snapshots_follow_the_phase(quiet_sim):
    m = Member("VNF001", "VM001")
    pre = quiet_sim.tm.collect_info(m, Phase.PRE_DEPLOYMENT)
    assert pre.dynamic is None
    active = quiet_sim.tm.collect_info("VM001", Phase.ACTIVE)
    assert active.dynamic.processes == ("sshd", "routerd")
    assert active.member == m
    with pytest.raises(TmanoError):
        InfoSnapshot("VNF001", "VM001", pre.static, SIM_EPOCH, Phase.PRE_DEPLOYMENT, active.dynamic)
    with pytest.raises(TmanoError):
        quiet_sim.tm.collect_info("VM999", Phase.ACTIVE)


def test_pre_deployment_ignores_dynamic_requirements(quiet_sim):
    quiet_sim.inject_event(SimEvent(1, EventKind.TRIGGER_LOGIC_BOMB, "VM002"))
    quiet_sim.advance(1)
    pre = quiet_sim.tm.evaluate_slice("NS001", Phase.PRE_DEPLOYMENT)
    assert pre.status is TrustStatus.TRUSTED
    active = quiet_sim.tm.evaluate_slice("NS001")
    assert active.status is TrustStatus.UNTRUSTED
    assert active.members[1].failing == ("no_malware",)


def test_attest_then_evaluate_one_member(quiet_sim, policies):
    tm = quiet_sim.tm
    snap = tm.collect_info(Member("VNF001", "VM002"), Phase.ACTIVE)
    cert = tm.request_attestation(snap)
    assert verify_signature(cert, quiet_sim.authority.public_key)
    assert tm.certificates[snap.member] is cert

    found = policies.fetch_policies("Domain 1", SubjectKind.SLICE, "NS001")
    v = tm.evaluate_subject(snap, cert, found)
    assert v.status is TrustStatus.TRUSTED
    assert v.certificate_id == cert.info.id
    assert "SatC('VNF001',no_malware)" in v.trace

    assert tm.evaluate_subject(snap, cert, []).reason == "no policy"


def test_tampered_certificate_is_rejected(quiet_sim):
    tm = quiet_sim.tm
    snap = tm.collect_info("VM001", Phase.ACTIVE)
    tm.transport_fault = lambda wire: wire.replace(b"No Memory Leakage", b"No Memory Leakagf")
    with pytest.raises(SignatureError):
        tm.request_attestation(snap)
    assert snap.member not in tm.certificates


def test_failed_attestation_is_uncertain(quiet_sim):
    quiet_sim.tm.transport_fault = lambda wire: wire.replace(b"No Memory Leakage", b"No Memory Leakagf")
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNCERTAIN
    assert all(m.reason.startswith("attestation failed") for m in v.members)
    assert all(m.failing == () for m in v.members)
    steps = [ev.detail for ev in v.audit if ev.step == "S6"]
    assert steps == ["attestation failed: bad_signature"] * 2

    quiet_sim.tm.transport_fault = lambda wire: wire.replace(b"<vnfName>", b"<vnfname>")
    assert quiet_sim.tm.evaluate_slice("NS001").status is TrustStatus.UNCERTAIN


def test_offline_authority_is_uncertain(quiet_sim):
    quiet_sim.authority.online = False
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNCERTAIN


def test_no_policy_is_uncertain(quiet_sim, policies, admin):
    policies.delete_policy("01", admin)
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNCERTAIN
    assert {m.reason for m in v.members} == {"no policy"}


def test_untrusted_action_label(quiet_sim, policies, admin):
    policy = default_policy()
    rule = dataclasses.replace(policy.rules[0], run_time=Verdict.UNTRUSTED)
    policies.update_policy("01", dataclasses.replace(policy, rules=(rule,)), admin)
    assert quiet_sim.tm.evaluate_slice("NS001", Phase.PRE_DEPLOYMENT).status is TrustStatus.TRUSTED
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNTRUSTED
    assert v.members[0].failing == ("action:untrusted",)


def test_two_spellings_of_one_property_are_uncertain(quiet_sim, policies, admin):
    policy = default_policy()
    rule = dataclasses.replace(policy.rules[0], vnf=Requirements(("Hash is Valid",), ("No Malware", "No-Malware")))
    policies.update_policy("01", dataclasses.replace(policy, rules=(rule,)), admin)
    v = quiet_sim.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNCERTAIN
    assert all(m.reason.startswith("ambiguous property:") for m in v.members)
    assert all(m.failing == () for m in v.members)

    # case and spacing are the same spelling
    rule = dataclasses.replace(policy.rules[0], vnf=Requirements(("Hash is Valid",), ("No Malware", "no  MALWARE")))
    policies.update_policy("01", dataclasses.replace(policy, rules=(rule,)), admin)
    assert quiet_sim.tm.evaluate_slice("NS001").status is TrustStatus.TRUSTED


@pytest.mark.parametrize("compromised", [False, True])
def test_more_requirements_never_improve_the_verdict(quiet_sim, policies, admin, compromised):
    if compromised:
        quiet_sim.inject_event(SimEvent(1, EventKind.TRIGGER_LOGIC_BOMB, "VM002"))
        quiet_sim.advance(1)
    policy = default_policy()
    dynamic = ("Memory Integrity OK", "No Extra Service Running", "No Malware")
    ranks = []
    for n in range(len(dynamic) + 1):
        rule = dataclasses.replace(
            policy.rules[0],
            vnf=Requirements(("Hash is Valid", "Digital Signature is Valid"), dynamic[:n]),
            service_vm=Requirements(("Hash is Valid",), ()),
        )
        policies.update_policy("01", dataclasses.replace(policy, rules=(rule,)), admin)
        ranks.append(quiet_sim.tm.evaluate_slice("NS001").status.rank)
    assert ranks == sorted(ranks)
    assert ranks[0] == TrustStatus.TRUSTED.rank
    assert ranks[-1] == (TrustStatus.UNTRUSTED if compromised else TrustStatus.TRUSTED).rank


def test_rules_extend_what_certificates_prove(make_sim, policies, admin):
    policy = default_policy()
    rule = dataclasses.replace(
        policy.rules[0],
        vnf=None,
        service_vm=Requirements(("Hash is Valid",), ("Trusted Boot",)),
    )
    policies.add_policy(dataclasses.replace(policy, rules=(rule,)), admin)

    scenario = logic_bomb_scenario()
    plain = make_sim(scenario, interval=None)
    plain.create_slice(scenario.descriptor)
    v = plain.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.UNTRUSTED
    assert v.members[0].failing == ("trusted_boot",)

    rules = parse_rules("SatC(X,trusted_boot) <- SatC(X,hash_is_valid) & SatC(X,digital_signature_is_valid).")
    plain.tm.rules = rules
    v = plain.tm.evaluate_slice("NS001")
    assert v.status is TrustStatus.TRUSTED
    assert "[rule-expansion] ok" in v.members[0].trace


def test_verdict_serialisation(quiet_sim):
    v = quiet_sim.tm.evaluate_slice("NS001")
    back = SliceVerdict.from_json(v.to_json())
    assert back.to_dict() == v.to_dict()
    assert back.status is v.status
    doc = v.document().splitlines()
    assert doc[0] == "slice NS001 trusted 2020-01-01T00:00:00Z (active)"
    assert doc[1] == "  VNF001/VM001 trusted"


def test_trust_query(make_sim):
    rules = parse_rules("SatNS(N,secure) <- SatC(C,no_malware) & HasNS(N,C).")
    scenario = logic_bomb_scenario()
    sim = make_sim(scenario, rules=rules, interval=None)
    sim.create_slice(scenario.descriptor)
    request = Literal.of(Predicate.DO, "NS001", "Domain 1", "use", "allow")

    res = sim.tm.query("NS001", Query(request, (Literal.of(Predicate.SAT_NS, "NS001", "secure"),)))
    assert res.satisfied
    assert res.permission == "allow"

    res = sim.tm.query("NS001", Query(request, (Literal.of(Predicate.SAT_NS, "NS001", "certified"),)))
    assert not res.satisfied
    assert res.permission is None


def test_periodic_subscriptions(quiet_sim):
    tm = quiet_sim.tm
    sub = tm.schedule_periodic_evaluation("NS001", 3)
    with pytest.raises(DuplicateSubscriptionError):
        tm.schedule_periodic_evaluation("NS001", 3)
    with pytest.raises(ValueError):
        tm.schedule_periodic_evaluation("NS002", 0)
    with pytest.raises(UnknownSliceError):
        tm.schedule_periodic_evaluation("NS002", 3)

    quiet_sim.advance(7)
    assert sub.evaluations == 2
    assert tm.subscription("NS001") is sub
    sub.cancel()
    assert tm.subscription("NS001") is None
    quiet_sim.advance(10)
    assert sub.evaluations == 2


def test_periodic_alerts_on_change(quiet_sim):
    alerts = []
    quiet_sim.tm.add_alert_listener(alerts.append)
    quiet_sim.tm.schedule_periodic_evaluation("NS001", 5)
    quiet_sim.inject_event(SimEvent(7, EventKind.TRIGGER_LOGIC_BOMB, "VM002"))
    quiet_sim.advance(20)
    assert len(alerts) == 1
    alert = alerts[0]
    assert (alert.previous, alert.current) == (TrustStatus.TRUSTED, TrustStatus.UNTRUSTED)
    assert alert.untrusted_members == [Member("VNF001", "VM002")]
    assert alert.verdict.evaluated_at == SIM_EPOCH + datetime.timedelta(seconds=10)
