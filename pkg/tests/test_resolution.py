import dataclasses
import datetime
import random

import pytest

from tmano.credentials import DigestEntry, DigestReport, canonicalize_and_sign, parse_certificate
from tmano.exceptions import RuleValidationError
from tmano.lopat import Literal, Predicate, Rule, RuleBase, RuleKind, parse_literal, parse_rules
from tmano.nfvsim import SIM_EPOCH
from tmano.resolution import (
    FactBase,
    Limits,
    Provenance,
    Query,
    StepKind,
    certificate_facts,
    check_prereq,
    cp_resolve,
    derive_facts_from_digest_report,
    derive_facts_from_property_certs,
    forward_close,
    prove_goal,
    resolve,
)

HASH = "hash_e2c182bbb85c2e3a5fcae1936c5900cf91dd7743"
TRUST_RULE = f"SatC(c1,trusted_true) <- SatC(c1,{HASH}) & SatC(c1,malware_false)."


def L(text):
    return parse_literal(text)


def test_factbase_basics():
    fb = FactBase.from_text("SatC(c1,p1). HasNS(ns1,c1). HasNS(ns1,c2).")
    assert len(fb) == 3
    assert L("SatC(c1,p1)") in fb
    assert len(fb.lookup(Predicate.HAS_NS, "ns1")) == 2
    assert fb.provenance(L("SatC(c1,p1)")) == {Provenance.ASSERTED}
    merged = fb.merge(FactBase([L("SatC(c1,p1)")], Provenance.DIGEST_REPORT))
    assert merged.provenance(L("SatC(c1,p1)")) == {Provenance.ASSERTED, Provenance.DIGEST_REPORT}
    assert len(merged) == 3


def test_factbase_rejects_non_ground():
    with pytest.raises(RuleValidationError):
        FactBase([parse_rules("SatC(X,p1) <- SatC(X,p2).").rules[0].head])


def test_trust_rule_needs_both_facts():
    rules = parse_rules(TRUST_RULE)
    goal = L("SatC(c1,trusted_true)")
    facts = FactBase.from_text(f"SatC(c1,{HASH}). SatC(c1,malware_false).")
    res = cp_resolve(goal, facts, rules)
    assert res.satisfied
    assert res.reason == ""

    for missing in (f"SatC(c1,{HASH})", "SatC(c1,malware_false)"):
        partial = FactBase(lit for lit in facts if lit != L(missing))
        res = cp_resolve(goal, partial, rules)
        assert not res.satisfied
        assert res.reason == "no derivation"


def test_cp_resolve_wants_ground_satc():
    with pytest.raises(RuleValidationError):
        cp_resolve(L("SatNS(ns1,p1)"), FactBase(), RuleBase())


def test_trace_records_steps():
    rules = parse_rules(TRUST_RULE)
    facts = FactBase.from_text(f"SatC(c1,{HASH}). SatC(c1,malware_false).")
    res = cp_resolve(L("SatC(c1,trusted_true)"), facts, rules)
    steps = {n.step for n in res.trace.nodes()}
    assert StepKind.RULE_EXPANSION in steps
    assert StepKind.FACT_MATCH in steps
    text = res.trace.to_text()
    assert text.startswith("# goal: SatC(c1,trusted_true)")
    assert "[rule-expansion] ok" in text


def test_self_referential_rule_is_a_cycle():
    rules = parse_rules("SatC(c1,p1) <- SatC(c1,p1).")
    res = cp_resolve(L("SatC(c1,p1)"), FactBase(), rules)
    assert not res.satisfied
    assert res.reason == "cycle"


def test_mutual_recursion_terminates():
    rules = parse_rules(
        """
        SatC(X,p1) <- SatC(X,p2).
        SatC(X,p2) <- SatC(X,p1).
        SatNS(N,q1) <- SatNS(N,q2).
        SatNS(N,q2) <- SatNS(N,q1).
        """
    )
    facts = FactBase.from_text("HasNS(ns1,c1).")
    assert cp_resolve(L("SatC(c1,p1)"), facts, rules).reason == "cycle"
    assert prove_goal(L("SatNS(ns1,q1)"), facts, rules).reason == "cycle"

    with_fact = facts.add(L("SatC(c1,p2)"))
    assert cp_resolve(L("SatC(c1,p1)"), with_fact, rules).satisfied


def test_budget_exhaustion():
    rules = parse_rules(
        """
        SatC(c1,p1) <- SatC(c1,p2).
        SatC(c1,p2) <- SatC(c1,p3).
        SatC(c1,p3) <- SatC(c1,p4).
        """
    )
    facts = FactBase.from_text("SatC(c1,p4).")
    assert cp_resolve(L("SatC(c1,p1)"), facts, rules).satisfied
    res = cp_resolve(L("SatC(c1,p1)"), facts, rules, Limits(steps=2))
    assert not res.satisfied
    assert res.reason == "budget"
    res = cp_resolve(L("SatC(c1,p1)"), facts, rules, Limits(depth=1))
    assert res.reason == "budget"
    with pytest.raises(ValueError):
        Limits(depth=0)


def test_prereq_gates_facts_and_rules():
    facts = FactBase.from_text("SatC(c1,p1). PreReq(c1,p1,c2,p2).")
    res = cp_resolve(L("SatC(c1,p1)"), facts, RuleBase())
    assert not res.satisfied
    assert res.reason == "prerequisite unmet"
    assert not check_prereq(L("SatC(c1,p1)"), facts)

    ok = facts.add(L("SatC(c2,p2)"))
    assert check_prereq(("c1", "p1"), ok)
    assert cp_resolve(L("SatC(c1,p1)"), ok, RuleBase()).satisfied


def test_prereq_only_looks_at_facts():
    # SatC(c2,p2) is derivable but not a fact, so the prerequisite is unmet
    rules = parse_rules("SatC(c2,p2) <- SatC(c2,p3).")
    facts = FactBase.from_text("SatC(c1,p1). SatC(c2,p3). PreReq(c1,p1,c2,p2).")
    assert cp_resolve(L("SatC(c2,p2)"), facts, rules).satisfied
    assert not cp_resolve(L("SatC(c1,p1)"), facts, rules).satisfied
    assert L("SatC(c1,p1)") not in forward_close(facts, rules)


def _slice_rules():
    return parse_rules(
        """
        SatNS(N,secure) <- SatC(C,no_malware) & HasNS(N,C).
        SatNS(N,trusted) <- SatC(C,hash_ok) & HasNS(N,C) & SatNS(N,secure).
        """
    )


def test_resolve_grants_the_permission():
    facts = FactBase.from_text("HasNS(ns1,c1). SatC(c1,no_malware). SatC(c1,hash_ok).")
    q = Query(L("Do(ns1,r1,a1,allow)"), (L("SatNS(ns1,trusted)"),))
    res = resolve(q, facts, _slice_rules())
    assert res.satisfied
    assert res.permission == "allow"
    assert res.trace.header[0] == "request: Do(ns1,r1,a1,allow)"

    deny = Query(L("Do(ns1,r1,a1,deny)"), (L("SatNS(ns1,secure)"),))
    assert resolve(deny, facts, _slice_rules()).permission == "deny"


def test_resolve_needs_every_goal():
    facts = FactBase.from_text("HasNS(ns1,c1). SatC(c1,no_malware).")
    q = Query(L("Do(ns1,r1,a1,allow)"), (L("SatNS(ns1,secure)"), L("SatNS(ns1,trusted)")))
    res = resolve(q, facts, _slice_rules())
    assert not res.satisfied
    assert res.permission is None
    assert res.reason == "no derivation"


def test_resolve_reports_unknown_constants():
    q = Query(L("Do(ns9,r1,a1,allow)"), (L("SatNS(ns9,secure)"),))
    res = resolve(q, FactBase.from_text("HasNS(ns1,c1)."), _slice_rules())
    assert not res.satisfied
    assert res.unknown == ("ns9",)


def test_query_validation():
    with pytest.raises(RuleValidationError):
        Query(L("SatNS(ns1,p1)"), (L("SatNS(ns1,p1)"),))
    with pytest.raises(RuleValidationError):
        Query(L("Do(ns1,r1,a1,allow)"), ())
    with pytest.raises(RuleValidationError):
        Query(L("Do(ns1,r1,a1,allow)"), (L("SatC(c1,p1)"),))


def test_forward_close_marks_derived():
    facts = FactBase.from_text("HasNS(ns1,c1). SatC(c1,no_malware).")
    closed = forward_close(facts, _slice_rules())
    assert L("SatNS(ns1,secure)") in closed
    assert closed.provenance(L("SatNS(ns1,secure)")) == {Provenance.DERIVED}
    assert L("SatNS(ns1,trusted)") not in closed


def test_forward_close_rejects_unrestricted_rules():
    head = L("SatC(c1,p1)")
    # built by hand: RuleBase would refuse it
    rb = RuleBase.__new__(RuleBase)
    object.__setattr__(rb, "rules", (Rule(parse_rules("SatC(X,p1) <- SatC(X,p2).").rules[0].head, (head,), RuleKind.CP),))
    object.__setattr__(rb, "realm", "default")
    object.__setattr__(rb, "_by_head", {})
    with pytest.raises(RuleValidationError):
        forward_close(FactBase(), rb)


def test_digest_report_facts():
    report = DigestReport(
        "NS1",
        (DigestEntry("VNF1", "a" * 64, subcomponents=(DigestEntry("VM1", "b" * 64),)),),
    )
    fb = derive_facts_from_digest_report(report)
    assert set(fb) == {
        Literal.of(Predicate.HAS_NS, "NS1", "VNF1"),
        Literal.of(Predicate.SAT_C, "VNF1", "hash_" + "a" * 64),
        Literal.of(Predicate.HAS_C, "VNF1", "VM1"),
        Literal.of(Predicate.SAT_C, "VM1", "hash_" + "b" * 64),
    }
    assert all(fb.provenance(lit) == {Provenance.DIGEST_REPORT} for lit in fb)


def test_certificate_facts_from_sample(sample_certificate):
    cert = parse_certificate(sample_certificate)
    facts = {str(lit) for lit in certificate_facts(cert)}
    assert facts == {
        "SatC(022RV,hash_1a0f21437fc619acc51a81d552e9af77562263f7589f72752ac492caac9f7ed5)",
        "SatC(022RV,no_malware)",
        "SatC(022RV,memory_integrity_ok)",
        "SatC(022RV,no_extra_service_running)",
        "SatC('D1X022RV',hash_d41dc6385e804fd6c6fe049ecd56a3c1bafa61e669d4f3b49082ff56f8ade10d)",
        "SatC('D1X022RV',trusted_processes_are_running_10)",
        "SatC('D1X022RV',trusted_processes_are_running)",
        "SatC('D1X022RV',no_memory_leakage)",
        "SatC('D1X022RV',no_external_software_call)",
    }



def test_property_certs_skip_what_cannot_be_trusted(sample_certificate, ta_key):
    cert = parse_certificate(sample_certificate)
    good = canonicalize_and_sign(
        dataclasses.replace(cert, info=dataclasses.replace(cert.info, issued=SIM_EPOCH)), ta_key
    )
    skipped = []

    def on_skip(c, e):
        skipped.append(type(e).__name__)

    fb = derive_facts_from_property_certs([good, cert], ta_key, SIM_EPOCH, on_skip=on_skip)
    assert set(fb) == set(certificate_facts(good))
    assert all(fb.provenance(lit) == {Provenance.PROPERTY_CERTIFICATE} for lit in fb)
    assert skipped == ["SignatureError"]

    late = SIM_EPOCH + datetime.timedelta(hours=25)
    assert len(derive_facts_from_property_certs([good], ta_key, late, on_skip=on_skip)) == 0
    assert skipped[-1] == "CertificateExpiredError"

    assert len(derive_facts_from_property_certs([good], known_subjects=["VNF001"], on_skip=on_skip)) == 0
    assert skipped[-1] == "UnknownSubjectError"

    # without a key every certificate is taken at face value
    assert len(derive_facts_from_property_certs([cert])) == 9


# --- backward resolution agrees with the least fixpoint ---


def _random_instance(rng):
    comps = [f"c{i}" for i in range(rng.randint(2, 5))]
    props = [f"p{i}" for i in range(rng.randint(2, 4))]
    slices = ["ns0", "ns1"]

    facts = set()
    for _ in range(rng.randint(0, 8)):
        facts.add(f"SatC({rng.choice(comps)},{rng.choice(props)}).")
    for _ in range(rng.randint(0, 3)):
        a, b = rng.sample(comps, 2)
        facts.add(f"HasC({a},{b}).")
    for _ in range(rng.randint(0, 4)):
        facts.add(f"HasNS({rng.choice(slices)},{rng.choice(comps)}).")
    for _ in range(rng.randint(0, 2)):
        facts.add(f"SatNS({rng.choice(slices)},{rng.choice(props)}).")
    if rng.random() < 0.3:
        facts.add(
            f"PreReq({rng.choice(comps)},{rng.choice(props)},{rng.choice(comps)},{rng.choice(props)})."
        )

    def p():
        return rng.choice(props)

    templates = [
        lambda: f"SatC(X,{p()}) <- SatC(X,{p()}).",
        lambda: f"SatC(X,{p()}) <- SatC(Y,{p()}) & HasC(X,Y).",
        lambda: f"SatC({rng.choice(comps)},{p()}) <- SatC({rng.choice(comps)},{p()}).",
        lambda: f"SatC(X,{p()}) <- SatC(X,{p()}) & SatC(X,{p()}).",
        lambda: f"SatNS(N,{p()}) <- SatNS(N,{p()}).",
        lambda: f"SatNS(N,{p()}) <- SatC(Y,{p()}) & HasNS(N,Y).",
        lambda: f"SatNS(N,{p()}) <- SatC(Y,{p()}) & HasNS(N,Y) & SatNS(N,{p()}).",
    ]
    rules: list[str] = []
    for _ in range(rng.randint(1, 7)):
        text = rng.choice(templates)()
        if text not in rules:
            rules.append(text)

    goals = [Literal.of(Predicate.SAT_C, c, q) for c in comps for q in props]
    goals += [Literal.of(Predicate.SAT_NS, n, q) for n in slices for q in props]
    return FactBase.from_text(" ".join(sorted(facts))), parse_rules("\n".join(rules)), goals


def test_resolution_agrees_with_forward_closure():
    rng = random.Random(20201)
    limits = Limits(depth=500, steps=1_000_000)
    for _ in range(1000):
        facts, rules, goals = _random_instance(rng)
        closed = forward_close(facts, rules)
        for goal in goals:
            res = prove_goal(goal, facts, rules, limits)
            assert res.reason != "budget"
            assert res.satisfied == (goal in closed), (goal, facts, list(map(str, rules)))


def test_more_facts_never_lose_a_goal():
    rng = random.Random(7331)
    limits = Limits(depth=500, steps=1_000_000)
    for _ in range(300):
        facts, rules, goals = _random_instance(rng)
        extra, _, _ = _random_instance(rng)
        grown = facts.merge(FactBase([f for f in extra if f.predicate is not Predicate.PRE_REQ]))
        for goal in goals:
            if prove_goal(goal, facts, rules, limits).satisfied:
                assert prove_goal(goal, grown, rules, limits).satisfied, (goal, facts, grown)


def test_satisfied_traces_replay():
    rng = random.Random(1337)
    limits = Limits(depth=500, steps=1_000_000)
    for _ in range(300):
        facts, rules, goals = _random_instance(rng)
        for goal in goals:
            res = prove_goal(goal, facts, rules, limits)
            again = prove_goal(goal, facts, rules, limits)
            assert (again.satisfied, again.trace.to_text()) == (res.satisfied, res.trace.to_text())
            if not res.satisfied:
                continue
            # the facts the trace cites are enough on their own
            cited = FactBase(n.goal for n in res.trace.nodes() if n.step is StepKind.FACT_MATCH)
            assert len(cited) > 0
            assert prove_goal(goal, cited, rules, limits).satisfied, (goal, facts, list(map(str, rules)))


def test_resolution_is_deterministic():
    facts = FactBase.from_text("HasNS(ns1,c1). HasNS(ns1,c2). SatC(c2,no_malware).")
    q = Query(L("Do(ns1,r1,a1,allow)"), (L("SatNS(ns1,secure)"),))
    first = resolve(q, facts, _slice_rules()).trace.to_text()
    assert all(resolve(q, facts, _slice_rules()).trace.to_text() == first for _ in range(5))
