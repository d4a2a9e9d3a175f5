"""
The Trust Manager.

    IIL   collect_info          snapshots from the infrastructure
    APIL  request_attestation   asks the TA, verifies what comes back
    PIL   fetch policies        from the policy repository, per realm
    EE    evaluate_subject      per VNF/VM verdict from certificate facts
    NSTE  evaluate_slice        slice verdict, the S1..S10 timeline per member
"""

from __future__ import annotations

import datetime
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Protocol

from .authority import AttestationRequest, DynamicInfo, Phase, StaticInfo, TrustedAuthority
from .credentials import (
    PolicyRule,
    PropertyCertificate,
    PropertyVocabulary,
    SubjectKind,
    TrustPolicy,
    Verdict,
    parse_certificate,
    property_string_to_constant,
    serialize_certificate,
    verify_signature,
)
from .exceptions import (
    AttestationError,
    CredentialError,
    DuplicateSubscriptionError,
    PropertyNameError,
    SignatureError,
    TmanoError,
    UnknownSubjectError,
)
from .lopat import Literal, Predicate, RuleBase, Sort, const
from .policyrepo import PolicyRepository
from .resolution import (
    FactBase,
    Limits,
    Provenance,
    Query,
    Resolution,
    certificate_facts,
    cp_resolve,
    derive_facts_from_digest_report,
    derive_facts_from_property_certs,
    resolve,
)
from .utils import _canon_dumps, _canon_loads, isoformat, parse_iso

logger = logging.getLogger("tmano")

HASH_IS_VALID = "hash_is_valid"
SIGNATURE_IS_VALID = "digital_signature_is_valid"


class TrustStatus(str, Enum):
    TRUSTED = "trusted"
    UNCERTAIN = "uncertain"
    UNTRUSTED = "untrusted"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @classmethod
    def supremum(cls, statuses: Iterable["TrustStatus"]) -> "TrustStatus":
        """untrusted > uncertain > trusted; trusted for no members."""
        return max(statuses, key=lambda s: s.rank, default=cls.TRUSTED)


_RANK = {TrustStatus.TRUSTED: 0, TrustStatus.UNCERTAIN: 1, TrustStatus.UNTRUSTED: 2}


@dataclass(frozen=True)
class Member:
    """A VNF placed on one of its hosting VMs."""

    vnf_id: str
    vm_id: str

    def __str__(self) -> str:
        return f"{self.vnf_id}/{self.vm_id}"


class Infrastructure(Protocol):
    def members(self, slice_id: str) -> list[Member]: ...

    def realm(self, slice_id: str) -> str: ...

    def locate(self, subject: str) -> list[Member]: ...

    def static_info(self, member: Member) -> StaticInfo: ...

    def dynamic_info(self, member: Member) -> DynamicInfo: ...

    def now(self) -> datetime.datetime: ...

    def schedule_periodic(self, interval: int, callback: Callable[[], None]) -> int: ...

    def cancel_periodic(self, handle: int) -> None: ...


@dataclass(frozen=True)
class InfoSnapshot:
    subject: str
    vm_id: str
    static: StaticInfo
    captured_at: datetime.datetime
    phase: Phase
    dynamic_info: DynamicInfo | None = None

    def __post_init__(self) -> None:
        if (self.dynamic_info is not None) != (self.phase is Phase.ACTIVE):
            raise TmanoError("a snapshot carries dynamic information iff its phase is active")

    @property
    def dynamic(self) -> DynamicInfo | None:
        return self.dynamic_info

    @property
    def member(self) -> Member:
        return Member(self.subject, self.vm_id)


@dataclass(frozen=True)
class VnfVerdict:
    subject: str
    vm_id: str
    status: TrustStatus
    failing: tuple[str, ...] = ()
    certificate_id: str = ""
    trace: str = ""
    reason: str = ""

    def __post_init__(self) -> None:
        if self.status is TrustStatus.TRUSTED and self.failing:
            raise TmanoError("a trusted verdict has no failing requirements")
        if self.status is TrustStatus.UNTRUSTED and not self.failing:
            raise TmanoError("an untrusted verdict names its failing requirements")

    @property
    def member(self) -> Member:
        return Member(self.subject, self.vm_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "vm_id": self.vm_id,
            "status": self.status.value,
            "failing": list(self.failing),
            "certificate_id": self.certificate_id,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VnfVerdict":
        return cls(
            d["subject"],
            d["vm_id"],
            TrustStatus(d["status"]),
            tuple(d.get("failing", ())),
            d.get("certificate_id", ""),
            "",
            d.get("reason", ""),
        )


@dataclass(frozen=True)
class AuditEvent:
    timestamp: datetime.datetime
    step: str
    subject: str
    detail: str = ""

    def line(self) -> str:
        return f"{isoformat(self.timestamp)} {self.step} {self.subject} {self.detail}".rstrip()


class AuditLog:
    """Append-only, serialized appends. Optionally mirrored to a file."""

    def __init__(self, sink: Callable[[str], None] | None = None) -> None:
        self._events: list[AuditEvent] = []
        self._lock = threading.Lock()
        self.sink = sink

    def append(self, event: AuditEvent) -> None:
        with self._lock:
            self._events.append(event)
            if self.sink:
                self.sink(event.line())

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def lines(self) -> list[str]:
        return [e.line() for e in self.events()]

    def __len__(self) -> int:
        return len(self._events)


@dataclass(frozen=True)
class SliceVerdict:
    slice_id: str
    members: tuple[VnfVerdict, ...]
    status: TrustStatus
    evaluated_at: datetime.datetime
    phase: Phase = Phase.ACTIVE
    audit: tuple[AuditEvent, ...] = field(default=(), compare=False)

    @classmethod
    def aggregate(
        cls,
        slice_id: str,
        members: Iterable[VnfVerdict],
        evaluated_at: datetime.datetime,
        phase: Phase = Phase.ACTIVE,
        audit: Iterable[AuditEvent] = (),
    ) -> "SliceVerdict":
        ms = tuple(members)
        return cls(slice_id, ms, TrustStatus.supremum(m.status for m in ms), evaluated_at, phase, tuple(audit))

    @property
    def flagged(self) -> list[VnfVerdict]:
        return [m for m in self.members if m.status is not TrustStatus.TRUSTED]

    def to_dict(self) -> dict[str, Any]:
        return {
            "slice": self.slice_id,
            "status": self.status.value,
            "phase": self.phase.value,
            "evaluated_at": isoformat(self.evaluated_at),
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SliceVerdict":
        return cls(
            d["slice"],
            tuple(VnfVerdict.from_dict(m) for m in d["members"]),
            TrustStatus(d["status"]),
            parse_iso(d["evaluated_at"]),
            Phase(d.get("phase", Phase.ACTIVE.value)),
        )

    def to_json(self) -> str:
        return _canon_dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SliceVerdict":
        return cls.from_dict(_canon_loads(text))

    def document(self) -> str:
        """Plain-text report: one header line, one line per member."""
        lines = [f"slice {self.slice_id} {self.status.value} {isoformat(self.evaluated_at)} ({self.phase.value})"]
        for m in self.members:
            extra = f" failing={','.join(m.failing)}" if m.failing else ""
            why = f" reason={m.reason}" if m.reason else ""
            lines.append(f"  {m.member} {m.status.value}{extra}{why}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Alert:
    slice_id: str
    previous: TrustStatus
    current: TrustStatus
    verdict: SliceVerdict

    @property
    def untrusted_members(self) -> list[Member]:
        return [m.member for m in self.verdict.members if m.status is TrustStatus.UNTRUSTED]


class Subscription:
    def __init__(self, manager: "TrustManager", slice_id: str, interval: int, handle: int) -> None:
        self.manager = manager
        self.slice_id = slice_id
        self.interval = interval
        self.handle = handle
        self.evaluations = 0
        self.verdicts: list[SliceVerdict] = []
        self.active = True

    def cancel(self) -> None:
        if self.active:
            self.active = False
            self.manager._unsubscribe(self)


def requirement_constants(
    rule: PolicyRule, kind: SubjectKind, phase: Phase, vocabulary: PropertyVocabulary | None = None
) -> list[str]:
    """Normalised requirement constants: sP always, dP only for active subjects."""
    req = rule.requirements_for(kind)
    if req is None:
        return []
    texts = list(req.static)
    if phase is Phase.ACTIVE:
        texts += list(req.dynamic)
    convert = vocabulary.constant if vocabulary is not None else property_string_to_constant
    return [convert(t) for t in texts]


def rule_applies(rule: PolicyRule, phase: Phase) -> Verdict:
    """bTime gates pre_deployment; active subjects need both bTime and rTime Trusted."""
    if phase is Phase.PRE_DEPLOYMENT:
        return rule.boot_time
    if rule.boot_time is Verdict.TRUSTED and rule.run_time is Verdict.TRUSTED:
        return Verdict.TRUSTED
    return Verdict.UNTRUSTED


def find_conflicts(facts: FactBase) -> list[str]:
    """Components holding both `x_true` and `x_false`."""
    props: dict[str, set[str]] = {}
    for lit in facts.lookup(Predicate.SAT_C):
        props.setdefault(lit.args[0].name, set()).add(lit.args[1].name)
    out = []
    for comp, ps in props.items():
        for p in sorted(ps):
            if p.endswith("_true") and p[: -len("_true")] + "_false" in ps:
                out.append(f"{comp}:{p[: -len('_true')]}")
    return out


class TrustManager:
    def __init__(
        self,
        infra: Infrastructure,
        authority: TrustedAuthority,
        policies: PolicyRepository,
        rules: RuleBase | None = None,
        limits: Limits = Limits(),
        max_workers: int = 4,
        audit: AuditLog | None = None,
    ) -> None:
        self.infra = infra
        self.authority = authority
        self.policies = policies
        self.rules = rules if rules is not None else RuleBase()
        self.limits = limits
        self.max_workers = max_workers
        self.audit = audit if audit is not None else AuditLog()
        self.transport_fault: Callable[[bytes], bytes] | None = None
        self.certificates: dict[Member, PropertyCertificate] = {}
        self.last_status: dict[str, TrustStatus] = {}
        self._subscriptions: dict[str, Subscription] = {}
        self._alert_listeners: list[Callable[[Alert], None]] = []
        self._verdict_listeners: list[Callable[[SliceVerdict], None]] = []

    # --- IIL ---

    def collect_info(self, subject: str | Member, phase: Phase) -> InfoSnapshot:
        if isinstance(subject, Member):
            member = subject
        else:
            located = self.infra.locate(subject)
            if not located:
                raise UnknownSubjectError(f"unknown subject {subject!r}")
            member = located[0]
        static = self.infra.static_info(member)
        dynamic = self.infra.dynamic_info(member) if phase is Phase.ACTIVE else None
        return InfoSnapshot(member.vnf_id, member.vm_id, static, self.infra.now(), phase, dynamic)

    # --- APIL ---

    def request_attestation(self, snapshot: InfoSnapshot) -> PropertyCertificate:
        request = AttestationRequest(
            snapshot.subject,
            snapshot.static,
            snapshot.phase,
            snapshot.dynamic if snapshot.phase is Phase.ACTIVE else None,
        )
        cert = self.authority.property_attest(request)
        wire = serialize_certificate(cert)
        if self.transport_fault is not None:
            wire = self.transport_fault(wire)
        try:
            received = parse_certificate(wire)
        except CredentialError as e:
            raise AttestationError(f"certificate for {snapshot.member} rejected: {e}") from e
        if not verify_signature(received, self.authority.public_key):
            raise SignatureError(f"certificate {received.info.id} for {snapshot.member} failed verification")
        received.check_validity(self.infra.now())
        self.certificates[snapshot.member] = received
        return received

    # --- EE ---

    def static_facts(self, cert: PropertyCertificate) -> FactBase:
        """`hash_is_valid` / `digital_signature_is_valid` established by the EE itself."""
        facts: list[Literal] = []
        vnf = const(cert.vnf.id, Sort.COMPONENT)
        signed = verify_signature(cert, self.authority.public_key)
        vnf_ref = self.authority.references.find(cert.vnf.id)
        if signed:
            facts.append(Literal(Predicate.SAT_C, (vnf, const(SIGNATURE_IS_VALID, Sort.PROPERTY))))
        if vnf_ref is not None and vnf_ref.digest == cert.static.vnf_hash.value:
            facts.append(Literal(Predicate.SAT_C, (vnf, const(HASH_IS_VALID, Sort.PROPERTY))))
        for vm in cert.vnf.vnf_map:
            vm_t = const(vm.vmid, Sort.COMPONENT)
            if signed:
                facts.append(Literal(Predicate.SAT_C, (vm_t, const(SIGNATURE_IS_VALID, Sort.PROPERTY))))
            if self._image_hash_valid(vm.vmid, cert.static.service_vm_hash.value):
                facts.append(Literal(Predicate.SAT_C, (vm_t, const(HASH_IS_VALID, Sort.PROPERTY))))
        return FactBase(facts, Provenance.ASSERTED)

    def _image_hash_valid(self, vm_id: str, digest: str) -> bool:
        image = self._image_of(vm_id)
        ref = self.authority.references.find(image) if image else None
        return ref is not None and ref.digest == digest

    def _image_of(self, vm_id: str) -> str | None:
        try:
            located = self.infra.locate(vm_id)
            return self.infra.static_info(located[0]).image if located else None
        except TmanoError:
            return None

    def evaluate_subject(
        self, snapshot: InfoSnapshot, certificate: PropertyCertificate, policies: list[TrustPolicy]
    ) -> VnfVerdict:
        """
        Each requirement of each applicable policy rule becomes a SatC goal
        resolved against the certificate facts and the configured rules. The
        first failing goal makes the subject untrusted. Two spellings of one
        property constant make it uncertain.
        """
        phase = snapshot.phase
        cid = certificate.info.id
        if not policies:
            return VnfVerdict(snapshot.subject, snapshot.vm_id, TrustStatus.UNCERTAIN, (), cid, "", "no policy")

        facts = FactBase(certificate_facts(certificate), Provenance.PROPERTY_CERTIFICATE).merge(
            self.static_facts(certificate)
        )
        conflicts = find_conflicts(facts)
        if conflicts:
            return VnfVerdict(
                snapshot.subject, snapshot.vm_id, TrustStatus.UNCERTAIN, (), cid, "",
                f"conflict: {', '.join(conflicts)}",
            )

        vocabulary = PropertyVocabulary()
        plan = []
        try:
            for policy in policies:
                for rule in policy.rules:
                    vnf = requirement_constants(rule, SubjectKind.VNF, phase, vocabulary)
                    svm = requirement_constants(rule, SubjectKind.SERVICE_VM, phase, vocabulary)
                    goals = [(snapshot.subject, c) for c in vnf] + [(snapshot.vm_id, c) for c in svm]
                    plan.append((policy, rule, goals))
        except PropertyNameError as e:
            logger.warning("Ambiguous requirements for %s: %s", snapshot.member, e)
            return VnfVerdict(
                snapshot.subject, snapshot.vm_id, TrustStatus.UNCERTAIN, (), cid, "", f"ambiguous property: {e}"
            )

        traces: list[str] = []
        for policy, rule, goals in plan:
            if rule_applies(rule, phase) is Verdict.UNTRUSTED:
                return VnfVerdict(
                    snapshot.subject, snapshot.vm_id, TrustStatus.UNTRUSTED, ("action:untrusted",), cid,
                    "\n".join(traces), f"policy {policy.id} labels this phase Untrusted",
                )
            for comp, prop in goals:
                goal = Literal(
                    Predicate.SAT_C, (const(comp, Sort.COMPONENT), const(prop, Sort.PROPERTY))
                )
                res: Resolution = cp_resolve(goal, facts, self.rules, self.limits)
                traces.append(res.trace.to_text())
                if res.reason == "budget":
                    return VnfVerdict(
                        snapshot.subject, snapshot.vm_id, TrustStatus.UNCERTAIN, (), cid,
                        "\n".join(traces), "budget",
                    )
                if not res.satisfied:
                    return VnfVerdict(
                        snapshot.subject, snapshot.vm_id, TrustStatus.UNTRUSTED, (prop,), cid,
                        "\n".join(traces), f"policy {policy.id}: {res.reason}",
                    )
        return VnfVerdict(snapshot.subject, snapshot.vm_id, TrustStatus.TRUSTED, (), cid, "\n".join(traces))

    # --- NSTE ---

    def evaluate_slice(self, slice_id: str, phase: Phase = Phase.ACTIVE) -> SliceVerdict:
        return self.evaluate_members(slice_id, self.infra.members(slice_id), phase)

    def evaluate_members(self, slice_id: str, members: Iterable[Member], phase: Phase) -> SliceVerdict:
        """
        Runs the S1..S10 timeline for each member. Attestation is sequential in
        member order; the EE runs concurrently; verdicts commit in member order.
        """
        members = list(members)
        realm = self.infra.realm(slice_id)
        events: dict[Member, list[AuditEvent]] = {m: [] for m in members}

        def record(m: Member, step: str, detail: str) -> None:
            events[m].append(AuditEvent(self.infra.now(), step, str(m), detail))

        prepared: list[tuple[Member, InfoSnapshot | None, PropertyCertificate | None, str]] = []
        for m in members:
            record(m, "S1", f"evaluate slice {slice_id}")
            record(m, "S2", f"NSTE -> EE ({phase.value})")
            snapshot = self.collect_info(m, phase)
            record(m, "S3", f"IIL collected {phase.value} information")
            record(m, "S4", "IIL -> APIL")
            record(m, "S5", f"APIL -> {self.authority.name}")
            try:
                cert = self.request_attestation(snapshot)
                record(m, "S6", f"{self.authority.name} signed certificate {cert.info.id}")
                record(m, "S7", "APIL verified certificate -> EE")
                prepared.append((m, snapshot, cert, ""))
            except TmanoError as e:
                logger.warning("Attestation of %s failed: %s", m, e)
                record(m, "S6", f"attestation failed: {e.code}")
                record(m, "S7", "APIL rejected certificate")
                prepared.append((m, snapshot, None, f"attestation failed: {e}"))

        policies: list[TrustPolicy] = []
        for m in members:
            record(m, "S8", f"EE -> PIL realm={realm!r}")
            policies = self.policies.fetch_policies(realm, SubjectKind.SLICE, slice_id)
            record(m, "S9", f"PIL returned {len(policies)} policies")

        def run(item: tuple[Member, InfoSnapshot | None, PropertyCertificate | None, str]) -> VnfVerdict:
            m, snapshot, cert, failure = item
            if cert is None or snapshot is None:
                return VnfVerdict(m.vnf_id, m.vm_id, TrustStatus.UNCERTAIN, (), "", "", failure)
            return self.evaluate_subject(snapshot, cert, policies)

        with ThreadPoolExecutor(max_workers=max(1, self.max_workers)) as pool:
            verdicts = list(pool.map(run, prepared))

        for m, v in zip(members, verdicts):
            detail = f"{v.status.value}" + (f" failing={','.join(v.failing)}" if v.failing else "")
            record(m, "S10", detail)

        audit: list[AuditEvent] = []
        for m in members:
            for ev in events[m]:
                self.audit.append(ev)
                audit.append(ev)

        verdict = SliceVerdict.aggregate(slice_id, verdicts, self.infra.now(), phase, audit)
        if phase is Phase.ACTIVE:
            self.last_status[slice_id] = verdict.status
        for listener in list(self._verdict_listeners):
            listener(verdict)
        logger.info(
            "Slice %s is %s (%d members, %d flagged)",
            slice_id, verdict.status.value, len(verdicts), len(verdict.flagged),
        )
        return verdict

    # --- run-time trust query ---

    def query(self, slice_id: str, query: Query) -> Resolution:
        """Resolves a Do request over digest-report and certificate facts plus the RuleBase."""
        members = self.infra.members(slice_id)
        grouped: dict[str, tuple[bytes, list[tuple[str, bytes]]]] = {}
        certs = []
        for m in members:
            static = self.infra.static_info(m)
            pkg, vms = grouped.setdefault(m.vnf_id, (static.vnf_package, []))
            vms.append((m.vm_id, static.image_content))
            certs.append(self.request_attestation(self.collect_info(m, Phase.ACTIVE)))
        report = self.authority.digest_report(
            slice_id, [(vnf, pkg, vms) for vnf, (pkg, vms) in grouped.items()]
        )
        facts = derive_facts_from_digest_report(report).merge(
            derive_facts_from_property_certs(
                certs,
                self.authority.public_key,
                self.infra.now(),
                known_subjects=[m.vnf_id for m in members],
            )
        )
        return resolve(query, facts, self.rules, self.limits)

    # --- periodic evaluation ---

    def add_alert_listener(self, listener: Callable[[Alert], None]) -> None:
        self._alert_listeners.append(listener)

    def add_verdict_listener(self, listener: Callable[[SliceVerdict], None]) -> None:
        self._verdict_listeners.append(listener)

    def schedule_periodic_evaluation(self, slice_id: str, interval: int) -> Subscription:
        if interval <= 0:
            raise ValueError("evaluation interval must be positive")
        if slice_id in self._subscriptions:
            raise DuplicateSubscriptionError(f"slice {slice_id} already has a periodic evaluation")
        self.infra.members(slice_id)

        holder: list[Subscription] = []

        def tick() -> None:
            sub = holder[0]
            if not sub.active:
                return
            previous = self.last_status.get(slice_id, TrustStatus.TRUSTED)
            verdict = self.evaluate_slice(slice_id)
            sub.evaluations += 1
            sub.verdicts.append(verdict)
            if verdict.status is not previous:
                alert = Alert(slice_id, previous, verdict.status, verdict)
                logger.warning("Slice %s: %s -> %s", slice_id, previous.value, verdict.status.value)
                for listener in list(self._alert_listeners):
                    listener(alert)

        handle = self.infra.schedule_periodic(interval, tick)
        sub = Subscription(self, slice_id, interval, handle)
        holder.append(sub)
        self._subscriptions[slice_id] = sub
        logger.info("Periodic evaluation of %s every %d ticks", slice_id, interval)
        return sub

    def subscription(self, slice_id: str) -> Subscription | None:
        return self._subscriptions.get(slice_id)

    def _unsubscribe(self, sub: Subscription) -> None:
        self.infra.cancel_periodic(sub.handle)
        self._subscriptions.pop(sub.slice_id, None)
