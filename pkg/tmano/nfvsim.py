"""
Discrete-event NFV infrastructure simulator.

Slices are made of VNFs hosted on VMs whose static state (image bytes,
manifest) and dynamic state (processes, shells, flags) are plain data.
Time is an integer tick; events and periodic evaluations fire in
(tick, insertion sequence) order. The simulator is the Trust Manager's
Infrastructure: it answers member enumeration and snapshot queries.
"""

from __future__ import annotations

import csv
import datetime
import heapq
import itertools
import logging
import random
import re
import statistics
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, TextIO

import yaml

from .authority import DynamicInfo, Manifest, Phase, StaticInfo, TrustedAuthority, measure
from .credentials import (
    CertificateInfo,
    DynamicProperties,
    HashInfo,
    KeyPair,
    PolicyInfo,
    PolicyRule,
    PropertyCertificate,
    PropertyEntry,
    Requirements,
    ServiceVmInfo,
    StaticProperties,
    TrustPolicy,
    VnfInfo,
    canonicalize_and_sign,
    parse_certificate,
    serialize_certificate,
    verify_signature,
)
from .exceptions import GateFailure, MissingReferenceError, SimulationError, UnknownSliceError
from .lopat import Literal, Predicate, RuleBase, Sort, const
from .policyrepo import PolicyRepository
from .resolution import FactBase, Limits, Provenance, certificate_facts, cp_resolve
from .trustmgr import Alert, Member, SliceVerdict, TrustManager, TrustStatus

logger = logging.getLogger("tmano")

SIM_EPOCH = datetime.datetime(2020, 1, 1, tzinfo=datetime.timezone.utc)
BOMB_SCRIPT = "logicBOMB.sh"


class VmStatus(str, Enum):
    STAGED = "staged"
    DEPLOYED = "deployed"
    ISOLATED = "isolated"
    REPLACED = "replaced"


class EventKind(str, Enum):
    TRIGGER_LOGIC_BOMB = "trigger_logic_bomb"
    TAMPER_IMAGE = "tamper_image"
    CUSTOM = "custom"


# --- Descriptors ---


@dataclass(frozen=True)
class VmDescriptor:
    vm_id: str
    name: str
    image: str


@dataclass(frozen=True)
class VnfDescriptor:
    vnf_id: str
    role: str
    make: str
    vms: tuple[VmDescriptor, ...]
    purpose: str = ""

    @property
    def package(self) -> bytes:
        return f"vnf-package:{self.vnf_id}:{self.make}:{self.role}".encode("utf-8")


@dataclass(frozen=True)
class SliceDescriptor:
    slice_id: str
    realm: str
    tenants: tuple[str, ...]
    vnfs: tuple[VnfDescriptor, ...]
    version: int = 1

    def __post_init__(self) -> None:
        if not self.vnfs:
            raise SimulationError(f"slice {self.slice_id} needs at least one VNF")
        ids: list[str] = [self.slice_id]
        for vnf in self.vnfs:
            if not vnf.vms:
                raise SimulationError(f"VNF {vnf.vnf_id} needs at least one host VM")
            ids.append(vnf.vnf_id)
            ids.extend(vm.vm_id for vm in vnf.vms)
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise SimulationError(f"duplicate ids in slice {self.slice_id}: {', '.join(dupes)}")

    def members(self) -> list[Member]:
        return [Member(vnf.vnf_id, vm.vm_id) for vnf in self.vnfs for vm in vnf.vms]

    def vnf(self, vnf_id: str) -> VnfDescriptor:
        for v in self.vnfs:
            if v.vnf_id == vnf_id:
                return v
        raise SimulationError(f"VNF {vnf_id} is not part of slice {self.slice_id}")

    def swap_vm(self, old: str, new: VmDescriptor) -> "SliceDescriptor":
        vnfs = tuple(
            replace(v, vms=tuple(new if vm.vm_id == old else vm for vm in v.vms)) for v in self.vnfs
        )
        return replace(self, vnfs=vnfs, version=self.version + 1)


@dataclass(frozen=True)
class ImageSpec:
    """A registered VM image. `dormant` lists scripts shipped but not running."""

    name: str
    content: bytes
    manifest: Manifest = field(default_factory=Manifest)
    issuer: str = "manufacturer"
    dormant: tuple[str, ...] = ()


def _manifest_from(d: Mapping[str, Any] | None) -> Manifest:
    d = d or {}
    return Manifest(
        tuple(d.get("processes") or ()),
        tuple(d.get("shells") or ()),
        tuple(d.get("endpoints") or ()),
    )


def load_descriptor(text: str | bytes) -> tuple[SliceDescriptor, list[ImageSpec]]:
    """Slice descriptor YAML, with an optional `images` section."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SimulationError(f"malformed descriptor: {e}") from e
    if not isinstance(data, dict):
        raise SimulationError("descriptor must be a mapping")
    try:
        vnfs = tuple(
            VnfDescriptor(
                str(v["id"]),
                str(v.get("role", "vnf")),
                str(v.get("make", "unknown")),
                tuple(VmDescriptor(str(m["id"]), str(m.get("name", m["id"])), str(m["image"])) for m in v["vms"]),
                str(v.get("purpose", "")),
            )
            for v in data.get("vnfs") or ()
        )
        desc = SliceDescriptor(
            str(data["slice"]),
            str(data["realm"]),
            tuple(str(t) for t in data.get("tenants") or ()),
            vnfs,
            int(data.get("version", 1)),
        )
        images = [
            ImageSpec(
                str(i["name"]),
                str(i["content"]).encode("utf-8"),
                _manifest_from(i.get("manifest")),
                str(i.get("issuer", "manufacturer")),
                tuple(i.get("dormant") or ()),
            )
            for i in data.get("images") or ()
        ]
    except (KeyError, TypeError) as e:
        raise SimulationError(f"descriptor is missing field {e}") from e
    return desc, images


def dump_descriptor(desc: SliceDescriptor, images: Iterable[ImageSpec] = ()) -> str:
    data: dict[str, Any] = {
        "slice": desc.slice_id,
        "realm": desc.realm,
        "tenants": list(desc.tenants),
        "version": desc.version,
        "vnfs": [
            {
                "id": v.vnf_id,
                "role": v.role,
                "make": v.make,
                "purpose": v.purpose,
                "vms": [{"id": m.vm_id, "name": m.name, "image": m.image} for m in v.vms],
            }
            for v in desc.vnfs
        ],
    }
    imgs = list(images)
    if imgs:
        data["images"] = [
            {
                "name": i.name,
                "content": i.content.decode("utf-8"),
                "issuer": i.issuer,
                "dormant": list(i.dormant),
                "manifest": {
                    "processes": list(i.manifest.processes),
                    "shells": list(i.manifest.shells),
                    "endpoints": list(i.manifest.endpoints),
                },
            }
            for i in imgs
        ]
    return yaml.safe_dump(data, sort_keys=False)


# --- Runtime state ---


@dataclass
class SimVm:
    vm_id: str
    vnf_id: str
    name: str
    image: str
    content: bytes
    manifest: Manifest
    live: DynamicInfo
    status: VmStatus = VmStatus.STAGED
    dormant: tuple[str, ...] = ()

    @classmethod
    def from_image(cls, vm_id: str, vnf_id: str, name: str, spec: ImageSpec) -> "SimVm":
        live = DynamicInfo(spec.manifest.processes, spec.manifest.shells, spec.manifest.endpoints)
        return cls(vm_id, vnf_id, name, spec.name, spec.content, spec.manifest, live, dormant=spec.dormant)


@dataclass(frozen=True)
class SimEvent:
    tick: int
    kind: EventKind
    target: str
    payload: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class LogEntry:
    tick: int
    kind: str
    subject: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.tick} {self.kind} {self.subject} {self.detail}".rstrip()


@dataclass(frozen=True)
class DeploymentResult:
    slice_id: str
    deployed: bool
    verdict: SliceVerdict | None
    failing: tuple[str, ...] = ()


@dataclass(frozen=True)
class MitigationRecord:
    slice_id: str
    vnf_id: str
    vm_id: str
    replacement: str | None
    ok: bool
    isolated_at: int | None = None
    replaced_at: int | None = None
    reevaluated_at: int | None = None
    status: TrustStatus | None = None
    reason: str = ""


def _value(text: str) -> Any:
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if re.fullmatch(r"-?[0-9]+", text):
        return int(text)
    return text


def parse_schedule(text: str) -> list[SimEvent]:
    """`tick kind target key=value ...` per line; `#` comments."""
    events = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise SimulationError(f"schedule line {n}: expected 'tick kind target [key=value ...]'")
        try:
            tick = int(parts[0])
            kind = EventKind(parts[1])
        except ValueError as e:
            raise SimulationError(f"schedule line {n}: {e}") from e
        payload = {}
        for kv in parts[3:]:
            if "=" not in kv:
                raise SimulationError(f"schedule line {n}: payload items are key=value, got {kv!r}")
            k, v = kv.split("=", 1)
            payload[k] = _value(v)
        events.append(SimEvent(tick, kind, parts[2], payload))
    return events


class Scheduler:
    """Min-heap of (tick, seq, entry). Periodic entries keep their original seq."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, int]] = []
        self._entries: dict[int, tuple[Callable[[int], None], int | None]] = {}
        self._seq = itertools.count()
        self._ids = itertools.count(1)

    def at(self, tick: int, action: Callable[[int], None]) -> int:
        if tick <= self.now:
            raise SimulationError(f"tick {tick} is not in the future (now {self.now})")
        eid = next(self._ids)
        self._entries[eid] = (action, None)
        heapq.heappush(self._heap, (tick, next(self._seq), eid))
        return eid

    def every(self, interval: int, action: Callable[[int], None]) -> int:
        if interval <= 0:
            raise SimulationError("interval must be positive")
        eid = next(self._ids)
        self._entries[eid] = (action, interval)
        heapq.heappush(self._heap, (self.now + interval, next(self._seq), eid))
        return eid

    def cancel(self, eid: int) -> None:
        self._entries.pop(eid, None)

    def pending(self) -> int:
        return len(self._entries)

    def advance(self, ticks: int) -> None:
        if ticks <= 0:
            raise SimulationError("advance needs a positive number of ticks")
        target = self.now + ticks
        while self._heap and self._heap[0][0] <= target:
            tick, seq, eid = heapq.heappop(self._heap)
            entry = self._entries.get(eid)
            if entry is None:
                continue
            self.now = tick
            action, interval = entry
            if interval:
                heapq.heappush(self._heap, (tick + interval, seq, eid))
            else:
                del self._entries[eid]
            action(tick)
        self.now = target


class Simulator:
    def __init__(
        self,
        authority: TrustedAuthority,
        policies: PolicyRepository,
        rules: RuleBase | None = None,
        limits: Limits = Limits(),
        interval: int | None = 5,
        auto_mitigate: bool = True,
        max_workers: int = 4,
        vim_location: str = "sim",
    ) -> None:
        self.authority = authority
        self.authority.clock = self.now
        self.scheduler = Scheduler()
        self.interval = interval
        self.vim_location = vim_location
        self.images: dict[str, ImageSpec] = {}
        self.slices: dict[str, SliceDescriptor] = {}
        self.vms: dict[str, SimVm] = {}
        self.log: list[LogEntry] = []
        self.mitigations: list[MitigationRecord] = []
        self._replacements: dict[str, int] = {}
        self.tm = TrustManager(self, authority, policies, rules, limits, max_workers)
        self.tm.add_verdict_listener(self._on_verdict)
        self.tm.add_alert_listener(self._on_alert)
        self.auto_mitigate = auto_mitigate

    @property
    def tick(self) -> int:
        return self.scheduler.now

    def _log(self, kind: str, subject: str, detail: str = "") -> None:
        entry = LogEntry(self.tick, kind, subject, detail)
        self.log.append(entry)
        logger.debug("sim %s", entry.line())

    # --- Infrastructure protocol ---

    def now(self) -> datetime.datetime:
        return SIM_EPOCH + datetime.timedelta(seconds=self.scheduler.now)

    def _slice(self, slice_id: str) -> SliceDescriptor:
        desc = self.slices.get(slice_id)
        if desc is None:
            raise UnknownSliceError(f"unknown slice {slice_id!r}")
        return desc

    def members(self, slice_id: str) -> list[Member]:
        return self._slice(slice_id).members()

    def realm(self, slice_id: str) -> str:
        return self._slice(slice_id).realm

    def locate(self, subject: str) -> list[Member]:
        vm = self.vms.get(subject)
        if vm is not None:
            return [Member(vm.vnf_id, vm.vm_id)]
        for desc in self.slices.values():
            found = [m for m in desc.members() if m.vnf_id == subject]
            if found:
                return found
        return []

    def _vnf_descriptor(self, vnf_id: str) -> VnfDescriptor:
        for desc in self.slices.values():
            for v in desc.vnfs:
                if v.vnf_id == vnf_id:
                    return v
        raise SimulationError(f"unknown VNF {vnf_id!r}")

    def static_info(self, member: Member) -> StaticInfo:
        vnf = self._vnf_descriptor(member.vnf_id)
        vm = self.vms[member.vm_id]
        return StaticInfo(
            vnf.vnf_id, vnf.role, vnf.make, vnf.purpose or vnf.role, vnf.package,
            vm.vm_id, vm.name, self.vim_location, vm.image, vm.content, vm.manifest,
            {"image": vm.image},
        )

    def dynamic_info(self, member: Member) -> DynamicInfo:
        return self.vms[member.vm_id].live

    def schedule_periodic(self, interval: int, callback: Callable[[], None]) -> int:
        return self.scheduler.every(interval, lambda tick: callback())

    def cancel_periodic(self, handle: int) -> None:
        self.scheduler.cancel(handle)

    # --- lifecycle ---

    def register_image(self, spec: ImageSpec) -> None:
        self.authority.register_reference(spec.name, measure(spec.content), "sha256", spec.issuer)
        self.images[spec.name] = spec

    def onboard(self, desc: SliceDescriptor) -> None:
        """Registers each VNF package's reference digest (issuer = make)."""
        for vnf in desc.vnfs:
            self.authority.register_reference(vnf.vnf_id, measure(vnf.package), "sha256", vnf.make)

    def create_slice(self, desc: SliceDescriptor) -> None:
        if desc.slice_id in self.slices:
            raise SimulationError(f"slice {desc.slice_id} already exists")
        taken = {v.vnf_id: s.slice_id for s in self.slices.values() for v in s.vnfs}
        for vnf in desc.vnfs:
            if vnf.vnf_id in taken:
                raise SimulationError(f"VNF id {vnf.vnf_id} already in use by slice {taken[vnf.vnf_id]}")
            for vm in vnf.vms:
                if vm.vm_id in self.vms:
                    raise SimulationError(f"VM id {vm.vm_id} already in use")
                if vm.image not in self.images:
                    raise SimulationError(f"image {vm.image!r} is not registered")
        self.slices[desc.slice_id] = desc
        for vnf in desc.vnfs:
            for vm in vnf.vms:
                self.vms[vm.vm_id] = SimVm.from_image(vm.vm_id, vnf.vnf_id, vm.name, self.images[vm.image])
        self._log("create", desc.slice_id, f"{len(desc.members())} members staged")

    def _gate(self, slice_id: str, members: list[Member]) -> tuple[list[str], SliceVerdict]:
        """Binary attestation of package and image, then a pre_deployment evaluation."""
        failing: list[str] = []
        for m in members:
            vm = self.vms[m.vm_id]
            vnf = self._vnf_descriptor(m.vnf_id)
            try:
                ok = (
                    self.authority.binary_attest(vnf.package, vnf.vnf_id).match
                    and self.authority.binary_attest(vm.content, vm.image).match
                )
            except MissingReferenceError:
                ok = False
            if not ok:
                failing.append(f"{m}:hash")
        verdict = self.tm.evaluate_members(slice_id, members, Phase.PRE_DEPLOYMENT)
        for v in verdict.members:
            if v.status is not TrustStatus.TRUSTED and f"{v.member}:hash" not in failing:
                failing.append(f"{v.member}:{v.status.value}")
        return failing, verdict

    def deploy_slice(self, slice_id: str, gate: bool = True) -> DeploymentResult:
        """`gate=False` is for journal replay of a deployment that already passed."""
        desc = self._slice(slice_id)
        members = desc.members()
        if all(self.vms[m.vm_id].status is VmStatus.DEPLOYED for m in members):
            raise SimulationError(f"slice {slice_id} is already deployed")
        failing: list[str] = []
        verdict = None
        if gate:
            failing, verdict = self._gate(slice_id, members)
        if failing:
            self._log("gate", slice_id, f"failed {','.join(failing)}")
            raise GateFailure(f"pre-deployment gate failed for {', '.join(failing)}", failing)
        for m in members:
            self.vms[m.vm_id].status = VmStatus.DEPLOYED
        self._log("deploy", slice_id, f"{len(members)} members deployed")
        logger.info("Slice %s deployed (%d members)", slice_id, len(members))
        if self.interval:
            self.tm.schedule_periodic_evaluation(slice_id, self.interval)
        return DeploymentResult(slice_id, True, verdict)

    def create_and_deploy_slice(self, desc: SliceDescriptor) -> DeploymentResult:
        """All or nothing: on gate failure the staged slice is discarded."""
        self.create_slice(desc)
        try:
            return self.deploy_slice(desc.slice_id)
        except GateFailure:
            for m in desc.members():
                self.vms.pop(m.vm_id, None)
            self.slices.pop(desc.slice_id, None)
            raise

    # --- events ---

    def inject_event(self, event: SimEvent) -> None:
        if event.target not in self.vms:
            raise SimulationError(f"unknown event target {event.target!r}")
        self.scheduler.at(event.tick, lambda tick: self._apply_event(event))
        self._log("inject", event.target, f"{event.kind.value}@{event.tick}")

    def _apply_event(self, event: SimEvent) -> None:
        vm = self.vms[event.target]
        if vm.status in (VmStatus.ISOLATED, VmStatus.REPLACED):
            logger.warning("Dropped %s on %s VM %s", event.kind.value, vm.status.value, vm.vm_id)
            self._log("dropped", vm.vm_id, event.kind.value)
            return
        p = dict(event.payload)
        live = vm.live
        if event.kind is EventKind.TRIGGER_LOGIC_BOMB:
            script = str(p.get("script", BOMB_SCRIPT))
            if script not in vm.dormant:
                logger.warning("Dropped logic bomb %s on VM %s: not shipped in image %s", script, vm.vm_id, vm.image)
                self._log("dropped", vm.vm_id, f"{event.kind.value} {script} not in image")
                return
            shell = str(p.get("shell", "zsh"))
            live = replace(
                live,
                processes=live.processes + (script,),
                shells=live.shells + ((shell,) if shell not in live.shells else ()),
                address_randomisation=bool(p.get("aslr", False)),
            )
        elif event.kind is EventKind.TAMPER_IMAGE:
            vm.content = vm.content + str(p.get("bytes", "tampered")).encode("utf-8")
        else:
            live = _custom_mutation(live, p)
        vm.live = live
        self._log("event", vm.vm_id, event.kind.value)
        if event.kind is EventKind.TAMPER_IMAGE and vm.status is VmStatus.DEPLOYED:
            self._check_image(vm)

    def _check_image(self, vm: SimVm) -> None:
        """Re-measures a running VM; a mismatch takes it out of service this tick."""
        try:
            ok = self.authority.binary_attest(vm.content, vm.image).match
        except MissingReferenceError:
            ok = False
        if ok:
            return
        logger.warning("VM %s no longer matches the reference of image %s", vm.vm_id, vm.image)
        self._log("integrity", vm.vm_id, "digest mismatch")
        slice_id = self._slice_of(vm.vm_id)
        if self.auto_mitigate and slice_id is not None:
            self.mitigations.append(self._replace(slice_id, Member(vm.vnf_id, vm.vm_id)))
        else:
            vm.status = VmStatus.ISOLATED
            self._log("isolate", vm.vm_id)

    def _slice_of(self, vm_id: str) -> str | None:
        for slice_id, desc in self.slices.items():
            if any(m.vm_id == vm_id for m in desc.members()):
                return slice_id
        return None

    def advance(self, ticks: int) -> list[LogEntry]:
        start = len(self.log)
        self.scheduler.advance(ticks)
        return self.log[start:]

    # --- verdicts, alerts, mitigation ---

    def _on_verdict(self, verdict: SliceVerdict) -> None:
        flagged = ",".join(str(m.member) for m in verdict.flagged)
        detail = f"{verdict.phase.value} {verdict.status.value}" + (f" flagged={flagged}" if flagged else "")
        self._log("verdict", verdict.slice_id, detail)

    def _on_alert(self, alert: Alert) -> None:
        self._log("alert", alert.slice_id, f"{alert.previous.value}->{alert.current.value}")
        if self.auto_mitigate and alert.current is TrustStatus.UNTRUSTED:
            self.mitigate(alert)

    def mitigate(self, alert: Alert) -> list[MitigationRecord]:
        """Isolate each untrusted VM, replace it from its clean image, re-evaluate."""
        records = []
        for m in alert.untrusted_members:
            vm = self.vms.get(m.vm_id)
            if vm is None or vm.status in (VmStatus.ISOLATED, VmStatus.REPLACED):
                continue
            records.append(self._replace(alert.slice_id, m))
        self.mitigations.extend(records)
        return records

    def _replace(self, slice_id: str, m: Member) -> MitigationRecord:
        vm = self.vms[m.vm_id]
        vm.status = VmStatus.ISOLATED
        isolated_at = self.tick
        self._log("isolate", vm.vm_id)

        spec = self.images.get(vm.image)
        ref = self.authority.references.find(vm.image)
        if spec is None or ref is None or measure(spec.content) != ref.digest:
            logger.error("No clean image for %s; slice %s stays degraded", vm.vm_id, slice_id)
            self._log("mitigation", vm.vm_id, "failed: no clean replacement image")
            return MitigationRecord(slice_id, m.vnf_id, m.vm_id, None, False, isolated_at,
                                    status=TrustStatus.UNTRUSTED, reason="no clean replacement image")

        base = re.sub(r"_r[0-9]+$", "", vm.vm_id)
        n = self._replacements.get(base, 0) + 1
        self._replacements[base] = n
        new_id = f"{base}_r{n}"
        self.vms[new_id] = SimVm.from_image(new_id, vm.vnf_id, vm.name, spec)
        failing, _ = self._gate(slice_id, [Member(vm.vnf_id, new_id)])
        if failing:
            self.vms.pop(new_id)
            self._log("mitigation", vm.vm_id, f"failed: replacement {new_id} rejected by gate")
            return MitigationRecord(slice_id, m.vnf_id, m.vm_id, new_id, False, isolated_at,
                                    status=TrustStatus.UNTRUSTED, reason="replacement failed the gate")

        self.slices[slice_id] = self.slices[slice_id].swap_vm(vm.vm_id, VmDescriptor(new_id, vm.name, vm.image))
        self.vms[new_id].status = VmStatus.DEPLOYED
        vm.status = VmStatus.REPLACED
        replaced_at = self.tick
        self._log("replace", vm.vm_id, f"-> {new_id}")
        verdict = self.tm.evaluate_slice(slice_id)
        logger.info("Replaced %s with %s in %s: slice now %s", vm.vm_id, new_id, slice_id, verdict.status.value)
        return MitigationRecord(slice_id, m.vnf_id, m.vm_id, new_id, True, isolated_at, replaced_at,
                                self.tick, verdict.status)


def _custom_mutation(live: DynamicInfo, p: Mapping[str, Any]) -> DynamicInfo:
    processes, shells, endpoints = list(live.processes), list(live.shells), list(live.endpoints)
    if "add_process" in p:
        processes.append(str(p["add_process"]))
    if "remove_process" in p and str(p["remove_process"]) in processes:
        processes.remove(str(p["remove_process"]))
    if "add_shell" in p:
        shells.append(str(p["add_shell"]))
    if "add_endpoint" in p:
        endpoints.append(str(p["add_endpoint"]))
    flags = {k: bool(p[k]) for k in ("memory_integrity", "memory_leakage", "address_randomisation") if k in p}
    return replace(live, processes=tuple(processes), shells=tuple(shells), endpoints=tuple(endpoints), **flags)


# --- Scenarios ---


@dataclass(frozen=True)
class Scenario:
    descriptor: SliceDescriptor
    images: tuple[ImageSpec, ...]
    policy: TrustPolicy
    events: tuple[SimEvent, ...] = ()

    def install(self, sim: Simulator) -> None:
        for img in self.images:
            sim.register_image(img)
        sim.onboard(self.descriptor)


def default_policy(realm: str = "Domain 1", pid: str = "01", creator: str = "Bob") -> TrustPolicy:
    """The reference admin policy, plus address randomisation on service VMs."""
    return TrustPolicy(
        PolicyInfo(pid, creator, "admin"),
        (
            PolicyRule(
                "Any Network Slice",
                realm,
                Requirements(
                    ("Hash is Valid", "Digital Signature is Valid"),
                    ("No Malware", "Memory Integrity OK", "No Extra Service Running"),
                ),
                Requirements(
                    ("Hash is Valid",),
                    ("No Memory Leakage", "Trusted Processes are Running", "No External Software Call",
                     "Address Randomisation Enabled"),
                ),
            ),
        ),
    )


def _image(name: str, processes: tuple[str, ...], dormant: tuple[str, ...] = (), shells=("bash",)) -> ImageSpec:
    return ImageSpec(
        name,
        f"image:{name}:v1".encode("utf-8"),
        Manifest(processes, shells, ("eth0",)),
        "ubuntu",
        dormant,
    )


def ns400_scenario(bomb_tick: int = 10) -> Scenario:
    """Two tenants share NS400; VNF3 on VM06 ships a dormant logic bomb."""
    desc = SliceDescriptor(
        "NS400",
        "Domain 1",
        ("tenant-a", "tenant-b"),
        (
            VnfDescriptor("VNF1", "router", "OF", (VmDescriptor("VM01", "sakura", "ubuntu-router"),
                                                   VmDescriptor("VM02", "kaede", "ubuntu-router")), "l3router"),
            VnfDescriptor("VNF2", "firewall", "OF", (VmDescriptor("VM03", "hinoki", "ubuntu-fw"),
                                                     VmDescriptor("VM04", "sugi", "ubuntu-fw"),
                                                     VmDescriptor("VM05", "matsu", "ubuntu-fw")), "firewall"),
            VnfDescriptor("VNF3", "switch", "OF", (VmDescriptor("VM06", "ume", "linux-zsh"),), "l2router"),
        ),
    )
    images = (
        _image("ubuntu-router", ("sshd", "routerd")),
        _image("ubuntu-fw", ("sshd", "iptablesd")),
        _image("linux-zsh", ("sshd", "switchd"), dormant=(BOMB_SCRIPT, "zsh")),
    )
    events = (SimEvent(bomb_tick, EventKind.TRIGGER_LOGIC_BOMB, "VM06"),)
    return Scenario(desc, images, default_policy(), events)


def logic_bomb_scenario(bomb_tick: int = 10) -> Scenario:
    """One VNF on two Linux VMs; the second one carries zsh and a time-triggered script."""
    desc = SliceDescriptor(
        "NS001",
        "Domain 1",
        ("tenant-a",),
        (
            VnfDescriptor("VNF001", "router", "OF", (VmDescriptor("VM001", "sakura", "linux-base"),
                                                     VmDescriptor("VM002", "kaede", "linux-zsh")), "l2router"),
        ),
    )
    images = (
        _image("linux-base", ("sshd", "routerd")),
        _image("linux-zsh", ("sshd", "routerd"), dormant=(BOMB_SCRIPT, "zsh")),
    )
    events = (SimEvent(bomb_tick, EventKind.TRIGGER_LOGIC_BOMB, "VM002"),)
    return Scenario(desc, images, default_policy(), events)


SCENARIOS: dict[str, Callable[[], Scenario]] = {
    "ns400": ns400_scenario,
    "logic-bomb": logic_bomb_scenario,
}


# --- On-boarding delay benchmark ---


@dataclass(frozen=True)
class BenchReport:
    vms: int
    properties: int
    base_samples: tuple[float, ...]
    trust_samples: tuple[float, ...]
    cpu_samples: tuple[float, ...] = ()
    attest_samples: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.base_samples or len(self.base_samples) != len(self.trust_samples):
            raise SimulationError("a benchmark cell needs at least one run")

    @property
    def runs(self) -> int:
        return len(self.base_samples)

    @property
    def base_opd(self) -> float:
        return statistics.fmean(self.base_samples)

    @property
    def trust_opd(self) -> float:
        return statistics.fmean(self.trust_samples)

    @property
    def attest_opd(self) -> float:
        return statistics.fmean(self.attest_samples) if self.attest_samples else 0.0

    @property
    def property_opd(self) -> float:
        return self.trust_opd - self.base_opd - self.attest_opd

    @property
    def cpu_time(self) -> float:
        return statistics.fmean(self.cpu_samples) if self.cpu_samples else 0.0

    @property
    def overhead_ratio(self) -> float:
        return overhead_ratio(self.base_opd, self.trust_opd)

    @property
    def overhead_pct(self) -> float:
        return self.overhead_ratio * 100


def overhead_ratio(base: float, with_trust: float) -> float:
    """(with_trust - base) / base"""
    if base <= 0:
        raise ValueError("base on-boarding delay must be positive")
    return (with_trust - base) / base


def format_pct(ratio: float) -> str:
    return f"{ratio * 100:.2f}%"


def _property_stage(ta: TrustedAuthority, vm_index: int, image_digest: str, n: int, limits: Limits) -> None:
    """Attest n properties, ship and verify the certificate, evaluate n goals."""
    vnf_id = f"BVNF{vm_index:03d}"
    cert = PropertyCertificate(
        CertificateInfo(f"{vm_index:05d}", ta.name, validity=ta.validity, issued=ta.clock()),
        VnfInfo(vnf_id, "bench", "OF", "bench", (ServiceVmInfo(f"BVM{vm_index:03d}", "bench", "sim"),)),
        StaticProperties(HashInfo(image_digest, "ubuntu"), HashInfo(image_digest, "ubuntu")),
        DynamicProperties(tuple(PropertyEntry(f"Property {k:04d}") for k in range(n))),
    )
    received = parse_certificate(serialize_certificate(canonicalize_and_sign(cert, ta.key)))
    if not verify_signature(received, ta.public_key):
        raise SimulationError("benchmark certificate failed verification")
    facts = FactBase(certificate_facts(received), Provenance.PROPERTY_CERTIFICATE)
    rules = RuleBase()
    comp = const(vnf_id, Sort.COMPONENT)
    for k in range(n):
        goal = Literal(Predicate.SAT_C, (comp, const(f"property_{k:04d}", Sort.PROPERTY)))
        if not cp_resolve(goal, facts, rules, limits):
            raise SimulationError(f"benchmark goal {goal} unexpectedly failed")


def _instantiate(vm_index: int, image: bytes) -> SimVm:
    """Image load and VM instantiation, the on-boarding work done with or without trust."""
    spec = ImageSpec(f"bench-image-{vm_index}", bytes(bytearray(image)), Manifest(("sshd",), ("bash",), ("eth0",)), "ubuntu")
    return SimVm.from_image(f"BVM{vm_index:03d}", f"BVNF{vm_index:03d}", "bench", spec)


def run_opd_benchmark(
    vm_counts: Iterable[int],
    property_counts: Iterable[int],
    repetitions: int = 10,
    seed: int = 0,
    image_size: int = 1 << 16,
) -> list[BenchReport]:
    """
    Aggregated on-boarding delay per (vms, properties) cell. The base stage
    loads each image and instantiates its VM, as the VIM does without any
    trust gate. With trust, every VM also goes through binary attestation of
    its image and then property attestation and evaluation. CPU time
    (process_time) of the property stage is reported as a proxy for CPU usage.
    """
    vm_counts, property_counts = list(vm_counts), list(property_counts)
    if repetitions < 1 or any(v <= 0 for v in vm_counts) or any(p < 0 for p in property_counts):
        raise ValueError("benchmark counts must be positive")
    rng = random.Random(seed)
    limits = Limits()
    reports = []
    for vms in vm_counts:
        ta = TrustedAuthority("TA", KeyPair.generate(), clock=lambda: SIM_EPOCH)
        images = [rng.randbytes(image_size) for _ in range(vms)]
        digests = [measure(img) for img in images]
        for i, d in enumerate(digests):
            ta.register_reference(f"bench-image-{i}", d, "sha256", "ubuntu")
        for props in property_counts:
            base_s, attest_s, trust_s, cpu_s = [], [], [], []
            for _ in range(repetitions):
                base_total = attest_total = trust_total = cpu_total = 0.0
                for i, img in enumerate(images):
                    t0 = time.perf_counter()
                    vm = _instantiate(i, img)
                    b = time.perf_counter() - t0
                    t1 = time.perf_counter()
                    if not ta.binary_attest(vm.content, vm.image).match:
                        raise SimulationError(f"benchmark image {vm.image} failed binary attestation")
                    a = time.perf_counter() - t1
                    p = c = 0.0
                    if props:
                        c0, t2 = time.process_time(), time.perf_counter()
                        _property_stage(ta, i, digests[i], props, limits)
                        p, c = time.perf_counter() - t2, time.process_time() - c0
                    base_total += b
                    attest_total += a
                    trust_total += b + a + p
                    cpu_total += c
                base_s.append(base_total)
                attest_s.append(attest_total)
                trust_s.append(trust_total)
                cpu_s.append(cpu_total)
            report = BenchReport(vms, props, tuple(base_s), tuple(trust_s), tuple(cpu_s), tuple(attest_s))
            logger.info(
                "OPD vms=%d properties=%d base=%.4fs trust=%.4fs (%s)",
                vms, props, report.base_opd, report.trust_opd, format_pct(report.overhead_ratio),
            )
            reports.append(report)
    return reports


BENCH_COLUMNS = ("vms", "properties", "base_opd", "trust_opd", "overhead_pct", "cpu_time", "attest_opd")


def write_bench_csv(reports: Iterable[BenchReport], out: TextIO) -> None:
    w = csv.writer(out)
    w.writerow(BENCH_COLUMNS)
    for r in reports:
        w.writerow([r.vms, r.properties, f"{r.base_opd:.6f}", f"{r.trust_opd:.6f}",
                    f"{r.overhead_pct:.2f}", f"{r.cpu_time:.6f}", f"{r.attest_opd:.6f}"])
