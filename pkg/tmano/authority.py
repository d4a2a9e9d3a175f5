"""
Simulated Trusted Authority (TA).

Binary attestation compares a measured digest with a manufacturer reference;
property attestation runs pluggable checkers over static/dynamic snapshots and
issues a signed PropertyCertificate listing the properties they affirm.
"""

from __future__ import annotations

import datetime
import hashlib
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .credentials import (
    DIGEST_LENGTHS,
    CertificateInfo,
    DigestEntry,
    DigestReport,
    DynamicProperties,
    HashInfo,
    KeyPair,
    PropertyCertificate,
    PropertyEntry,
    ServiceVmInfo,
    StaticProperties,
    VnfInfo,
    canonicalize_and_sign,
    parse_validity,
    property_string_to_constant,
)
from .exceptions import (
    AttestationError,
    DigestFormatError,
    MissingReferenceError,
    ReferenceConflictError,
    UnknownSubjectError,
    UnsupportedAlgorithmError,
)
from .utils import utcnow

logger = logging.getLogger("tmano")

# certificate hash `type` label per measurement algorithm
_CERT_HASH_TYPE = {"sha256": "SHA2", "sha384": "SHA384", "sha512": "SHA512"}

SUSPICIOUS_SUFFIXES = (".sh", ".py", ".pl")
MALWARE_SIGNATURES = frozenset({"logicBOMB.sh", "cryptominer", "nc.backdoor"})


def measure(artifact: bytes, algorithm: str = "sha256") -> str:
    if algorithm not in DIGEST_LENGTHS:
        raise UnsupportedAlgorithmError(f"unsupported digest algorithm {algorithm!r}")
    return hashlib.new(algorithm, artifact).hexdigest()


# --- Reference store ---


@dataclass(frozen=True)
class Reference:
    identity: str
    algorithm: str
    digest: str
    issuer: str

    def line(self) -> str:
        return f"{self.identity} {self.algorithm} {self.digest} {self.issuer}"


class ReferenceStore:
    """
    Expected digests, one per (identity, algorithm).

    When `path` is given every registration is written through to a
    line-oriented file: `identity algorithm digest issuer`.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._refs: dict[tuple[str, str], Reference] = {}
        self._lock = threading.RLock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path
        for n, line in enumerate(self.path.read_text("utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DigestFormatError(f"{self.path}:{n}: expected 'identity algorithm digest issuer'")
            ref = Reference(*parts)
            _check_reference(ref)
            self._refs[(ref.identity, ref.algorithm)] = ref

    def _save(self) -> None:
        if not self.path:
            return
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text("".join(r.line() + "\n" for r in self.references()), "utf-8")
        os.replace(tmp, self.path)

    def register(self, identity: str, digest: str, algorithm: str = "sha256", issuer: str = "manufacturer") -> Reference:
        ref = Reference(identity, algorithm.lower(), digest.strip().lower(), issuer)
        _check_reference(ref)
        with self._lock:
            current = self._refs.get((ref.identity, ref.algorithm))
            if current is not None:
                if current.digest != ref.digest:
                    raise ReferenceConflictError(
                        f"{identity}/{ref.algorithm} already registered with a different digest"
                    )
                return current
            self._refs[(ref.identity, ref.algorithm)] = ref
            self._save()
        logger.info("Registered reference %s/%s (%s)", identity, ref.algorithm, issuer)
        return ref

    def get(self, identity: str, algorithm: str = "sha256") -> Reference:
        with self._lock:
            ref = self._refs.get((identity, algorithm))
        if ref is None:
            raise MissingReferenceError(f"no {algorithm} reference for {identity!r}")
        return ref

    def find(self, identity: str, algorithm: str = "sha256") -> Reference | None:
        with self._lock:
            return self._refs.get((identity, algorithm))

    def references(self) -> list[Reference]:
        with self._lock:
            return sorted(self._refs.values(), key=lambda r: (r.identity, r.algorithm))

    def __contains__(self, identity: object) -> bool:
        with self._lock:
            return any(k[0] == identity for k in self._refs)

    def __len__(self) -> int:
        return len(self._refs)


def _check_reference(ref: Reference) -> None:
    length = DIGEST_LENGTHS.get(ref.algorithm)
    if length is None:
        raise UnsupportedAlgorithmError(f"unsupported digest algorithm {ref.algorithm!r}")
    if len(ref.digest) != length or not re.fullmatch(r"[0-9a-f]+", ref.digest):
        raise DigestFormatError(f"{ref.identity}: digest must be {length} hex characters for {ref.algorithm}")
    if not ref.identity or not ref.issuer or any(c.isspace() for c in ref.identity + ref.issuer):
        raise DigestFormatError("reference identity and issuer must be non-empty words")


# --- Snapshots ---


class Phase(str, Enum):
    PRE_DEPLOYMENT = "pre_deployment"
    ACTIVE = "active"


@dataclass(frozen=True)
class Manifest:
    """What an image is expected to run."""

    processes: tuple[str, ...] = ()
    shells: tuple[str, ...] = ()
    endpoints: tuple[str, ...] = ()


@dataclass(frozen=True)
class StaticInfo:
    vnf_id: str
    vnf_name: str
    vnf_make: str
    vnf_purpose: str
    vnf_package: bytes
    vm_id: str
    vm_name: str
    vim_location: str
    image: str
    image_content: bytes
    manifest: Manifest = field(default_factory=Manifest)
    build: Mapping[str, str] = field(default_factory=dict)

    @property
    def vnf_digest(self) -> str:
        return measure(self.vnf_package)

    @property
    def image_digest(self) -> str:
        return measure(self.image_content)


@dataclass(frozen=True)
class DynamicInfo:
    processes: tuple[str, ...] = ()
    shells: tuple[str, ...] = ()
    endpoints: tuple[str, ...] = ()
    memory_integrity: bool = True
    memory_leakage: bool = False
    address_randomisation: bool = True


@dataclass(frozen=True)
class AttestationRequest:
    subject: str
    static: StaticInfo
    phase: Phase = Phase.PRE_DEPLOYMENT
    dynamic: DynamicInfo | None = None

    def __post_init__(self) -> None:
        if self.phase is Phase.PRE_DEPLOYMENT and self.dynamic is not None:
            raise AttestationError("pre_deployment attestation requests carry static information only")
        if self.phase is Phase.ACTIVE and self.dynamic is None:
            raise AttestationError("active attestation requests need a dynamic snapshot")


@dataclass(frozen=True)
class AttestationResult:
    identity: str
    algorithm: str
    measured: str
    reference: str
    match: bool


# --- Checkers ---

CheckResult = bool | int | None


@dataclass(frozen=True)
class Checker:
    """
    A named predicate over the snapshots. Returning True (or an int, used as
    the property's value) affirms the property.
    """

    name: str
    level: str  # "vnf" | "service_vm"
    check: Callable[[StaticInfo, DynamicInfo], CheckResult]

    def run(self, static: StaticInfo, dynamic: DynamicInfo) -> tuple[bool, str | None]:
        res = self.check(static, dynamic)
        if res is None or res is False:
            return False, None
        if res is True:
            return True, None
        return True, str(res)


def _extra_processes(s: StaticInfo, d: DynamicInfo) -> list[str]:
    return [p for p in d.processes if p not in s.manifest.processes]


def _no_malware(s: StaticInfo, d: DynamicInfo) -> bool:
    for p in _extra_processes(s, d):
        if p in MALWARE_SIGNATURES or p.endswith(SUSPICIOUS_SUFFIXES):
            return False
    return True


def _trusted_processes(s: StaticInfo, d: DynamicInfo) -> int | None:
    running = [p for p in d.processes if p in s.manifest.processes]
    if not running or set(running) != set(s.manifest.processes):
        return None
    return len(running)


def _no_external_call(s: StaticInfo, d: DynamicInfo) -> bool:
    return set(d.shells) <= set(s.manifest.shells) and set(d.endpoints) <= set(s.manifest.endpoints)


DEFAULT_CHECKERS: tuple[Checker, ...] = (
    Checker("No Malware", "vnf", _no_malware),
    Checker("Memory Integrity ok", "vnf", lambda s, d: d.memory_integrity),
    Checker("No Extra Service Running", "vnf", lambda s, d: not _extra_processes(s, d)),
    Checker("Trusted Processes are Running", "service_vm", _trusted_processes),
    Checker("No Memory Leakage", "service_vm", lambda s, d: not d.memory_leakage),
    Checker("No External Software Call", "service_vm", _no_external_call),
    Checker("Address Randomisation Enabled", "service_vm", lambda s, d: d.address_randomisation),
)


def load_checker_manifest(source: str | Path) -> list[str]:
    """One enabled checker name per line, `#` comments."""
    text = Path(source).read_text("utf-8") if isinstance(source, Path) else source
    names = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def select_checkers(names: Iterable[str] | None) -> tuple[Checker, ...]:
    if names is None:
        return DEFAULT_CHECKERS
    by_name = {c.name: c for c in DEFAULT_CHECKERS}
    out = []
    for n in names:
        if n not in by_name:
            raise AttestationError(f"unknown checker {n!r}")
        out.append(by_name[n])
    return tuple(out)


# --- The authority ---


class TrustedAuthority:
    """
    One authority for both the VNF and service-VM layers, with a checker suite
    per level. Every request is attested afresh; nothing is cached.
    """

    def __init__(
        self,
        name: str = "TA",
        key: KeyPair | None = None,
        references: ReferenceStore | None = None,
        checkers: Iterable[str] | None = None,
        validity: str = "24hr",
        clock: Callable[[], datetime.datetime] = utcnow,
    ) -> None:
        parse_validity(validity)
        self.name = name
        self.key = key or KeyPair.generate()
        self.references = references if references is not None else ReferenceStore()
        self.checkers = select_checkers(checkers)
        self.validity = validity
        self.clock = clock
        self.online = True
        self._serial = 0
        self._signer = threading.Lock()

    @property
    def public_key(self) -> KeyPair:
        return self.key.public

    def _require_online(self) -> None:
        if not self.online:
            raise AttestationError(f"trusted authority {self.name} is unreachable")

    def register_reference(self, identity: str, digest: str, algorithm: str = "sha256", issuer: str = "manufacturer") -> Reference:
        return self.references.register(identity, digest, algorithm, issuer)

    def binary_attest(self, artifact: bytes, identity: str, algorithm: str = "sha256") -> AttestationResult:
        measured = measure(artifact, algorithm)
        ref = self.references.get(identity, algorithm)
        res = AttestationResult(identity, algorithm, measured, ref.digest, measured == ref.digest)
        logger.debug("Binary attestation %s/%s: match=%s", identity, algorithm, res.match)
        return res

    def affirmed(self, static: StaticInfo, dynamic: DynamicInfo) -> tuple[list[PropertyEntry], list[PropertyEntry]]:
        """(vnf properties, service-VM properties) the enabled checkers affirm."""
        vnf: list[PropertyEntry] = []
        svm: list[PropertyEntry] = []
        for checker in self.checkers:
            ok, value = checker.run(static, dynamic)
            if ok:
                (vnf if checker.level == "vnf" else svm).append(PropertyEntry(checker.name, value))
        return vnf, svm

    def property_attest(self, request: AttestationRequest, hints: Iterable[str] = ()) -> PropertyCertificate:
        self._require_online()
        s = request.static
        vnf_ref = self.references.find(s.vnf_id)
        if vnf_ref is None:
            raise UnknownSubjectError(f"no reference registered for VNF {s.vnf_id!r}")
        image_ref = self.references.find(s.image)

        vnf_props: list[PropertyEntry] = []
        svm_props: list[PropertyEntry] = []
        if request.phase is Phase.ACTIVE and request.dynamic is not None:
            vnf_props, svm_props = self.affirmed(s, request.dynamic)

        wanted = {property_string_to_constant(h) for h in hints}
        offered = {property_string_to_constant(c.name) for c in self.checkers}
        for h in sorted(wanted - offered):
            logger.debug("TA %s has no checker for requested property %s", self.name, h)

        with self._signer:
            self._serial += 1
            cert_id = f"{self._serial:05d}"
            cert = PropertyCertificate(
                CertificateInfo(cert_id, self.name, validity=self.validity, issued=self.clock()),
                VnfInfo(
                    s.vnf_id,
                    s.vnf_name,
                    s.vnf_make,
                    s.vnf_purpose,
                    (ServiceVmInfo(s.vm_id, s.vm_name, s.vim_location),),
                ),
                StaticProperties(
                    HashInfo(s.vnf_digest, vnf_ref.issuer, _CERT_HASH_TYPE["sha256"]),
                    HashInfo(s.image_digest, image_ref.issuer if image_ref else "unknown", _CERT_HASH_TYPE["sha256"]),
                ),
                DynamicProperties(tuple(vnf_props), tuple(svm_props)),
            )
            cert = canonicalize_and_sign(cert, self.key)
        logger.info(
            "TA %s issued certificate %s for %s/%s (%s, %d properties)",
            self.name, cert_id, s.vnf_id, s.vm_id, request.phase.value, len(vnf_props) + len(svm_props),
        )
        return cert

    def digest_report(
        self,
        slice_id: str,
        members: Iterable[tuple[str, bytes, Iterable[tuple[str, bytes]]]],
        algorithm: str = "sha256",
    ) -> DigestReport:
        """Measures each VNF package and its VMs' images: [(vnf_id, package, [(vm_id, image)])]."""
        self._require_online()
        comps = []
        for vnf_id, package, vms in members:
            subs = tuple(DigestEntry(vm_id, measure(image, algorithm), algorithm) for vm_id, image in vms)
            comps.append(DigestEntry(vnf_id, measure(package, algorithm), algorithm, subs))
        return DigestReport(slice_id, tuple(comps), self.name, self.clock())
