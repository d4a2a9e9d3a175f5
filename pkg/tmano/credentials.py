"""
Credential artifacts: VNF property attestation certificates, trust policies
and hashed digest reports.

Certificates and policies are XML documents whose element names, nesting and
order are fixed; parsing walks the tree strictly and rejects anything else.
The canonical form is the exclusive c14n rendering of a tree built without
insignificant whitespace, and signatures are ECDSA (P-256, SHA-256) over the
canonical bytes of the certificate with the `digitalSign` element left out.
"""

from __future__ import annotations

import datetime
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

import yaml
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from lxml import etree

from .exceptions import (
    CertificateExpiredError,
    DigestFormatError,
    PropertyNameError,
    SchemaError,
    SignatureError,
)
from .utils import isoformat, parse_iso

logger = logging.getLogger("tmano")

SIGN_ALGO = "ECDSA"
WILDCARD_PLATFORM = "Any Network Slice"

# hash `type` labels accepted on certificates -> hex length
CERT_HASH_LENGTHS = {"SHA2": 64, "SHA256": 64, "SHA-256": 64, "SHA384": 96, "SHA512": 128}

# digest report algorithms -> hex length
DIGEST_LENGTHS = {"sha1": 40, "sha256": 64, "sha384": 96, "sha512": 128}

_HEX_RX = re.compile(r"^[0-9a-f]+$")
_VALIDITY_RX = re.compile(r"^([0-9]+)(s|min|hr|d)$")
_VALIDITY_UNITS = {"s": 1, "min": 60, "hr": 3600, "d": 86400}


# --- Property names -> LOPAT constants ---


def property_string_to_constant(s: str, value: str | int | float | None = None) -> str:
    """
    "No Malware" -> no_malware
    "Trusted Processes are Running", 10 -> trusted_processes_are_running_10
    """
    norm = re.sub(r"[^a-z0-9]+", "_", s.strip().lower()).strip("_")
    if not norm:
        raise PropertyNameError(f"property string {s!r} is empty after normalisation")
    if value is not None and str(value).strip():
        v = re.sub(r"[^a-z0-9]+", "_", str(value).strip().lower()).strip("_")
        if v:
            norm = f"{norm}_{v}"
    return norm


class PropertyVocabulary:
    """
    Constants handed out so far, each with the spelling that produced it.
    Case, surrounding quotes and runs of whitespace do not count as a new
    spelling; any other second spelling of a constant is refused.
    """

    def __init__(self) -> None:
        self._spellings: dict[str, str] = {}

    @staticmethod
    def spelling(raw: str, value: str | int | float | None = None) -> str:
        key = " ".join(raw.strip().strip('"').split()).casefold()
        if value is not None and str(value).strip():
            key = f"{key} {str(value).strip().casefold()}"
        return key

    def constant(self, raw: str, value: str | int | float | None = None) -> str:
        c = property_string_to_constant(raw, value)
        key = self.spelling(raw, value)
        seen = self._spellings.setdefault(c, key)
        if seen != key:
            raise PropertyNameError(f"property strings {seen!r} and {key!r} both map to {c}")
        return c

    def __contains__(self, constant: object) -> bool:
        return constant in self._spellings

    def __iter__(self):
        return iter(sorted(self._spellings))


def parse_validity(text: str) -> datetime.timedelta:
    """'24hr' -> 24 hours. Units: s, min, hr, d."""
    m = _VALIDITY_RX.match(text.strip())
    if not m:
        raise SchemaError(f"unparsable validity {text!r} (expected <int><s|min|hr|d>)", "validity")
    seconds = int(m.group(1)) * _VALIDITY_UNITS[m.group(2)]
    if seconds <= 0:
        raise SchemaError(f"validity must be positive, got {text!r}", "validity")
    return datetime.timedelta(seconds=seconds)


def _check_cert_hash(value: str, htype: str, path: str) -> None:
    length = CERT_HASH_LENGTHS.get(htype.upper())
    if length is None:
        raise DigestFormatError(f"{path}: unsupported hash type {htype!r}")
    if len(value) != length or not _HEX_RX.match(value):
        raise DigestFormatError(
            f"{path}: hash value must be {length} lowercase hex characters for {htype}"
        )


# --- Keys ---


@dataclass(frozen=True)
class KeyPair:
    public_key: ec.EllipticCurvePublicKey
    private_key: ec.EllipticCurvePrivateKey | None = None
    algorithm: str = SIGN_ALGO

    @classmethod
    def generate(cls) -> "KeyPair":
        priv = ec.generate_private_key(ec.SECP256R1())
        return cls(priv.public_key(), priv)

    @classmethod
    def from_pem(cls, data: bytes) -> "KeyPair":
        """Loads a private key PEM, or a public-only key PEM."""
        try:
            if b"PRIVATE KEY" in data:
                priv = serialization.load_pem_private_key(data, password=None)
                if not isinstance(priv, ec.EllipticCurvePrivateKey):
                    raise SignatureError("PEM key is not an elliptic-curve key")
                return cls(priv.public_key(), priv)
            pub = serialization.load_pem_public_key(data)
        except (ValueError, TypeError) as e:
            raise SignatureError(f"cannot decode key: {e}") from e
        if not isinstance(pub, ec.EllipticCurvePublicKey):
            raise SignatureError("PEM key is not an elliptic-curve key")
        return cls(pub)

    @classmethod
    def from_issuer_key(cls, text: str) -> "KeyPair":
        """Decodes the OpenSSH public-key blob carried in `issuerKey`."""
        blob = re.sub(r"[\s\"]+", "", text)
        try:
            pub = serialization.load_ssh_public_key(b"ecdsa-sha2-nistp256 " + blob.encode("ascii"))
        except (ValueError, UnicodeEncodeError) as e:
            raise SignatureError(f"cannot decode issuer key: {e}") from e
        if not isinstance(pub, ec.EllipticCurvePublicKey):
            raise SignatureError("issuer key is not an elliptic-curve key")
        return cls(pub)

    def to_pem(self) -> bytes:
        if self.private_key is None:
            return self.public_pem()
        return self.private_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    def public_pem(self) -> bytes:
        return self.public_key.public_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    @property
    def issuer_key(self) -> str:
        line = self.public_key.public_bytes(
            encoding=serialization.Encoding.OpenSSH,
            format=serialization.PublicFormat.OpenSSH,
        )
        return line.split()[1].decode("ascii")

    @property
    def public(self) -> "KeyPair":
        return KeyPair(self.public_key)

    def sign(self, data: bytes) -> bytes:
        if self.private_key is None:
            raise SignatureError("key pair has no private key")
        return self.private_key.sign(data, ec.ECDSA(hashes.SHA256()))

    def verify(self, signature: bytes, data: bytes) -> bool:
        try:
            self.public_key.verify(signature, data, ec.ECDSA(hashes.SHA256()))
        except InvalidSignature:
            return False
        return True


# --- Certificate model ---


@dataclass(frozen=True)
class CertificateInfo:
    id: str
    issuer: str
    issuer_key: str = ""
    sign_algo: str = SIGN_ALGO
    digital_sign: str = ""
    validity: str = "24hr"
    issued: datetime.datetime | None = None

    @property
    def validity_period(self) -> datetime.timedelta:
        return parse_validity(self.validity)

    @property
    def expires_at(self) -> datetime.datetime | None:
        if self.issued is None:
            return None
        return self.issued + self.validity_period


@dataclass(frozen=True)
class ServiceVmInfo:
    vmid: str
    vm_name: str
    vim_location: str


@dataclass(frozen=True)
class VnfInfo:
    id: str
    name: str
    make: str
    purpose: str
    vnf_map: tuple[ServiceVmInfo, ...]

    def __post_init__(self) -> None:
        if not self.vnf_map:
            raise SchemaError("vnfMap needs at least one serviceVMinfo", "vnfCertificate/vnfInfo/vnfMap")


@dataclass(frozen=True)
class HashInfo:
    value: str
    issuer: str
    type: str = "SHA2"


@dataclass(frozen=True)
class StaticProperties:
    vnf_hash: HashInfo
    service_vm_hash: HashInfo


@dataclass(frozen=True)
class PropertyEntry:
    text: str
    value: str | None = None

    @property
    def constant(self) -> str:
        return property_string_to_constant(self.text, self.value)

    @property
    def stem(self) -> str:
        return property_string_to_constant(self.text)


@dataclass(frozen=True)
class DynamicProperties:
    vnf: tuple[PropertyEntry, ...] = ()
    service_vm: tuple[PropertyEntry, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.vnf or self.service_vm)


@dataclass(frozen=True)
class PropertyCertificate:
    info: CertificateInfo
    vnf: VnfInfo
    static: StaticProperties
    dynamic: DynamicProperties = field(default_factory=DynamicProperties)

    @property
    def vm_ids(self) -> list[str]:
        return [vm.vmid for vm in self.vnf.vnf_map]

    def is_expired(self, now: datetime.datetime) -> bool:
        exp = self.info.expires_at
        return exp is not None and now >= exp

    def check_validity(self, now: datetime.datetime) -> None:
        if self.is_expired(now):
            raise CertificateExpiredError(
                f"certificate {self.info.id} expired at {isoformat(self.info.expires_at)}"  # type: ignore[arg-type]
            )

    def without_signature(self) -> "PropertyCertificate":
        return replace(self, info=replace(self.info, digital_sign=""))


# --- Policy model ---


class Verdict(str, Enum):
    TRUSTED = "Trusted"
    UNTRUSTED = "Untrusted"


class SubjectKind(str, Enum):
    VNF = "vnf"
    SERVICE_VM = "service_vm"
    SLICE = "slice"


@dataclass(frozen=True)
class PolicyInfo:
    id: str
    creator: str
    creator_role: str


@dataclass(frozen=True)
class Requirements:
    static: tuple[str, ...] = ()
    dynamic: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.static or self.dynamic)


@dataclass(frozen=True)
class PolicyRule:
    platform: str
    resources: str
    vnf: Requirements | None = None
    service_vm: Requirements | None = None
    boot_time: Verdict = Verdict.TRUSTED
    run_time: Verdict = Verdict.TRUSTED

    def __post_init__(self) -> None:
        if not (self.vnf or self.service_vm):
            raise SchemaError("empty condition: a rule needs at least one requirement", "trustPolicy/rule/target/condition")

    def matches_platform(self, slice_id: str) -> bool:
        return self.platform == WILDCARD_PLATFORM or self.platform == slice_id

    def requirements_for(self, kind: SubjectKind) -> Requirements | None:
        if kind is SubjectKind.VNF:
            return self.vnf
        if kind is SubjectKind.SERVICE_VM:
            return self.service_vm
        return self.vnf or self.service_vm


@dataclass(frozen=True)
class TrustPolicy:
    info: PolicyInfo
    rules: tuple[PolicyRule, ...]

    def __post_init__(self) -> None:
        if not self.rules:
            raise SchemaError("a trust policy needs at least one rule", "trustPolicy")

    @property
    def id(self) -> str:
        return self.info.id

    @property
    def realms(self) -> list[str]:
        return sorted({r.resources for r in self.rules})


# --- Strict schema walking ---

_PARSER = etree.XMLParser(
    remove_comments=True, remove_pis=True, resolve_entities=False, no_network=True
)


def _load_root(document: bytes | str, root_name: str) -> etree._Element:
    if isinstance(document, str):
        document = document.encode("utf-8")
    try:
        root = etree.fromstring(document, _PARSER)
    except etree.XMLSyntaxError as e:
        raise SchemaError(f"malformed XML: {e}") from e
    if root.tag != root_name:
        raise SchemaError(f"root element must be <{root_name}>, got <{root.tag}>", root.tag)
    return root


def _is_blank(text: str | None) -> bool:
    return text is None or not text.strip()


class _Cursor:
    """Sequential walk over the element children of a container."""

    def __init__(self, el: etree._Element, path: str, attributes: Iterable[str] = ()) -> None:
        self.path = path
        _check_attributes(el, path, attributes)
        if not _is_blank(el.text):
            raise SchemaError(f"unexpected text {el.text.strip()!r}", path)
        self.items = list(el)
        for c in self.items:
            if not _is_blank(c.tail):
                raise SchemaError(f"unexpected text {c.tail.strip()!r} after <{c.tag}>", path)
        self.pos = 0

    def peek(self, name: str) -> bool:
        return self.pos < len(self.items) and self.items[self.pos].tag == name

    def take(self, name: str) -> etree._Element:
        if not self.peek(name):
            found = f"<{self.items[self.pos].tag}>" if self.pos < len(self.items) else "end of element"
            raise SchemaError(f"expected <{name}>, found {found}", self.path)
        el = self.items[self.pos]
        self.pos += 1
        return el

    def take_many(self, name: str) -> list[etree._Element]:
        out = []
        while self.peek(name):
            out.append(self.take(name))
        return out

    def leaf(self, name: str, required: bool = True, attributes: Iterable[str] = ()) -> str:
        return _leaf(self.take(name), f"{self.path}/{name}", required, attributes)

    def done(self) -> None:
        if self.pos < len(self.items):
            raise SchemaError(f"unexpected element <{self.items[self.pos].tag}>", self.path)


def _check_attributes(el: etree._Element, path: str, allowed: Iterable[str]) -> None:
    extra = set(el.attrib) - set(allowed)
    if extra:
        raise SchemaError(f"unexpected attribute(s) {sorted(extra)}", path)


def _leaf(el: etree._Element, path: str, required: bool = True, attributes: Iterable[str] = ()) -> str:
    _check_attributes(el, path, attributes)
    if len(el):
        raise SchemaError(f"unexpected element <{el[0].tag}>", path)
    text = (el.text or "").strip()
    if required and not text:
        raise SchemaError("empty value", path)
    return text


# --- Certificate parse / serialize ---


def parse_certificate(document: bytes | str) -> PropertyCertificate:
    root = _load_root(document, "vnfCertificate")
    top = _Cursor(root, "vnfCertificate")

    p = "vnfCertificate/certificateInfo"
    c = _Cursor(top.take("certificateInfo"), p)
    cid = c.leaf("id")
    issuer = c.leaf("issuer")
    issuer_key = c.leaf("issuerKey", required=False)
    sign_algo = c.leaf("signAlgo")
    digital_sign = c.leaf("digitalSign", required=False)
    validity_el = c.take("validity")
    validity = _leaf(validity_el, f"{p}/validity", attributes=("issued",))
    parse_validity(validity)
    issued = None
    if "issued" in validity_el.attrib:
        try:
            issued = parse_iso(validity_el.attrib["issued"])
        except ValueError as e:
            raise SchemaError(f"bad issued timestamp: {e}", f"{p}/validity") from e
        if isoformat(issued) != validity_el.attrib["issued"]:
            raise SchemaError("issued timestamp must be YYYY-MM-DDTHH:MM:SSZ", f"{p}/validity")
    c.done()
    info = CertificateInfo(cid, issuer, issuer_key, sign_algo, digital_sign, validity, issued)

    p = "vnfCertificate/vnfInfo"
    c = _Cursor(top.take("vnfInfo"), p)
    vid = c.leaf("id")
    vname = c.leaf("vnfName")
    vmake = c.leaf("vnfMake")
    vpurpose = c.leaf("vnfPurpose")
    m = _Cursor(c.take("vnfMap"), f"{p}/vnfMap")
    vms = []
    for el in m.take_many("serviceVMinfo"):
        s = _Cursor(el, f"{p}/vnfMap/serviceVMinfo")
        vms.append(ServiceVmInfo(s.leaf("vmid"), s.leaf("vmName"), s.leaf("vimLocation")))
        s.done()
    m.done()
    c.done()
    vnf = VnfInfo(vid, vname, vmake, vpurpose, tuple(vms))

    p = "vnfCertificate/staticProperty"
    c = _Cursor(top.take("staticProperty"), p)
    hashes_ = []
    for name in ("vnfHashinfo", "serviceVMHashinfo"):
        h = _Cursor(c.take(name), f"{p}/{name}")
        info_ = HashInfo(h.leaf("value"), h.leaf("issuer"), h.leaf("type"))
        h.done()
        _check_cert_hash(info_.value, info_.type, f"{p}/{name}/value")
        hashes_.append(info_)
    c.done()
    static = StaticProperties(*hashes_)

    p = "vnfCertificate/dynamicProperty"
    c = _Cursor(top.take("dynamicProperty"), p)
    sections = []
    for name in ("vnfProperty", "serviceVMProperty"):
        s = _Cursor(c.take(name), f"{p}/{name}")
        sections.append(tuple(_parse_p(el, f"{p}/{name}/p") for el in s.take_many("p")))
        s.done()
    c.done()
    top.done()

    return PropertyCertificate(info, vnf, static, DynamicProperties(*sections))


def _parse_p(el: etree._Element, path: str) -> PropertyEntry:
    _check_attributes(el, path, ())
    text = (el.text or "").strip()
    if not text:
        raise SchemaError("empty property", path)
    value = None
    children = list(el)
    if children:
        if len(children) > 1 or children[0].tag != "v":
            raise SchemaError(f"unexpected element <{children[-1].tag}>", path)
        value = _leaf(children[0], f"{path}/v")
        if not _is_blank(children[0].tail):
            raise SchemaError("unexpected text after <v>", path)
    return PropertyEntry(text, value)


def _sub(parent: etree._Element, tag: str, text: str | None = None) -> etree._Element:
    el = etree.SubElement(parent, tag)
    if text is not None:
        el.text = text
    return el


def _certificate_tree(cert: PropertyCertificate, with_signature: bool = True) -> etree._Element:
    root = etree.Element("vnfCertificate")
    ci = _sub(root, "certificateInfo")
    _sub(ci, "id", cert.info.id)
    _sub(ci, "issuer", cert.info.issuer)
    _sub(ci, "issuerKey", cert.info.issuer_key)
    _sub(ci, "signAlgo", cert.info.sign_algo)
    if with_signature:
        _sub(ci, "digitalSign", cert.info.digital_sign)
    val = _sub(ci, "validity", cert.info.validity)
    if cert.info.issued is not None:
        val.set("issued", isoformat(cert.info.issued))

    vi = _sub(root, "vnfInfo")
    _sub(vi, "id", cert.vnf.id)
    _sub(vi, "vnfName", cert.vnf.name)
    _sub(vi, "vnfMake", cert.vnf.make)
    _sub(vi, "vnfPurpose", cert.vnf.purpose)
    vm_map = _sub(vi, "vnfMap")
    for vm in cert.vnf.vnf_map:
        s = _sub(vm_map, "serviceVMinfo")
        _sub(s, "vmid", vm.vmid)
        _sub(s, "vmName", vm.vm_name)
        _sub(s, "vimLocation", vm.vim_location)

    sp = _sub(root, "staticProperty")
    for name, h in (("vnfHashinfo", cert.static.vnf_hash), ("serviceVMHashinfo", cert.static.service_vm_hash)):
        hi = _sub(sp, name)
        _sub(hi, "value", h.value)
        _sub(hi, "issuer", h.issuer)
        _sub(hi, "type", h.type)

    dp = _sub(root, "dynamicProperty")
    for name, entries in (("vnfProperty", cert.dynamic.vnf), ("serviceVMProperty", cert.dynamic.service_vm)):
        sec = _sub(dp, name)
        for e in entries:
            p = _sub(sec, "p", e.text)
            if e.value is not None:
                _sub(p, "v", e.value)
    return root


def serialize_certificate(cert: PropertyCertificate) -> bytes:
    """Canonical document: c14n, no declaration, no insignificant whitespace."""
    return etree.tostring(_certificate_tree(cert), method="c14n")


def canonical_bytes(cert: PropertyCertificate) -> bytes:
    """The signed payload: canonical form without the digitalSign element."""
    return etree.tostring(_certificate_tree(cert, with_signature=False), method="c14n")


def canonicalize_and_sign(cert: PropertyCertificate, key: KeyPair) -> PropertyCertificate:
    if cert.info.sign_algo != key.algorithm:
        raise SignatureError(
            f"key algorithm {key.algorithm} does not match signAlgo {cert.info.sign_algo}"
        )
    unsigned = replace(cert, info=replace(cert.info, issuer_key=key.issuer_key, digital_sign=""))
    signature = key.sign(canonical_bytes(unsigned))
    return replace(unsigned, info=replace(unsigned.info, digital_sign=signature.hex()))


def verify_signature(cert: PropertyCertificate, key: KeyPair) -> bool:
    if cert.info.sign_algo != key.algorithm:
        logger.debug("Certificate %s: signAlgo %s != %s", cert.info.id, cert.info.sign_algo, key.algorithm)
        return False
    try:
        signature = bytes.fromhex(cert.info.digital_sign)
    except ValueError:
        return False
    if not signature:
        return False
    return key.verify(signature, canonical_bytes(cert))


# --- Policy parse / serialize ---


def parse_policy(document: bytes | str) -> TrustPolicy:
    root = _load_root(document, "trustPolicy")
    top = _Cursor(root, "trustPolicy")
    c = _Cursor(top.take("info"), "trustPolicy/info")
    info = PolicyInfo(c.leaf("id"), c.leaf("creator"), c.leaf("cRole"))
    c.done()

    rules = []
    for el in top.take_many("rule"):
        r = _Cursor(el, "trustPolicy/rule")
        p = "trustPolicy/rule/target"
        t = _Cursor(r.take("target"), p)
        platform = t.leaf("platform")
        resources = t.leaf("resources")
        cond = _Cursor(t.take("condition"), f"{p}/condition")
        ent = _Cursor(cond.take("entity"), f"{p}/condition/entity")
        vnf = _parse_requirements(ent.take("vnf"), f"{p}/condition/entity/vnf") if ent.peek("vnf") else None
        svm = (
            _parse_requirements(ent.take("serviceVM"), f"{p}/condition/entity/serviceVM")
            if ent.peek("serviceVM")
            else None
        )
        ent.done()
        cond.done()
        if not (vnf or svm):
            raise SchemaError("empty condition: a rule needs at least one requirement", f"{p}/condition")
        a = _Cursor(t.take("action"), f"{p}/action")
        btime = _verdict(a.leaf("bTime"), f"{p}/action/bTime")
        rtime = _verdict(a.leaf("rTime"), f"{p}/action/rTime")
        a.done()
        t.done()
        r.done()
        rules.append(PolicyRule(platform, resources, vnf, svm, btime, rtime))
    top.done()
    if not rules:
        raise SchemaError("a trust policy needs at least one rule", "trustPolicy")
    return TrustPolicy(info, tuple(rules))


def _parse_requirements(el: etree._Element, path: str) -> Requirements:
    c = _Cursor(el, path)
    static = tuple(_leaf(x, f"{path}/sP") for x in c.take_many("sP"))
    dynamic = tuple(_leaf(x, f"{path}/dP") for x in c.take_many("dP"))
    c.done()
    return Requirements(static, dynamic)


def _verdict(text: str, path: str) -> Verdict:
    try:
        return Verdict(text)
    except ValueError:
        raise SchemaError(f"unknown verdict label {text!r} (Trusted/Untrusted)", path) from None


def _policy_tree(policy: TrustPolicy) -> etree._Element:
    root = etree.Element("trustPolicy")
    info = _sub(root, "info")
    _sub(info, "id", policy.info.id)
    _sub(info, "creator", policy.info.creator)
    _sub(info, "cRole", policy.info.creator_role)
    for rule in policy.rules:
        r = _sub(root, "rule")
        t = _sub(r, "target")
        _sub(t, "platform", rule.platform)
        _sub(t, "resources", rule.resources)
        ent = _sub(_sub(t, "condition"), "entity")
        for tag, req in (("vnf", rule.vnf), ("serviceVM", rule.service_vm)):
            if req is None:
                continue
            e = _sub(ent, tag)
            for s in req.static:
                _sub(e, "sP", s)
            for d in req.dynamic:
                _sub(e, "dP", d)
        a = _sub(t, "action")
        _sub(a, "bTime", rule.boot_time.value)
        _sub(a, "rTime", rule.run_time.value)
    return root


def serialize_policy(policy: TrustPolicy) -> bytes:
    return etree.tostring(_policy_tree(policy), method="c14n")


# --- Digest reports ---


@dataclass(frozen=True)
class DigestEntry:
    id: str
    digest: str
    algorithm: str = "sha256"
    subcomponents: tuple["DigestEntry", ...] = ()

    def walk(self) -> Iterable["DigestEntry"]:
        yield self
        for s in self.subcomponents:
            yield from s.walk()


@dataclass(frozen=True)
class DigestReport:
    slice_id: str
    components: tuple[DigestEntry, ...] = ()
    reporter: str = "TA"
    timestamp: datetime.datetime | None = None

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries():
            if entry.id in seen:
                raise DigestFormatError(f"duplicate component id {entry.id!r} in digest report")
            seen.add(entry.id)
            _check_digest(entry)

    def entries(self) -> Iterable[DigestEntry]:
        for c in self.components:
            yield from c.walk()


def _check_digest(entry: DigestEntry) -> None:
    length = DIGEST_LENGTHS.get(entry.algorithm)
    if length is None:
        raise DigestFormatError(f"{entry.id}: unsupported algorithm {entry.algorithm!r}")
    if len(entry.digest) != length or not _HEX_RX.match(entry.digest):
        raise DigestFormatError(
            f"{entry.id}: digest must be {length} lowercase hex characters for {entry.algorithm}"
        )


def _entry_from_dict(d: Any) -> DigestEntry:
    if not isinstance(d, dict) or "id" not in d or "digest" not in d:
        raise DigestFormatError(f"component entries need 'id' and 'digest': {d!r}")
    return DigestEntry(
        str(d["id"]),
        str(d["digest"]).lower(),
        str(d.get("algorithm", "sha256")).lower(),
        tuple(_entry_from_dict(s) for s in d.get("subcomponents") or ()),
    )


def _entry_to_dict(e: DigestEntry) -> dict:
    d: dict[str, Any] = {"id": e.id, "algorithm": e.algorithm, "digest": e.digest}
    if e.subcomponents:
        d["subcomponents"] = [_entry_to_dict(s) for s in e.subcomponents]
    return d


def parse_digest_report(text: str | bytes) -> DigestReport:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise DigestFormatError(f"malformed digest report: {e}") from e
    if not isinstance(data, dict) or "slice" not in data:
        raise DigestFormatError("digest report needs a 'slice' field")
    ts = data.get("timestamp")
    if isinstance(ts, str):
        ts = parse_iso(ts)
    elif isinstance(ts, datetime.datetime) and ts.tzinfo is None:
        ts = ts.replace(tzinfo=datetime.timezone.utc)
    return DigestReport(
        str(data["slice"]),
        tuple(_entry_from_dict(c) for c in data.get("components") or ()),
        str(data.get("reporter", "TA")),
        ts,
    )


def serialize_digest_report(report: DigestReport) -> str:
    data: dict[str, Any] = {"slice": report.slice_id, "reporter": report.reporter}
    if report.timestamp is not None:
        data["timestamp"] = isoformat(report.timestamp)
    data["components"] = [_entry_to_dict(c) for c in report.components]
    return yaml.safe_dump(data, sort_keys=False)
