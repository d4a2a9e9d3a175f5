"""
Fact derivation from credentials, and trust-query resolution.

`resolve` and `cp_resolve` are goal-directed (backward chaining) over a
FactBase and a RuleBase; `forward_close` computes the least fixpoint and
serves as the reference they must agree with.

PreReq gates every SatC conclusion: SatC(c,p) holds only if, for each fact
PreReq(c,p,c2,p2), the fact SatC(c2,p2) is present. The check looks at facts
only, never at rules.
"""

from __future__ import annotations

import datetime
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Iterator, Mapping

from .credentials import (
    DigestReport,
    KeyPair,
    PropertyCertificate,
    verify_signature,
)
from .exceptions import CredentialError, RuleValidationError, SignatureError, UnknownSubjectError
from .lopat import (
    FACT_PREDICATES,
    Literal,
    Predicate,
    Rule,
    RuleBase,
    RuleKind,
    Sort,
    Term,
    const,
    parse_rules,
)

logger = logging.getLogger("tmano")

Binding = dict[str, Term]


class Provenance(str, Enum):
    DIGEST_REPORT = "digest_report"
    PROPERTY_CERTIFICATE = "property_certificate"
    ASSERTED = "asserted"
    DERIVED = "derived"


class FactBase:
    """Immutable set of ground literals, indexed by predicate and first argument."""

    __slots__ = ("_prov", "_by_key", "_by_pred")

    def __init__(self, facts: Iterable[Literal] = (), provenance: Provenance = Provenance.ASSERTED) -> None:
        prov: dict[Literal, frozenset[Provenance]] = {}
        for lit in facts:
            if not lit.is_ground:
                raise RuleValidationError(f"facts must be ground: {lit}", "fact")
            prov[lit] = prov.get(lit, frozenset()) | {provenance}
        self._build(prov)

    def _build(self, prov: dict[Literal, frozenset[Provenance]]) -> None:
        self._prov = prov
        self._by_key: dict[tuple[Predicate, str], list[Literal]] = {}
        self._by_pred: dict[Predicate, list[Literal]] = {}
        for lit in prov:
            self._by_key.setdefault((lit.predicate, lit.args[0].name), []).append(lit)
            self._by_pred.setdefault(lit.predicate, []).append(lit)

    @classmethod
    def _from_map(cls, prov: dict[Literal, frozenset[Provenance]]) -> "FactBase":
        fb = cls.__new__(cls)
        fb._build(prov)
        return fb

    @classmethod
    def from_text(cls, text: str, provenance: Provenance = Provenance.ASSERTED) -> "FactBase":
        """`SatC(c1,p1). HasNS(ns1,c1).` -> FactBase"""
        return cls(parse_rules(text).facts, provenance)

    def add(self, lit: Literal, provenance: Provenance = Provenance.ASSERTED) -> "FactBase":
        return self.merge(FactBase([lit], provenance))

    def merge(self, other: "FactBase") -> "FactBase":
        prov = dict(self._prov)
        for lit, p in other._prov.items():
            prov[lit] = prov.get(lit, frozenset()) | p
        return FactBase._from_map(prov)

    def provenance(self, lit: Literal) -> frozenset[Provenance]:
        return self._prov.get(lit, frozenset())

    def lookup(self, predicate: Predicate, first: str | None = None) -> tuple[Literal, ...]:
        if first is None:
            return tuple(self._by_pred.get(predicate, ()))
        return tuple(self._by_key.get((predicate, first), ()))

    def match(self, pattern: Literal, binding: Mapping[str, Term] | None = None) -> Iterator[Binding]:
        """Yields each extension of `binding` mapping `pattern` onto a fact."""
        binding = dict(binding or {})
        pattern = apply_binding(pattern, binding)
        first = pattern.args[0]
        candidates = self.lookup(pattern.predicate, None if first.is_variable else first.name)
        for fact in candidates:
            b = match_literal(pattern, fact, binding)
            if b is not None:
                yield b

    def constants(self) -> Iterator[Term]:
        for lit in self._prov:
            yield from lit.args

    def with_provenance(self, provenance: Provenance) -> list[Literal]:
        return [lit for lit, p in self._prov.items() if provenance in p]

    def __contains__(self, lit: object) -> bool:
        return lit in self._prov

    def __iter__(self) -> Iterator[Literal]:
        return iter(self._prov)

    def __len__(self) -> int:
        return len(self._prov)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FactBase) and self._prov == other._prov

    def __repr__(self) -> str:
        return f"FactBase({len(self)} facts)"


def apply_binding(lit: Literal, binding: Mapping[str, Term]) -> Literal:
    if not binding or lit.is_ground:
        return lit
    return Literal(
        lit.predicate,
        tuple(binding.get(t.name, t) if t.is_variable else t for t in lit.args),
    )


def match_literal(pattern: Literal, ground: Literal, binding: Mapping[str, Term] | None = None) -> Binding | None:
    """One-way matching of a (possibly non-ground) pattern onto a ground literal."""
    if pattern.predicate is not ground.predicate or len(pattern.args) != len(ground.args):
        return None
    b: Binding = dict(binding or {})
    for p, g in zip(pattern.args, ground.args):
        if p.is_variable:
            bound = b.get(p.name)
            if bound is None:
                if p.sort is not g.sort:
                    return None
                b[p.name] = g
            elif bound != g:
                return None
        elif p != g:
            return None
    return b


# --- Fact derivation from credentials ---


def derive_facts_from_digest_report(report: DigestReport) -> FactBase:
    """
    HasNS(slice, c) for each top-level component, HasC(parent, sub) for each
    nested entry, SatC(x, hash_<digest>) for every measured entry.
    """
    facts: list[Literal] = []
    ns = const(report.slice_id, Sort.NETWORK_SLICE)

    def visit(entry, parent) -> None:
        comp = const(entry.id, Sort.COMPONENT)
        if parent is None:
            facts.append(Literal(Predicate.HAS_NS, (ns, comp)))
        else:
            facts.append(Literal(Predicate.HAS_C, (parent, comp)))
        facts.append(Literal(Predicate.SAT_C, (comp, const(f"hash_{entry.digest}", Sort.PROPERTY))))
        for sub in entry.subcomponents:
            visit(sub, comp)

    for c in report.components:
        visit(c, None)
    logger.debug("Digest report %s -> %d facts", report.slice_id, len(facts))
    return FactBase(facts, Provenance.DIGEST_REPORT)


def certificate_facts(cert: PropertyCertificate) -> list[Literal]:
    """The ground SatC literals a single certificate attests."""
    out: list[Literal] = []
    vnf = const(cert.vnf.id, Sort.COMPONENT)
    vms = [const(vm.vmid, Sort.COMPONENT) for vm in cert.vnf.vnf_map]

    def sat(c: Term, p: str) -> Literal:
        return Literal(Predicate.SAT_C, (c, const(p, Sort.PROPERTY)))

    out.append(sat(vnf, f"hash_{cert.static.vnf_hash.value}"))
    for vm in vms:
        out.append(sat(vm, f"hash_{cert.static.service_vm_hash.value}"))
    for entry in cert.dynamic.vnf:
        out.append(sat(vnf, entry.constant))
        if entry.value is not None:
            out.append(sat(vnf, entry.stem))
    for entry in cert.dynamic.service_vm:
        for vm in vms:
            out.append(sat(vm, entry.constant))
            if entry.value is not None:
                out.append(sat(vm, entry.stem))
    return out


def derive_facts_from_property_certs(
    certs: Iterable[PropertyCertificate],
    public_key: KeyPair | None = None,
    now: datetime.datetime | None = None,
    known_subjects: Iterable[str] | None = None,
    on_skip: Callable[[PropertyCertificate, Exception], None] | None = None,
) -> FactBase:
    """
    Maps attested properties to SatC facts. Certificates failing signature
    verification, expired ones and unknown subjects are skipped (and reported
    through `on_skip`); the others are still processed.
    """
    known = set(known_subjects) if known_subjects is not None else None
    facts: list[Literal] = []
    for cert in certs:
        problem: CredentialError | UnknownSubjectError | None = None
        if public_key is not None and not verify_signature(cert, public_key):
            problem = SignatureError(f"certificate {cert.info.id}: signature verification failed")
        elif now is not None and cert.is_expired(now):
            try:
                cert.check_validity(now)
            except CredentialError as e:
                problem = e
        elif known is not None and cert.vnf.id not in known:
            problem = UnknownSubjectError(f"certificate {cert.info.id}: unknown subject {cert.vnf.id}")
        if problem is not None:
            logger.warning("Skipping certificate %s: %s", cert.info.id, problem)
            if on_skip:
                on_skip(cert, problem)
            continue
        facts.extend(certificate_facts(cert))
    return FactBase(facts, Provenance.PROPERTY_CERTIFICATE)


# --- PreReq ---


def check_prereq(subject: Literal | tuple[str | Term, str | Term], facts: FactBase) -> bool:
    """False iff some PreReq(c,p,c2,p2) fact exists whose SatC(c2,p2) is not a fact."""
    return all(ok for _, ok in _prerequisites(subject, facts))


def _prerequisites(subject: Literal | tuple[str | Term, str | Term], facts: FactBase) -> list[tuple[Literal, bool]]:
    if isinstance(subject, Literal):
        if subject.predicate is not Predicate.SAT_C:
            return []
        c, p = subject.args
    else:
        c = subject[0] if isinstance(subject[0], Term) else const(subject[0], Sort.COMPONENT)
        p = subject[1] if isinstance(subject[1], Term) else const(subject[1], Sort.PROPERTY)
    out = []
    for pr in facts.lookup(Predicate.PRE_REQ, c.name):
        if pr.args[1] == p:
            need = Literal(Predicate.SAT_C, (pr.args[2], pr.args[3]))
            out.append((need, need in facts))
    return out


# --- Resolution ---


@dataclass(frozen=True)
class Limits:
    depth: int = 64
    steps: int = 100_000

    def __post_init__(self) -> None:
        if self.depth <= 0 or self.steps <= 0:
            raise ValueError("resolution limits must be positive")


@dataclass(frozen=True)
class Query:
    request: Literal
    goals: tuple[Literal, ...]

    def __post_init__(self) -> None:
        if self.request.predicate is not Predicate.DO or not self.request.is_ground:
            raise RuleValidationError(f"query request must be a ground Do literal, got {self.request}", "query")
        if not self.goals:
            raise RuleValidationError("a query needs at least one SatNS goal", "query")
        for g in self.goals:
            if g.predicate is not Predicate.SAT_NS or not g.is_ground:
                raise RuleValidationError(f"query goals must be ground SatNS literals, got {g}", "query")


class StepKind(str, Enum):
    FACT_MATCH = "fact-match"
    RULE_EXPANSION = "rule-expansion"
    PREREQ_CHECK = "prereq-check"
    FAILURE = "failure"


@dataclass
class TraceNode:
    goal: Literal | None
    step: StepKind
    satisfied: bool = False
    detail: str = ""
    children: list["TraceNode"] = field(default_factory=list)

    def walk(self) -> Iterator["TraceNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def lines(self, depth: int = 0) -> Iterator[str]:
        label = str(self.goal) if self.goal is not None else "rule"
        status = "ok" if self.satisfied else "failed"
        detail = f": {self.detail}" if self.detail else ""
        yield f"{'  ' * depth}{label} [{self.step.value}] {status}{detail}"
        for c in self.children:
            yield from c.lines(depth + 1)


@dataclass
class DerivationTrace:
    header: list[str] = field(default_factory=list)
    roots: list[TraceNode] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"# {h}" for h in self.header]
        for r in self.roots:
            lines.extend(r.lines())
        return "\n".join(lines) + "\n"

    def nodes(self) -> Iterator[TraceNode]:
        for r in self.roots:
            yield from r.walk()


@dataclass
class Resolution:
    satisfied: bool
    trace: DerivationTrace
    request: Literal | None = None
    reason: str = ""
    unknown: tuple[str, ...] = ()

    @property
    def permission(self) -> str | None:
        """The Do literal's permission, granted only when every goal holds."""
        if self.satisfied and self.request is not None:
            return self.request.args[3].name
        return None

    def __bool__(self) -> bool:
        return self.satisfied


class _BudgetExceeded(Exception):
    pass


def _effective_facts(facts: FactBase, rules: RuleBase) -> FactBase:
    if not rules.facts:
        return facts
    return facts.merge(FactBase(rules.facts, Provenance.ASSERTED))


def _universe(facts: FactBase, rules: RuleBase, extra: Iterable[Literal] = ()) -> dict[Sort, list[Term]]:
    seen: dict[Sort, set[Term]] = {}
    for t in facts.constants():
        seen.setdefault(t.sort, set()).add(t)
    for rule in rules:
        for lit in (rule.head, *rule.body):
            for t in lit.args:
                if not t.is_variable:
                    seen.setdefault(t.sort, set()).add(t)
    for lit in extra:
        for t in lit.args:
            if not t.is_variable:
                seen.setdefault(t.sort, set()).add(t)
    return {s: sorted(ts, key=lambda t: t.name) for s, ts in seen.items()}


class _Search:
    """Per-call resolution state: step counter, in-progress goals and caches."""

    def __init__(self, facts: FactBase, rules: RuleBase, limits: Limits, goals: Iterable[Literal] = ()) -> None:
        self.facts = _effective_facts(facts, rules)
        self.rules = rules
        self.limits = limits
        self.steps = 0
        self.in_progress: set[Literal] = set()
        self.proved: dict[Literal, TraceNode] = {}
        self.failed: dict[Literal, str] = {}
        self.universe = _universe(self.facts, rules, goals)

    def prove(self, goal: Literal, depth: int, out: list[TraceNode], hits: set[Literal]) -> bool:
        self.steps += 1
        if self.steps > self.limits.steps or depth > self.limits.depth:
            out.append(TraceNode(goal, StepKind.FAILURE, False, "budget"))
            raise _BudgetExceeded()

        if goal in self.proved:
            out.append(self.proved[goal])
            return True
        if goal in self.failed:
            out.append(TraceNode(goal, StepKind.FAILURE, False, self.failed[goal]))
            return False
        if goal in self.in_progress:
            hits.add(goal)
            out.append(TraceNode(goal, StepKind.FAILURE, False, "cycle"))
            return False

        node = TraceNode(goal, StepKind.FAILURE, False)
        out.append(node)

        if goal.predicate is Predicate.SAT_C:
            prereqs = _prerequisites(goal, self.facts)
            if prereqs:
                ok = all(met for _, met in prereqs)
                detail = ", ".join(f"{need}{'' if met else ' missing'}" for need, met in prereqs)
                node.children.append(TraceNode(goal, StepKind.PREREQ_CHECK, ok, detail))
                if not ok:
                    node.detail = "prerequisite unmet"
                    self.failed[goal] = node.detail
                    return False

        if goal in self.facts:
            sources = ",".join(sorted(p.value for p in self.facts.provenance(goal)))
            node.children.append(TraceNode(goal, StepKind.FACT_MATCH, True, sources))
            node.step, node.satisfied = StepKind.FACT_MATCH, True
            self.proved[goal] = node
            return True

        if goal.predicate in FACT_PREDICATES:
            node.detail = "no derivation"
            self.failed[goal] = node.detail
            return False

        local: set[Literal] = set()
        self.in_progress.add(goal)
        try:
            for rule in self.rules.rules_for(goal.predicate):
                if rule.kind is RuleKind.FACT:
                    continue
                binding = match_literal(rule.head, goal)
                if binding is None:
                    continue
                exp = TraceNode(None, StepKind.RULE_EXPANSION, False, str(rule))
                node.children.append(exp)
                if self._body(list(rule.body), binding, depth, exp.children, local):
                    exp.satisfied = True
                    node.step, node.satisfied, node.detail = StepKind.RULE_EXPANSION, True, str(rule)
                    self.proved[goal] = node
                    return True
        finally:
            self.in_progress.discard(goal)

        node.detail = "cycle" if local else "no derivation"
        outer = local - {goal}
        if not outer:
            self.failed[goal] = node.detail
        hits |= outer
        return False

    def _body(self, lits: list[Literal], binding: Binding, depth: int, out: list[TraceNode], hits: set[Literal]) -> bool:
        if not lits:
            return True
        i = self._select(lits, binding)
        lit = apply_binding(lits[i], binding)
        rest = lits[:i] + lits[i + 1:]

        if lit.is_ground:
            return self.prove(lit, depth + 1, out, hits) and self._body(rest, binding, depth, out, hits)

        if lit.predicate in FACT_PREDICATES:
            candidates = list(self.facts.match(lit, binding))
        else:
            candidates = list(self._enumerate(lit, binding))
        for b in candidates:
            if self.prove(apply_binding(lit, b), depth + 1, out, hits) and self._body(rest, b, depth, out, hits):
                return True
        return False

    @staticmethod
    def _select(lits: list[Literal], binding: Binding) -> int:
        for i, lit in enumerate(lits):
            if apply_binding(lit, binding).is_ground:
                return i
        for i, lit in enumerate(lits):
            if lit.predicate in FACT_PREDICATES:
                return i
        return 0

    def _enumerate(self, lit: Literal, binding: Binding) -> Iterator[Binding]:
        free: dict[str, Sort] = {}
        for v in lit.variables():
            free.setdefault(v.name, v.sort)
        names = list(free)
        for combo in itertools.product(*(self.universe.get(free[n], []) for n in names)):
            b = dict(binding)
            b.update(zip(names, combo))
            yield b

    def run(self, goal: Literal, roots: list[TraceNode]) -> tuple[bool, str]:
        hits: set[Literal] = set()
        try:
            ok = self.prove(goal, 0, roots, hits)
        except _BudgetExceeded:
            return False, "budget"
        if ok:
            return True, ""
        return False, roots[-1].detail or "no derivation"


def _unknown_constants(goals: Iterable[Literal], facts: FactBase, rules: RuleBase) -> tuple[str, ...]:
    known = {t for ts in _universe(_effective_facts(facts, rules), rules).values() for t in ts}
    out = []
    for g in goals:
        for t in g.args:
            if not t.is_variable and t not in known and t.name not in out:
                out.append(t.name)
    return tuple(out)


def resolve(query: Query, facts: FactBase, rules: RuleBase, limits: Limits = Limits()) -> Resolution:
    """
    Each goal SatNS is tried directly against facts (after PreReq checks),
    then through NSP rules whose head matches; the Do request is granted
    (its permission returned) iff every goal is satisfied.
    """
    trace = DerivationTrace(
        header=[
            f"request: {query.request}",
            "interpretation: goals are the SatNS conditions attached to the Do request; "
            "the permission is output when all of them are satisfied",
            f"permission: {query.request.args[3].name}",
        ]
    )
    unknown = _unknown_constants(query.goals, facts, rules)
    if unknown:
        logger.warning("Query %s mentions unknown constants: %s", query.request, ", ".join(unknown))
        trace.header.append(f"unknown constants: {', '.join(unknown)}")

    search = _Search(facts, rules, limits, query.goals)
    satisfied, reason = True, ""
    for goal in query.goals:
        ok, why = search.run(goal, trace.roots)
        if not ok and satisfied:
            satisfied, reason = False, why
        if why == "budget":
            break
    logger.debug("Query %s -> %s (%d steps)", query.request, satisfied, search.steps)
    return Resolution(satisfied, trace, query.request, reason, unknown)


def cp_resolve(goal: Literal, facts: FactBase, rules: RuleBase, limits: Limits = Limits()) -> Resolution:
    """SatC goal: certificate fact with PreReq check, else CP rule expansion."""
    if goal.predicate is not Predicate.SAT_C or not goal.is_ground:
        raise RuleValidationError(f"cp_resolve needs a ground SatC goal, got {goal}", "query")
    trace = DerivationTrace(header=[f"goal: {goal}"])
    search = _Search(facts, rules, limits, [goal])
    ok, reason = search.run(goal, trace.roots)
    return Resolution(ok, trace, None, reason)


def prove_goal(goal: Literal, facts: FactBase, rules: RuleBase, limits: Limits = Limits()) -> Resolution:
    """Any ground goal (SatC or SatNS), without a Do request."""
    trace = DerivationTrace(header=[f"goal: {goal}"])
    search = _Search(facts, rules, limits, [goal])
    ok, reason = search.run(goal, trace.roots)
    return Resolution(ok, trace, None, reason)


# --- Forward chaining ---


def forward_close(facts: FactBase, rules: RuleBase) -> FactBase:
    """Least fixpoint of the CP/NSP rules over the facts, PreReq-gated like `resolve`."""
    for rule in rules:
        head_vars = {v.name for v in rule.head.variables()}
        body_vars = {v.name for b in rule.body for v in b.variables()}
        if head_vars - body_vars:
            raise RuleValidationError(f"rule is not range-restricted: {rule}", "range restriction")

    base = _effective_facts(facts, rules)
    prov: dict[Literal, frozenset[Provenance]] = {}
    by_pred: dict[Predicate, list[Literal]] = {}

    def admit(lit: Literal, p: frozenset[Provenance]) -> bool:
        if lit in prov:
            return False
        if lit.predicate is Predicate.SAT_C and not check_prereq(lit, base):
            return False
        prov[lit] = p
        by_pred.setdefault(lit.predicate, []).append(lit)
        return True

    for lit in base:
        admit(lit, base.provenance(lit))

    derived_rules: list[Rule] = [r for r in rules if r.kind is not RuleKind.FACT]
    derived = frozenset({Provenance.DERIVED})
    changed = True
    while changed:
        changed = False
        for rule in derived_rules:
            bindings: list[Binding] = [{}]
            for lit in rule.body:
                nxt: list[Binding] = []
                for b in bindings:
                    pattern = apply_binding(lit, b)
                    for fact in list(by_pred.get(pattern.predicate, ())):
                        m = match_literal(pattern, fact, b)
                        if m is not None:
                            nxt.append(m)
                bindings = nxt
                if not bindings:
                    break
            for b in bindings:
                if admit(apply_binding(rule.head, b), derived):
                    changed = True
    return FactBase._from_map(prov)
