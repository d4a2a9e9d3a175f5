"""
LOPAT: the logic language for property-attestation trust.

Sorts, terms, literals and CP/NSP rules, a textual concrete syntax
(`Head <- L1 & L2 & ... & Ln.` / `Head.`), its parser and serializer,
and the well-formedness checks for Component-Property and
Network Slice-Property rules.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

from .exceptions import LopatSyntaxError, RuleValidationError, SortError

logger = logging.getLogger("tmano")


class Sort(str, Enum):
    NETWORK_SLICE = "NetworkSlice"
    COMPONENT = "Component"
    PROPERTY = "Property"
    TARGET = "Target"
    RESOURCE = "Resource"
    ACTION = "Action"
    PERMISSION = "Permission"
    NUMBER = "Number"


class Predicate(str, Enum):
    HAS_C = "HasC"
    HAS_NS = "HasNS"
    SAT_C = "SatC"
    SAT_NS = "SatNS"
    PRE_REQ = "PreReq"
    DO = "Do"


SIGNATURES: dict[Predicate, tuple[Sort, ...]] = {
    Predicate.HAS_C: (Sort.COMPONENT, Sort.COMPONENT),
    Predicate.HAS_NS: (Sort.NETWORK_SLICE, Sort.COMPONENT),
    Predicate.SAT_C: (Sort.COMPONENT, Sort.PROPERTY),
    Predicate.SAT_NS: (Sort.NETWORK_SLICE, Sort.PROPERTY),
    Predicate.PRE_REQ: (Sort.COMPONENT, Sort.PROPERTY, Sort.COMPONENT, Sort.PROPERTY),
    Predicate.DO: (Sort.NETWORK_SLICE, Sort.RESOURCE, Sort.ACTION, Sort.PERMISSION),
}

PERMISSIONS = frozenset({"allow", "deny"})

# predicates that only ever come from facts (never heads of CP/NSP rules)
FACT_PREDICATES = frozenset(
    {Predicate.HAS_C, Predicate.HAS_NS, Predicate.PRE_REQ, Predicate.DO}
)

_VARIABLE_RX = re.compile(r"^[A-Z][A-Za-z0-9_]*$")
_BARE_CONSTANT_RX = re.compile(r"^[a-z0-9_][A-Za-z0-9_]*$")
_HASH_RX = re.compile(r"^hash_([0-9A-Fa-f]+)$")


class TermKind(str, Enum):
    CONSTANT = "constant"
    VARIABLE = "variable"


@dataclass(frozen=True)
class Term:
    name: str
    sort: Sort
    kind: TermKind = TermKind.CONSTANT

    def __post_init__(self) -> None:
        if not self.name:
            raise SortError("term names must be non-empty")
        if self.kind is TermKind.VARIABLE and not _VARIABLE_RX.match(self.name):
            raise SortError(f"variable '{self.name}' must start with an uppercase letter")

    @property
    def is_variable(self) -> bool:
        return self.kind is TermKind.VARIABLE

    def __str__(self) -> str:
        if self.is_variable or _BARE_CONSTANT_RX.match(self.name):
            return self.name
        escaped = self.name.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"


def const(name: str, sort: Sort) -> Term:
    return Term(_normalise_constant(name), sort, TermKind.CONSTANT)


def var(name: str, sort: Sort) -> Term:
    return Term(name, sort, TermKind.VARIABLE)


def _normalise_constant(name: str) -> str:
    m = _HASH_RX.match(name)
    if m:
        return "hash_" + m.group(1).lower()
    return name


@dataclass(frozen=True)
class Literal:
    predicate: Predicate
    args: tuple[Term, ...]

    @classmethod
    def of(cls, predicate: Predicate | str, *args: str | Term) -> "Literal":
        """
        Builds a literal from names: plain strings become constants of the
        sort required at their position, Terms are used as given.
        """
        pred = Predicate(predicate)
        sig = SIGNATURES[pred]
        if len(args) != len(sig):
            raise SortError(f"{pred.value} expects {len(sig)} arguments, got {len(args)}")
        terms = tuple(
            a if isinstance(a, Term) else const(a, s) for a, s in zip(args, sig)
        )
        return cls(pred, terms)

    @property
    def is_ground(self) -> bool:
        return not any(t.is_variable for t in self.args)

    def variables(self) -> Iterator[Term]:
        for t in self.args:
            if t.is_variable:
                yield t

    def __str__(self) -> str:
        return f"{self.predicate.value}({','.join(str(t) for t in self.args)})"


class RuleKind(str, Enum):
    CP = "CP"
    NSP = "NSP"
    FACT = "Fact"


@dataclass(frozen=True)
class Rule:
    head: Literal
    body: tuple[Literal, ...] = ()
    kind: RuleKind = RuleKind.FACT

    def variables(self) -> list[Term]:
        seen: dict[str, Term] = {}
        for lit in (self.head, *self.body):
            for v in lit.variables():
                seen.setdefault(v.name, v)
        return list(seen.values())

    @property
    def is_ground(self) -> bool:
        return not self.variables()

    def canonical_key(self) -> tuple:
        """Identity of the rule up to consistent variable renaming."""
        names: dict[str, str] = {}

        def key(lit: Literal) -> tuple:
            parts = []
            for t in lit.args:
                if t.is_variable:
                    names.setdefault(t.name, f"V{len(names)}")
                    parts.append(("v", names[t.name], t.sort))
                else:
                    parts.append(("c", t.name, t.sort))
            return (lit.predicate, tuple(parts))

        return (self.kind, key(self.head), tuple(key(b) for b in self.body))

    def __str__(self) -> str:
        return serialize_rule(self)


def infer_kind(head: Literal, body: tuple[Literal, ...]) -> RuleKind:
    if not body:
        return RuleKind.FACT
    if head.predicate is Predicate.SAT_NS:
        return RuleKind.NSP
    return RuleKind.CP


@dataclass(frozen=True)
class Validation:
    ok: bool
    clause: str = ""
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


_CP_BODY = frozenset({Predicate.SAT_C, Predicate.HAS_C})
_NSP_BODY = frozenset({Predicate.SAT_C, Predicate.SAT_NS, Predicate.HAS_NS})


def _check_signature(lit: Literal) -> str | None:
    sig = SIGNATURES[lit.predicate]
    if len(lit.args) != len(sig):
        return f"{lit.predicate.value} expects {len(sig)} arguments, got {len(lit.args)}"
    for i, (term, sort) in enumerate(zip(lit.args, sig)):
        if term.sort is not sort:
            return (
                f"argument {i + 1} of {lit.predicate.value} must be {sort.value}, "
                f"got {term.sort.value}"
            )
    if lit.predicate is Predicate.DO:
        perm = lit.args[3]
        if not perm.is_variable and perm.name not in PERMISSIONS:
            return f"permission must be one of allow/deny, got '{perm.name}'"
    return None


def validate_rule(rule: Rule) -> Validation:
    """Accepts a rule iff it is sort-safe and satisfies the CP/NSP/Fact clauses."""
    for lit in (rule.head, *rule.body):
        problem = _check_signature(lit)
        if problem:
            return Validation(False, "signature", problem)

    preds = [b.predicate for b in rule.body]

    if rule.kind is RuleKind.FACT:
        if rule.body:
            return Validation(False, "fact", "facts must have an empty body")
        if not rule.head.is_ground:
            return Validation(False, "fact", "facts must be ground")
        return Validation(True)

    if rule.kind is RuleKind.CP:
        if rule.head.predicate is not Predicate.SAT_C:
            return Validation(False, "cp-rule", "CP rule head must be SatC")
        for p in preds:
            if p not in _CP_BODY:
                return Validation(
                    False, "cp-rule", f"forbidden body predicate {p.value} in CP rule"
                )
        if preds and Predicate.SAT_C not in preds:
            return Validation(False, "cp-rule", "missing SatC in CP body")

    if rule.kind is RuleKind.NSP:
        if rule.head.predicate is not Predicate.SAT_NS:
            return Validation(False, "nsp-rule", "NSP rule head must be SatNS")
        for p in preds:
            if p not in _NSP_BODY:
                return Validation(
                    False, "nsp-rule", f"forbidden body predicate {p.value} in NSP rule"
                )
        if Predicate.SAT_C in preds and Predicate.HAS_NS not in preds:
            return Validation(
                False, "nsp-rule", "SatC in NSP body must be paired with a HasNS literal"
            )
        if preds and Predicate.SAT_C not in preds and Predicate.SAT_NS not in preds:
            return Validation(False, "nsp-rule", "missing SatNS in NSP body")

    body_vars = {v.name for b in rule.body for v in b.variables()}
    for v in rule.head.variables():
        if v.name not in body_vars:
            return Validation(
                False, "range restriction", f"unbound variable {v.name} appears only in the head"
            )
    return Validation(True)


@dataclass(frozen=True)
class RuleBase:
    rules: tuple[Rule, ...] = ()
    realm: str = "default"
    _by_head: dict[Predicate, tuple[Rule, ...]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        seen: set[tuple] = set()
        index: dict[Predicate, list[Rule]] = {}
        for rule in self.rules:
            res = validate_rule(rule)
            if not res:
                raise RuleValidationError(f"{rule}: {res.message}", res.clause)
            key = rule.canonical_key()
            if key in seen:
                raise RuleValidationError(f"duplicate rule {rule}", "identity")
            seen.add(key)
            index.setdefault(rule.head.predicate, []).append(rule)
        object.__setattr__(self, "_by_head", {k: tuple(v) for k, v in index.items()})

    def rules_for(self, predicate: Predicate) -> tuple[Rule, ...]:
        """Rules whose head uses `predicate`, in declaration order."""
        return self._by_head.get(predicate, ())

    @property
    def facts(self) -> tuple[Literal, ...]:
        return tuple(r.head for r in self.rules if r.kind is RuleKind.FACT)

    def with_rules(self, *rules: Rule) -> "RuleBase":
        return RuleBase(self.rules + tuple(rules), self.realm)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)


def substitute(rule: Rule, binding: Mapping[str, str | Term]) -> Rule:
    """Replaces bound variables by constants; unbound variables remain."""
    sorts = {v.name: v.sort for v in rule.variables()}
    resolved: dict[str, Term] = {}
    for name, value in binding.items():
        if name not in sorts:
            continue
        sort = sorts[name]
        if isinstance(value, Term):
            if value.is_variable:
                raise SortError(f"binding for {name} must be a constant, got variable {value.name}")
            if value.sort is not sort:
                raise SortError(
                    f"cannot bind {name}:{sort.value} to {value.name}:{value.sort.value}"
                )
            resolved[name] = value
        else:
            resolved[name] = const(value, sort)

    def apply(lit: Literal) -> Literal:
        return Literal(
            lit.predicate,
            tuple(resolved.get(t.name, t) if t.is_variable else t for t in lit.args),
        )

    return Rule(apply(rule.head), tuple(apply(b) for b in rule.body), rule.kind)


def serialize_literal(lit: Literal) -> str:
    return str(lit)


def serialize_rule(rule: Rule) -> str:
    if not rule.body:
        return f"{rule.head}."
    return f"{rule.head} <- {' & '.join(str(b) for b in rule.body)}."


def serialize_rules(rules: Iterable[Rule]) -> str:
    return "".join(serialize_rule(r) + "\n" for r in rules)


# --- Lexer / parser ---

_TOKEN_RX = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<arrow><-)
  | (?P<amp>&)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
  | (?P<dot>\.)
  | (?P<quoted>'(?:[^'\\\n]|\\.)*')
  | (?P<ident>[A-Za-z0-9_]+)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN_RX.match(text, pos)
        if not m:
            raise LopatSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup or ""
        value = m.group()
        if kind == "nl":
            line, col = line + 1, 1
        else:
            if kind not in ("ws", "comment"):
                tokens.append(_Token(kind, value, line, col))
            col += len(value)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text: str) -> None:
        self.tokens = _tokenize(text)
        self.pos = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str, what: str) -> _Token:
        tok = self.current
        if tok.kind != kind:
            found = tok.text or "end of input"
            raise LopatSyntaxError(f"expected {what}, found '{found}'", tok.line, tok.column)
        self.pos += 1
        return tok

    def at_end(self) -> bool:
        return self.current.kind == "eof"

    def statement(self) -> Rule:
        start = self.current
        var_sorts: dict[str, Sort] = {}
        head = self.literal(var_sorts)
        body: list[Literal] = []
        if self.current.kind == "arrow":
            self.pos += 1
            self.conjunction(body, var_sorts)
        self.take("dot", "'.' at end of statement")
        rule = Rule(head, tuple(body), infer_kind(head, tuple(body)))
        logger.debug("Parsed %s rule at line %d: %s", rule.kind.value, start.line, rule)
        return rule

    def conjunction(self, body: list[Literal], var_sorts: dict[str, Sort]) -> None:
        while True:
            if self.current.kind == "lparen":
                self.pos += 1
                self.conjunction(body, var_sorts)
                self.take("rparen", "')' closing a group")
            else:
                body.append(self.literal(var_sorts))
            if self.current.kind != "amp":
                return
            self.pos += 1

    def literal(self, var_sorts: dict[str, Sort]) -> Literal:
        name_tok = self.take("ident", "a predicate name")
        try:
            pred = Predicate(name_tok.text)
        except ValueError:
            raise LopatSyntaxError(
                f"unknown predicate '{name_tok.text}'", name_tok.line, name_tok.column
            ) from None
        self.take("lparen", "'(' after predicate name")
        raw: list[_Token] = [self.term_token()]
        while self.current.kind == "comma":
            self.pos += 1
            raw.append(self.term_token())
        self.take("rparen", "')' closing the argument list")

        sig = SIGNATURES[pred]
        if len(raw) != len(sig):
            raise LopatSyntaxError(
                f"arity mismatch: {pred.value} expects {len(sig)} arguments, got {len(raw)}",
                name_tok.line,
                name_tok.column,
            )
        terms: list[Term] = []
        for tok, sort in zip(raw, sig):
            if tok.kind == "ident" and _VARIABLE_RX.match(tok.text):
                known = var_sorts.setdefault(tok.text, sort)
                if known is not sort:
                    raise LopatSyntaxError(
                        f"sort mismatch: variable {tok.text} used as {known.value} "
                        f"and {sort.value}",
                        tok.line,
                        tok.column,
                    )
                terms.append(var(tok.text, sort))
                continue
            name = _unquote(tok.text) if tok.kind == "quoted" else tok.text
            if not name:
                raise LopatSyntaxError("empty constant", tok.line, tok.column)
            if sort is Sort.PERMISSION and name not in PERMISSIONS:
                raise LopatSyntaxError(
                    f"sort mismatch: '{name}' is not a Permission (allow/deny)",
                    tok.line,
                    tok.column,
                )
            terms.append(const(name, sort))
        return Literal(pred, tuple(terms))

    def term_token(self) -> _Token:
        tok = self.current
        if tok.kind not in ("ident", "quoted"):
            found = tok.text or "end of input"
            raise LopatSyntaxError(f"expected a term, found '{found}'", tok.line, tok.column)
        self.pos += 1
        return tok


def _unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text[1:-1])


def parse_rule(text: str) -> Rule:
    """Parses exactly one statement terminated by a period."""
    parser = _Parser(text)
    rule = parser.statement()
    if not parser.at_end():
        tok = parser.current
        raise LopatSyntaxError(f"unexpected '{tok.text}' after statement", tok.line, tok.column)
    return rule


def parse_literal(text: str) -> Literal:
    parser = _Parser(text)
    lit = parser.literal({})
    if not parser.at_end():
        tok = parser.current
        raise LopatSyntaxError(f"unexpected '{tok.text}' after literal", tok.line, tok.column)
    return lit


def parse_rules(text: str, realm: str = "default") -> RuleBase:
    """Parses a whole `.lopat` document into a validated RuleBase."""
    parser = _Parser(text)
    rules: list[Rule] = []
    while not parser.at_end():
        rules.append(parser.statement())
    return RuleBase(tuple(rules), realm)
