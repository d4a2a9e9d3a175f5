"""
Trust Policy Repository: admin CRUD over Trust Policy documents, scoped by
realm (the rule target `resources`).

Layout under `root`:
    journal.log         append-only, one json line per mutation (authoritative)
    policies/<id>.xml   current document of each live policy
"""

from __future__ import annotations

import datetime
import logging
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .credentials import SubjectKind, TrustPolicy, parse_policy, serialize_policy
from .exceptions import AuthorizationError, PolicyStoreError, UnknownPolicyError
from .utils import _canon_dumps, _canon_loads, isoformat, parse_iso, utcnow

logger = logging.getLogger("tmano")

ADMIN_ROLE = "admin"


@dataclass(frozen=True)
class Actor:
    name: str
    role: str

    @property
    def is_admin(self) -> bool:
        return self.role == ADMIN_ROLE


@dataclass(frozen=True)
class PolicyRecord:
    policy: TrustPolicy
    revision: int
    created: datetime.datetime
    updated: datetime.datetime
    creator: str
    creator_role: str
    deleted: bool = False

    @property
    def id(self) -> str:
        return self.policy.id

    @property
    def realm(self) -> str:
        return ",".join(self.policy.realms)

    def line(self) -> str:
        tail = " deleted" if self.deleted else ""
        return f"{self.id} {self.realm!r} {self.revision} {self.creator}{tail}"


class PolicyRepository:
    """
    Journal-backed policy store. `upto` opens a read-only view holding only
    the first `upto` journal entries, i.e. the repository as it was when its
    `position` was `upto`.
    """

    def __init__(
        self, root: str | Path, clock: Callable[[], datetime.datetime] = utcnow, upto: int | None = None
    ) -> None:
        self.root = Path(root)
        self.clock = clock
        self.upto = upto
        self._position = 0
        self.journal = self.root / "journal.log"
        self.policy_dir = self.root / "policies"
        self._records: dict[str, PolicyRecord] = {}
        self._lock = threading.RLock()
        self._replay()

    # --- persistence ---

    def _replay(self) -> None:
        if not self.journal.exists():
            return
        for n, line in enumerate(self.journal.read_text("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if self.upto is not None and self._position >= self.upto:
                break
            try:
                entry = _canon_loads(line)
                self._apply(entry)
            except (ValueError, KeyError) as e:
                raise PolicyStoreError(f"{self.journal}:{n}: corrupt journal entry ({e})") from e
        if self.upto is not None:
            return
        # documents are derived from the journal; repair any torn write
        for rec in self._records.values():
            path = self._path(rec.id)
            if rec.deleted:
                if path.exists():
                    path.unlink()
            elif not path.exists() or path.read_bytes() != serialize_policy(rec.policy):
                self._write_document(rec.policy)
        logger.debug("Policy repository %s: %d records", self.root, len(self._records))

    def _apply(self, entry: dict) -> PolicyRecord:
        op, pid = entry["op"], entry["id"]
        ts = parse_iso(entry["ts"])
        prev = self._records.get(pid)
        if op == "delete":
            if prev is None:
                raise KeyError(pid)
            rec = replace(prev, revision=entry["revision"], updated=ts, deleted=True)
        else:
            policy = parse_policy(entry["document"])
            rec = PolicyRecord(
                policy,
                entry["revision"],
                prev.created if (prev and op == "update") else ts,
                ts,
                entry["actor"],
                entry["role"],
            )
        self._records[pid] = rec
        self._position += 1
        return rec

    def _path(self, pid: str) -> Path:
        return self.policy_dir / f"{pid}.xml"

    def _write_document(self, policy: TrustPolicy) -> None:
        self.policy_dir.mkdir(parents=True, exist_ok=True)
        path = self._path(policy.id)
        tmp = path.with_suffix(".xml.tmp")
        tmp.write_bytes(serialize_policy(policy))
        os.replace(tmp, path)

    @property
    def position(self) -> int:
        """Journal entries applied so far."""
        return self._position

    def _commit(self, entry: dict) -> PolicyRecord:
        if self.upto is not None:
            raise PolicyStoreError(f"policy repository {self.root} at position {self.upto} is read-only")
        self.root.mkdir(parents=True, exist_ok=True)
        with self.journal.open("a", encoding="utf-8") as f:
            f.write(_canon_dumps(entry) + "\n")
            f.flush()
            os.fsync(f.fileno())
        rec = self._apply(entry)
        if rec.deleted:
            if self._path(rec.id).exists():
                self._path(rec.id).unlink()
        else:
            self._write_document(rec.policy)
        return rec

    # --- operations ---

    def _authorize(self, actor: Actor, op: str, pid: str) -> None:
        if not actor.is_admin:
            logger.warning("Rejected %s of policy %s by %s (role %s)", op, pid, actor.name, actor.role)
            raise AuthorizationError(f"{actor.name} (role {actor.role}) may not {op} policies")

    def _entry(self, op: str, pid: str, revision: int, actor: Actor, policy: TrustPolicy | None) -> dict:
        return {
            "op": op,
            "id": pid,
            "revision": revision,
            "ts": isoformat(self.clock()),
            "actor": actor.name,
            "role": actor.role,
            "document": serialize_policy(policy).decode("utf-8") if policy else None,
        }

    def add_policy(self, policy: TrustPolicy | bytes | str, actor: Actor) -> PolicyRecord:
        self._authorize(actor, "add", policy.id if isinstance(policy, TrustPolicy) else "?")
        if not isinstance(policy, TrustPolicy):
            policy = parse_policy(policy)
        with self._lock:
            prev = self._records.get(policy.id)
            if prev is not None and not prev.deleted:
                raise PolicyStoreError(f"policy {policy.id} already exists (use update)")
            revision = prev.revision + 1 if prev else 1
            rec = self._commit(self._entry("add", policy.id, revision, actor, policy))
        logger.info("Policy %s added by %s (revision %d)", policy.id, actor.name, rec.revision)
        return rec

    def update_policy(self, pid: str, policy: TrustPolicy | bytes | str, actor: Actor) -> PolicyRecord:
        self._authorize(actor, "update", pid)
        if not isinstance(policy, TrustPolicy):
            policy = parse_policy(policy)
        if policy.id != pid:
            raise PolicyStoreError(f"document id {policy.id} does not match {pid}")
        with self._lock:
            prev = self._records.get(pid)
            if prev is None or prev.deleted:
                raise UnknownPolicyError(f"unknown policy {pid}")
            rec = self._commit(self._entry("update", pid, prev.revision + 1, actor, policy))
        logger.info("Policy %s updated by %s (revision %d)", pid, actor.name, rec.revision)
        return rec

    def delete_policy(self, pid: str, actor: Actor) -> None:
        self._authorize(actor, "delete", pid)
        with self._lock:
            prev = self._records.get(pid)
            if prev is None or prev.deleted:
                raise UnknownPolicyError(f"unknown policy {pid}")
            self._commit(self._entry("delete", pid, prev.revision + 1, actor, None))
        logger.info("Policy %s deleted by %s", pid, actor.name)

    def get(self, pid: str) -> PolicyRecord:
        with self._lock:
            rec = self._records.get(pid)
        if rec is None:
            raise UnknownPolicyError(f"unknown policy {pid}")
        return rec

    def records(self, include_deleted: bool = True) -> list[PolicyRecord]:
        with self._lock:
            recs = list(self._records.values())
        return sorted((r for r in recs if include_deleted or not r.deleted), key=lambda r: (r.id, r.revision))

    def listing(self) -> list[str]:
        return [r.line() for r in self.records()]

    def fetch_policies(self, realm: str, kind: SubjectKind = SubjectKind.SLICE, slice_id: str | None = None) -> list[TrustPolicy]:
        """
        Live policies restricted to the rules targeting `realm` (exact match on
        resources, platform wildcard or == slice_id) that carry requirements
        for `kind`. Ordered by (id, revision).
        """
        out = []
        for rec in self.records(include_deleted=False):
            rules = tuple(
                r
                for r in rec.policy.rules
                if r.resources == realm
                and (slice_id is None or r.matches_platform(slice_id))
                and r.requirements_for(kind) is not None
            )
            if rules:
                out.append(replace(rec.policy, rules=rules))
        return out

    def __len__(self) -> int:
        return len(self.records(include_deleted=False))
