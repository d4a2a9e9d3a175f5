"""
`tmano`: command-line front end for the Trust Manager.

Everything happens relative to one workspace (`-w`, `$TMANO_WORKSPACE`,
default `./.tmano`):

    ta_key.pem        TA signing key (created on first use)
    references.txt    reference digests
    checkers.txt      optional checker manifest
    tpr/              trust policy repository
    descriptors/      copies of created slice descriptors
    schedules/        copies of injected event schedules
    sim.log           simulator journal, replayed on every invocation
    audit.log         one line per mutating command
    lock              held by mutating commands
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, Iterator, Sequence

from .authority import ReferenceStore, TrustedAuthority, load_checker_manifest, measure, select_checkers
from .credentials import KeyPair, serialize_policy
from .exceptions import (
    AuthorizationError,
    GateFailure,
    TmanoError,
    UnknownSliceError,
    WorkspaceLockedError,
)
from .lopat import Literal, Predicate, Sort, const, parse_literal, parse_rules
from .nfvsim import (
    SCENARIOS,
    Simulator,
    dump_descriptor,
    format_pct,
    load_descriptor,
    overhead_ratio,
    parse_schedule,
    run_opd_benchmark,
    write_bench_csv,
)
from .policyrepo import Actor, PolicyRepository
from .resolution import Query
from .trustmgr import TrustStatus
from .utils import _canon_dumps, _canon_loads, isoformat, split_csv, utcnow

logger = logging.getLogger("tmano")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNTRUSTED = 2
EXIT_UNCERTAIN = 3
EXIT_UNKNOWN_SLICE = 4
EXIT_NOT_ADMIN = 5
EXIT_GATE_FAILED = 6
EXIT_LOCKED = 7

STATUS_EXIT = {
    TrustStatus.TRUSTED: EXIT_OK,
    TrustStatus.UNTRUSTED: EXIT_UNTRUSTED,
    TrustStatus.UNCERTAIN: EXIT_UNCERTAIN,
}


class C:
    """Simple ANSI color codes"""

    HEADER = "\x1b[95m"
    BLUE = "\x1b[94m"
    CYAN = "\x1b[96m"
    GREEN = "\x1b[92m"
    YELLOW = "\x1b[93m"
    RED = "\x1b[91m"
    BOLD = "\x1b[1m"
    DIM = "\x1b[2m"
    END = "\x1b[0m"


STATUS_COLOR = {TrustStatus.TRUSTED: C.GREEN, TrustStatus.UNCERTAIN: C.YELLOW, TrustStatus.UNTRUSTED: C.RED}


def exit_code_for(e: TmanoError) -> int:
    if isinstance(e, UnknownSliceError):
        return EXIT_UNKNOWN_SLICE
    if isinstance(e, AuthorizationError):
        return EXIT_NOT_ADMIN
    if isinstance(e, GateFailure):
        return EXIT_GATE_FAILED
    if isinstance(e, WorkspaceLockedError):
        return EXIT_LOCKED
    return EXIT_ERROR


@contextlib.contextmanager
def _quiet() -> Iterator[None]:
    """Silences the package logger while the journal is replayed."""
    log = logging.getLogger("tmano")
    level = log.level
    log.setLevel(logging.CRITICAL)
    try:
        yield
    finally:
        log.setLevel(level)


class Workspace:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.lock_path = self.root / "lock"
        self.journal = self.root / "sim.log"
        self.audit_path = self.root / "audit.log"
        self._authority: TrustedAuthority | None = None
        self._policies: PolicyRepository | None = None
        self._sim: Simulator | None = None
        self._past_policies: dict[int, PolicyRepository] = {}
        self.outcome = ""

    # --- lock ---

    @contextlib.contextmanager
    def locked(self) -> Iterator["Workspace"]:
        self.root.mkdir(parents=True, exist_ok=True)
        self._break_stale_lock()
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLockedError(f"workspace {self.root} is locked by another command") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            with contextlib.suppress(FileNotFoundError):
                self.lock_path.unlink()

    def _break_stale_lock(self) -> None:
        try:
            pid = int(self.lock_path.read_text().strip() or "0")
        except (FileNotFoundError, ValueError):
            return
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            logger.warning("Removing stale lock of process %d", pid)
            self.lock_path.unlink(missing_ok=True)
        except PermissionError:
            pass

    # --- components ---

    @property
    def authority(self) -> TrustedAuthority:
        if self._authority is None:
            key_path = self.root / "ta_key.pem"
            if key_path.exists():
                key = KeyPair.from_pem(key_path.read_bytes())
            else:
                key = KeyPair.generate()
                self.root.mkdir(parents=True, exist_ok=True)
                key_path.write_bytes(key.to_pem())
            manifest = self.root / "checkers.txt"
            checkers = load_checker_manifest(manifest) if manifest.exists() else None
            self._authority = TrustedAuthority(
                "TA", key, ReferenceStore(self.root / "references.txt"), checkers
            )
        return self._authority

    @property
    def policies(self) -> PolicyRepository:
        if self._policies is None:
            self._policies = PolicyRepository(self.root / "tpr")
        return self._policies

    def _policies_at(self, position: int | None) -> PolicyRepository:
        if position is None or position == self.policies.position:
            return self.policies
        if position not in self._past_policies:
            self._past_policies[position] = PolicyRepository(self.root / "tpr", upto=position)
        return self._past_policies[position]

    @property
    def sim(self) -> Simulator:
        """
        Replays sim.log. Each entry runs against the policies and checkers it
        was recorded with, so later policy edits never rewrite past verdicts.
        """
        if self._sim is None:
            sim = Simulator(self.authority, self.policies)
            checkers = self.authority.checkers
            try:
                with _quiet():
                    for entry in self._entries():
                        sim.tm.policies = self._policies_at(entry.get("policies"))
                        if "checkers" in entry:
                            self.authority.checkers = select_checkers(entry["checkers"])
                        self._replay(sim, entry)
            finally:
                sim.tm.policies = self.policies
                self.authority.checkers = checkers
            self._sim = sim
        return self._sim

    # --- journal ---

    def _entries(self) -> list[dict[str, Any]]:
        if not self.journal.exists():
            return []
        return [_canon_loads(line) for line in self.journal.read_text("utf-8").splitlines() if line.strip()]

    def _replay(self, sim: Simulator, entry: dict[str, Any]) -> None:
        op = entry["op"]
        if op == "create":
            desc, images = load_descriptor(entry["descriptor"])
            for img in images:
                sim.register_image(img)
            sim.onboard(desc)
            sim.create_slice(desc)
        elif op == "deploy":
            sim.interval = entry.get("interval", sim.interval)
            sim.deploy_slice(entry["slice"], gate=False)
        elif op == "inject":
            for event in parse_schedule(entry["schedule"]):
                sim.inject_event(event)
        elif op == "advance":
            sim.advance(entry["ticks"])

    def record(self, entry: dict[str, Any]) -> None:
        entry = {
            **entry,
            "policies": self.policies.position,
            "checkers": [c.name for c in self.authority.checkers],
        }
        self.root.mkdir(parents=True, exist_ok=True)
        with self.journal.open("a", encoding="utf-8") as f:
            f.write(_canon_dumps(entry) + "\n")

    def audit(self, actor: str, command: str, outcome: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with self.audit_path.open("a", encoding="utf-8") as f:
            f.write(f"{isoformat(utcnow())} {actor} {command} {outcome}\n")

    def note(self, outcome: str) -> None:
        """Outcome summary for the audit line of the running command."""
        self.outcome = outcome

    def save_copy(self, folder: str, name: str, text: str) -> Path:
        d = self.root / folder
        d.mkdir(parents=True, exist_ok=True)
        path = d / name
        path.write_text(text, "utf-8")
        return path


def default_workspace() -> Path:
    return Path(os.environ.get("TMANO_WORKSPACE", ".tmano"))


# --- commands ---


def _status(status: TrustStatus) -> str:
    return f"{STATUS_COLOR[status]}{C.BOLD}{status.value}{C.END}"


def cmd_slice_create(ws: Workspace, args: argparse.Namespace) -> int:
    text = Path(args.descriptor).read_text("utf-8")
    desc, images = load_descriptor(text)
    sim = ws.sim
    for img in images:
        sim.register_image(img)
    sim.onboard(desc)
    sim.create_slice(desc)
    ws.save_copy("descriptors", f"{desc.slice_id}.yaml", text)
    ws.record({"op": "create", "descriptor": text})
    ws.note(desc.slice_id)
    print(f"{C.GREEN}created{C.END} {desc.slice_id} ({len(desc.members())} members staged)")
    return EXIT_OK


def cmd_slice_deploy(ws: Workspace, args: argparse.Namespace) -> int:
    sim = ws.sim
    sim.interval = args.interval
    result = sim.deploy_slice(args.slice_id)
    ws.record({"op": "deploy", "slice": args.slice_id, "interval": args.interval})
    ws.note(args.slice_id)
    status = result.verdict.status if result.verdict else TrustStatus.TRUSTED
    print(f"{C.GREEN}deployed{C.END} {args.slice_id} (boot verdict {_status(status)})")
    return EXIT_OK


def cmd_slice_list(ws: Workspace, args: argparse.Namespace) -> int:
    sim = ws.sim
    for sid, desc in sorted(sim.slices.items()):
        statuses = sorted({sim.vms[m.vm_id].status.value for m in desc.members()})
        print(f"{sid} {desc.realm!r} v{desc.version} {len(desc.members())} members {','.join(statuses)}")
    return EXIT_OK


def cmd_slice_template(ws: Workspace, args: argparse.Namespace) -> int:
    scenario = SCENARIOS[args.name]()
    print(dump_descriptor(scenario.descriptor, scenario.images), end="")
    return EXIT_OK


def cmd_trust_eval(ws: Workspace, args: argparse.Namespace) -> int:
    verdict = ws.sim.tm.evaluate_slice(args.slice_id)
    if args.json:
        print(verdict.to_json())
    else:
        print(verdict.document(), end="")
        if args.audit:
            for ev in verdict.audit:
                print(f"{C.DIM}{ev.line()}{C.END}")
    return STATUS_EXIT[verdict.status]


def cmd_trust_query(ws: Workspace, args: argparse.Namespace) -> int:
    sim = ws.sim
    realm = sim.realm(args.slice_id)
    rules = parse_rules(Path(args.rules).read_text("utf-8"), realm)
    if args.request:
        request = parse_literal(args.request)
    else:
        request = Literal(
            Predicate.DO,
            (
                const(args.slice_id, Sort.NETWORK_SLICE),
                const(realm, Sort.RESOURCE),
                const("use", Sort.ACTION),
                const("allow", Sort.PERMISSION),
            ),
        )
    query = Query(request, tuple(parse_literal(g) for g in args.goal))
    tm = sim.tm
    tm.rules = rules
    res = tm.query(args.slice_id, query)
    print(res.trace.to_text(), end="")
    if res.satisfied:
        print(f"{C.GREEN}{C.BOLD}granted{C.END} {res.permission}")
        return EXIT_OK
    print(f"{C.RED}{C.BOLD}refused{C.END} ({res.reason})")
    return EXIT_UNTRUSTED


def _actor(args: argparse.Namespace) -> Actor:
    return Actor(args.actor, args.role)


def cmd_policy_add(ws: Workspace, args: argparse.Namespace) -> int:
    actor = _actor(args)
    rec = ws.policies.add_policy(Path(args.document).read_bytes(), actor)
    ws.note(f"{rec.id} rev {rec.revision}")
    print(f"{C.GREEN}added{C.END} {rec.line()}")
    return EXIT_OK


def cmd_policy_update(ws: Workspace, args: argparse.Namespace) -> int:
    actor = _actor(args)
    rec = ws.policies.update_policy(args.policy_id, Path(args.document).read_bytes(), actor)
    ws.note(f"{rec.id} rev {rec.revision}")
    print(f"{C.GREEN}updated{C.END} {rec.line()}")
    return EXIT_OK


def cmd_policy_rm(ws: Workspace, args: argparse.Namespace) -> int:
    actor = _actor(args)
    ws.policies.delete_policy(args.policy_id, actor)
    ws.note(args.policy_id)
    print(f"{C.YELLOW}deleted{C.END} {args.policy_id}")
    return EXIT_OK


def cmd_policy_list(ws: Workspace, args: argparse.Namespace) -> int:
    for line in ws.policies.listing():
        print(line)
    return EXIT_OK


def cmd_policy_template(ws: Workspace, args: argparse.Namespace) -> int:
    print(serialize_policy(SCENARIOS[args.name]().policy).decode("utf-8"))
    return EXIT_OK


def cmd_sim_inject(ws: Workspace, args: argparse.Namespace) -> int:
    text = Path(args.schedule).read_text("utf-8")
    events = parse_schedule(text)
    sim = ws.sim
    for event in events:
        sim.inject_event(event)
    ws.save_copy("schedules", Path(args.schedule).name, text)
    ws.record({"op": "inject", "schedule": text})
    ws.note(f"{len(events)} events")
    print(f"{C.GREEN}scheduled{C.END} {len(events)} events")
    return EXIT_OK


def cmd_sim_advance(ws: Workspace, args: argparse.Namespace) -> int:
    sim = ws.sim
    entries = sim.advance(args.ticks)
    ws.record({"op": "advance", "ticks": args.ticks})
    ws.note(f"{args.ticks} ticks -> {sim.tick}")
    for e in entries:
        print(e.line())
    print(f"{C.DIM}now at tick {sim.tick}{C.END}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in split_csv(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None


def cmd_bench_opd(ws: Workspace, args: argparse.Namespace) -> int:
    reports = run_opd_benchmark(args.vms, args.properties, args.reps, args.seed)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="", encoding="utf-8") as f:
            write_bench_csv(reports, f)
        for r in reports:
            print(f"vms={r.vms} properties={r.properties} base={r.base_opd:.4f}s "
                  f"trust={r.trust_opd:.4f}s overhead={format_pct(r.overhead_ratio)}")
    else:
        write_bench_csv(reports, sys.stdout)
    return EXIT_OK


def cmd_bench_ratio(ws: Workspace, args: argparse.Namespace) -> int:
    print(format_pct(overhead_ratio(args.base, args.with_trust)))
    return EXIT_OK


def cmd_ta_register_ref(ws: Workspace, args: argparse.Namespace) -> int:
    data = Path(args.digest_file).read_bytes()
    if args.measure:
        digest = measure(data, args.algorithm)
    else:
        digest = re.sub(r"\s+", "", data.decode("utf-8")).lower()
    ref = ws.authority.register_reference(args.identity, digest, args.algorithm, args.issuer)
    ws.note(f"{ref.identity} {ref.algorithm}")
    print(f"{C.GREEN}registered{C.END} {ref.line()}")
    return EXIT_OK


def cmd_ta_refs(ws: Workspace, args: argparse.Namespace) -> int:
    for ref in ws.authority.references.references():
        print(ref.line())
    return EXIT_OK


# (handler, mutating)
COMMANDS = {
    ("slice", "create"): (cmd_slice_create, True),
    ("slice", "deploy"): (cmd_slice_deploy, True),
    ("slice", "list"): (cmd_slice_list, False),
    ("slice", "template"): (cmd_slice_template, False),
    ("trust", "eval"): (cmd_trust_eval, False),
    ("trust", "query"): (cmd_trust_query, False),
    ("policy", "add"): (cmd_policy_add, True),
    ("policy", "update"): (cmd_policy_update, True),
    ("policy", "rm"): (cmd_policy_rm, True),
    ("policy", "list"): (cmd_policy_list, False),
    ("policy", "template"): (cmd_policy_template, False),
    ("sim", "inject"): (cmd_sim_inject, True),
    ("sim", "advance"): (cmd_sim_advance, True),
    ("bench", "opd"): (cmd_bench_opd, False),
    ("bench", "ratio"): (cmd_bench_ratio, False),
    ("ta", "register-ref"): (cmd_ta_register_ref, True),
    ("ta", "refs"): (cmd_ta_refs, False),
}


class HelpFormatter(argparse.HelpFormatter):
    """Bold section headings and a one-line-per-command listing."""

    def __init__(self, prog: str) -> None:
        super().__init__(prog, max_help_position=28, width=100)

    def start_section(self, heading):
        return super().start_section(f"\n{C.BOLD}{(heading or '').upper()}{C.END}")

    def _format_usage(self, usage, actions, groups, prefix):
        return super()._format_usage(usage, actions, groups, f"{C.YELLOW}{C.BOLD}Usage:{C.END} ")

    def _format_action(self, action):
        if isinstance(action, argparse._SubParsersAction):
            return "".join(
                f"  {C.GREEN}{C.BOLD}{a.dest:<14}{C.END} {C.DIM}{a.help or ''}{C.END}\n"
                for a in action._choices_actions
            )
        return super()._format_action(action)


def _parser(subparsers, name: str, help: str) -> argparse.ArgumentParser:
    p = subparsers.add_parser(
        name,
        help=help,
        description=f"{C.BOLD}{help}{C.END}",
        formatter_class=HelpFormatter,
        add_help=False,
    )
    p._positionals.title = "Arguments"
    p._optionals.title = "Options"
    p.add_argument("-h", "--help", action="help", help=f"Display help for {name}")
    return p


def _actor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--actor", required=True, help="Name recorded as creator/editor")
    p.add_argument("--role", required=True, help="Role of the actor (mutations need 'admin')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmano",
        description=f"{C.BOLD}Trust evaluation of network slices.{C.END}",
        formatter_class=HelpFormatter,
        add_help=False,
    )
    parser._optionals.title = "Options"
    parser.add_argument("-h", "--help", action="help", help="Display documentation for tmano")
    parser.add_argument("-w", "--workspace", help="Workspace root (default $TMANO_WORKSPACE or ./.tmano)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr")
    groups = parser.add_subparsers(dest="group", title="Commands")

    # slice
    sl = _parser(groups, "slice", "Create, deploy and list network slices.")
    sub = sl.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "create", "Stage a slice from a descriptor file.")
    p.add_argument("descriptor", help="Slice descriptor (YAML)")
    p = _parser(sub, "deploy", "Run the pre-deployment gate and deploy a staged slice.")
    p.add_argument("slice_id", help="Slice id")
    p.add_argument("--interval", type=int, default=5, help="Periodic evaluation interval in ticks (0 disables)")
    _parser(sub, "list", "List slices.")
    p = _parser(sub, "template", "Print a built-in scenario descriptor.")
    p.add_argument("name", choices=sorted(SCENARIOS), help="Scenario name")

    # trust
    tr = _parser(groups, "trust", "Evaluate slices and answer trust queries.")
    sub = tr.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "eval", "Evaluate a slice (exit 0 trusted, 2 untrusted, 3 uncertain).")
    p.add_argument("slice_id", help="Slice id")
    p.add_argument("--json", action="store_true", help="Structured output")
    p.add_argument("--audit", action="store_true", help="Also print the evaluation timeline")
    p = _parser(sub, "query", "Resolve SatNS goals for a Do request over attested facts.")
    p.add_argument("slice_id", help="Slice id")
    p.add_argument("rules", help="LOPAT rule file")
    p.add_argument("--goal", action="append", required=True, help="Ground SatNS literal (repeatable)")
    p.add_argument("--request", help="Ground Do literal (default Do(<slice>, <realm>, use, allow))")

    # policy
    po = _parser(groups, "policy", "Administer the trust policy repository.")
    sub = po.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "add", "Add a trust policy document.")
    p.add_argument("document", help="Trust policy XML")
    _actor_args(p)
    p = _parser(sub, "update", "Replace a trust policy.")
    p.add_argument("policy_id", help="Policy id")
    p.add_argument("document", help="Trust policy XML")
    _actor_args(p)
    p = _parser(sub, "rm", "Delete a trust policy.")
    p.add_argument("policy_id", help="Policy id")
    _actor_args(p)
    _parser(sub, "list", "List policies (id, realm, revision, creator).")
    p = _parser(sub, "template", "Print the policy of a built-in scenario.")
    p.add_argument("name", choices=sorted(SCENARIOS), help="Scenario name")

    # sim
    si = _parser(groups, "sim", "Inject events and advance simulated time.")
    sub = si.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "inject", "Schedule events from a schedule file.")
    p.add_argument("schedule", help="Lines of 'tick kind target key=value ...'")
    p = _parser(sub, "advance", "Advance simulated time.")
    p.add_argument("ticks", type=int, help="Number of ticks")

    # bench
    be = _parser(groups, "bench", "On-boarding delay benchmark.")
    sub = be.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "opd", "Measure aggregated on-boarding delay with and without the trust gate.")
    p.add_argument("--vms", type=_int_list, default=[10, 20, 30, 40], help="VM counts, e.g. 10,20")
    p.add_argument("--properties", type=_int_list, default=[100, 200, 300, 400], help="Property counts")
    p.add_argument("--reps", type=int, default=10, help="Repetitions per cell")
    p.add_argument("--seed", type=int, default=0, help="Seed for the synthetic images")
    p.add_argument("--out", help="Write the CSV table here instead of stdout")
    p = _parser(sub, "ratio", "Print the overhead ratio of two delays.")
    p.add_argument("base", type=float, help="Delay without the trust gate")
    p.add_argument("with_trust", type=float, help="Delay with the trust gate")

    # ta
    ta = _parser(groups, "ta", "Trusted Authority reference digests.")
    sub = ta.add_subparsers(dest="command", title="Commands")
    p = _parser(sub, "register-ref", "Register a reference digest.")
    p.add_argument("identity", help="Artifact identity (VNF id or image name)")
    p.add_argument("digest_file", help="File holding the hex digest")
    p.add_argument("--measure", action="store_true", help="Hash the file instead of reading a digest from it")
    p.add_argument("--algorithm", default="sha256", help="Digest algorithm")
    p.add_argument("--issuer", default="manufacturer", help="Reference issuer")
    _parser(sub, "refs", "List reference digests.")

    return parser


def main(argv: Sequence[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.group or not getattr(args, "command", None):
        parser.print_help()
        sys.exit(EXIT_ERROR)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )

    ws = Workspace(args.workspace or default_workspace())
    handler, mutating = COMMANDS[(args.group, args.command)]
    try:
        if mutating:
            with ws.locked():
                try:
                    code = handler(ws, args)
                except TmanoError as e:
                    ws.note(f"error:{e.code}")
                    raise
                finally:
                    ws.audit(getattr(args, "actor", None) or "-", f"{args.group} {args.command}", ws.outcome or "error")
        else:
            code = handler(ws, args)
    except TmanoError as e:
        logger.error("%s %s failed: %s", args.group, args.command, e)
        print(f"error:{e.code}: {e}", file=sys.stderr)
        code = exit_code_for(e)
    except OSError as e:
        print(f"error:io: {e}", file=sys.stderr)
        code = EXIT_ERROR
    sys.exit(code)


if __name__ == "__main__":
    main()
