"""``negpol`` command line: formula tools, policy checks, scenarios and serving.

Exit codes: 0 ok, 1 I/O, 2 parse error, 3 resource limit, 4 validation.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

from .config import parse_registry
from .engine import (
    BindingMismatchError,
    LeafNegotiator,
    Negotiator,
    QueryError,
    ScriptedNegotiator,
    close,
)
from .logic import LogicError, ResourceLimitError, is_quantifier_free, set_dnf_cap
from .policy import PolicyError, core_servers, load_policy, parse_policy, preferences, validate
from .protocol import RemoteNegotiator, serve
from .qe import entails, find_model, is_satisfiable, qe, simplify
from .scenario import ScenarioError, load_scenario, run_scenario
from .syntax import ParseError, format_formula, format_rational, parse_formula

EXIT_OK, EXIT_IO, EXIT_PARSE, EXIT_RESOURCE, EXIT_INVALID = 0, 1, 2, 3, 4

log = logging.getLogger("negpol")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class Output:
    def __init__(self, fmt: str, out=None):
        self.structured = fmt == "structured"
        self.out = out or sys.stdout

    def emit(self, text: str, data: dict) -> None:
        if self.structured:
            print(json.dumps(data, sort_keys=True), file=self.out)
        else:
            print(text, file=self.out)


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None


def cmd_qe(args, out: Output) -> int:
    result = qe(parse_formula(args.formula))
    out.emit(format_formula(result), {"result": format_formula(result)})
    return EXIT_OK


def cmd_simplify(args, out: Output) -> int:
    f = parse_formula(args.formula)
    if not is_quantifier_free(f):
        raise CliError(EXIT_INVALID, "simplify expects a quantifier-free formula (use qe)")
    result = simplify(f)
    out.emit(format_formula(result), {"result": format_formula(result)})
    return EXIT_OK


def cmd_sat(args, out: Output) -> int:
    f = parse_formula(args.formula)
    if not is_quantifier_free(f):
        f = qe(f)
    sat = is_satisfiable(f)
    model = find_model(f) if sat else None
    witness = {str(x): format_rational(val) for x, val in sorted((model or {}).items())}
    text = "sat" if sat else "unsat"
    if witness:
        text += "  " + ", ".join(f"{k} = {val}" for k, val in witness.items())
    out.emit(text, {"sat": sat, "witness": witness if sat else None})
    return EXIT_OK


def cmd_entails(args, out: Output) -> int:
    f, g = parse_formula(args.premise), parse_formula(args.conclusion)
    if not (is_quantifier_free(f) and is_quantifier_free(g)):
        f, g = qe(f), qe(g)
    result = entails(f, g)
    out.emit("true" if result else "false", {"entails": result})
    return EXIT_OK


def cmd_check(args, out: Output) -> int:
    registry = parse_registry(_read(args.registry))
    policy = parse_policy(_read(args.policy))
    diags = validate(policy, registry)
    if out.structured:
        out.emit("", {"policy": policy.name, "diagnostics": [d.as_dict() for d in diags]})
    elif diags:
        for d in diags:
            print(f"{args.policy}:{d}", file=out.out)
    else:
        print(f"{policy.name}: ok ({len(policy.rules)} rule(s))", file=out.out)
    return EXIT_INVALID if diags else EXIT_OK


def _run_scenario_file(path, args, out: Output) -> int:
    try:
        sc = load_scenario(path, timeout=args.timeout, parallel=True if args.parallel else None)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read scenario: {exc}") from None
    try:
        report = run_scenario(sc)
    finally:
        sc.close()
    if out.structured:
        out.emit("", report.to_json())
    else:
        print(report.render(trace=args.trace), file=out.out)
    return EXIT_OK


def cmd_negotiate(args, out: Output) -> int:
    return _run_scenario_file(args.scenario, args, out)


def cmd_demo(args, out: Output) -> int:
    data = resources.files("negpol") / "data"
    code = EXIT_OK
    for name in ("brokering.yaml", "brokering-cheapest.yaml"):
        if not out.structured:
            print(f"== {name}", file=out.out)
        with resources.as_file(data / name) as path:
            code = max(code, _run_scenario_file(path, args, out))
    return code


def _binding(spec: str, expected, timeout: float) -> tuple[str, Negotiator]:
    server, eq, rest = spec.partition("=")
    kind, colon, arg = rest.partition(":")
    if not eq or not colon:
        raise CliError(EXIT_INVALID, f"bad binding {spec!r}; use SERVER=leaf:FORMULA, "
                                     "SERVER=script:F1;F2 or SERVER=remote:HOST:PORT")
    ct = expected.get(server)
    if ct is None:
        raise CliError(EXIT_INVALID, f"policy uses no server {server!r}")
    if kind == "leaf":
        return server, LeafNegotiator(ct, parse_formula(arg), server)
    if kind == "script":
        return server, ScriptedNegotiator(ct, [parse_formula(f) for f in arg.split(";")], server)
    if kind == "remote":
        return server, RemoteNegotiator(arg, ct, timeout=timeout, name=server)
    raise CliError(EXIT_INVALID, f"unknown binding kind {kind!r}")


def cmd_serve(args, out: Output) -> int:
    registry = parse_registry(_read(args.registry))
    policy, core = load_policy(_read(args.policy), registry)
    expected = core_servers(core)
    bindings = dict(_binding(b, expected, args.timeout) for b in args.bind)
    tracer = (lambda e: print(e, file=sys.stderr, flush=True)) if args.trace else None
    n = close(core, bindings, preferences(policy), name=policy.name,
              parallel=args.parallel, tracer=tracer)
    try:
        handle = serve(n, args.endpoint)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot listen on {args.endpoint}: {exc}") from None
    out.emit(f"serving {policy.name} on {handle.endpoint}",
             {"policy": policy.name, "endpoint": handle.endpoint})
    out.out.flush()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    handle.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dnf-cap", type=int, default=None, metavar="N",
                        help="maximum number of DNF disjuncts before giving up")
    common.add_argument("--timeout", type=float, default=10.0, metavar="SECONDS",
                        help="per-query timeout for remote negotiators")
    common.add_argument("--format", choices=("text", "structured"), default="text")
    common.add_argument("--trace", action="store_true", help="print sub-query/offer exchanges")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="negpol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(fn=fn)
        return p

    add("qe", cmd_qe, "eliminate quantifiers").add_argument("formula")
    add("simplify", cmd_simplify, "simplify a quantifier-free formula").add_argument("formula")
    add("sat", cmd_sat, "decide satisfiability").add_argument("formula")
    p = add("entails", cmd_entails, "decide whether PREMISE entails CONCLUSION")
    p.add_argument("premise")
    p.add_argument("conclusion")
    p = add("check", cmd_check, "validate a policy against a type registry")
    p.add_argument("policy")
    p.add_argument("registry")
    p = add("negotiate", cmd_negotiate, "run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--parallel", action="store_true", help="query independent servers concurrently")
    p = add("serve", cmd_serve, "serve a policy over the network")
    p.add_argument("policy")
    p.add_argument("registry")
    p.add_argument("--bind", action="append", default=[], metavar="SERVER=KIND:ARG")
    p.add_argument("--endpoint", default="127.0.0.1:7000", metavar="HOST:PORT")
    p.add_argument("--parallel", action="store_true")
    p = add("demo", cmd_demo, "run the bundled storage-brokering scenarios")
    p.add_argument("--parallel", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dnf_cap is not None:
        set_dnf_cap(args.dnf_cap)
    out = Output(args.format)
    try:
        return args.fn(args, out)
    except CliError as exc:
        print(f"negpol: {exc}", file=sys.stderr)
        return exc.code
    except ParseError as exc:
        print(f"negpol: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ResourceLimitError as exc:
        print(f"negpol: resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except PolicyError as exc:
        for d in exc.diagnostics:
            print(f"negpol: {d}", file=sys.stderr)
        return EXIT_INVALID
    except (ScenarioError, BindingMismatchError, QueryError, LogicError) as exc:
        print(f"negpol: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"negpol: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
