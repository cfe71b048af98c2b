"""Scenario files: a negotiator tree plus a list of query steps, and the report of a run.

A scenario is YAML::

    types: storage.types            # registry file, or inline registry text
    policies:
      broker: storage-brokering.policy
    negotiators:
      s1: {type: storage, script: ["capacity = 50 && price = 3"]}
      s2: {type: storage, capability: "true"}
      far: {type: storage, remote: "127.0.0.1:7001"}
      broker: {policy: broker, bindings: {s1: s1, s2: s2}}
    steps:
      - {target: broker, query: "capacity = 100 && price <= 5"}

Paths are relative to the scenario file.  A policy or type entry that
contains a newline or brace is treated as inline text.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .config import ConfigType, parse_registry
from .engine import (
    AcceptanceError,
    NegotiationFailure,
    Negotiator,
    LeafNegotiator,
    ScriptedNegotiator,
    TraceEvent,
    close,
    validate_token,
)
from .logic import Formula
from .policy import CorePolicy, Policy, load_policy, preferences
from .protocol import RemoteNegotiator
from .syntax import format_formula, parse_formula

CLIENT = "client"


class ScenarioError(Exception):
    pass


@dataclass
class Step:
    target: str
    query: Formula
    accept: Optional[Formula] = None


@dataclass
class Scenario:
    registry: dict[str, ConfigType]
    policies: dict[str, tuple[Policy, CorePolicy]]
    negotiators: dict[str, Negotiator]
    steps: list[Step]
    trace: list[TraceEvent] = field(default_factory=list)

    def close(self) -> None:
        for n in self.negotiators.values():
            if isinstance(n, RemoteNegotiator):
                n.close()


@dataclass
class StepRecord:
    target: str
    query: str
    offer: Optional[str]
    token_valid: Optional[bool]
    seconds: float
    offer_formula: Optional[Formula] = None
    failure: str = ""
    invoice: Optional[dict] = None
    trace: list[TraceEvent] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "query": self.query,
            "offer": self.offer,
            "token_valid": self.token_valid,
            "seconds": round(self.seconds, 6),
            "failure": self.failure or None,
            "invoice": self.invoice,
            "trace": [
                {"kind": e.kind, "from": e.sender, "to": e.receiver,
                 "formula": format_formula(e.formula), "note": e.note or None}
                for e in self.trace
            ],
        }


@dataclass
class ScenarioReport:
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(1 for s in self.steps if s.failure)

    def summary(self) -> str:
        total = sum(s.seconds for s in self.steps)
        return f"{len(self.steps)} step(s), {self.failures} failure(s), {total:.3f}s"

    def to_json(self) -> dict:
        return {"steps": [s.to_json() for s in self.steps], "summary": self.summary()}

    def render(self, trace: bool = False) -> str:
        lines = []
        for i, s in enumerate(self.steps, 1):
            lines.append(f"step {i}: {s.target}")
            lines.append(f"  query: {s.query}")
            if trace:
                lines.extend(f"    {e}" for e in s.trace)
            if s.failure:
                lines.append(f"  failure: {s.failure}")
            else:
                lines.append(f"  offer: {s.offer}")
                lines.append(f"  token valid: {'yes' if s.token_valid else 'no'}")
            if s.invoice is not None:
                lines.append(f"  invoice: {json.dumps(s.invoice.get('values', {}), sort_keys=True)}")
            lines.append(f"  time: {s.seconds:.3f}s")
        lines.append(self.summary())
        return "\n".join(lines)


def _text_or_file(value: str, base: Path) -> str:
    if "\n" in value or "{" in value:
        return value
    path = base / value
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None


def _formula(text: Any, where: str) -> Formula:
    if isinstance(text, bool):
        text = "true" if text else "false"
    if not isinstance(text, str):
        raise ScenarioError(f"{where}: expected a formula string")
    return parse_formula(text)


def load_scenario(path: str | Path, *, timeout: float = 10.0, parallel: Optional[bool] = None) -> Scenario:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return build_scenario(text, path.parent, timeout=timeout, parallel=parallel)


def build_scenario(text: str, base: Path = Path("."), *, timeout: float = 10.0,
                   parallel: Optional[bool] = None) -> Scenario:
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ScenarioError(f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a mapping")
    unknown = set(doc) - {"types", "policies", "negotiators", "steps"}
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")

    registry = parse_registry(_text_or_file(doc.get("types", ""), base)) if doc.get("types") else {}
    policies = {}
    for name, src in (doc.get("policies") or {}).items():
        policies[name] = load_policy(_text_or_file(src, base), registry)

    trace: list[TraceEvent] = []
    specs: Mapping[str, dict] = doc.get("negotiators") or {}
    built: dict[str, Negotiator] = {}
    building: set[str] = set()

    def build(name: str) -> Negotiator:
        if name in built:
            return built[name]
        if name not in specs:
            raise ScenarioError(f"unknown negotiator {name!r}")
        if name in building:
            raise ScenarioError(f"negotiator {name!r} is bound into itself")
        building.add(name)
        spec = specs[name]
        if not isinstance(spec, dict):
            raise ScenarioError(f"negotiator {name!r} must be a mapping")
        if "policy" in spec:
            if spec["policy"] not in policies:
                raise ScenarioError(f"negotiator {name!r}: unknown policy {spec['policy']!r}")
            pol, core = policies[spec["policy"]]
            bindings = {server: build(target) for server, target in (spec.get("bindings") or {}).items()}
            par = spec.get("parallel", False) if parallel is None else parallel
            n: Negotiator = close(core, bindings, preferences(pol), name=name,
                                  parallel=bool(par), tracer=trace.append)
        else:
            ct = _type(spec, name, registry)
            if "capability" in spec:
                n = LeafNegotiator(ct, _formula(spec["capability"], name), name)
            elif "script" in spec:
                script = [_formula(f, name) for f in spec["script"] or []]
                n = ScriptedNegotiator(ct, script, name)
            elif "remote" in spec:
                n = RemoteNegotiator(spec["remote"], ct, timeout=spec.get("timeout", timeout), name=name)
            else:
                raise ScenarioError(f"negotiator {name!r} needs policy, capability, script or remote")
        building.discard(name)
        built[name] = n
        return n

    for name in specs:
        build(name)

    steps = []
    for i, st in enumerate(doc.get("steps") or [], 1):
        if not isinstance(st, dict) or "target" not in st or "query" not in st:
            raise ScenarioError(f"step {i} needs target and query")
        if st["target"] not in built:
            raise ScenarioError(f"step {i}: unknown negotiator {st['target']!r}")
        acc = _formula(st["accept"], f"step {i}") if "accept" in st else None
        steps.append(Step(st["target"], _formula(st["query"], f"step {i}"), acc))
    return Scenario(registry, policies, built, steps, trace)


def _type(spec: dict, name: str, registry: Mapping[str, ConfigType]) -> ConfigType:
    tname = spec.get("type")
    if tname not in registry:
        raise ScenarioError(f"negotiator {name!r}: unknown type {tname!r}")
    return registry[tname]


def run_scenario(sc: Scenario) -> ScenarioReport:
    report = ScenarioReport()
    for step in sc.steps:
        target = sc.negotiators[step.target]
        sc.trace.clear()
        sc.trace.append(TraceEvent("query", CLIENT, step.target, step.query))
        record = StepRecord(step.target, format_formula(step.query), None, None, 0.0)
        start = time.perf_counter()
        try:
            eo = target.query(step.query)
        except NegotiationFailure as exc:
            record.failure = str(exc)
        else:
            sc.trace.append(TraceEvent("offer", step.target, CLIENT, eo.formula))
            record.offer_formula = eo.formula
            record.offer = format_formula(eo.formula)
            record.token_valid = validate_token(eo)
            if step.accept is not None:
                try:
                    record.invoice = target.accept(eo, step.accept).to_json()
                except (AcceptanceError, NegotiationFailure) as exc:
                    record.failure = f"acceptance refused: {exc}"
        record.seconds = time.perf_counter() - start
        record.trace = list(sc.trace)
        report.steps.append(record)
    return report
