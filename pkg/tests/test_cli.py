import json
import re
import socket
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import DATA
from negpol.cli import main
from negpol.logic import limits, set_dnf_cap
from negpol.qe import equivalent
from negpol.syntax import parse_formula as P

GOLDEN = Path(__file__).parent / "golden"
TRACE_LINE = re.compile(r"^\s*(\S+) -> (\S+): (query|offer) (.*)$")


@pytest.fixture(autouse=True)
def restore_cap():
    old = limits.dnf_cap
    yield
    set_dnf_cap(old)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("formula, expected", [
    ("exists y. (x < 5 && x > y && y > 0)", "x < 5 && x > 0"),
    ("exists x. (x > 0)", "true"),
    ("x < 5", "x < 5"),
])
def test_qe(capsys, formula, expected):
    code, out, _ = run(capsys, "qe", formula)
    assert code == 0 and out.strip() == expected


def test_qe_structured(capsys):
    code, out, _ = run(capsys, "qe", "--format", "structured", "exists x. x > y")
    assert code == 0 and json.loads(out) == {"result": "true"}


def test_decision_commands(capsys):
    assert run(capsys, "sat", "x < 0 && x > 1")[1].strip() == "unsat"
    code, out, _ = run(capsys, "sat", "x > 1 && x < 2")
    assert code == 0 and out.startswith("sat")
    assert run(capsys, "entails", "c = 2 && p = 5", "c = 2 && p >= 5")[1].strip() == "true"
    assert run(capsys, "simplify", "x <= 5 && x <= 7")[1].strip() == "x <= 5"
    assert run(capsys, "simplify", "exists y. x < y")[0] == 4


def test_parse_error_exit_code(capsys):
    code, _, err = run(capsys, "qe", "x <")
    assert code == 2 and "parse error" in err


def test_resource_limit_exit_code(capsys):
    f = "exists z. " + " && ".join(f"(x{i} < z || x{i} > z + 1)" for i in range(14))
    code, _, err = run(capsys, "qe", "--dnf-cap", "16", f)
    assert code == 3 and "resource limit" in err


def test_check(capsys, tmp_path):
    registry = str(DATA / "storage.types")
    code, out, _ = run(capsys, "check", str(DATA / "storage-brokering.policy"), registry)
    assert code == 0 and "ok" in out

    text = (DATA / "storage-brokering.policy").read_text()
    bad = tmp_path / "bad.policy"
    bad.write_text(text.replace("trigger: true", "trigger: speed > 1"))
    code, out, _ = run(capsys, "check", str(bad), registry)
    assert code == 4 and "trigger-scope" in out

    assert bad.read_text() != text
    missing = tmp_path / "missing.policy"
    missing.write_text(text.replace("s2:storage", "s2:disk"))
    assert missing.read_text() != text
    code, out, _ = run(capsys, "check", str(missing), registry)
    assert code == 4 and "unknown-type" in out

    assert run(capsys, "check", str(tmp_path / "nope.policy"), registry)[0] == 1


def _trace(text):
    return [m.groups() for m in map(TRACE_LINE.match, text.splitlines()) if m]


def test_negotiate_trace_matches_golden(capsys):
    code, out, _ = run(capsys, "negotiate", "--trace", str(DATA / "brokering.yaml"))
    assert code == 0
    golden = [TRACE_LINE.match(line).groups()
              for line in (GOLDEN / "brokering.trace").read_text().splitlines()
              if line and not line.startswith("#")]
    got = _trace(out)
    assert [g[:3] for g in got] == [g[:3] for g in golden]
    for (*_, f), (*_, g) in zip(got, golden):
        assert equivalent(P(f), P(g)), (f, g)
    assert "token valid: yes" in out
    assert '"price": "4"' in out


def test_negotiate_minimize(capsys):
    code, out, _ = run(capsys, "negotiate", "--format", "structured", str(DATA / "brokering-cheapest.yaml"))
    assert code == 0
    (step,) = json.loads(out)["steps"]
    assert equivalent(P(step["offer"]), P("capacity = 100 && price = 33/10"))
    assert step["token_valid"] is True


def test_negotiate_parallel_matches(capsys):
    code, out, _ = run(capsys, "negotiate", "--parallel", "--format", "structured", str(DATA / "brokering.yaml"))
    assert code == 0
    (step,) = json.loads(out)["steps"]
    assert equivalent(P(step["offer"]), P("capacity = 100 && 33/10 <= price && price <= 5"))


def _scenario(tmp_path, steps):
    text = (DATA / "brokering.yaml").read_text()
    head = text[: text.index("steps:")]
    for name in ("storage.types", "storage-brokering.policy"):
        (tmp_path / name).write_text((DATA / name).read_text())
    path = tmp_path / "s.yaml"
    path.write_text(head + steps)
    return str(path)


def test_empty_steps(capsys, tmp_path):
    code, out, _ = run(capsys, "negotiate", _scenario(tmp_path, "steps: []\n"))
    assert code == 0 and "0 step(s)" in out


def test_scenario_parse_error(capsys, tmp_path):
    path = _scenario(tmp_path, "steps:\n  - target: broker\n    query: 'capacity <'\n")
    assert run(capsys, "negotiate", path)[0] == 2


def test_scenario_validation_error(capsys, tmp_path):
    path = _scenario(tmp_path, "steps:\n  - target: nobody\n    query: 'capacity = 1'\n")
    assert run(capsys, "negotiate", path)[0] == 4


def test_missing_scenario(capsys, tmp_path):
    assert run(capsys, "negotiate", str(tmp_path / "none.yaml"))[0] == 1


def test_demo(capsys):
    code, out, _ = run(capsys, "demo")
    assert code == 0 and out.count("token valid: yes") == 2


def _serve(*extra):
    return subprocess.Popen(
        [sys.executable, "-m", "negpol.cli", "serve", str(DATA / "storage-brokering.policy"),
         str(DATA / "storage.types"), "--bind", "s1=script:capacity = 50 && price = 3",
         "--bind", "s2=leaf:true", *extra],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def test_serve_end_to_end():
    from negpol.protocol import Client
    proc = _serve("--endpoint", "127.0.0.1:0")
    try:
        line = proc.stdout.readline()
        endpoint = line.split(" on ")[1].strip()
        with Client(endpoint) as c:
            assert c.init().params
            formula, _ = c.query(P("capacity = 100 && price <= 5"))
        assert equivalent(formula, P("capacity = 100 && 33/10 <= price && price <= 5"))
    finally:
        proc.terminate()
        assert proc.wait(timeout=10) == 0


def test_serve_port_in_use():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        proc = _serve("--endpoint", f"127.0.0.1:{port}")
        _, err = proc.communicate(timeout=30)
    assert proc.returncode == 1 and "cannot listen" in err


def test_serve_bad_binding(capsys):
    code = main(["serve", str(DATA / "storage-brokering.policy"), str(DATA / "storage.types"),
                 "--bind", "s9=leaf:true"])
    assert code == 4
