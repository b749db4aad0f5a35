import hashlib
import json
import math
import re

import numpy as np
import pytest

from jmflow import cli
from jmflow.core import CollisionError, energy
from jmflow.scenario import BUNDLED, ScenarioError, load_scenario

MINIMAL = {"jmflow_schema": 1, "masses": [1.0, 1.0], "dim": 2,
           "states": {"s": {"q": [[-0.5, 0], [0.5, 0]], "v": [[0, -1], [0, 1]]}}}


def write(tmp_path, doc, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc, indent=2))
    return p


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load(name):
    sc = load_scenario(name)
    assert sc.ms.N >= 2 and sc.states
    assert len(sc.sha256) == 64


def test_bundled_energies():
    assert energy(*_st("kepler-hyperbolic", "escape")) == pytest.approx(0.5, abs=1e-12)
    assert energy(*_st("kepler-parabolic", None)) == pytest.approx(0.0, abs=1e-12)
    assert energy(*_st("three-body-lagrange-expanding", None)) == pytest.approx(0.5, abs=1e-12)


def _st(name, state):
    sc = load_scenario(name)
    return sc.ms, sc.state(state)


def test_minimal_scenario(tmp_path):
    sc = load_scenario(write(tmp_path, MINIMAL))
    assert sc.ms.N == 2 and sc.ms.dim == 2
    assert sc.state("s") is sc.state(0)
    with pytest.raises(ScenarioError):
        sc.state("missing")


def test_negative_mass_names_field(tmp_path):
    doc = dict(MINIMAL, masses=[1.0, -2.0])
    with pytest.raises(ScenarioError, match=r"field masses/1"):
        load_scenario(write(tmp_path, doc))


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n "jmflow_schema": 1,\n "masses": [1, 1\n}')
    with pytest.raises(ScenarioError, match=r"broken.json:4"):
        load_scenario(p)


def test_wrong_schema_version(tmp_path):
    with pytest.raises(ScenarioError, match="jmflow_schema"):
        load_scenario(write(tmp_path, dict(MINIMAL, jmflow_schema=2)))


def test_colliding_state_named(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["states"]["bad"] = {"q": [[0.2, 0], [0.2, 0]], "v": [[0, 0], [0, 0]]}
    with pytest.raises(CollisionError, match="bad"):
        load_scenario(write(tmp_path, doc))


def test_reduced_mode(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["reduced"] = True
    doc["states"]["s"]["q"] = [[0, 0], [1, 0]]
    sc = load_scenario(write(tmp_path, doc))
    np.testing.assert_allclose(sc.state("s").q, [-0.5, 0, 0.5, 0])


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_phi_negative_energy_exits_1(tmp_path, capsys):
    code = cli.main(["phi", "--scenario", "kepler-hyperbolic", "--h", "-0.5",
                     "--to", "escape", "--out", str(tmp_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["command"] == "phi" and err["error"] == "ValueError"


def test_phi_command_and_ledger(tmp_path, capsys):
    code = cli.main(["--json", "phi", "--scenario", "kepler-hyperbolic", "--h", "0.5",
                     "--from", "escape", "--to", "oblique", "--out", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] > 0 and math.isfinite(out["T_star"])
    rec = json.loads((tmp_path / "runs.jsonl").read_text().splitlines()[-1])
    src = rec["scenario"]
    assert rec["scenario_sha256"] == hashlib.sha256(open(src, "rb").read()).hexdigest()
    assert rec["command"] == "phi"
    for p in rec["outputs"]:
        assert (tmp_path / p.split("/")[-1]).exists()


def test_global_flags_after_subcommand(tmp_path):
    code = cli.main(["limit-shape", "--scenario", "kepler-hyperbolic", "--state", "escape",
                     "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "runs.jsonl").exists()


def test_outputs_are_deterministic(tmp_path):
    outs = []
    for k in (1, 2):
        d = tmp_path / f"run{k}"
        assert cli.main(["shape-solve", "--scenario", "kepler-hyperbolic", "--shape", "axis",
                         "--grid-spec", "5,0.25,3", "--out", str(d), "--seed", "7"]) == 0
        outs.append(sorted(p for p in d.iterdir() if p.suffix == ".csv"))
    assert outs[0]
    for a, b in zip(*outs):
        assert a.read_bytes() == b.read_bytes()


def test_verify_all_subset(tmp_path, capsys):
    code = cli.main(["verify-all", "--criteria", "1,8", "--twice", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert re.search(r"criterion\s+1 PASS", out) and re.search(r"criterion 11 PASS", out)
    assert (tmp_path / "verify" / "summary.json").exists()
