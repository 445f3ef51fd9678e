import csv
import json

import pytest

from pwacert.cli import main

SMALL = """
system = "helpers:{system}"
alpha_grid = [0.3, 0.8]

[surrogate]
width = 4
samples = 400
seed = 2
epochs = 300

[budgets]
outer_iters = 4
max_refinements = {refinements}

[outputs]
dir = "{out}"

[sim]
n_trajectories = 4
horizon_s = 0.5
dt = 1e-3
"""


def write_config(tmp_path, name, system="stable_linear", refinements=6):
    out = tmp_path / name
    path = tmp_path / f"{name}.toml"
    path.write_text(SMALL.format(system=system, out=out, refinements=refinements))
    return path, out


@pytest.fixture(scope="module")
def certified_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path, out = write_config(tmp, "a")
    code = main(["run", str(path)])
    return code, path, out


def test_run_writes_fixed_artifacts(certified_run):
    code, _, out = certified_run
    assert code == 0
    for name in ("barrier.json", "verify.json", "timings.csv", "levelsets.svg", "report.json",
                 "manifest.json", "counterexamples.csv", "surrogate.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["certified"] is True
    assert len(manifest["config_sha256"]) == 64
    assert "barrier.json" in manifest["artifacts"]
    assert set(manifest["versions"]) >= {"pwacert", "numpy", "scipy", "python"}
    stages = [row[0] for row in csv.reader(open(out / "timings.csv"))][1:]
    assert stages == ["surrogate_fit", "uis_computation", "verification", "total", "simulation"]
    rows = list(csv.reader(open(out / "trajectories" / "traj_000.csv")))
    assert rows[0] == ["t", "x1", "x2", "h"]


def test_barrier_json_is_deterministic(certified_run, tmp_path):
    _, path, out = certified_run
    again = tmp_path / "b"
    assert main(["run", str(path), "--out", str(again)]) == 0
    assert (again / "barrier.json").read_bytes() == (out / "barrier.json").read_bytes()


def test_inspect(certified_run, capsys):
    _, _, out = certified_run
    assert main(["inspect", str(out / "barrier.json"), "--point", "0.0", "0.0"]) == 0
    text = capsys.readouterr().out
    assert "hbar =" in text and "active member" in text and "inside" in text
    assert main(["inspect", str(out / "barrier.json"), "--point", "9", "0"]) == 1
    assert main(["inspect", str(out / "barrier.json"), "--point", "0"]) == 2


def test_inspect_malformed_barrier(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["inspect", str(bad), "--point", "0", "0"]) == 2


def test_verify_only_and_report(certified_run, tmp_path, capsys):
    _, path, out = certified_run
    assert main(["verify-only", str(out / "barrier.json"), str(path), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "verify.json").read_text())
    assert main(["report", str(out)]) == 0
    assert "certified: True" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "nowhere")]) == 2


def test_invalid_config_exits_2(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text('system = "pendulum"\nalpha_grid = []\n')
    assert main(["run", str(path)]) == 2
    assert "alpha_grid" in capsys.readouterr().err
    path.write_text('system = "no_such_module:factory"\nalpha_grid = [0.1]\n')
    assert main(["run", str(path)]) == 2
    assert main(["frobnicate"]) == 2


def test_uncertified_run_exits_1_with_artifacts(tmp_path):
    path, out = write_config(tmp_path, "u", system="unstable_linear", refinements=1)
    assert main(["run", str(path)]) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["certified"] is False
    assert (out / "synthesis.json").exists()
