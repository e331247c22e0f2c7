import json
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import CONFIG_DIR as _CFG
from hjbs.cli import main

CONFIG_DIR = Path(_CFG)

SMALL = """
[model]
kind = scalar

[costs]
phi = cos
controls = box:-1:1:5

[solver]
T = 0.3
n_nodes = 5
n_mc = 400
grid_per_dim = 21
window_policy = weighted
gamma = 0.5
kappa = 1.0

[verify]
variants = base

[crossval]
n_paths = 200
dt = 0.05
probes = 0.0:0.0; 0.1:0.5
policies = const:0,greedy

[simulate]
policy = greedy
n_paths = 3
dt = 0.05

[run]
seed = 2
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def _run(*args):
    return main([str(a) for a in args])


def test_verify_exit_codes(tmp_path):
    assert _run("verify", "--config", CONFIG_DIR / "scalar.ini", "--out", tmp_path / "a") == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["passed"] and man["command"] == "verify" and "lambda_report.csv" in man["outputs"]
    assert _run("verify", "--config", CONFIG_DIR / "delay_conv_fail.ini", "--out", tmp_path / "b") == 1
    assert _run("verify", "--config", CONFIG_DIR / "delay_bad.ini", "--out", tmp_path / "c") == 2


def test_usage_errors(tmp_path, small_config):
    assert _run("verify", "--out", tmp_path) == 2
    assert _run("verify", "--config", tmp_path / "missing.ini", "--out", tmp_path) == 2
    assert _run("crossval", "--config", small_config, "--out", tmp_path, "--field", tmp_path / "none.json") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL.replace("box:-1:1:5", "box:1"))
    assert _run("solve", "--config", bad, "--out", tmp_path / "x") == 2


def test_solve_crossval_simulate_pipeline_is_byte_deterministic(tmp_path, small_config):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert _run("solve", "--config", small_config, "--out", d, "--threads", 2 if k else 1) == 0
        assert _run("crossval", "--config", small_config, "--out", d, "--field", d / "value_field.json") == 0
        assert _run("simulate", "--config", small_config, "--out", d, "--field", d / "value_field.json") == 0
        outs.append(d)
    for name in ("value_field.json", "crossval.csv", "paths.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    conv = json.loads((outs[0] / "convergence.json").read_text())
    assert conv["converged"]


def test_inflated_field_fails_crossval(tmp_path, small_config):
    d = tmp_path / "r"
    assert _run("solve", "--config", small_config, "--out", d) == 0
    doc = json.loads((d / "value_field.json").read_text())
    doc["values"] = [[[10 * v for v in row] for row in node] if isinstance(node[0], list) else [10 * v for v in node]
                     for node in doc["values"]]
    (d / "bad.json").write_text(json.dumps(doc))
    assert _run("crossval", "--config", small_config, "--out", d, "--field", d / "bad.json") == 1


def test_module_entry_point(tmp_path, small_config):
    r = subprocess.run([sys.executable, "-m", "hjbs", "verify", "--config", str(small_config), "--out",
                        str(tmp_path)], capture_output=True)
    assert r.returncode == 0
