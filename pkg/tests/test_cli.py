import filecmp
import json
import os

import numpy as np
import pytest

from chac.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, main
from chac.pipeline import ConfigError, load_config

POTENTIAL = {
    "g": {"order": 2, "coefficients": {"1": -1.0, "2": 2.0}},
    "f0": {"coefficients": {"1,0,0,0": 1.0}},
    "f": {"1": {"b": 0.5}},
    "params": {"c1": 1.0, "c2": 1.0},
}

CONFIG = """
[grid]
dim = 1
n = 128

[params]
c1 = 1.0
c2 = 1.0

[solver]
dt = 1e-3
t_final = 0.01
scheme = "imex2"
record_times = [0.005, 0.01]

[potential]
manifest = "pot.json"

[initial]
u0 = ["2 + cos(pi*x1)", "2 + sin(pi*x1) + 0.4*cos(2*pi*x1)"]

[pipeline]
stages = ["simulate", "linearize", "measure", "invert", "report"]
order = 2
seed = 42
noise_sigma = 0.0
mode = "ip1"
spatial = false
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "pot.json").write_text(json.dumps(POTENTIAL))
    config = tmp_path / "config.toml"
    config.write_text(CONFIG)
    return tmp_path, config


def tree_digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name == "timings.json":
                continue
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_full_run_recovers_coefficients(workspace):
    tmp, config = workspace
    out = tmp / "results"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_OK
    rec = json.loads((out / "invert" / "reconstruction.json").read_text())
    assert rec["coefficients"]["1"] == pytest.approx(-1.0, abs=1e-6)
    assert rec["coefficients"]["2"] == pytest.approx(2.0, abs=1e-5)
    summary = (out / "report" / "summary.txt").read_text()
    assert "order" in summary
    # every stage dir carries a manifest listing all of its artifacts
    for stage in ("simulate", "linearize", "measure", "invert", "report"):
        manifest = json.loads((out / stage / "manifest.json").read_text())
        for artifact in manifest["artifacts"]:
            assert (out / stage / artifact).exists()
        listed = set(manifest["artifacts"]) | {"manifest.json"}
        present = set(os.listdir(out / stage))
        assert present == listed


def test_rerun_is_bit_identical(workspace):
    tmp, config = workspace
    assert main(["run", "--config", str(config), "--out", str(tmp / "r1")]) == EXIT_OK
    assert main(["run", "--config", str(config), "--out", str(tmp / "r2")]) == EXIT_OK
    d1 = tree_digest(tmp / "r1")
    d2 = tree_digest(tmp / "r2")
    assert d1.keys() == d2.keys()
    for name in d1:
        assert d1[name] == d2[name], name


def test_stage_subset_and_prerequisites(workspace):
    tmp, config = workspace
    out = tmp / "partial"
    # invert without measure artifacts is a user error
    assert main(["invert", "--config", str(config), "--out", str(out)]) == EXIT_USER
    assert main(["measure", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert main(["invert", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert main(["report", "--config", str(config), "--out", str(out)]) == EXIT_OK


def test_missing_config_is_user_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml")]) == EXIT_USER


def test_missing_potential_manifest(workspace):
    tmp, config = workspace
    (tmp / "pot.json").unlink()
    assert main(["run", "--config", str(config)]) == EXIT_USER


def test_bad_stage_order_rejected(workspace):
    tmp, config = workspace
    text = config.read_text().replace(
        'stages = ["simulate", "linearize", "measure", "invert", "report"]',
        'stages = ["invert", "measure"]',
    )
    config.write_text(text)
    with pytest.raises(ConfigError):
        load_config(config)


def test_validate_potential_command(workspace, capsys):
    tmp, _ = workspace
    assert main(["validate-potential", "--config", str(tmp / "pot.json")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["structural_ok"]


def test_noise_seed_determinism(workspace):
    tmp, config = workspace
    noisy = config.read_text().replace("noise_sigma = 0.0", "noise_sigma = 1e-6")
    config.write_text(noisy)
    assert main(["measure", "--config", str(config), "--out", str(tmp / "n1")]) == EXIT_OK
    assert main(["measure", "--config", str(config), "--out", str(tmp / "n2")]) == EXIT_OK
    assert tree_digest(tmp / "n1") == tree_digest(tmp / "n2")


def test_report_without_invert_is_user_error(workspace):
    tmp, config = workspace
    assert main(["report", "--config", str(config), "--out", str(tmp / "empty")]) == EXIT_USER
