import json
import re
import time

import numpy as np
import pytest

from gplod.cli import main, parse_config, serialize_config, study_config_from

LAPLACE_CONFIG = """
[domain]
xmin = 0
xmax = 1
ymin = 0
ymax = 1

[potential]
kind = constant
value = 0.0

[flow]
tau = 0.5
tol_energy = 1e-10

[solve]
space = fine_fem
cells = 64
beta = 0
"""


def test_parse_round_trip():
    resolved = parse_config(LAPLACE_CONFIG)
    again = parse_config(serialize_config(resolved))
    assert resolved == again


def test_parse_overrides():
    resolved = parse_config(LAPLACE_CONFIG, ["solve.beta=2.5", "flow.tau=0.25"])
    assert resolved["solve"]["beta"] == "2.5"
    assert resolved["flow"]["tau"] == "0.25"
    with pytest.raises(Exception):
        parse_config(LAPLACE_CONFIG, ["notakeyvalue"])


def test_study_config_round_trip(tmp_path):
    text = (
        "[domain]\nxmin=0\nxmax=1\nymin=0\nymax=1\n"
        "[potential]\nkind = constant\nvalue = 1.0\n"
        "[flow]\ntau = 0.5\n"
        "[study]\nbeta = 5\nreference_cells = 32\nh_sequence = 0.25 0.125\n"
    )
    resolved = parse_config(text)
    cfg1 = study_config_from(resolved, tmp_path)
    cfg2 = study_config_from(parse_config(serialize_config(resolved)), tmp_path)
    assert cfg1.beta == cfg2.beta
    assert cfg1.H_sequence == cfg2.H_sequence
    assert cfg1.reference_cells == cfg2.reference_cells
    assert cfg1.domain == cfg2.domain


def test_solve_laplace(tmp_path, capsys):
    config = tmp_path / "laplace.cfg"
    config.write_text(LAPLACE_CONFIG)
    code = main(["solve", "--config", str(config), "--out", str(tmp_path)])
    captured = capsys.readouterr()
    assert code == 0
    lam = float(re.search(r"eigenvalue:\s+(\S+)", captured.out).group(1))
    assert abs(lam - 2 * np.pi**2) <= 0.01 * 2 * np.pi**2


def test_solve_missing_config(tmp_path, capsys):
    code = main(["solve", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
    captured = capsys.readouterr()
    assert code == 1
    assert "nope.cfg" in captured.err


def test_solve_override_recorded(tmp_path, capsys):
    config = tmp_path / "laplace.cfg"
    config.write_text(LAPLACE_CONFIG)
    code = main(
        [
            "solve",
            "--config",
            str(config),
            "--out",
            str(tmp_path),
            "solve.cells=16",
            "solve.beta=1.0",
        ]
    )
    assert code == 0
    manifest = json.loads((tmp_path / "solve_manifest.json").read_text())
    assert "solve.beta=1.0" in manifest["overrides"]
    assert manifest["resolved_config"]["solve"]["beta"] == "1.0"


def test_solve_nonconvergence_exit_code(tmp_path, capsys):
    config = tmp_path / "laplace.cfg"
    config.write_text(LAPLACE_CONFIG)
    code = main(
        [
            "solve",
            "--config",
            str(config),
            "--out",
            str(tmp_path),
            "solve.cells=16",
            "solve.beta=100",
            "flow.max_steps=2",
            "flow.tol_energy=1e-15",
        ]
    )
    assert code == 2


def test_solve_dumps(tmp_path):
    config = tmp_path / "laplace.cfg"
    config.write_text(LAPLACE_CONFIG)
    sol = tmp_path / "solution.txt"
    mesh = tmp_path / "mesh.txt"
    code = main(
        [
            "solve",
            "--config",
            str(config),
            "--out",
            str(tmp_path),
            "--dump-solution",
            str(sol),
            "--dump-mesh",
            str(mesh),
            "solve.cells=8",
        ]
    )
    assert code == 0
    rows = [ln.split() for ln in sol.read_text().strip().splitlines()]
    assert len(rows) == 81  # (8+1)^2 nodes as "x y value"
    assert all(len(r) == 3 for r in rows)
    assert "# nodes 81" in mesh.read_text()


def test_smoke_study_under_ten_seconds(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["study", "--config", "smoke", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    captured = capsys.readouterr()
    assert code == 0
    assert elapsed < 10.0
    assert (tmp_path / "study.csv").exists()
    assert (tmp_path / "study_baseline.csv").exists()
    assert (tmp_path / "study.gp").exists()
    assert (tmp_path / "study_manifest.json").exists()
    assert "fitted rates" in captured.out


def test_study_manifest_reproducibility(tmp_path, capsys):
    code = main(["study", "--config", "smoke", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "study_manifest.json").read_text())
    # rerun from the manifest's resolved config alone
    config2 = tmp_path / "from_manifest.cfg"
    config2.write_text(serialize_config(manifest["resolved_config"]))
    out2 = tmp_path / "rerun"
    code = main(["study", "--config", str(config2), "--out", str(out2)])
    assert code == 0
    capsys.readouterr()

    def strip_wall(path):
        return [
            ",".join(ln.split(",")[:-1]) if not ln.startswith("#") and "," in ln else ln
            for ln in path.read_text().strip().splitlines()
        ]

    assert strip_wall(tmp_path / "study.csv") == strip_wall(out2 / "study.csv")


def test_correctors_cache_cycle(tmp_path, capsys):
    code = main(["correctors", "--config", "smoke", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "correctors_manifest.json").read_text())
    assert manifest["cache"] == {"hits": 0, "misses": 2}

    code = main(["correctors", "--config", "smoke", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "correctors_manifest.json").read_text())
    assert manifest["cache"] == {"hits": 2, "misses": 0}
    capsys.readouterr()

    # corrupt one cache file: it is rebuilt with a warning, not an error
    cache_files = sorted((tmp_path / "correctors").glob("correctors_*.npz"))
    cache_files[0].write_bytes(cache_files[0].read_bytes()[:50])
    code = main(["correctors", "--config", "smoke", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "correctors_manifest.json").read_text())
    assert manifest["cache"] == {"hits": 1, "misses": 1}


def test_study_bad_config_exit_code(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("[domain]\nxmin=0\nxmax=1\nymin=0\nymax=1\n")
    code = main(["study", "--config", str(config), "--out", str(tmp_path)])
    captured = capsys.readouterr()
    assert code == 1
    assert "error" in captured.err


def test_preset_resolution(capsys):
    code = main(["study", "--config", "definitely_not_a_preset", "--out", "/tmp"])
    captured = capsys.readouterr()
    assert code == 1
    assert "not found" in captured.err
