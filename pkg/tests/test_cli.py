import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import scipy.io

from modal_tune.cli import main
from modal_tune.config import ConfigError, config_from_dict, load_config, load_problem
from modal_tune.mesh import dump_mesh, ConstraintSet
from modal_tune.reports import (dump_report, load_report, read_csv, result_from_dict, result_to_dict,
                                schema_name)

from helpers import grid_mesh, unit_region


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("arch")
    assert main(["make-mesh", "arch", "--out", str(d)]) == 0
    return d


def config_copy(workdir, tmp_path, **changes):
    doc = json.loads((workdir / "arch_config.json").read_text())
    doc["mesh"] = str(workdir / "arch_mesh.json")
    doc["target"] = str(workdir / "arch_target.json")
    doc.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_make_mesh_outputs(workdir, capsys):
    for name in ("arch_mesh.json", "arch_target.json", "arch_config.json"):
        assert (workdir / name).is_file()
    problem = load_problem(load_config(workdir / "arch_config.json"))
    assert problem.system.n_free == 882
    assert problem.target.q == 5
    assert problem.system.space.names == ["E2", "E3", "rho2"]


def test_forward(workdir, tmp_path, capsys):
    assert main(["forward", "--config", str(workdir / "arch_config.json"), "--out", str(tmp_path),
                 "--export-matrices"]) == 0
    freqs = [float(v) for v in capsys.readouterr().out.split()]
    assert len(freqs) == 5 and freqs == sorted(freqs)
    doc = load_report((tmp_path / "forward.json").read_text(), "forward")
    np.testing.assert_allclose(doc["result"]["frequencies_hz"], freqs, rtol=1e-5)
    K = scipy.io.mmread(str(tmp_path / "stiffness.mtx"))
    N = scipy.io.mmread(str(tmp_path / "nullspace_basis.mtx"))
    Kr = scipy.io.mmread(str(tmp_path / "reduced_stiffness.mtx"))
    assert K.shape == (906, 906) and N.shape == (906, 882)
    assert abs(N.T @ K @ N - Kr).max() <= 1e-12 * abs(Kr).max()


def test_update_report_and_csv(workdir, tmp_path, capsys):
    assert main(["update", "--config", str(workdir / "arch_config.json"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "converged" in out
    doc = load_report((tmp_path / "update.json").read_text(), "update")
    res = result_from_dict(doc["result"])
    assert res.converged and res.phi < 1e-10
    np.testing.assert_allclose(res.x_opt, [5e9, 4.8e9, 2200.0], rtol=1e-3)
    rows = read_csv(tmp_path / "iterations.csv")
    assert len(rows) == res.accepted + res.rejected
    assert rows[0]["iteration"] == "0"
    assert {"phi", "radius", "ratio", "accepted", "u_E2", "x_rho2", "f5_hz"} <= set(rows[0])
    # the dictionary form survives a round trip unchanged
    assert result_to_dict(res) == doc["result"] | {"frequencies": None, "eigen_residuals": None}


def test_reports_are_deterministic(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["update", "--config", str(workdir / "arch_config.json"), "--out", str(d)]) == 0
    docs = [json.loads((d / "update.json").read_text()) for d in (a, b)]
    for doc in docs:
        doc.pop("metadata")
    assert json.dumps(docs[0]) == json.dumps(docs[1])
    assert (a / "iterations.csv").read_bytes() == (b / "iterations.csv").read_bytes()


def test_sensitivity(workdir, tmp_path, capsys):
    assert main(["sensitivity", "--config", str(workdir / "arch_config.json"),
                 "--out", str(tmp_path)]) == 0
    doc = load_report((tmp_path / "sensitivity.json").read_text(), "sensitivity")["result"]
    s = doc["singular_values"]
    assert s == sorted(s, reverse=True)
    assert doc["condition_number"] == pytest.approx(s[0] / s[-1])
    assert len(doc["jacobian"]) == 10
    assert "kappa" in capsys.readouterr().out


def test_noise_sweep_and_seed(workdir, tmp_path, capsys):
    cfg = config_copy(workdir, tmp_path, noise={"deltas": [1e-3], "seeds": 2})
    assert main(["noise-sweep", "--config", str(cfg), "--out", str(tmp_path / "s0")]) == 0
    assert main(["noise-sweep", "--config", str(cfg), "--out", str(tmp_path / "s1"),
                 "--seed", "18446744073709551615", "--threads", "2"]) == 0
    r0 = read_csv(tmp_path / "s0" / "sweep.csv")
    r1 = read_csv(tmp_path / "s1" / "sweep.csv")
    assert len(r0) == len(r1) == 2
    assert [r["error"] for r in r0] != [r["error"] for r in r1]
    assert "median error" in capsys.readouterr().out


def test_benchmark(workdir, tmp_path, capsys):
    assert main(["benchmark", "--config", str(workdir / "arch_config.json"),
                 "--out", str(tmp_path)]) == 0
    doc = load_report((tmp_path / "benchmark.json").read_text(), "benchmark")["result"]
    rom, base = doc["methods"]
    assert rom["full_solves"] < base["full_solves"]
    assert doc["x_opt_relative_difference"] < 5e-3
    assert "speedup" in capsys.readouterr().out


def test_usage_errors_exit_2(workdir):
    for argv in (["frobnicate"], ["update"], ["update", "--config", "x", "--seed", str(2 ** 64)],
                 ["update", "--config", "x", "--threads", "0"], ["update", "--config", "x", "--bogus"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_input_errors_exit_1(workdir, tmp_path, capsys):
    assert main(["update", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["update", "--config", str(bad)]) == 1
    cfg = config_copy(workdir, tmp_path, optimizer={"gtoll": 1e-3})
    assert main(["update", "--config", str(cfg)]) == 1
    doc = json.loads((workdir / "arch_config.json").read_text())
    doc["parameters"][0]["regions"] = [7]
    (workdir / "bad_binding.json").write_text(json.dumps(doc))
    assert main(["update", "--config", str(workdir / "bad_binding.json")]) == 1
    assert "region 7" in capsys.readouterr().err
    doc["parameters"][0] = {"name": "nu", "property": "nu", "regions": [2], "lower": 0, "upper": 0.4}
    (workdir / "bad_property.json").write_text(json.dumps(doc))
    assert main(["update", "--config", str(workdir / "bad_property.json")]) == 1
    cfg = config_copy(workdir, tmp_path, start=[1e9, 5e9, 5000.0])
    assert main(["update", "--config", str(cfg)]) == 1


def test_numerical_failure_exit_3(tmp_path, capsys):
    mesh = grid_mesh(2, 2)
    (tmp_path / "free.json").write_text(dump_mesh(mesh, ConstraintSet(), unit_region(1e9, 0.2, 2000.0)))
    (tmp_path / "cfg.json").write_text(json.dumps({"mesh": "free.json", "q": 3}))
    assert main(["forward", "--config", str(tmp_path / "cfg.json")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_config_parsing(tmp_path):
    cfg = config_from_dict({"mesh": "m.json", "target": "t.json", "seed": 5,
                            "optimizer": {"gtol": 1e-5, "radius": 0.5}}, tmp_path)
    assert cfg.mesh_path == tmp_path / "m.json"
    assert cfg.optimizer.gtol == 1e-5 and cfg.optimizer.radius == 0.5
    assert cfg.seed == 5
    for bad in ({}, {"mesh": "m", "schema": "other/1"}, {"mesh": "m", "seed": -1},
                {"mesh": "m", "optimizer": {"eta1": 0.9}}, {"mesh": "m", "start": "corner"},
                {"mesh": "m", "parameters": [{"name": "E"}]}):
        with pytest.raises(ConfigError):
            config_from_dict(bad, tmp_path)


def test_weight_override(workdir, tmp_path):
    cfg = config_copy(workdir, tmp_path, weights={"scheme": "absolute", "mode_weight": 0.0})
    problem = load_problem(load_config(cfg))
    w = problem.target.weights
    np.testing.assert_allclose(w[:5], 1 / np.sqrt(5))
    assert np.all(w[5:] == 0)


def test_report_schema_and_non_finite_values():
    text = dump_report("update", {"a": float("inf"), "b": np.array([1.0, np.nan])})
    doc = load_report(text, "update")
    assert doc["schema"] == schema_name("update") == "modal-tune/update/1"
    assert doc["result"] == {"a": "inf", "b": [1.0, "nan"]}
    with pytest.raises(ValueError):
        load_report(text, "forward")


@pytest.mark.skipif(shutil.which("modal-tune") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["modal-tune", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("forward", "update", "sensitivity", "noise-sweep", "benchmark", "make-mesh"):
        assert sub in out.stdout
    out = subprocess.run([sys.executable, "-m", "modal_tune.cli", "nope"], capture_output=True)
    assert out.returncode == 2
