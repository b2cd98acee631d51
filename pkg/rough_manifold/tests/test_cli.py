from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from rough_manifold.cli import load_matrix, main
from rough_manifold.errors import ConfigError
from rough_manifold.run import ExperimentConfig, run


def _write_json(path: Path, payload) -> str:
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _record(out: Path) -> dict:
    return json.loads((out / "run_record.json").read_text(encoding="utf-8"))


def test_sample_fbm_writes_anchored_path(tmp_path: Path) -> None:
    out = tmp_path / "fbm"
    code = main(["sample-fbm", "--hurst", "0.5", "--seed", "7", "--mesh", str(1 / 1024), "--out", str(out)])

    assert code == 0
    frame = pd.read_csv(out / "fbm_seed7.csv")
    assert list(frame.columns) == ["t", "v1"]
    assert len(frame) == 1025
    assert frame["v1"].iloc[0] == 0.0
    assert frame["t"].iloc[-1] == pytest.approx(1.0)
    record = _record(out)
    assert record["status"] == "pass"
    assert record["artifacts"] == ["fbm_seed7.csv", "run_record.json"]


def test_reruns_are_byte_identical(tmp_path: Path) -> None:
    cfg = ExperimentConfig.from_dict({"hurst": 0.4, "seeds": [3], "n": 64})
    first = run("sample-fbm", replace(cfg, out_dir=str(tmp_path / "a")))
    second = run("sample-fbm", replace(cfg, out_dir=str(tmp_path / "b")))

    assert first["config_hash"] == second["config_hash"]
    for name in first["artifacts"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gap_check_reports_closed_form_constant(tmp_path: Path) -> None:
    matrix = _write_json(tmp_path / "A.json", [[0.0, 0.0], [0.0, -1.0]])
    cfg = _write_json(tmp_path / "cfg.json", {"beta_margin": 0.0})
    out = tmp_path / "gap"
    code = main(["gap-check", "--matrix", matrix, "--cs", "1", "--config", cfg, "--out", str(out)])

    assert code == 0
    record = _record(out)
    assert record["system"] is None
    assert record["constants"]["K_closed_form"] == pytest.approx(0.013883, abs=1e-6)
    assert record["constants"]["gamma"] == pytest.approx(0.0)
    assert record["constants"]["beta"] == pytest.approx(1.0)
    assert record["diagnostics"]["lhs"] < 1.0
    assert (out / "gap.json").exists()


def test_beta_margin_flag_controls_closed_form_constant(tmp_path: Path) -> None:
    matrix = _write_json(tmp_path / "A.json", [[0.0, 0.0], [0.0, -1.0]])
    exact = tmp_path / "exact"
    assert main(["gap-check", "--matrix", matrix, "--cs", "1", "--beta-margin", "0", "--out", str(exact)]) == 0
    assert _record(exact)["constants"]["K_closed_form"] == pytest.approx(0.013883, abs=1e-6)

    margin = tmp_path / "margin"
    main(["gap-check", "--matrix", matrix, "--cs", "1", "--out", str(margin)])
    assert _record(margin)["constants"]["beta"] == pytest.approx(0.9)
    assert _record(margin)["constants"]["K_closed_form"] != pytest.approx(0.013883, abs=1e-6)


def test_help_documents_row_count_and_beta_margin(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit):
        main(["gap-check", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    assert "1/mesh + 1 rows" in text
    assert "--beta-margin 0" in text


def test_center_manifold_chart_then_invariance(tmp_path: Path) -> None:
    chart_dir = tmp_path / "chart"
    flags = ["--system", "det-oracle", "--window", "16", "--mesh", str(1 / 64)]
    assert main(["center-manifold", *flags, "--out", str(chart_dir)]) == 0

    chart = json.loads((chart_dir / "chart.json").read_text(encoding="utf-8"))
    assert chart["config"]["system"] == "det-oracle"
    assert max(_record(chart_dir)["diagnostics"]["oracle_ratio"]) <= 1.0

    inv_dir = tmp_path / "inv"
    code = main(["verify-invariance", "--chart", str(chart_dir / "chart.json"), "--steps", "1", "--out", str(inv_dir)])
    assert code == 0
    assert _record(inv_dir)["system"] == "det-oracle"


def test_failed_diagnostic_exits_two(tmp_path: Path) -> None:
    cfg = _write_json(tmp_path / "cfg.json", {"system": "linear", "lp": {"cocycle_tol": -1.0}, "steps_per_unit": 32})
    out = tmp_path / "cocycle"

    assert main(["cocycle-check", "--config", cfg, "--out", str(out)]) == 2
    assert _record(out)["status"] == "fail"


def test_unknown_config_key_exits_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    cfg = _write_json(tmp_path / "cfg.json", {"windw": 12})

    assert main(["lift", "--config", cfg, "--out", str(tmp_path / "lift")]) == 1
    assert "[error] lift" in capsys.readouterr().err
    assert not (tmp_path / "lift" / "run_record.json").exists()


def test_load_matrix_from_csv(tmp_path: Path) -> None:
    path = tmp_path / "A.csv"
    pd.DataFrame(np.diag([0.0, -2.0])).to_csv(path, header=False, index=False)

    assert load_matrix(str(path)) == [[0.0, 0.0], [0.0, -2.0]]


def test_load_matrix_rejects_non_square(tmp_path: Path) -> None:
    path = _write_json(tmp_path / "A.json", {"A": [[1.0, 2.0, 3.0]]})

    with pytest.raises(ConfigError):
        load_matrix(path)
