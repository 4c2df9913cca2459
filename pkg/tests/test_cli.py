import json
from pathlib import Path

import pytest

from lmcal.cli import main

SMALL = ["--azimuth-samples", "180", "--sweeps", "20"]


@pytest.fixture(scope="module")
def room_files(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("synth") / "room"
    code = main(["synth", "--preset", "room", "--seed", "0", "--with-regions", "--out", str(out), *SMALL])
    assert code == 0
    return out


def _paths(prefix: Path):
    return (
        prefix.with_name(f"{prefix.name}.csv"),
        prefix.with_name(f"{prefix.name}_traj.csv"),
        prefix.with_name(f"{prefix.name}_truth.json"),
    )


def _last_json_line(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


def test_synth_writes_dataset(room_files: Path) -> None:
    cloud, traj, truth = _paths(room_files)
    assert cloud.exists() and traj.exists()
    assert room_files.with_name("room_regions.txt").exists()
    data = json.loads(truth.read_text(encoding="utf-8"))
    assert data["kind"] == "ground_truth"
    assert data["files"]["regions"] == "room_regions.txt"
    assert data["extrinsics"]["roll_deg"] == pytest.approx(2.0)
    assert data["sensor"]["azimuth_samples"] == 180


def test_synth_is_reproducible(tmp_path: Path) -> None:
    args = ["synth", "--preset", "sparse", "--planes", "4", "--seed", "11", "--noise", "0.01",
            "--lines", "4", "--azimuth-samples", "60", "--sweeps", "6"]
    assert main([*args, "--out", str(tmp_path / "a" / "scan")]) == 0
    assert main([*args, "--out", str(tmp_path / "b" / "scan")]) == 0
    first = (tmp_path / "a" / "scan.csv").read_bytes()
    assert first == (tmp_path / "b" / "scan.csv").read_bytes()
    assert not (tmp_path / "a" / "scan_regions.txt").exists()


def test_synth_binary_format(tmp_path: Path) -> None:
    out = tmp_path / "scan"
    args = ["synth", "--lines", "4", "--azimuth-samples", "60", "--sweeps", "6", "--format", "lmc"]
    assert main([*args, "--out", str(out)]) == 0
    assert (tmp_path / "scan.lmc").read_bytes()[:4] == b"LMC1"


def test_calibrate_writes_report_and_traces(tmp_path: Path, room_files: Path) -> None:
    cloud, traj, _ = _paths(room_files)
    report = tmp_path / "out" / "run.json"
    code = main(["calibrate", str(cloud), str(traj), "--report", str(report)])
    assert code in (0, 4)
    data = json.loads(report.read_text(encoding="utf-8"))
    assert data["kind"] == "calibration"
    assert data["config"]["mode"] == "limo"
    assert data["inputs"]["trajectory"] == str(traj)
    assert (tmp_path / "out" / "run_cost.csv").exists()
    assert (tmp_path / "out" / "run_params.csv").exists()
    assert abs(data["result"]["extrinsics"]["roll_deg"] - 2.0) < 0.1


def test_evaluate_with_regions_and_comparison(tmp_path: Path, room_files: Path, capsys) -> None:
    cloud, traj, truth = _paths(room_files)
    regions = room_files.with_name("room_regions.txt")
    out = tmp_path / "fit.csv"
    code = main(
        ["evaluate", str(cloud), str(traj), str(truth), "--regions", str(regions), "--compare", str(truth),
         "--out", str(out)]
    )
    assert code == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "region,points,mse_m2,rms_m,status"
    assert lines[-1].startswith("aggregate,")
    assert (tmp_path / "fit_compare.csv").exists()
    assert "[SUCCESS]" in capsys.readouterr().out


def test_evaluate_without_regions_reports_the_aggregate(tmp_path: Path, room_files: Path) -> None:
    cloud, traj, truth = _paths(room_files)
    out = tmp_path / "auto.csv"
    assert main(["evaluate", str(cloud), str(traj), str(truth), "--out", str(out)]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("aggregate,")


def test_sweep_cli(tmp_path: Path, room_files: Path) -> None:
    cloud, traj, truth = _paths(room_files)
    config = tmp_path / "sweep.cfg"
    config.write_text("max_outer_iterations = 1\n", encoding="utf-8")
    out = tmp_path / "sweep.csv"
    code = main(
        ["sweep", str(cloud), str(traj), "--config", str(config), "--init", str(truth),
         "--voxel-sizes", "1", "--planarity", "0.5", "1.0", "--out", str(out)]
    )
    assert code == 0
    rows = out.read_text(encoding="utf-8").splitlines()
    assert len(rows) == 3
    assert ",failed," in rows[2]


def test_stability_cli(tmp_path: Path, room_files: Path) -> None:
    cloud, traj, truth = _paths(room_files)
    config = tmp_path / "stab.cfg"
    config.write_text("max_outer_iterations = 1\n", encoding="utf-8")
    out = tmp_path / "stability.csv"
    code = main(
        ["stability", str(cloud), str(traj), "--config", str(config), "--init", str(truth),
         "--batches", "2", "--modes", "limo", "--out", str(out)]
    )
    assert code == 0
    assert len(out.read_text(encoding="utf-8").splitlines()) == 1 + 2 + 2


def test_missing_trajectory_is_an_input_error(tmp_path: Path, room_files: Path, capsys) -> None:
    cloud, _, _ = _paths(room_files)
    code = main(["calibrate", str(cloud), str(tmp_path / "nope.csv"), "--report", str(tmp_path / "r.json")])
    assert code == 2
    error = _last_json_line(capsys.readouterr().err)
    assert error["error"] == "InputError"
    assert error["exit_code"] == 2
    assert not (tmp_path / "r.json").exists()


def test_bad_config_points_at_the_line(data_dir: Path, tmp_path: Path, capsys) -> None:
    code = main(["calibrate", "a.csv", "b.csv", "--config", str(data_dir / "bad.cfg")])
    assert code == 2
    captured = capsys.readouterr()
    assert "[PARSE ERROR]" in captured.out
    assert "bad.cfg:3:" in captured.out
    assert _last_json_line(captured.err)["error"] == "ParseError"


def test_no_command(capsys) -> None:
    assert main([]) == 2
    assert "No command specified" in capsys.readouterr().out


def test_module_entry_point(monkeypatch, capsys) -> None:
    from lmcal import __main__ as entry

    monkeypatch.setattr("sys.argv", ["lmcal"])
    assert entry.main() == 2
    assert "usage: lmcal" in capsys.readouterr().out
