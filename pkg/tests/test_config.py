import math
from pathlib import Path

import pytest

from lmcal.config import RunConfig, load_run_config
from lmcal.errors import ParseError, ValidationError


def test_defaults() -> None:
    config = RunConfig()
    assert config.voxel_size == 1.0
    assert config.planarity_min == 0.5
    assert config.k_max == 50
    assert config.min_angle_sep == pytest.approx(math.radians(30.0))
    assert config.mode == "limo"
    solver = config.to_solver_config()
    assert solver.huber_delta == 0.05
    assert solver.max_outer_iterations == 5
    assert solver.n_params == 4


def test_load_with_include_and_overrides(data_dir: Path) -> None:
    config = load_run_config(data_dir / "calib.cfg")
    assert config.voxel_size == 1.5
    assert config.planarity_min == 0.6
    assert config.r_corr == 0.25
    assert config.mode == "vanilla"
    assert math.isinf(config.huber_delta)
    assert config.estimate_time_offset is True
    assert config.max_outer_iterations == 3
    assert config.to_solver_config().n_params == 5


def test_file_sits_on_top_of_base(data_dir: Path) -> None:
    base = RunConfig(seed=42, workers=3)
    config = load_run_config(data_dir / "base.cfg", base)
    assert config.seed == 42 and config.workers == 3
    assert config.voxel_size == 2.0


def test_unknown_key_is_a_parse_error(data_dir: Path) -> None:
    with pytest.raises(ParseError) as info:
        load_run_config(data_dir / "bad.cfg")
    assert info.value.line_num == 3
    assert "unknown config key" in info.value.message


def test_bad_values(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("k_max = many\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_run_config(path)
    path.write_text("planarity_min = 1.5\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="planarity_min"):
        load_run_config(path)


def test_validation() -> None:
    with pytest.raises(ValidationError):
        RunConfig(voxel_size=0.0)
    with pytest.raises(ValidationError):
        RunConfig(bin_width_deg=7.0)
    with pytest.raises(ValidationError):
        RunConfig(mode="fast")
    with pytest.raises(ValidationError):
        RunConfig(k_min=10, k_max=5)
    with pytest.raises(ValidationError):
        RunConfig(huber_delta=-1.0)
    with pytest.raises(ValidationError):
        RunConfig(jacobian_form="exact")


def test_overrides_ignore_none() -> None:
    config = RunConfig().with_overrides(voxel_size=2.0, mode=None)
    assert config.voxel_size == 2.0 and config.mode == "limo"
    with pytest.raises(ValidationError):
        RunConfig().with_overrides(speed=1)


def test_dict_round_trip() -> None:
    config = RunConfig(huber_delta=math.inf, seed=3)
    data = config.to_dict()
    assert data["huber_delta"] == "inf"
    assert RunConfig.from_dict(data) == config
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"nope": 1})


def test_plane_fit_keys_are_validated() -> None:
    config = RunConfig()
    assert config.neighbor_angle_window_deg == 5.0
    assert config.plane_inlier_distance == 0.05
    assert config.inlier_fraction_min == 0.8
    with pytest.raises(ValidationError, match="plane_inlier_distance"):
        RunConfig(plane_inlier_distance=0.0)
    with pytest.raises(ValidationError, match="inlier_fraction_min"):
        RunConfig(inlier_fraction_min=0.0)
    with pytest.raises(ValidationError, match="inlier_fraction_min"):
        RunConfig(inlier_fraction_min=1.5)
    assert RunConfig(inlier_fraction_min=1.0).inlier_fraction_min == 1.0
