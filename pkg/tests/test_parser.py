from pathlib import Path

import numpy as np
import pytest

from lmcal.parser import Entry, ParseError, parse_bool, parse_file, parse_float, parse_text, parse_vector


def test_parse_settings_and_metadata(tmp_path: Path) -> None:
    text = """
# Name: demo
# lowercase: not metadata
@set V=2.5
voxel_size = ${V}   # trailing comment
mode = limo
"""
    result = parse_text(text, base_dir=tmp_path)
    assert result.metadata == {"Name": "demo"}
    assert result.variables["V"] == "2.5"
    settings = result.settings_dict()
    assert settings["voxel_size"].value == "2.5"
    assert settings["voxel_size"].line_num == 5
    assert settings["mode"].value == "limo"


def test_blocks_collect_indented_fields(tmp_path: Path) -> None:
    text = "plane floor\n    point = 0, 0, -1\n\tnormal = 0 0 1\nplane\n    point = 1 1 1\n"
    result = parse_text(text, base_dir=tmp_path, block_kinds=("plane",))
    assert [b.name for b in result.blocks] == ["floor", None]
    floor = result.blocks[0]
    assert floor.keys() == ["point", "normal"]
    np.testing.assert_allclose(parse_vector(floor.require("point")), [0, 0, -1])
    with pytest.raises(ParseError, match="missing 'extents'"):
        floor.require("extents")


def test_include_is_confined_and_last_assignment_wins(data_dir: Path) -> None:
    result = parse_file(data_dir / "calib.cfg")
    settings = result.settings_dict()
    assert settings["voxel_size"].value == "1.5"
    assert settings["planarity_min"].value == "0.6"
    assert result.metadata["Name"] == "room-run"
    assert result.metadata["Site"] == "lab"
    assert result.includes == [(data_dir / "base.cfg").resolve()]


def test_include_traversal_is_rejected(tmp_path: Path) -> None:
    (tmp_path / "outside.cfg").write_text("voxel_size = 1\n", encoding="utf-8")
    inner = tmp_path / "inner"
    inner.mkdir()
    with pytest.raises(ParseError, match="traversal"):
        parse_text("@include ../outside.cfg\n", base_dir=inner)
    with pytest.raises(ParseError, match="not found"):
        parse_text("@include nope.cfg\n", base_dir=inner)


def test_include_cycle_is_bounded(tmp_path: Path) -> None:
    (tmp_path / "loop.cfg").write_text("@include loop.cfg\n", encoding="utf-8")
    with pytest.raises(ParseError, match="too deep"):
        parse_file(tmp_path / "loop.cfg")


def test_syntax_errors(tmp_path: Path) -> None:
    with pytest.raises(ParseError, match="Unknown directive"):
        parse_text("@unknown value", base_dir=tmp_path)
    with pytest.raises(ParseError, match="outside a block"):
        parse_text("    point = 1 2 3\n", base_dir=tmp_path)
    with pytest.raises(ParseError, match="Undefined variable"):
        parse_text("voxel_size = ${MISSING}\n", base_dir=tmp_path)
    with pytest.raises(ParseError, match="key = value"):
        parse_text("voxel_size 2\n", base_dir=tmp_path)
    with pytest.raises(ParseError) as info:
        parse_text("a = 1\n\n2bad = 3\n", base_dir=tmp_path)
    assert info.value.line_num == 3


def test_crlf_input(tmp_path: Path) -> None:
    result = parse_text("a = 1\r\nb = 2\r\n", base_dir=tmp_path)
    assert [e.value for e in result.settings] == ["1", "2"]


def test_value_conversion() -> None:
    assert parse_float(Entry("x", "2.5", 1)) == 2.5
    assert parse_float(Entry("x", "inf", 1), allow_inf=True) == float("inf")
    with pytest.raises(ParseError):
        parse_float(Entry("x", "inf", 1))
    with pytest.raises(ParseError):
        parse_float(Entry("x", "two", 1))
    assert parse_bool(Entry("b", "Yes", 1)) is True
    assert parse_bool(Entry("b", "off", 1)) is False
    with pytest.raises(ParseError):
        parse_bool(Entry("b", "maybe", 1))
    with pytest.raises(ParseError, match="expected 2 components"):
        parse_vector(Entry("v", "1 2 3", 1), 2)


def test_public_names_resolve() -> None:
    import lmcal
    import lmcal.parser

    for module in (lmcal, lmcal.parser):
        assert all(hasattr(module, name) for name in module.__all__)
    assert not hasattr(lmcal.parser, "parse_list")
    assert not hasattr(lmcal, "sys")
