import pytest
from sqlalchemy import create_engine

import ringpet
from app.db import session


def test_bad_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("geometry.crystals_per_ring=63\n")
    assert ringpet.main(["phantom", "--config", str(path)]) == 2


def test_missing_config_file(tmp_path):
    assert ringpet.main(["report", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_overrides_from_the_command_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("geometry.crystals_per_ring=16\nphantom.size=16\nphantom.voxel_mm=4\n")
    args = ringpet.build_parser().parse_args(
        ["mask", "--config", str(path), "--out", str(tmp_path / "out"), "--pattern", "3", "--seed", "2"])
    cfg = ringpet.resolve_config(args)
    assert cfg.mask.pattern == 3
    assert cfg.eval.out_dir == str(tmp_path / "out")
    assert cfg.phantom.seed == 2


def test_unknown_pattern_is_rejected_by_the_parser():
    with pytest.raises(SystemExit):
        ringpet.build_parser().parse_args(["mask", "--config", "x.cfg", "--pattern", "4"])


def test_unavailable_registry_exits_cleanly(tmp_path, monkeypatch, caplog):
    path = tmp_path / "run.cfg"
    path.write_text("geometry.crystals_per_ring=16\nphantom.size=16\nphantom.voxel_mm=4\n")
    unreachable = create_engine(f"sqlite:///{tmp_path / 'no' / 'such' / 'dir' / 'runs.db'}")
    monkeypatch.setattr(session, "engine", unreachable)
    assert ringpet.main(["report", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert "run registry unavailable" in caplog.text
