import pytest

from app.core.config import PATTERNS, RunConfig, load_run_config, parse_run_config
from app.core.errors import ConfigError, StageError, TrainingError


def test_defaults_follow_published_hyperparameters():
    cfg = RunConfig()
    assert cfg.geometry.crystals_per_ring == 182
    assert cfg.geometry.radius_mm == pytest.approx(253.71)
    assert (cfg.stage1.lr, cfg.stage1.weight_decay) == (1e-4, 1e-5)
    assert (cfg.stage1.plateau_factor, cfg.stage1.plateau_patience) == (0.3, 3)
    s2 = cfg.stage2
    assert (s2.batch, s2.lr, s2.t_train, s2.t_min, s2.t_max) == (12, 2e-4, 2000, 10, 50)
    assert (s2.beta_start, s2.beta_end, s2.ema_decay) == (1e-6, 0.01, 0.9999)
    assert (cfg.recon.subsets, cfg.recon.iterations) == (7, 10)


def test_three_patterns_are_defined():
    assert PATTERNS[1] == ((30.0, 90.0), (210.0, 270.0))
    assert PATTERNS[2] == ((60.0, 120.0), (240.0, 300.0))
    assert PATTERNS[3] == ((60.0, 90.0), (130.0, 160.0), (240.0, 270.0), (310.0, 340.0))


def test_parse_converts_types():
    cfg = parse_run_config({
        "geometry.crystals_per_ring": "64",
        "mask.gaps": "30:90, 210:270",
        "mask.rings": "1",
        "simulate.events_per_slice": "2e5",
        "stage1.attention": "false",
        "stage2.channel_mults": "1,2",
        "eval.patterns": "1,3",
        "eval.folds": "4",
    })
    assert cfg.geometry.crystals_per_ring == 64
    assert cfg.mask.gaps == ((30.0, 90.0), (210.0, 270.0))
    assert cfg.mask.rings == (1,)
    assert cfg.simulate.events_per_slice == 2e5
    assert cfg.stage1.attention is False
    assert cfg.stage2.channel_mults == (1, 2)
    assert cfg.eval.patterns == (1, 3)


@pytest.mark.parametrize("values", [
    {"geometry.crystal_count": "64"},
    {"optics.lens": "1"},
    {"nosection": "1"},
])
def test_unknown_keys_are_rejected(values):
    with pytest.raises(ConfigError):
        parse_run_config(values)


@pytest.mark.parametrize("values", [
    {"geometry.crystals_per_ring": "63"},
    {"geometry.crystals_per_ring": "sixty"},
    {"stage1.loss": "huber"},
    {"stage2.t_min": "60"},
    {"stage2.beta_start": "0.5", "stage2.beta_end": "0.1"},
    {"mask.gaps": "90:30"},
    {"mask.rings": "9"},
    {"recon.subsets": "500"},
    {"eval.folds": "1"},
    {"eval.patterns": "4"},
    {"phantom.size": "256"},
    {"stage1.attention": "maybe"},
])
def test_invalid_values_are_config_errors(values):
    with pytest.raises(ConfigError):
        parse_run_config(values)


def test_load_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ngeometry.crystals_per_ring=64\neval.out_dir=runs/x\nstage1.context=single\n")
    cfg = load_run_config(str(path))
    assert cfg.geometry.crystals_per_ring == 64
    assert cfg.eval.out_dir == "runs/x"
    assert cfg.stage1.context == "single"


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.cfg"))


def test_overrides_and_reseeding():
    cfg = RunConfig()
    updated = cfg.with_overrides(mask__pattern=2, stage1__epochs=3)
    assert updated.mask.pattern == 2 and updated.stage1.epochs == 3
    assert cfg.mask.pattern == 0
    assert updated.digest() != cfg.digest()

    shifted = cfg.reseeded(5)
    assert shifted.phantom.seed == cfg.phantom.seed + 5
    assert shifted.stage2.seed == cfg.stage2.seed + 5
    assert cfg.reseeded(0) is cfg

    with pytest.raises(ConfigError):
        cfg.with_overrides(mask__pattern=7)
    with pytest.raises(ConfigError):
        cfg.with_overrides(mask__full_ring=True, mask__pattern=1)


def test_digest_is_stable():
    assert RunConfig().digest() == RunConfig().digest()


def test_stage_error_keeps_cause_exit_code():
    assert StageError("refine", TrainingError("nan")).exit_code == 3
    assert StageError("mask", ConfigError("bad")).exit_code == 2
    assert StageError("eval", ValueError("x")).exit_code == 1
