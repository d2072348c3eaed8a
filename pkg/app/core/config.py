import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Tuple

from dotenv import dotenv_values, load_dotenv

from app.core.errors import ConfigError

load_dotenv()

# Angular-loss patterns evaluated by the experiment runner (degrees, half-open)
PATTERNS = {
    1: ((30.0, 90.0), (210.0, 270.0)),
    2: ((60.0, 120.0), (240.0, 300.0)),
    3: ((60.0, 90.0), (130.0, 160.0), (240.0, 270.0), (310.0, 340.0)),
}

# Report stage labels
class Stage:
    SINOGRAM = "sinogram"
    RECONSTRUCTED = "reconstructed"
    REFINED = "refined"
    UNRESTORED = "unrestored"
    FULLRING = "fullring"
    INTERPOLATED = "interpolated"
    UNRESTORED_FBP = "unrestored_fbp"
    FULLRING_FBP = "fullring_fbp"

# Report row order inside one pattern block
STAGE_ORDER = (Stage.REFINED, Stage.RECONSTRUCTED, Stage.SINOGRAM,
               Stage.INTERPOLATED, Stage.UNRESTORED, Stage.FULLRING,
               Stage.UNRESTORED_FBP, Stage.FULLRING_FBP)

class Metric:
    SSIM = "SSIM"
    PSNR = "PSNR"


@dataclass(frozen=True)
class Config:
    # Run registry
    DATABASE_URL: str = os.getenv("DATABASE_URL", "sqlite:///ringpet_runs.db")

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Runtime
    SHOW_PROGRESS: bool = os.getenv("SHOW_PROGRESS", "true").lower() in ("1", "true", "yes")
    TORCH_THREADS: int = int(os.getenv("TORCH_THREADS", 0))


# ---------------------------------------------------------------------------
# Run configuration blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryBlock:
    radius_mm: float = 253.71
    crystals_per_ring: int = 182
    num_rings: int = 4
    axial_spacing_mm: float = 5.37


@dataclass(frozen=True)
class PhantomBlock:
    size: int = 64
    voxel_mm: float = 2.78
    seed: int = 0
    volumes: int = 32
    grey: float = 4.0
    white: float = 1.0
    csf: float = 0.0
    muscle: float = 0.5
    fat: float = 0.2
    blood: float = 1.5
    perturbation: float = 0.08

    def ratios(self) -> Dict[str, float]:
        return {"grey": self.grey, "white": self.white, "csf": self.csf,
                "muscle": self.muscle, "fat": self.fat, "blood": self.blood}


@dataclass(frozen=True)
class MaskBlock:
    gaps: Tuple[Tuple[float, float], ...] = field(default=(), metadata={"kind": "intervals"})
    rings: Tuple[int, ...] = field(default=(), metadata={"kind": "ints"})
    pattern: int = 0
    full_ring: bool = False


@dataclass(frozen=True)
class SimulateBlock:
    events_per_slice: float = 1.0e6
    n_scale: float = 0.0
    efficiency_spread: float = 0.10
    efficiency_seed: int = 11
    noise_seed: int = 12
    background: float = 0.0
    listmode: bool = False


@dataclass(frozen=True)
class Stage1Block:
    width_scale: float = 0.125
    depth: int = 4
    lr: float = 1.0e-4
    weight_decay: float = 1.0e-5
    plateau_factor: float = 0.3
    plateau_patience: int = 3
    min_lr: float = 1.0e-7
    epochs: int = 40
    batch: int = 8
    loss: str = "mse"
    seed: int = 21
    context: str = "five"
    attention: bool = True
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ReconBlock:
    subsets: int = 7
    iterations: int = 10
    fbp: bool = True


@dataclass(frozen=True)
class Stage2Block:
    enabled: bool = True
    batch: int = 12
    lr: float = 2.0e-4
    t_train: int = 2000
    t_min: int = 10
    t_max: int = 50
    beta_start: float = 1.0e-6
    beta_end: float = 0.01
    beta_end_val: float = 0.5
    ema_decay: float = 0.9999
    ema_warmup: bool = False
    n_iter: int = 2000
    adaptive_alpha: float = 0.1
    adaptive_beta: float = 30.0
    coarse_inner: int = 64
    denoiser_inner: int = 32
    res_blocks: int = 3
    channel_mults: Tuple[int, ...] = field(default=(1, 2, 3, 4), metadata={"kind": "ints"})
    seed: int = 31


@dataclass(frozen=True)
class EvalBlock:
    folds: int = 6
    out_dir: str = "runs/default"
    patterns: Tuple[int, ...] = field(default=(1, 2, 3), metadata={"kind": "ints"})
    run_name: str = "ringpet"


_SEED_FIELDS = (("phantom", "seed"), ("simulate", "efficiency_seed"), ("simulate", "noise_seed"),
                ("stage1", "seed"), ("stage2", "seed"))


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryBlock = GeometryBlock()
    phantom: PhantomBlock = PhantomBlock()
    mask: MaskBlock = MaskBlock()
    simulate: SimulateBlock = SimulateBlock()
    stage1: Stage1Block = Stage1Block()
    recon: ReconBlock = ReconBlock()
    stage2: Stage2Block = Stage2Block()
    eval: EvalBlock = EvalBlock()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.md5(payload.encode("utf-8")).hexdigest()

    def with_overrides(self, **blocks) -> "RunConfig":
        """Return a copy with whole blocks or `section__key` values replaced."""
        updated = {}
        for key, value in blocks.items():
            if "__" in key:
                section, name = key.split("__", 1)
                base = updated.get(section, getattr(self, section))
                updated[section] = replace(base, **{name: value})
            else:
                updated[key] = value
        cfg = replace(self, **updated)
        validate_run_config(cfg)
        return cfg

    def reseeded(self, offset: int) -> "RunConfig":
        """Shift every named seed by `offset` (CLI --seed)."""
        if not offset:
            return self
        overrides = {f"{section}__{name}": getattr(getattr(self, section), name) + offset
                     for section, name in _SEED_FIELDS}
        return self.with_overrides(**overrides)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_intervals(raw: str) -> Tuple[Tuple[float, float], ...]:
    out = []
    for item in filter(None, (p.strip() for p in raw.split(","))):
        start, end = item.split(":")
        out.append((float(start), float(end)))
    return tuple(out)


def _convert(block_field, raw: str):
    kind = block_field.metadata.get("kind")
    if kind == "intervals":
        return _parse_intervals(raw)
    if kind == "ints":
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if block_field.type is bool:
        return _parse_bool(raw)
    if block_field.type is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if block_field.type is float:
        return float(raw)
    return raw.strip()


def parse_run_config(values: Dict[str, str]) -> RunConfig:
    """Build a RunConfig from flat `section.key -> raw string` pairs."""
    grouped: Dict[str, Dict[str, object]] = {}
    for dotted, raw in values.items():
        if "." not in dotted:
            raise ConfigError(f"config key '{dotted}' has no section prefix")
        section, name = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        block_fields = {f.name: f for f in fields(_SECTIONS[section])}
        if name not in block_fields:
            raise ConfigError(f"unknown config key '{dotted}'")
        if raw is None:
            raise ConfigError(f"config key '{dotted}' has no value")
        try:
            grouped.setdefault(section, {})[name] = _convert(block_fields[name], raw)
        except ValueError as e:
            raise ConfigError(f"bad value for '{dotted}': {e}") from e

    cfg = RunConfig(**{s: _SECTIONS[s](**kv) for s, kv in grouped.items()})
    validate_run_config(cfg)
    return cfg


def load_run_config(path: str) -> RunConfig:
    """Read a dotted key=value run configuration file."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(dotenv_values(path, interpolate=False))


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def validate_run_config(cfg: RunConfig):
    g = cfg.geometry
    _require(g.crystals_per_ring >= 4 and g.crystals_per_ring % 2 == 0,
             f"geometry.crystals_per_ring must be even and >= 4, got {g.crystals_per_ring}")
    _require(g.num_rings >= 1, "geometry.num_rings must be >= 1")
    _require(g.radius_mm > 0, "geometry.radius_mm must be positive")

    p = cfg.phantom
    _require(p.size >= 16, f"phantom.size must be >= 16, got {p.size}")
    _require(p.voxel_mm > 0, "phantom.voxel_mm must be positive")
    _require(p.volumes >= 1, "phantom.volumes must be >= 1")
    for name, ratio in p.ratios().items():
        _require(ratio >= 0, f"phantom.{name} ratio must be >= 0, got {ratio}")
    half_diag = p.size * p.voxel_mm / 2 * 2 ** 0.5
    _require(half_diag < g.radius_mm,
             f"field of view ({half_diag:.1f} mm half-diagonal) does not fit inside the ring")

    m = cfg.mask
    _require(m.pattern in (0, *PATTERNS), f"mask.pattern must be 0 or one of {sorted(PATTERNS)}")
    _require(not (m.full_ring and (m.pattern or m.gaps or m.rings)),
             "mask.full_ring cannot be combined with a pattern, gaps or rings")
    for start, end in m.gaps:
        _require(start < end, f"mask gap [{start}, {end}) is empty")
    for ring in m.rings:
        _require(0 <= ring < g.num_rings, f"mask ring {ring} outside [0, {g.num_rings})")

    s = cfg.simulate
    _require(s.events_per_slice > 0 or s.n_scale > 0, "simulate needs events_per_slice or n_scale")
    _require(s.efficiency_spread >= 0, "simulate.efficiency_spread must be >= 0")
    _require(s.background >= 0, "simulate.background must be >= 0")

    s1 = cfg.stage1
    _require(s1.width_scale > 0, "stage1.width_scale must be positive")
    _require(s1.depth >= 1, "stage1.depth must be >= 1")
    _require(s1.loss in ("mse", "mae"), f"stage1.loss must be mse or mae, got {s1.loss}")
    _require(s1.context in ("five", "single"), f"stage1.context must be five or single, got {s1.context}")
    _require(0 < s1.plateau_factor < 1, "stage1.plateau_factor must be in (0, 1)")
    _require(s1.plateau_patience >= 1, "stage1.plateau_patience must be >= 1")
    _require(s1.epochs >= 1 and s1.batch >= 1, "stage1.epochs and stage1.batch must be >= 1")
    _require(0 <= s1.val_fraction < 1, "stage1.val_fraction must be in [0, 1)")

    r = cfg.recon
    _require(1 <= r.subsets <= g.crystals_per_ring,
             f"recon.subsets must be in [1, {g.crystals_per_ring}], got {r.subsets}")
    _require(r.iterations >= 1, "recon.iterations must be >= 1")

    s2 = cfg.stage2
    _require(0 < s2.beta_start <= s2.beta_end < 1, "stage2 betas must satisfy 0 < start <= end < 1")
    _require(1 <= s2.t_min < s2.t_max <= s2.t_train, "stage2 needs 1 <= t_min < t_max <= t_train")
    _require(0 < s2.ema_decay < 1, "stage2.ema_decay must be in (0, 1)")
    _require(s2.batch >= 1 and s2.n_iter >= 1, "stage2.batch and stage2.n_iter must be >= 1")
    _require(len(s2.channel_mults) >= 1, "stage2.channel_mults must not be empty")

    e = cfg.eval
    _require(2 <= e.folds <= p.volumes, f"eval.folds must be in [2, {p.volumes}], got {e.folds}")
    for pattern in e.patterns:
        _require(pattern in PATTERNS, f"eval pattern {pattern} is not one of {sorted(PATTERNS)}")


# Global Config Instance
settings = Config()
