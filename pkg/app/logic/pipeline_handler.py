"""
Pipeline Handler - Core Experiment Logic.
Orchestrates the run: phantoms, simulation, masking, stage-1 completion, reconstruction,
stage-2 refinement, evaluation and the report. Every stage reads the previous stage's
artifacts from the run directory, so each subcommand can be re-run on its own.
"""
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from app.core.config import PATTERNS, RunConfig, Stage, settings
from app.core.errors import StageError
from app.core.logger import logger
from app.db.session import SessionLocal, init_db
from app.logic.stage1_trainer import Stage1Trainer, build_stage1_dataset, complete_volume
from app.logic.stage2_trainer import Stage2Trainer, build_stage2_pairs, refine_image, schedule_from_block
from app.repositories.run_repo import RunRepository
from app.services import storage_service
from app.services.baseline_service import interpolate_volume
from app.services.geometry_service import ScannerGeometry, build_masks, direct_slices, reachable_bins
from app.services.metrics_service import aggregate_report, metric_rows
from app.services.phantom_service import PhantomSpec, make_phantom_volume
from app.services.quality_service import QualityModel, QualityService
from app.services.recon_service import ReconService, build_system_model, fbp_reconstruct
from app.services.simulation_service import (SimulationService, bin_events, filter_events,
                                             pair_counts_to_events, sample_efficiencies)
from app.services.stack_service import kfold_split, manifest_frame, split_validation
from app.services.storage_service import StorageService

METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.csv"
SIMULATION_FILE = "simulation.csv"
MANIFEST_FILE = "manifest.csv"


@dataclass(eq=False)
class PipelineServices:
    geom: ScannerGeometry
    simulation: SimulationService
    storage: StorageService
    quality: QualityService


# Service Instances (one set per configuration)
_services: Dict[Tuple[str, str], PipelineServices] = {}


def get_services(cfg: RunConfig) -> PipelineServices:
    """Lazy initialization of services."""
    key = (cfg.digest(), cfg.eval.out_dir)
    if key not in _services:
        geom = ScannerGeometry.from_block(cfg.geometry)
        _services[key] = PipelineServices(
            geom=geom,
            simulation=SimulationService(geom, cfg.phantom.size, cfg.phantom.voxel_mm),
            storage=StorageService(cfg.eval.out_dir),
            quality=QualityService(),
        )
        if settings.TORCH_THREADS:
            torch.set_num_threads(settings.TORCH_THREADS)
    return _services[key]


def scheduled_patterns(cfg: RunConfig) -> List[Tuple[int, tuple]]:
    """
    Gap sets to evaluate: the selected named pattern, else the configured custom gaps/rings
    (reported as pattern 0), else every pattern listed in the eval block. With mask.full_ring the
    only schedule is the complete ring, also reported as pattern 0.
    """
    if cfg.mask.full_ring:
        return [(0, ())]
    if cfg.mask.pattern:
        return [(cfg.mask.pattern, PATTERNS[cfg.mask.pattern])]
    if cfg.mask.gaps or cfg.mask.rings:
        return [(0, cfg.mask.gaps)]
    return [(p, PATTERNS[p]) for p in cfg.eval.patterns]


def _volume_ids(cfg: RunConfig) -> range:
    return range(cfg.phantom.volumes)


def _progress(items, desc: str):
    return tqdm(items, desc=desc, disable=not settings.SHOW_PROGRESS)


# ---------------------------------------------------------------------------
# Artifact names
# ---------------------------------------------------------------------------

def _act(vid): return f"activity_{vid:03d}.img"
def _mu(vid): return f"mu_{vid:03d}.img"
def _complete(vid): return f"complete_{vid:03d}.sino"
def _events(vid): return f"events_{vid:03d}.lm"
def _masked(p, vid): return f"masked_p{p}_{vid:03d}.sino"
def _completed(p, vid): return f"completed_p{p}_{vid:03d}.sino"
def _interp(p, vid): return f"interpolated_p{p}_{vid:03d}.sino"
def _recon(stage, vid, p=None): return f"{stage}_{vid:03d}.img" if p is None else f"{stage}_p{p}_{vid:03d}.img"
def _refined(p, vid): return f"refined_p{p}_{vid:03d}.img"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_phantom(cfg: RunConfig) -> int:
    svc = get_services(cfg)
    spec = PhantomSpec.from_block(cfg.phantom)
    R = cfg.geometry.num_rings
    previews = []
    for vid in _progress(_volume_ids(cfg), "phantom"):
        activity, mu = make_phantom_volume(spec, cfg.phantom.seed + vid, R)
        svc.storage.save_volume_image("phantoms", _act(vid), activity, spec.voxel_mm)
        svc.storage.save_volume_image("phantoms", _mu(vid), mu, spec.voxel_mm)
        if vid < 4:
            previews.extend([activity[0], mu[0]])
    storage_service.write_pgm_grid(svc.storage.path("figures", "phantoms.pgm"), previews)
    logger.info(f"Generated {cfg.phantom.volumes} phantom volumes ({R} rings, {spec.size}x{spec.size})")
    return cfg.phantom.volumes


def stage_simulate(cfg: RunConfig) -> pd.DataFrame:
    svc = get_services(cfg)
    s = cfg.simulate
    eff = sample_efficiencies(svc.geom, s.efficiency_seed, s.efficiency_spread)
    rows = []
    for vid in _progress(_volume_ids(cfg), "simulate"):
        activity = svc.storage.load_volume_image("phantoms", _act(vid)).values
        mu = svc.storage.load_volume_image("phantoms", _mu(vid)).values
        rates = svc.simulation.volume_pair_rates(activity, mu, eff, background=s.background)
        n_scale = s.n_scale or SimulationService.auto_scale(rates, s.events_per_slice)
        counts = svc.simulation.sample_pair_counts(rates, n_scale, s.noise_seed + vid)
        svc.storage.save_sinogram("sinograms", _complete(vid), svc.simulation.bin_pair_counts(counts))
        if s.listmode:
            events = pair_counts_to_events(svc.geom, counts)
            storage_service.write_listmode(svc.storage.path("sinograms", _events(vid)), events, svc.geom.digest())
        rows.append({"volume_id": vid, "n_scale": n_scale, "events": int(counts.sum())})
    frame = pd.DataFrame(rows)
    svc.storage.save_frame(SIMULATION_FILE, frame)
    return frame


def stage_mask(cfg: RunConfig) -> int:
    svc = get_services(cfg)
    written = 0
    for p, gaps in scheduled_patterns(cfg):
        detector_mask, bin_mask = build_masks(svc.geom, gaps, cfg.mask.rings)
        for vid in _progress(_volume_ids(cfg), f"mask p{p}"):
            if cfg.simulate.listmode:
                events = storage_service.read_listmode(svc.storage.path("sinograms", _events(vid)), svc.geom.digest())
                masked = bin_events(svc.geom, filter_events(svc.geom, events, detector_mask))
            else:
                masked = svc.storage.load_sinogram("sinograms", _complete(vid)).values * bin_mask
            svc.storage.save_sinogram("sinograms", _masked(p, vid), masked, bin_mask)
            written += 1
    return written


def _fold_split(cfg: RunConfig):
    return kfold_split(list(_volume_ids(cfg)), cfg.eval.folds, cfg.stage1.seed)


def stage_complete(cfg: RunConfig) -> pd.DataFrame:
    svc = get_services(cfg)
    split = _fold_split(cfg)
    reach = reachable_bins(svc.geom)
    complete = {vid: svc.storage.load_sinogram("sinograms", _complete(vid)).values for vid in _volume_ids(cfg)}
    paths: Dict[int, Dict[str, str]] = {vid: {"complete": str(svc.storage.path("sinograms", _complete(vid)))}
                                        for vid in _volume_ids(cfg)}

    for p, _ in scheduled_patterns(cfg):
        masked, masks = {}, {}
        for vid in _volume_ids(cfg):
            art = svc.storage.load_sinogram("sinograms", _masked(p, vid))
            masked[vid], masks[vid] = art.values, art.mask
        for fold in range(split.k):
            fit_ids, val_ids = split_validation(split.train_ids(fold), cfg.stage1.val_fraction, cfg.stage1.seed + fold)
            train = build_stage1_dataset(masked, complete, fit_ids, cfg.stage1.context)
            val = build_stage1_dataset(masked, complete, val_ids, cfg.stage1.context) if val_ids else None
            result = Stage1Trainer(cfg.stage1).fit(
                train, val, checkpoint_path=svc.storage.path("models", f"stage1_p{p}_f{fold}.ckpt"))
            svc.storage.save_frame(f"models/stage1_p{p}_f{fold}_history.csv", result.history)

            for vid in split.test_ids(fold):
                completed = complete_volume(result.model, masked[vid], masks[vid], reach, cfg.stage1.context)
                interpolated = interpolate_volume(masked[vid], masks[vid], reach)
                svc.storage.save_sinogram("completed", _completed(p, vid), completed, masks[vid])
                svc.storage.save_sinogram("completed", _interp(p, vid), interpolated, masks[vid])
                paths[vid][f"completed_p{p}"] = str(svc.storage.path("completed", _completed(p, vid)))
            logger.info(f"Pattern {p}, fold {fold}: completed {len(split.test_ids(fold))} held-out volumes")

        j = int(direct_slices(svc.geom)[0])
        first = split.test_ids(0)[0]
        storage_service.write_pgm_grid(svc.storage.path("figures", f"sinograms_p{p}.pgm"), [
            complete[first][j], masked[first][j],
            svc.storage.load_sinogram("completed", _interp(p, first)).values[j],
            svc.storage.load_sinogram("completed", _completed(p, first)).values[j],
        ])

    manifest = manifest_frame(split, paths)
    svc.storage.save_frame(MANIFEST_FILE, manifest)
    return manifest


def _slice_weights(svc: PipelineServices, eff: np.ndarray, mu_ring: np.ndarray, ring: int, n_scale: float) -> np.ndarray:
    """Per-pair factors of a direct slice: efficiencies, attenuation and the count scale."""
    return svc.simulation.pair_efficiency(eff, ring, ring) * svc.simulation.attenuation(mu_ring) * n_scale


def stage_recon(cfg: RunConfig) -> int:
    svc = get_services(cfg)
    rc = cfg.recon
    size, voxel = cfg.phantom.size, cfg.phantom.voxel_mm
    eff = sample_efficiencies(svc.geom, cfg.simulate.efficiency_seed, cfg.simulate.efficiency_spread)
    scales = svc.storage.load_frame(SIMULATION_FILE).set_index("volume_id")["n_scale"]
    patterns = scheduled_patterns(cfg)
    slices = direct_slices(svc.geom)

    for vid in _progress(_volume_ids(cfg), "recon"):
        mu = svc.storage.load_volume_image("phantoms", _mu(vid)).values
        complete = svc.storage.load_sinogram("sinograms", _complete(vid)).values
        masked = {p: svc.storage.load_sinogram("sinograms", _masked(p, vid)) for p, _ in patterns}
        completed = {p: svc.storage.load_sinogram("completed", _completed(p, vid)).values for p, _ in patterns}

        out: Dict[Tuple[str, Optional[int]], np.ndarray] = {}
        def put(stage, p, ring, image):
            out.setdefault((stage, p), np.zeros((len(slices), size, size)))[ring] = image

        for ring, j in enumerate(slices):
            w = _slice_weights(svc, eff, mu[ring], ring, float(scales[vid]))
            full_model = build_system_model(svc.geom, size, voxel, pair_weights=w)
            full = ReconService(full_model)
            put(Stage.FULLRING, None, ring, full.osem_reconstruct(complete[j], rc.subsets, rc.iterations))
            if rc.fbp:
                put(Stage.FULLRING_FBP, None, ring, fbp_reconstruct(complete[j], full_model))
            for p, _ in patterns:
                put(Stage.RECONSTRUCTED, p, ring, full.osem_reconstruct(completed[p][j], rc.subsets, rc.iterations))
                masked_model = build_system_model(svc.geom, size, voxel, bin_mask=masked[p].mask[j], pair_weights=w)
                y = masked[p].values[j]
                put(Stage.UNRESTORED, p, ring, ReconService(masked_model).osem_reconstruct(y, rc.subsets, rc.iterations))
                if rc.fbp:
                    put(Stage.UNRESTORED_FBP, p, ring, fbp_reconstruct(y, masked_model))

        for (stage, p), volume in out.items():
            svc.storage.save_volume_image("recon", _recon(stage, vid, p), volume, voxel)

    logger.info(f"Reconstructed {cfg.phantom.volumes} volumes ({len(slices)} direct slices each, "
                f"OSEM {rc.subsets} subsets x {rc.iterations} iterations)")
    return cfg.phantom.volumes


def _normalized(image: np.ndarray) -> np.ndarray:
    peak = float(image.max())
    return image / peak if peak > 0 else image


def stage_quality(cfg: RunConfig) -> QualityModel:
    """Pristine statistics from the full-ring OSEM images, normalized to unit peak."""
    svc = get_services(cfg)
    images = [_normalized(im) for vid in _volume_ids(cfg)
              for im in svc.storage.load_volume_image("recon", _recon(Stage.FULLRING, vid)).values]
    model = svc.quality.fit(images)
    model.save(svc.storage.path("models", "quality.qsta"))
    return model


def stage_refine(cfg: RunConfig) -> int:
    svc = get_services(cfg)
    if not cfg.stage2.enabled:
        logger.info("Stage-2 refinement disabled; skipping")
        return 0
    quality_path = svc.storage.path("models", "quality.qsta")
    model = QualityModel.load(quality_path) if quality_path.exists() else stage_quality(cfg)
    split = _fold_split(cfg)
    schedule = schedule_from_block(cfg.stage2)
    voxel = cfg.phantom.voxel_mm
    truth = {vid: svc.storage.load_volume_image("phantoms", _act(vid)).values for vid in _volume_ids(cfg)}

    for p, _ in scheduled_patterns(cfg):
        recon = {vid: svc.storage.load_volume_image("recon", _recon(Stage.RECONSTRUCTED, vid, p)).values
                 for vid in _volume_ids(cfg)}
        previews = []
        for fold in range(split.k):
            train_ids = split.train_ids(fold)
            pairs = build_stage2_pairs([im for vid in train_ids for im in recon[vid]],
                                       [im for vid in train_ids for im in truth[vid]])
            result = Stage2Trainer(cfg.stage2).fit(
                pairs, checkpoint_path=svc.storage.path("models", f"stage2_p{p}_f{fold}.ckpt"))
            svc.storage.save_frame(f"models/stage2_p{p}_f{fold}_history.csv", result.history)

            for vid in split.test_ids(fold):
                refined = np.stack([
                    refine_image(result.nets, im, cfg.stage2, model, ema=result.ema,
                                 seed=cfg.stage2.seed + vid, schedule=schedule).image
                    for im in recon[vid]
                ])
                svc.storage.save_volume_image("refined", _refined(p, vid), refined, voxel)
                if len(previews) < 3:
                    previews.append((truth[vid][0], recon[vid][0], refined[0]))
        storage_service.write_pgm_grid(svc.storage.path("figures", f"images_p{p}.pgm"),
                                       [im for triple in previews for im in triple], columns=3)
    return cfg.phantom.volumes


def _image_stages(cfg: RunConfig) -> List[str]:
    stages = [Stage.RECONSTRUCTED, Stage.UNRESTORED, Stage.FULLRING]
    if cfg.stage2.enabled:
        stages.insert(0, Stage.REFINED)
    if cfg.recon.fbp:
        stages += [Stage.UNRESTORED_FBP, Stage.FULLRING_FBP]
    return stages


def expected_groups(cfg: RunConfig) -> List[Tuple[int, str]]:
    stages = [Stage.SINOGRAM, Stage.INTERPOLATED] + _image_stages(cfg)
    return [(p, stage) for p, _ in scheduled_patterns(cfg) for stage in stages]


def _load_image_stage(svc: PipelineServices, stage: str, vid: int, p: int) -> np.ndarray:
    if stage == Stage.REFINED:
        return svc.storage.load_volume_image("refined", _refined(p, vid)).values
    if stage in (Stage.FULLRING, Stage.FULLRING_FBP):
        return svc.storage.load_volume_image("recon", _recon(stage, vid)).values
    return svc.storage.load_volume_image("recon", _recon(stage, vid, p)).values


def stage_eval(cfg: RunConfig, run_id: Optional[int] = None) -> pd.DataFrame:
    """Per-slice PSNR/SSIM rows: sinograms against the complete data, images against the phantom."""
    svc = get_services(cfg)
    rows: List[dict] = []
    for p, _ in scheduled_patterns(cfg):
        for vid in _progress(_volume_ids(cfg), f"eval p{p}"):
            complete = svc.storage.load_sinogram("sinograms", _complete(vid)).values
            completed = svc.storage.load_sinogram("completed", _completed(p, vid)).values
            interpolated = svc.storage.load_sinogram("completed", _interp(p, vid)).values
            for j in range(complete.shape[0]):
                rows += metric_rows(p, Stage.SINOGRAM, vid, j, completed[j], complete[j])
                rows += metric_rows(p, Stage.INTERPOLATED, vid, j, interpolated[j], complete[j])

            truth = svc.storage.load_volume_image("phantoms", _act(vid)).values
            for stage in _image_stages(cfg):
                images = _load_image_stage(svc, stage, vid, p)
                for ring in range(truth.shape[0]):
                    rows += metric_rows(p, stage, vid, ring, images[ring], truth[ring])

    frame = pd.DataFrame(rows, columns=["pattern", "stage", "metric", "volume_id", "slice_id", "value"])
    svc.storage.save_frame(METRICS_FILE, frame)

    init_db()
    db = SessionLocal()
    try:
        repo = RunRepository(db)
        if run_id is None:
            run_id = _ensure_run(repo, cfg).id
        repo.replace_metrics(run_id, frame.to_dict("records"))
    finally:
        db.close()
    return frame


def stage_report(cfg: RunConfig) -> pd.DataFrame:
    svc = get_services(cfg)
    items = svc.storage.load_frame(METRICS_FILE)
    report = aggregate_report(items, expected_groups(cfg))
    svc.storage.save_frame(REPORT_FILE, report)
    logger.info(f"Report (context={cfg.stage1.context}, attention={cfg.stage1.attention}):\n"
                f"{report.to_string(index=False)}")
    return report


STAGES: Dict[str, Callable[[RunConfig], object]] = {
    "phantom": stage_phantom,
    "simulate": stage_simulate,
    "mask": stage_mask,
    "complete": stage_complete,
    "recon": stage_recon,
    "quality": stage_quality,
    "refine": stage_refine,
    "eval": stage_eval,
    "report": stage_report,
}


def run_stage(name: str, cfg: RunConfig, **kwargs):
    """Run one stage; any failure is re-raised as StageError naming the stage."""
    try:
        logger.info(f"Stage '{name}' started")
        result = STAGES[name](cfg, **kwargs)
        logger.info(f"Stage '{name}' finished")
        return result
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        if isinstance(e, StageError):
            raise
        raise StageError(name, e) from e


def _ensure_run(repo: RunRepository, cfg: RunConfig):
    run = repo.latest_run(cfg.eval.out_dir)
    if run is None or run.config_digest != cfg.digest():
        run = repo.create_run(cfg.eval.run_name, cfg.digest(), cfg.to_dict(), cfg.eval.out_dir)
    return run


def run_pipeline(cfg: RunConfig) -> pd.DataFrame:
    """Execute every stage in order, recording the run in the registry."""
    init_db()
    db = SessionLocal()
    repo = RunRepository(db)
    run = repo.create_run(cfg.eval.run_name, cfg.digest(), cfg.to_dict(), cfg.eval.out_dir)
    try:
        results = {}
        for name in STAGES:
            kwargs = {"run_id": run.id} if name == "eval" else {}
            results[name] = run_stage(name, cfg, **kwargs)
        report = results["report"]
        repo.complete_run(run.id)
        return report
    except StageError as e:
        repo.fail_run(run.id, e.stage, str(e.cause))
        raise
    finally:
        db.close()


def with_run_dir(cfg: RunConfig, out_dir: Optional[str]) -> RunConfig:
    if not out_dir:
        return cfg
    return replace(cfg, eval=replace(cfg.eval, out_dir=out_dir))
