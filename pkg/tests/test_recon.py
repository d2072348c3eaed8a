import numpy as np
import pytest

from app.core.config import PATTERNS
from app.core.errors import ConfigError, DegenerateModelError, ShapeError
from app.services.geometry_service import ScannerGeometry, build_masks, pair_table, reachable_bins
from app.services.metrics_service import psnr
from app.services.phantom_service import make_disk_image
from app.services.projector_service import ProjectorService, ray_matrix
from app.services.recon_service import ReconService, build_system_model, fbp_reconstruct


@pytest.fixture
def model64(geom64):
    return build_system_model(geom64, 64, 3.0)


@pytest.fixture
def model32(geom64):
    return build_system_model(geom64, 32, 4.0)


def test_zero_inputs_give_zero_outputs(model64):
    assert not model64.project(np.zeros((64, 64))).any()
    assert not model64.backproject(np.zeros(model64.geom.sinogram_shape)).any()


def test_projector_and_backprojector_are_adjoint(model64, rng):
    for _ in range(20):
        x = rng.random((64, 64))
        y = rng.random(model64.geom.sinogram_shape)
        lhs = float(np.sum(model64.project(x) * y))
        rhs = float(np.sum(x * model64.backproject(y)))
        assert abs(lhs - rhs) / (abs(lhs) + 1e-30) < 1e-6


def test_weights_are_non_negative(model64):
    assert model64.A.data.min() >= 0.0


def test_grid_mismatch_is_a_shape_error(model32):
    with pytest.raises(ShapeError):
        model32.project(np.zeros((16, 16)))
    with pytest.raises(ShapeError):
        model32.backproject(np.zeros((8, 8)))


def test_hot_voxel_reaches_only_crossing_bins(model32):
    x = np.zeros((32, 32))
    x[10, 21] = 1.0
    y = model32.project(x)
    column = model32.A[:, 10 * 32 + 21].toarray().ravel()
    np.testing.assert_array_equal(model32.gather(y) > 0, column > 0)
    assert not y.ravel()[np.setdiff1d(np.arange(y.size), model32.rows)].any()


def test_ray_through_center_has_chord_length(geom64):
    D = geom64.crystals_per_ring
    G = ray_matrix(geom64, 32, 4.0, [0], [D // 2])
    assert G.sum() == pytest.approx(32 * 4.0)


def test_crossing_mask_matches_ray_support(geom64):
    proj = ProjectorService(geom64, 32, 4.0)
    crossing = proj.crosses_fov()
    assert crossing.any() and not crossing.all()


def test_fov_must_fit_inside_the_ring(geom64):
    with pytest.raises(ConfigError):
        build_system_model(geom64, 128, 4.0)


def test_subset_count_is_validated(model32):
    service = ReconService(model32)
    y = np.zeros(model32.geom.sinogram_shape)
    for bad in (0, 65):
        with pytest.raises(ConfigError):
            service.osem_reconstruct(y, n_subsets=bad, n_iters=1)


def test_subsets_interleave_angles(model32):
    subsets = ReconService(model32).subsets(4)
    angles = model32.row_angles
    for k, idx in enumerate(subsets):
        assert np.all(angles[idx] % 4 == k)
    assert sum(len(s) for s in subsets) == len(model32.rows)


def test_zero_sensitivity_is_degenerate(geom64):
    model = build_system_model(geom64, 32, 4.0, pair_weights=np.zeros(len(pair_table(geom64))))
    with pytest.raises(DegenerateModelError):
        ReconService(model).osem_reconstruct(np.ones(geom64.sinogram_shape), n_subsets=1, n_iters=1)


def test_zero_data_gives_zero_image(model32):
    x = ReconService(model32).osem_reconstruct(np.zeros(model32.geom.sinogram_shape), n_subsets=1,
                                               n_iters=1, x0=np.ones((32, 32)))
    assert not x.any()


@pytest.mark.parametrize("noisy", [False, True])
def test_mlem_log_likelihood_never_decreases(model32, rng, noisy):
    truth = make_disk_image(32, 10.0, value=5.0)
    y = model32.project(truth)
    if noisy:
        y = rng.poisson(y).astype(np.float64)
    service = ReconService(model32)
    values = []
    x = service.mlem_reconstruct(y, n_iters=50, callback=lambda it, img: values.append(service.log_likelihood(y, img)))
    assert len(values) == 50
    for before, after in zip(values, values[1:]):
        assert after >= before - 1e-9 * abs(before)
    assert np.all(x >= 0)


def test_osem_iterates_stay_non_negative(model32, rng):
    y = rng.poisson(model32.project(make_disk_image(32, 9.0, value=3.0))).astype(np.float64)
    seen = []
    ReconService(model32).osem_reconstruct(y, n_subsets=8, n_iters=5, callback=lambda it, img: seen.append(img.min()))
    assert min(seen) >= 0.0


def test_mlem_fits_a_hot_voxel(geom64):
    model = build_system_model(geom64, 16, 4.0)
    x = np.zeros((16, 16))
    x[6, 9] = 10.0
    y = model.project(x)
    service = ReconService(model)
    x_hat = service.mlem_reconstruct(y, n_iters=50)
    residual = np.abs(model.project(x_hat) - y).sum() / np.abs(y).sum()
    assert residual < 0.01


def test_fbp_is_linear(model32, rng):
    y1 = model32.project(rng.random((32, 32)))
    y2 = model32.project(rng.random((32, 32)))
    combined = fbp_reconstruct(2.0 * y1 - 0.5 * y2, model32)
    separate = 2.0 * fbp_reconstruct(y1, model32) - 0.5 * fbp_reconstruct(y2, model32)
    assert np.abs(combined - separate).max() <= 1e-6 * np.abs(separate).max()


def test_fbp_of_zero_is_zero(model32):
    assert not fbp_reconstruct(np.zeros(model32.geom.sinogram_shape), model32).any()


@pytest.fixture(scope="module")
def full_ring_model():
    geom = ScannerGeometry(crystals_per_ring=182, num_rings=1)
    return build_system_model(geom, 64, 4.0)


def test_fbp_recovers_uniform_disk(full_ring_model):
    disk = make_disk_image(64, 20.0, value=1.0)
    image = fbp_reconstruct(full_ring_model.project(disk), full_ring_model)
    c = np.arange(64) - 31.5
    inner = np.hypot(*np.meshgrid(c, c, indexing="ij")) < 14.0
    assert image[inner].mean() == pytest.approx(1.0, rel=0.10)


def test_masked_fbp_loses_quality(full_ring_model):
    geom = full_ring_model.geom
    disk = make_disk_image(64, 20.0, value=1.0)
    complete = full_ring_model.project(disk)
    _, bin_mask = build_masks(geom, PATTERNS[1])
    masked = complete * bin_mask[0]
    assert np.any(masked[reachable_bins(geom)] != complete[reachable_bins(geom)])
    full_psnr = psnr(fbp_reconstruct(complete, full_ring_model), disk)
    masked_psnr = psnr(fbp_reconstruct(masked, full_ring_model), disk)
    assert masked_psnr < full_psnr
