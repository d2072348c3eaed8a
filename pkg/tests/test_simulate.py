import numpy as np
import pytest
from scipy import ndimage

from app.core.config import PATTERNS
from app.core.errors import DataError, ShapeError
from app.services.geometry_service import ScannerGeometry, build_masks
from app.services.phantom_service import make_disk_image
from app.services.simulation_service import (
    SimulationService, bin_events, filter_events, pair_counts_to_events, sample_efficiencies,
)


@pytest.fixture
def sim16(geom16):
    return SimulationService(geom16, size=16, voxel_mm=4.0)


def _disk_volume(rings, size, radius):
    return np.stack([make_disk_image(size, radius)] * rings)


def test_efficiencies_are_seeded_and_bounded(geom16):
    a = sample_efficiencies(geom16, seed=4, spread=0.3)
    b = sample_efficiencies(geom16, seed=4, spread=0.3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 16)
    assert a.min() >= 0.5
    np.testing.assert_array_equal(sample_efficiencies(geom16, seed=4, spread=0.0), np.ones((2, 16)))


def test_rates_vanish_for_empty_activity(sim16, geom16):
    eff = np.ones((2, 16))
    rates = sim16.expected_pair_rates(np.zeros((16, 16)), np.zeros((16, 16)), eff)
    assert rates.shape == (len(sim16.pairs),)
    assert not rates.any()


def test_attenuation_lowers_rates(sim16):
    eff = np.ones((2, 16))
    image = make_disk_image(16, 5.0)
    clear = sim16.expected_pair_rates(image, np.zeros_like(image), eff)
    attenuated = sim16.expected_pair_rates(image, 0.0096 * (image > 0), eff)
    assert np.all(attenuated <= clear)
    assert attenuated.sum() < clear.sum()


def test_background_only_on_lors_crossing_the_image(sim16):
    eff = np.ones((2, 16))
    image = make_disk_image(16, 5.0)
    rates = sim16.expected_pair_rates(image, np.zeros_like(image), eff, background=0.2)
    crossing = sim16.projector.crosses_fov()
    assert not rates[~crossing].any()
    assert np.all(rates[crossing] > 0)


def test_rate_inputs_are_validated(sim16):
    eff = np.ones((2, 16))
    with pytest.raises(ShapeError):
        sim16.expected_pair_rates(np.zeros((16, 16)), np.zeros((8, 8)), eff)
    with pytest.raises(DataError):
        sim16.expected_pair_rates(np.zeros((16, 16)), -np.ones((16, 16)), eff)
    with pytest.raises(DataError):
        sim16.expected_pair_rates(np.full((16, 16), np.nan), np.zeros((16, 16)), eff)


def test_poisson_sampling_is_seeded(sim16):
    rates = sim16.volume_pair_rates(_disk_volume(2, 16, 5.0), np.zeros((2, 16, 16)), np.ones((2, 16)))
    assert rates.shape == (4, len(sim16.pairs))
    a = sim16.sample_pair_counts(rates, 50.0, seed=9)
    b = sim16.sample_pair_counts(rates, 50.0, seed=9)
    c = sim16.sample_pair_counts(rates, 50.0, seed=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_auto_scale_hits_requested_event_count(sim16):
    rates = sim16.volume_pair_rates(_disk_volume(2, 16, 5.0), np.zeros((2, 16, 16)), np.ones((2, 16)))
    scale = SimulationService.auto_scale(rates, 1.0e5)
    assert (scale * rates).sum() / 4 == pytest.approx(1.0e5)


def test_listmode_binning_matches_direct_binning(sim16, geom16):
    rates = sim16.volume_pair_rates(_disk_volume(2, 16, 5.0), np.zeros((2, 16, 16)), np.ones((2, 16)))
    counts = sim16.sample_pair_counts(rates, 20.0, seed=1)
    events = pair_counts_to_events(geom16, counts)
    assert events.shape == (counts.sum(), 4)
    np.testing.assert_array_equal(bin_events(geom16, events), sim16.bin_pair_counts(counts))


def test_event_endpoints_are_canonicalized(geom16):
    events = np.array([[0, 2, 1, 9]], dtype=np.uint16)
    swapped = np.array([[1, 9, 0, 2]], dtype=np.uint16)
    np.testing.assert_array_equal(bin_events(geom16, events), bin_events(geom16, swapped))
    assert bin_events(geom16, events)[1].sum() == 1


@pytest.mark.parametrize("bad", [[[0, 3, 0, 3]], [[0, 16, 0, 2]], [[2, 1, 0, 2]]])
def test_bad_events_are_rejected(geom16, bad):
    with pytest.raises(DataError):
        bin_events(geom16, np.array(bad))


def test_invalid_bins_receive_no_events(sim16, geom16):
    rates = sim16.volume_pair_rates(_disk_volume(2, 16, 6.0), np.zeros((2, 16, 16)), np.ones((2, 16)))
    counts = sim16.sample_pair_counts(rates, 500.0, seed=3)
    mask, bin_mask = build_masks(geom16, PATTERNS[1])
    masked = sim16.bin_pair_counts(sim16.discard_inactive(counts, mask))
    assert not masked[~bin_mask].any()

    kept = filter_events(geom16, pair_counts_to_events(geom16, counts), mask)
    np.testing.assert_array_equal(bin_events(geom16, kept), masked)


def test_masking_equals_bin_mask_product_without_background():
    geom = ScannerGeometry(crystals_per_ring=64, num_rings=1)
    sim = SimulationService(geom, size=32, voxel_mm=4.0)
    image = make_disk_image(32, 12.0)
    rates = sim.volume_pair_rates(image[None], np.zeros((1, 32, 32)), np.ones((1, 64)))
    counts = sim.sample_pair_counts(rates, 100.0, seed=2)
    mask, bin_mask = build_masks(geom, PATTERNS[1])
    complete = sim.bin_pair_counts(counts)
    masked = sim.bin_pair_counts(sim.discard_inactive(counts, mask))
    np.testing.assert_array_equal(masked, complete * bin_mask)


def test_efficiency_statistics_over_ten_thousand_crystals():
    geom = ScannerGeometry(crystals_per_ring=250, num_rings=40)
    eff = sample_efficiencies(geom, seed=21)
    assert eff.size == 10_000
    assert 0.99 <= eff.mean() <= 1.01
    assert 0.09 <= eff.std() <= 0.11


def test_doubling_activity_doubles_every_rate(sim16, rng):
    eff = sample_efficiencies(sim16.geom, seed=6)
    image = make_disk_image(16, 5.0) * (1.0 + rng.random((16, 16)))
    mu = 0.0096 * (image > 0)
    for background in (0.0, 0.1):
        single = sim16.expected_pair_rates(image, mu, eff, background=background)
        double = sim16.expected_pair_rates(2.0 * image, mu, eff, background=background)
        np.testing.assert_array_equal(double, 2.0 * single)


def test_diametric_pairs_see_the_same_disk_from_every_angle():
    geom = ScannerGeometry(crystals_per_ring=64, num_rings=1)
    sim = SimulationService(geom, size=96, voxel_mm=3.0)
    disk = ndimage.gaussian_filter(make_disk_image(96, 36.0), 3.0)
    rates = sim.expected_pair_rates(disk, np.zeros_like(disk), np.ones((1, 64)))
    diametric = rates[(sim.pairs.j - sim.pairs.i) == 32]
    assert diametric.size == 32
    assert diametric.max() / diametric.min() - 1.0 < 1e-3


def test_event_total_follows_poisson_statistics(sim16, geom16):
    rates = sim16.volume_pair_rates(_disk_volume(2, 16, 6.0), np.zeros((2, 16, 16)), np.ones((2, 16)))
    mask, _ = build_masks(geom16, PATTERNS[1])
    n_scale = 200.0
    active = sim16.discard_inactive(rates, mask)
    expected = n_scale * active.sum()
    for seed in range(5):
        events = sim16.generate_listmode(rates, mask, n_scale, seed=seed)
        assert abs(events.shape[0] - expected) < 4.0 * np.sqrt(expected)
