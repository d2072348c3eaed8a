import numpy as np
import pytest

from app.core.errors import DataError, ShapeError
from app.services.phantom_service import PhantomSpec, make_brain_phantom
from app.services.quality_service import N_FEATURES, QualityModel, QualityService, brisque_features, mscn


def _clean_image(seed):
    image, _ = make_brain_phantom(PhantomSpec(size=48), seed=seed)
    return np.pad(image.values / image.values.max(), 8)


@pytest.fixture(scope="module")
def corpus():
    return [_clean_image(seed) for seed in range(12)]


@pytest.fixture(scope="module")
def model(corpus):
    return QualityService().fit(corpus)


def test_feature_vector_length(corpus):
    feats = brisque_features(corpus[0])
    assert feats.shape == (N_FEATURES,)
    assert np.all(np.isfinite(feats))


def test_constant_image_scores_finite(model):
    assert np.isfinite(QualityService().score(np.full((64, 64), 0.5), model))


def test_corpus_images_score_low(corpus, model):
    scores = np.array([QualityService().score(im, model) for im in corpus])
    assert np.all(scores >= 0)
    assert np.mean(scores <= 100.0 + 1e-9) >= 0.9


def test_mscn_is_zero_on_flat_regions_and_scale_free(rng):
    assert np.abs(mscn(np.full((32, 32), 0.7))).max() < 1e-6
    x = rng.random((32, 32))
    np.testing.assert_allclose(mscn(1e-3 * x), mscn(x), rtol=2e-3, atol=1e-6)


def test_mean_score_rises_with_noise_level(model):
    service = QualityService()
    gen = np.random.default_rng(77)
    images = [_clean_image(seed) for seed in range(100, 150)]
    fields = [gen.standard_normal(im.shape) for im in images]
    means = [np.mean([service.score(im + sigma * z, model) for im, z in zip(images, fields)])
             for sigma in (0.0, 0.05, 0.1, 0.2)]
    assert all(lo < hi for lo, hi in zip(means, means[1:]))
    assert means[-1] > 100.0


def test_translation_barely_changes_the_score(corpus, model):
    service = QualityService()
    base = service.score(corpus[3], model)
    shifted = service.score(np.roll(corpus[3], (4, -4), axis=(0, 1)), model)
    assert shifted == pytest.approx(base, rel=0.02)


def test_model_round_trip(tmp_path, model):
    path = tmp_path / "quality.qsta"
    model.save(path)
    loaded = QualityModel.load(path)
    np.testing.assert_array_equal(loaded.mean, model.mean)
    np.testing.assert_array_equal(loaded.cov, model.cov)


def test_invalid_inputs(corpus):
    with pytest.raises(ShapeError):
        brisque_features(np.zeros((4, 4)))
    with pytest.raises(DataError):
        brisque_features(np.full((16, 16), np.nan))
    with pytest.raises(DataError):
        QualityService().fit(corpus[:1])
    with pytest.raises(ShapeError):
        QualityModel(mean=np.zeros(3), cov=np.eye(3))
