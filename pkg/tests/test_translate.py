import numpy as np
import pytest

import pullseg.data
import pullseg.numerics
import pullseg.translate
from pullseg.utils import errors


def test_zero_beta_is_identity(random_image):
    src, trg = random_image(32, 32, 1), random_image(32, 32, 2)
    out = pullseg.translate.fda_translate(src, trg, 0.0, clamp=False)
    assert np.max(np.abs(out - src)) < 1e-9


def test_dc_swap_between_constant_images():
    src = np.full((32, 32, 3), 0.2)
    trg = np.full((32, 32, 3), 0.8)
    for beta in (0.01, 0.5):
        out = pullseg.translate.fda_translate(src, trg, beta)
        assert np.allclose(out, 0.8, atol=1e-9)


def test_full_band_takes_every_target_amplitude(random_image):
    src, trg = random_image(32, 32, 5), random_image(32, 32, 6)
    out = pullseg.translate.fda_translate(src, trg, 1.0, clamp=False)
    for channel in range(3):
        got = pullseg.numerics.dft2(out[:, :, channel])
        src_spec = pullseg.numerics.dft2(src[:, :, channel])
        trg_spec = pullseg.numerics.dft2(trg[:, :, channel])
        assert np.allclose(np.abs(got), np.abs(trg_spec), atol=1e-9)
        assert np.allclose(got, np.abs(trg_spec) * np.exp(1j * np.angle(src_spec)), atol=1e-8)


def test_spectral_contract():
    gen = np.random.default_rng(8)
    for _ in range(20):
        src = gen.uniform(size=(32, 32, 3))
        trg = gen.uniform(size=(32, 32, 3))
        beta = float(gen.uniform(0.0, 0.3))
        band = np.fft.ifftshift(pullseg.numerics.centered_band(32, 32, beta))
        out = pullseg.translate.fda_translate(src, trg, beta, clamp=False)
        for channel in range(3):
            src_spec = pullseg.numerics.dft2(src[:, :, channel])
            trg_spec = pullseg.numerics.dft2(trg[:, :, channel])
            got = pullseg.numerics.dft2(out[:, :, channel])
            amplitude = np.where(band, np.abs(trg_spec), np.abs(src_spec))
            expected = amplitude * np.exp(1j * np.angle(src_spec))
            assert np.max(np.abs(got - expected)) < 1e-8


def test_translating_twice_keeps_the_band_amplitude(random_image):
    src, trg = random_image(32, 32, 11), random_image(32, 32, 12)
    beta = 0.2
    band = np.fft.ifftshift(pullseg.numerics.centered_band(32, 32, beta))
    once = pullseg.translate.fda_translate(src, trg, beta, clamp=False)
    twice = pullseg.translate.fda_translate(once, trg, beta, clamp=False)
    assert np.max(np.abs(twice - once)) < 1e-9
    for channel in range(3):
        first = np.abs(pullseg.numerics.dft2(once[:, :, channel]))
        second = np.abs(pullseg.numerics.dft2(twice[:, :, channel]))
        assert np.max(np.abs(first[band] - second[band])) < 1e-8


def test_fda_output_is_clamped(random_image):
    out = pullseg.translate.fda_translate(random_image(32, 32, 3), random_image(32, 32, 4), 0.3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_fda_shape_mismatch(random_image):
    with pytest.raises(errors.ShapeMismatch):
        pullseg.translate.fda_translate(random_image(32, 32), random_image(16, 16), 0.1)


def test_jitter_and_blur_identities(random_image, rng):
    img = random_image()
    assert np.array_equal(pullseg.translate.color_jitter(img, 0.0, rng), img)
    assert np.array_equal(pullseg.translate.gaussian_blur(img, 0.0), img)
    flat = np.full((16, 16, 3), 0.4)
    assert np.allclose(pullseg.translate.gaussian_blur(flat, 1.5), 0.4)
    with pytest.raises(errors.ConfigInvalid):
        pullseg.translate.color_jitter(img, 1.5, rng)
    with pytest.raises(errors.ConfigInvalid):
        pullseg.translate.gaussian_blur(img, -1.0)


@pytest.mark.parametrize("sigma,length", [(0.5, 5), (1.0, 7), (2.0, 13)])
def test_gaussian_kernel(sigma, length):
    kernel = pullseg.translate.gaussian_kernel(sigma)
    assert len(kernel) == length
    assert kernel.sum() == pytest.approx(1.0)
    assert np.allclose(kernel, kernel[::-1])


def test_jitter_stays_in_range(random_image, rng):
    out = pullseg.translate.color_jitter(random_image(), 1.0, rng)
    assert out.min() >= 0.0 and out.max() <= 1.0
    factors = pullseg.translate.jitter_factors(0.5, rng)
    assert np.all((factors >= 0.6) & (factors <= 1.4))


def _donor():
    label = np.zeros((16, 16), dtype=np.int64)
    label[:, 8:] = 1
    label[:4, :4] = pullseg.data.IGNORE
    return pullseg.data.SegSample(np.full((16, 16, 3), 0.9), label)


def test_classmix_with_chosen_classes(rng):
    donor = _donor()
    recipient = np.zeros((16, 16, 3))
    recipient_labels = np.full((16, 16), 2)
    image, labels, mix = pullseg.translate.classmix(
        donor, recipient, recipient_labels, rng, selected_classes=[1]
    )
    assert mix.selected_classes == frozenset({1})
    assert np.all(labels[:, 8:] == 1) and np.all(labels[:, :8] == 2)
    assert np.all(image[:, 8:] == 0.9) and np.all(image[:, :8] == 0.0)


def test_classmix_with_every_donor_class(rng):
    donor = pullseg.data.SegSample(np.full((16, 16, 3), 0.9), _donor().label.clip(0, 1))
    image, labels, _ = pullseg.translate.classmix(
        donor, np.zeros((16, 16, 3)), np.full((16, 16), 2), rng, selected_classes=[0, 1]
    )
    assert np.array_equal(image, donor.image)
    assert np.array_equal(labels, donor.label)


def test_classmix_never_pastes_ignored_pixels(rng):
    image, labels, mix = pullseg.translate.classmix(
        _donor(), np.zeros((16, 16, 3)), np.full((16, 16), 2), rng
    )
    assert len(mix.selected_classes) == 1
    assert not mix.mask[:4, :4].any()
    assert np.all(labels[:4, :4] == 2)


def test_classmix_empty_selection_keeps_recipient(rng):
    recipient = np.full((16, 16, 3), 0.3)
    image, labels, mix = pullseg.translate.classmix(
        _donor(), recipient, np.full((16, 16), 2), rng, selected_classes=[]
    )
    assert np.array_equal(image, recipient)
    assert not mix.mask.any()


def test_dispatch(random_image, rng):
    img = random_image()
    with pytest.raises(errors.ConfigInvalid):
        pullseg.translate.translate(pullseg.translate.EngineSpec(), img, None, rng)
    identity = pullseg.translate.EngineSpec(kind=pullseg.translate.EngineKind.identity)
    assert np.array_equal(pullseg.translate.translate(identity, img, None, rng), img)
    with pytest.raises(errors.ConfigInvalid):
        pullseg.translate.EngineSpec(beta_fda=1.5)


def test_translate_dataset_keeps_labels(micro_corpus, rng):
    out = pullseg.translate.translate_dataset(
        micro_corpus.source, micro_corpus.target, pullseg.translate.EngineSpec(beta_fda=0.1), rng
    )
    assert len(out) == len(micro_corpus.source)
    for before, after in zip(micro_corpus.source.samples, out.samples):
        assert np.array_equal(before.label, after.label)
        assert after.image.shape == before.image.shape
