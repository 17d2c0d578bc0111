"""Pseudo-target image translation engines and self-training augmentations."""
import dataclasses
import enum
import math
import typing

import numpy as np

import pullseg.data
import pullseg.numerics
from pullseg.utils import errors


class EngineKind(enum.Enum):
    fda = "fda"
    color_jitter = "color_jitter"
    gaussian_blur = "gaussian_blur"
    identity = "identity"


@dataclasses.dataclass(frozen=True)
class EngineSpec:
    kind: EngineKind = EngineKind.fda
    beta_fda: float = 0.09
    jitter_strength: float = 0.5
    blur_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta_fda <= 1.0:
            raise errors.ConfigInvalid(f"beta_fda must lie in [0, 1], got {self.beta_fda}")
        if not 0.0 <= self.jitter_strength <= 1.0:
            raise errors.ConfigInvalid("jitter_strength must lie in [0, 1]")
        if self.blur_sigma < 0:
            raise errors.ConfigInvalid("blur_sigma must be non-negative")

    @property
    def needs_reference(self) -> bool:
        return self.kind is EngineKind.fda


class MixMask(typing.NamedTuple):
    mask: np.ndarray
    selected_classes: typing.FrozenSet[int]


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape[:2] != b.shape[:2]:
        raise errors.ShapeMismatch(f"shapes {a.shape} and {b.shape} differ")


#######
# FDA #
#######


def fda_translate(src, trg_ref, beta: float, clamp: bool = True) -> np.ndarray:
    """Swap the low-frequency amplitude of ``src`` for that of ``trg_ref``.

    Phase is kept from ``src`` at every coefficient. With ``clamp=False`` the
    raw inverse transform is returned so spectra can be checked exactly.
    """
    src = np.asarray(src, dtype=np.float64)
    trg_ref = np.asarray(trg_ref, dtype=np.float64)
    if src.shape != trg_ref.shape:
        raise errors.ShapeMismatch(f"source {src.shape} vs reference {trg_ref.shape}")
    height, width = src.shape[:2]
    band = np.fft.ifftshift(pullseg.numerics.centered_band(height, width, beta))

    out = np.empty_like(src)
    for channel in range(src.shape[2]):
        src_spec = pullseg.numerics.dft2(src[:, :, channel])
        trg_spec = pullseg.numerics.dft2(trg_ref[:, :, channel])
        amplitude = np.where(band, np.abs(trg_spec), np.abs(src_spec))
        mixed = amplitude * np.exp(1j * np.angle(src_spec))
        out[:, :, channel] = pullseg.numerics.idft2(mixed)
    return np.clip(out, 0.0, 1.0) if clamp else out


##########################
# Photometric transforms #
##########################


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def jitter_factors(strength: float, rng: pullseg.numerics.Rng) -> np.ndarray:
    spread = 0.8 * strength
    return rng.generator().uniform(1.0 - spread, 1.0 + spread, size=3)


def color_jitter(img, strength: float, rng: pullseg.numerics.Rng) -> np.ndarray:
    """Random brightness, contrast and saturation factors in [1 − 0.8s, 1 + 0.8s]."""
    if not 0.0 <= strength <= 1.0:
        raise errors.ConfigInvalid(f"jitter strength must lie in [0, 1], got {strength}")
    img = np.asarray(img, dtype=np.float64)
    if strength == 0:
        return img.copy()
    brightness, contrast, saturation = jitter_factors(strength, rng)
    out = np.clip(img * brightness, 0.0, 1.0)
    mean = _gray(out).mean()
    out = np.clip(mean + contrast * (out - mean), 0.0, 1.0)
    gray = _gray(out)[:, :, None]
    return np.clip(gray + saturation * (out - gray), 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="reflect")
    length = img.shape[axis]
    out = np.zeros_like(img)
    for offset, weight in enumerate(kernel):
        window = np.take(padded, np.arange(offset, offset + length), axis=axis)
        out += weight * window
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian of radius ⌈3σ⌉ with reflect padding."""
    if sigma < 0:
        raise errors.ConfigInvalid("blur sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    kernel = gaussian_kernel(sigma)
    return np.clip(_convolve_axis(_convolve_axis(img, kernel, 0), kernel, 1), 0.0, 1.0)


def strong_augment(
    img, jitter_strength: float, blur_sigma: float, rng: pullseg.numerics.Rng
) -> np.ndarray:
    jittered = color_jitter(img, jitter_strength, rng.split("jitter"))
    return gaussian_blur(jittered, blur_sigma)


############
# ClassMix #
############


def classmix_mask(
    donor_label: np.ndarray,
    rng: pullseg.numerics.Rng,
    selected_classes: typing.Optional[typing.Iterable[int]] = None,
) -> MixMask:
    if selected_classes is None:
        present = np.unique(donor_label[donor_label != pullseg.data.IGNORE])
        count = math.ceil(len(present) / 2)
        chosen = rng.generator().choice(present, size=count, replace=False) if count else []
        selected_classes = [int(c) for c in chosen]
    selected = frozenset(int(c) for c in selected_classes)
    mask = np.isin(donor_label, sorted(selected)) if selected else np.zeros(donor_label.shape, bool)
    return MixMask(mask, selected)


def classmix(
    donor: pullseg.data.SegSample,
    recipient,
    recipient_labels,
    rng: pullseg.numerics.Rng,
    selected_classes: typing.Optional[typing.Iterable[int]] = None,
) -> typing.Tuple[np.ndarray, np.ndarray, MixMask]:
    """Paste half of the donor's classes (pixels and labels) onto the recipient."""
    recipient = np.asarray(recipient, dtype=np.float64)
    recipient_labels = np.asarray(recipient_labels)
    _check_pair(donor.image, recipient)
    _check_pair(donor.image, recipient_labels)
    mix = classmix_mask(donor.label, rng, selected_classes)
    image = np.where(mix.mask[:, :, None], donor.image, recipient)
    labels = np.where(mix.mask, donor.label, recipient_labels)
    return image, labels, mix


############
# Dispatch #
############


def translate(
    engine: EngineSpec,
    src,
    trg_ref: typing.Optional[np.ndarray],
    rng: pullseg.numerics.Rng,
) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    if engine.kind is EngineKind.fda:
        if trg_ref is None:
            raise errors.ConfigInvalid("the fda engine needs a target reference image")
        return fda_translate(src, trg_ref, engine.beta_fda)
    if engine.kind is EngineKind.color_jitter:
        return color_jitter(src, engine.jitter_strength, rng)
    if engine.kind is EngineKind.gaussian_blur:
        return gaussian_blur(src, engine.blur_sigma)
    return src.copy()


def translate_dataset(
    source: pullseg.data.DomainDataset,
    reference: typing.Optional[pullseg.data.DomainDataset],
    engine: EngineSpec,
    rng: pullseg.numerics.Rng,
) -> pullseg.data.DomainDataset:
    """Pseudo-target copy of ``source``; each image keeps its source labels."""
    if reference is not None and reference.height != source.height:
        raise errors.ShapeMismatch("reference images must match the source size")
    refs = pullseg.data.sample_indices(
        len(reference) if reference is not None else 1, len(source), rng.split("refs")
    )
    samples = []
    for k, sample in enumerate(source.samples):
        trg_ref = reference[int(refs[k])].image if reference is not None else None
        image = translate(engine, sample.image, trg_ref, rng.split("engine").split(k))
        samples.append(pullseg.data.SegSample(image, sample.label))
    return pullseg.data.DomainDataset(
        tuple(samples), pullseg.data.Domain.SOURCE, source.class_count
    )
