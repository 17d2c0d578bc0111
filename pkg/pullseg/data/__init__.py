"""Synthetic two-domain segmentation corpus and mini-batch assembly."""
import dataclasses
import math
import typing

import numpy as np

import pullseg.numerics
from pullseg.utils import errors

IGNORE = 255
MAX_CLASSES = 8
MIN_PRESENCE = 0.2

Image = np.ndarray
LabelMap = np.ndarray

SHAPE_FAMILIES = (
    "background",
    "rectangle",
    "disk",
    "triangle",
    "diamond",
    "ring",
    "cross",
    "ellipse",
)

PALETTE = np.array(
    [
        (0.45, 0.48, 0.42),
        (0.85, 0.25, 0.20),
        (0.20, 0.70, 0.30),
        (0.25, 0.35, 0.85),
        (0.90, 0.80, 0.20),
        (0.70, 0.30, 0.80),
        (0.20, 0.80, 0.80),
        (0.95, 0.55, 0.15),
    ]
)


###############
# Domain data #
###############


class Domain:
    SOURCE = "source"
    TARGET = "target"

    ALL = (SOURCE, TARGET)


@dataclasses.dataclass(frozen=True)
class SegSample:
    image: Image
    label: LabelMap

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise errors.ShapeMismatch(f"image must be H×W×3, got {self.image.shape}")
        if self.label.shape != self.image.shape[:2]:
            raise errors.ShapeMismatch(
                f"label {self.label.shape} does not match image {self.image.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def unlabeled(self) -> bool:
        return bool(np.all(self.label == IGNORE))

    def without_labels(self) -> "SegSample":
        return SegSample(self.image, np.full_like(self.label, IGNORE))


@dataclasses.dataclass(frozen=True)
class DomainDataset:
    samples: typing.Tuple[SegSample, ...]
    domain_tag: str
    class_count: int

    def __post_init__(self):
        if not self.samples:
            raise errors.EmptyInput("a dataset needs at least one sample")
        if self.domain_tag not in Domain.ALL:
            raise errors.ConfigInvalid(f"unknown domain tag {self.domain_tag!r}")
        shape = self.samples[0].image.shape
        for sample in self.samples:
            if sample.image.shape != shape:
                raise errors.ShapeMismatch("all samples must share H×W")
            valid = sample.label[sample.label != IGNORE]
            if valid.size and int(valid.max()) >= self.class_count:
                raise errors.ShapeMismatch(
                    f"label index {int(valid.max())} exceeds class count {self.class_count}"
                )

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index) -> SegSample:
        return self.samples[index]

    @property
    def height(self) -> int:
        return self.samples[0].height

    @property
    def width(self) -> int:
        return self.samples[0].width

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(
            tuple(s.without_labels() for s in self.samples),
            self.domain_tag,
            self.class_count,
        )


class HeldOutDataset:
    """Target images whose ground truth is read only by evaluation.

    Every call to ``labels`` bumps ``reads`` so tests can audit who looked.
    """

    def __init__(self, dataset: DomainDataset):
        self._dataset = dataset
        self.reads = 0

    def __len__(self):
        return len(self._dataset)

    @property
    def class_count(self) -> int:
        return self._dataset.class_count

    @property
    def images(self) -> typing.List[Image]:
        return [s.image for s in self._dataset.samples]

    def labels(self) -> typing.List[LabelMap]:
        self.reads += 1
        return [s.label for s in self._dataset.samples]

    def reveal(self) -> DomainDataset:
        self.reads += 1
        return self._dataset


@dataclasses.dataclass(frozen=True)
class MiniBatch:
    source: typing.Tuple[SegSample, ...]
    target: typing.Tuple[SegSample, ...] = ()

    def __post_init__(self):
        if not self.source:
            raise errors.EmptyBatch("a mini-batch needs source samples")
        for sample in self.target:
            if not sample.unlabeled:
                raise errors.ConfigInvalid("training target samples must carry IGNORE labels")


##############
# Generation #
##############


@dataclasses.dataclass(frozen=True)
class DomainShift:
    scale: typing.Tuple[float, float, float] = (0.7, 1.1, 1.3)
    offset: typing.Tuple[float, float, float] = (0.1, -0.05, 0.0)
    noise_sigma: float = 0.03
    vignette: float = 0.25

    @classmethod
    def identity(cls):
        return cls(scale=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0), noise_sigma=0.0, vignette=0.0)


@dataclasses.dataclass(frozen=True)
class DataConfig:
    classes: int = 4
    height: int = 64
    width: int = 64
    n_source: int = 200
    n_target: int = 200
    n_held_out: int = 50
    shift: DomainShift = DomainShift()

    def validate(self):
        if not 2 <= self.classes <= MAX_CLASSES:
            raise errors.ConfigInvalid(
                f"classes must lie in [2, {MAX_CLASSES}] (shape vocabulary), got {self.classes}"
            )
        if self.height < 16 or self.width < 16:
            raise errors.ConfigInvalid("images must be at least 16×16")
        if min(self.n_source, self.n_target, self.n_held_out) < 1:
            raise errors.ConfigInvalid("every split needs at least one image")


class SyntheticCorpus(typing.NamedTuple):
    source: DomainDataset
    target: DomainDataset
    held_out: HeldOutDataset


def _shape_mask(family: str, height: int, width: int, gen: np.random.Generator):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    size = min(height, width)
    cy = gen.uniform(0.15, 0.85) * height
    cx = gen.uniform(0.15, 0.85) * width
    r = gen.uniform(0.10, 0.18) * size

    if family == "rectangle":
        ry, rx = r * gen.uniform(0.6, 1.2), r * gen.uniform(0.6, 1.2)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if family == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if family == "triangle":
        top = cy - r
        return (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) * 0.6)
    if family == "diamond":
        return np.abs(yy - cy) + np.abs(xx - cx) <= r * 1.2
    if family == "ring":
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return (dist <= r * 1.1) & (dist >= r * 0.55)
    if family == "cross":
        arm = max(r * 0.3, 1.5)
        vertical = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r * 1.2)
        horizontal = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r * 1.2)
        return vertical | horizontal
    if family == "ellipse":
        a, b = r * 1.4, r * 0.6
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    raise errors.ConfigInvalid(f"unknown shape family {family!r}")


def _background(height: int, width: int, gen: np.random.Generator) -> Image:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    freq = gen.uniform(0.15, 0.45, size=2)
    phase = gen.uniform(0, 2 * np.pi, size=2)
    texture = 0.06 * np.sin(freq[0] * yy + phase[0]) * np.cos(freq[1] * xx + phase[1])
    base = PALETTE[0] + gen.uniform(-0.04, 0.04, size=3)
    image = base[None, None, :] + texture[:, :, None]
    image = image + gen.normal(0.0, 0.015, size=(height, width, 3))
    return image


def render_scene(
    cfg: DataConfig, classes: typing.Sequence[int], rng: pullseg.numerics.Rng
) -> SegSample:
    """Paint one textured background plus one shape per requested class."""
    gen = rng.generator()
    image = _background(cfg.height, cfg.width, gen)
    label = np.zeros((cfg.height, cfg.width), dtype=np.int64)

    def paint(cls):
        mask = _shape_mask(SHAPE_FAMILIES[cls], cfg.height, cfg.width, gen)
        color = np.clip(PALETTE[cls] + gen.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
        shade = gen.uniform(0.9, 1.05)
        image[mask] = color * shade
        label[mask] = cls

    order = list(classes)
    gen.shuffle(order)
    for cls in order:
        paint(cls)
    # later shapes can hide earlier ones entirely
    for _ in range(3):
        missing = [c for c in order if not np.any(label == c)]
        if not missing:
            break
        for cls in missing:
            paint(cls)

    return SegSample(np.clip(image, 0.0, 1.0), label)


def apply_shift(image: Image, shift: DomainShift, rng: pullseg.numerics.Rng) -> Image:
    height, width, _ = image.shape
    shifted = np.clip(image * np.asarray(shift.scale) + np.asarray(shift.offset), 0.0, 1.0)
    if shift.vignette > 0:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        ry = (yy - (height - 1) / 2) / (height / 2)
        rx = (xx - (width - 1) / 2) / (width / 2)
        falloff = 1.0 - shift.vignette * (ry**2 + rx**2) / 2
        shifted = shifted * falloff[:, :, None]
    if shift.noise_sigma > 0:
        shifted = shifted + rng.generator().normal(0.0, shift.noise_sigma, size=image.shape)
    return np.clip(shifted, 0.0, 1.0)


def plan_classes(cfg: DataConfig, count: int, rng: pullseg.numerics.Rng):
    """Foreground classes per image; each appears in at least 20% of images."""
    gen = rng.generator()
    foreground = list(range(1, cfg.classes))
    plans = []
    for k in range(count):
        chosen = {c for c in foreground if gen.random() < 0.5}
        chosen.add(foreground[k % len(foreground)])
        plans.append(chosen)
    needed = math.ceil(MIN_PRESENCE * count)
    for cls in foreground:
        have = sum(cls in plan for plan in plans)
        for plan in plans:
            if have >= needed:
                break
            if cls not in plan:
                plan.add(cls)
                have += 1
    return [sorted(plan) for plan in plans]


def _render_split(cfg, count, rng, shift=None):
    plans = plan_classes(cfg, count, rng.split("plan"))
    samples = []
    for k, plan in enumerate(plans):
        sample = render_scene(cfg, plan, rng.split("scene").split(k))
        if shift is not None:
            image = apply_shift(sample.image, shift, rng.split("shift").split(k))
            sample = SegSample(image, sample.label)
        samples.append(sample)
    return tuple(samples)


def gen_synthetic_pair(cfg: DataConfig, rng: pullseg.numerics.Rng) -> SyntheticCorpus:
    """Labelled source, unlabelled target and quarantined target ground truth."""
    cfg.validate()
    source = DomainDataset(
        _render_split(cfg, cfg.n_source, rng.split("source")), Domain.SOURCE, cfg.classes
    )
    target = DomainDataset(
        _render_split(cfg, cfg.n_target, rng.split("target"), shift=cfg.shift),
        Domain.TARGET,
        cfg.classes,
    )
    held_out = DomainDataset(
        _render_split(cfg, cfg.n_held_out, rng.split("held_out"), shift=cfg.shift),
        Domain.TARGET,
        cfg.classes,
    )
    return SyntheticCorpus(source, target.unlabeled(), HeldOutDataset(held_out))


############
# Batching #
############


def downsample_labels(label: LabelMap, factor: int) -> LabelMap:
    """Nearest-neighbour: out(r, c) = label(r·factor, c·factor)."""
    factor = int(factor)
    height, width = label.shape
    if factor < 1 or height % factor or width % factor:
        raise errors.ConfigInvalid(
            f"label map {height}×{width} is not divisible by factor {factor}"
        )
    return label[::factor, ::factor].copy()


def sample_indices(size: int, count: int, rng: pullseg.numerics.Rng) -> np.ndarray:
    """A permutation-restricted subset: distinct indices unless count > size."""
    gen = rng.generator()
    if count <= size:
        return gen.permutation(size)[:count]
    return gen.integers(0, size, size=count)


def sample_batch(
    source: DomainDataset,
    target: typing.Optional[DomainDataset],
    source_count: int,
    target_count: int,
    rng: pullseg.numerics.Rng,
) -> MiniBatch:
    src_idx = sample_indices(len(source), source_count, rng.split("source"))
    batch_source = tuple(source[int(i)] for i in src_idx)
    if target is None or target_count == 0:
        return MiniBatch(batch_source)
    trg_idx = sample_indices(len(target), target_count, rng.split("target"))
    return MiniBatch(batch_source, tuple(target[int(i)] for i in trg_idx))


def label_to_color(label: LabelMap) -> np.ndarray:
    colors = np.zeros(label.shape + (3,), dtype=np.float64)
    valid = label != IGNORE
    colors[valid] = PALETTE[label[valid] % len(PALETTE)]
    return colors
