import pathlib
import re

import numpy as np
import PIL
import PIL.Image

import pullseg.data
from pullseg.utils import errors

MANIFEST = "manifest.txt"
HEADER_RE = re.compile(
    r"""
    C=(?P<classes>\d+)\s+
    H=(?P<height>\d+)\s+
    W=(?P<width>\d+)\s+
    domain=(?P<domain>source|target)\s+
    n=(?P<count>\d+)
    """,
    re.VERBOSE,
)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path: pathlib.Path, image: np.ndarray):
    PIL.Image.fromarray(quantize(image)).save(path, format="PPM")


def write_pgm(path: pathlib.Path, label: np.ndarray):
    PIL.Image.fromarray(label.astype(np.uint8)).save(path, format="PPM")


def _open(path: pathlib.Path, magic: bytes, mode: str) -> np.ndarray:
    try:
        with open(path, "rb") as handle:
            head = handle.read(2)
    except OSError as exc:
        raise errors.IoError(f"cannot read {path}: {exc}") from exc
    if head != magic:
        raise errors.FormatError(f"{path.name}: expected magic {magic!r}, found {head!r}")
    try:
        with PIL.Image.open(path) as img:
            if img.mode != mode:
                raise errors.FormatError(f"{path.name}: expected mode {mode}, got {img.mode}")
            return np.asarray(img)
    except PIL.UnidentifiedImageError as exc:
        raise errors.FormatError(f"{path.name}: {exc}") from exc


def read_ppm(path: pathlib.Path) -> np.ndarray:
    return _open(path, b"P6", "RGB").astype(np.float64) / 255.0


def read_pgm(path: pathlib.Path) -> np.ndarray:
    return _open(path, b"P5", "L").astype(np.int64)


def save_dataset(ds: pullseg.data.DomainDataset, directory):
    directory = pathlib.Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        lines = [
            f"C={ds.class_count} H={ds.height} W={ds.width} "
            f"domain={ds.domain_tag} n={len(ds)}"
        ]
        for k, sample in enumerate(ds.samples):
            image_name, label_name = f"img_{k}.ppm", f"lbl_{k}.pgm"
            write_ppm(directory / image_name, sample.image)
            write_pgm(directory / label_name, sample.label)
            lines.append(f"{image_name} {label_name}")
        (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise errors.IoError(f"cannot write dataset to {directory}: {exc}") from exc


def load_dataset(directory) -> pullseg.data.DomainDataset:
    directory = pathlib.Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise errors.IoError(f"missing manifest: {manifest} not found")
    lines = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not lines:
        raise errors.FormatError(f"{manifest} is empty")
    header = HEADER_RE.fullmatch(lines[0])
    if not header:
        raise errors.FormatError(f"malformed manifest header: {lines[0]!r}")
    classes = int(header["classes"])
    height, width = int(header["height"]), int(header["width"])
    entries = lines[1:]
    if len(entries) != int(header["count"]):
        raise errors.FormatError(
            f"manifest lists {len(entries)} samples but declares n={header['count']}"
        )

    samples = []
    for entry in entries:
        parts = entry.split()
        if len(parts) != 2:
            raise errors.FormatError(f"malformed manifest entry: {entry!r}")
        image = read_ppm(directory / parts[0])
        label = read_pgm(directory / parts[1])
        if image.shape[:2] != label.shape:
            raise errors.FormatError(
                f"{parts[0]} is {image.shape[:2]} but {parts[1]} is {label.shape}"
            )
        if image.shape[:2] != (height, width):
            raise errors.FormatError(f"{parts[0]} does not match H={height} W={width}")
        bad = (label >= classes) & (label != pullseg.data.IGNORE)
        if np.any(bad):
            raise errors.FormatError(
                f"{parts[1]} holds class index {int(label[bad].max())} with C={classes}"
            )
        samples.append(pullseg.data.SegSample(image, label))

    if not samples:
        raise errors.FormatError(f"{manifest} lists no samples")
    return pullseg.data.DomainDataset(tuple(samples), header["domain"], classes)
