"""Deterministic math substrate shared by every other module.

Images and maps are plain float64 ``numpy`` arrays laid out ``(height, width,
channels)``; spectra are complex128 arrays of the same plane shape.
"""
import dataclasses
import typing
import warnings
import zlib

import numpy as np

from pullseg.utils import errors

Grid2D = np.ndarray
ComplexGrid2D = np.ndarray

SPECTRAL_TOLERANCE = 1e-6
NORM_EPS = 1e-12
DEGENERATE_NORM = 1e-8

_PROB_FLOOR = np.finfo(np.float64).tiny
_PROB_CEIL = np.nextafter(1.0, 0.0)


def as_grid(values, channels: typing.Optional[int] = None) -> Grid2D:
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise errors.ShapeMismatch(f"expected an H×W(×C) grid, got shape {grid.shape}")
    if channels is not None and grid.shape[2] != channels:
        raise errors.ShapeMismatch(
            f"expected {channels} channels, got {grid.shape[2]}"
        )
    if not np.all(np.isfinite(grid)):
        raise errors.ShapeMismatch("grid contains non-finite entries")
    return grid


#######
# RNG #
#######


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


@dataclasses.dataclass(frozen=True)
class Rng:
    """Counter-based generator addressed by a seed and a path of labels.

    ``Rng(7).split("queries").split(3)`` always yields the same stream, and
    drawing from it never advances any other stream.
    """

    seed: int
    path: typing.Tuple[int, ...] = ()

    def split(self, label) -> "Rng":
        return Rng(self.seed, self.path + (_label_key(label),))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path
        )
        return np.random.Generator(np.random.Philox(sequence))


############
# Spectral #
############


def dft2(plane: Grid2D) -> ComplexGrid2D:
    """Unnormalized forward 2D DFT of a single-channel plane."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim == 3:
        if plane.shape[2] != 1:
            raise errors.ShapeMismatch("dft2 takes a single-channel plane")
        plane = plane[:, :, 0]
    if plane.ndim != 2 or min(plane.shape) < 1:
        raise errors.ShapeMismatch(f"bad plane shape {plane.shape}")
    return np.fft.fft2(plane)


def idft2(spectrum: ComplexGrid2D, tolerance: float = SPECTRAL_TOLERANCE) -> Grid2D:
    """Inverse 2D DFT with the 1/(H·W) factor; the spectrum must be Hermitian."""
    plane = np.fft.ifft2(np.asarray(spectrum, dtype=np.complex128))
    residue = float(np.max(np.abs(plane.imag))) if plane.size else 0.0
    if residue > tolerance:
        raise errors.SpectralResidue(
            f"inverse transform left imaginary residue {residue:.3e}"
        )
    return plane.real.copy()


def centered_band(height: int, width: int, beta: float) -> np.ndarray:
    """Boolean mask (DC at the centre) of the low-frequency square for ``beta``.

    The nominal side is ``max(1 if beta > 0 else 0, floor(beta * min(H, W)))``.
    Even sides are widened by one coefficient so the band stays closed under
    frequency negation; a band covering the whole plane selects everything.
    """
    if not 0.0 <= beta <= 1.0:
        raise errors.ConfigInvalid(f"beta must lie in [0, 1], got {beta}")
    side = max(1 if beta > 0 else 0, int(np.floor(beta * min(height, width))))
    mask = np.zeros((height, width), dtype=bool)
    if side == 0:
        return mask
    if side >= min(height, width):
        mask[:, :] = True
        return mask
    half = side // 2
    row, col = height // 2, width // 2
    mask[row - half : row + half + 1, col - half : col + half + 1] = True
    return mask


##############
# Reductions #
##############


def percentile(values: typing.Sequence[float], p: float) -> float:
    """Linear-interpolation percentile, ``p`` in [0, 100]."""
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size == 0:
        raise errors.EmptyInput("percentile of an empty list")
    if not 0.0 <= p <= 100.0:
        raise errors.ConfigInvalid(f"percent must lie in [0, 100], got {p}")
    return float(np.percentile(data, p, method="linear"))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Stable softmax; outputs stay strictly inside (0, 1)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / np.sum(exps, axis=axis, keepdims=True)
    return np.clip(probs, _PROB_FLOOR, _PROB_CEIL)


def l2_normalize(vector) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm < DEGENERATE_NORM:
        warnings.warn(
            errors.DegenerateVector(f"normalizing a vector of norm {norm:.3e}"),
            stacklevel=2,
        )
    return vector / (norm + NORM_EPS)


def normalize_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / (norms + NORM_EPS)
