import math
import warnings

import numpy as np
import pytest

import pullseg.numerics
from pullseg.utils import errors


def test_dft2_constant_plane_has_only_dc():
    spectrum = pullseg.numerics.dft2(np.full((4, 4), 3.0))
    assert spectrum[0, 0] == pytest.approx(48.0)
    rest = spectrum.copy()
    rest[0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-9


def test_dft2_impulse_is_flat():
    plane = np.zeros((4, 4))
    plane[0, 0] = 1.0
    assert np.allclose(pullseg.numerics.dft2(plane), np.ones((4, 4)), atol=1e-12)


def test_idft2_inverts_dft2():
    plane = np.random.default_rng(0).normal(size=(8, 8))
    back = pullseg.numerics.idft2(pullseg.numerics.dft2(plane))
    assert np.max(np.abs(back - plane)) < 1e-9
    assert np.all(pullseg.numerics.idft2(np.zeros((4, 4), dtype=complex)) == 0)


def test_idft2_rejects_non_hermitian_spectrum():
    spectrum = np.zeros((4, 4), dtype=complex)
    spectrum[0, 1] = 1.0
    with pytest.raises(errors.SpectralResidue):
        pullseg.numerics.idft2(spectrum)


@pytest.mark.parametrize(
    "values,p,expected",
    [
        ([1, 2, 3, 4], 50, 2.5),
        ([5], 0, 5.0),
        ([5], 73, 5.0),
        ([0.1 * k for k in range(1, 11)], 25, 0.325),
    ],
)
def test_percentile(values, p, expected):
    assert pullseg.numerics.percentile(values, p) == pytest.approx(expected, abs=1e-12)


def test_percentile_errors():
    with pytest.raises(errors.EmptyInput):
        pullseg.numerics.percentile([], 50)
    with pytest.raises(errors.ConfigInvalid):
        pullseg.numerics.percentile([1.0], 101)


def _sorted_oracle(values, p):
    data = sorted(values)
    rank = p / 100 * (len(data) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (rank - lo) * (data[hi] - data[lo])


def test_percentile_counting_contract():
    gen = np.random.default_rng(3)
    for _ in range(1000):
        values = gen.uniform(size=int(gen.integers(1, 40)))
        for alpha in (0.0, 0.1, 0.5, 0.9, 1.0):
            gamma = pullseg.numerics.percentile(values, 100 * alpha)
            assert gamma == pytest.approx(_sorted_oracle(values, 100 * alpha), abs=1e-12)
            below = int(np.sum(values < gamma))
            assert below <= math.ceil(alpha * len(values))


def test_softmax():
    assert np.allclose(pullseg.numerics.softmax(np.zeros(4)), 0.25)
    stable = pullseg.numerics.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(stable))
    assert stable[0] == pytest.approx(1.0)
    z = np.random.default_rng(1).normal(size=(5, 3))
    assert np.max(np.abs(pullseg.numerics.softmax(z + 17.5) - pullseg.numerics.softmax(z))) < 1e-12


def test_l2_normalize():
    assert np.allclose(pullseg.numerics.l2_normalize([3.0, 4.0]), [0.6, 0.8])
    unit = np.array([0.0, 1.0, 0.0])
    assert np.allclose(pullseg.numerics.l2_normalize(unit), unit)
    with pytest.warns(errors.DegenerateVector):
        out = pullseg.numerics.l2_normalize([0.0, 0.0])
    assert np.all(out == 0)


def test_l2_normalize_quiet_for_regular_vectors():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pullseg.numerics.l2_normalize([1.0, 2.0])


def test_rng_streams_are_addressed_by_path():
    a = pullseg.numerics.Rng(5).split("queries").split(2).generator().uniform(size=4)
    b = pullseg.numerics.Rng(5).split("queries").split(2).generator().uniform(size=4)
    c = pullseg.numerics.Rng(5).split("queries").split(3).generator().uniform(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_centered_band_sizes():
    assert not pullseg.numerics.centered_band(32, 32, 0.0).any()
    assert pullseg.numerics.centered_band(32, 32, 1.0).all()
    small = pullseg.numerics.centered_band(32, 32, 0.01)
    assert small.sum() == 1 and small[16, 16]
    # an even nominal side is widened to stay symmetric
    assert pullseg.numerics.centered_band(32, 32, 0.125).sum() == 25
    with pytest.raises(errors.ConfigInvalid):
        pullseg.numerics.centered_band(8, 8, 1.5)


def test_as_grid():
    assert pullseg.numerics.as_grid(np.zeros((2, 3))).shape == (2, 3, 1)
    with pytest.raises(errors.ShapeMismatch):
        pullseg.numerics.as_grid(np.zeros((2, 3, 2)), channels=3)
    with pytest.raises(errors.ShapeMismatch):
        pullseg.numerics.as_grid(np.full((2, 2), np.nan))


def test_dft2_is_linear():
    gen = np.random.default_rng(30)
    a, b = gen.normal(size=(8, 6)), gen.normal(size=(8, 6))
    combined = pullseg.numerics.dft2(2.5 * a - 0.75 * b)
    separate = 2.5 * pullseg.numerics.dft2(a) - 0.75 * pullseg.numerics.dft2(b)
    assert np.max(np.abs(combined - separate)) < 1e-9


def test_dft2_preserves_energy():
    gen = np.random.default_rng(31)
    for height, width in ((4, 4), (8, 6), (7, 9)):
        plane = gen.normal(size=(height, width))
        spectrum = pullseg.numerics.dft2(plane)
        energy = np.sum(np.abs(spectrum) ** 2) / (height * width)
        assert energy == pytest.approx(np.sum(plane**2), rel=1e-9)


def test_percentile_is_monotone_and_bounded():
    gen = np.random.default_rng(32)
    for _ in range(20):
        values = gen.normal(size=int(gen.integers(1, 40)))
        levels = np.sort(gen.uniform(0.0, 100.0, size=10))
        got = [pullseg.numerics.percentile(values, p) for p in levels]
        assert all(lo <= hi for lo, hi in zip(got, got[1:]))
        assert values.min() <= got[0] and got[-1] <= values.max()


def test_softmax_stays_strictly_inside_the_unit_interval():
    for logits in ([1000.0, 0.0, -1000.0], [800.0, -800.0], [-745.0, 745.0, 0.0]):
        probs = pullseg.numerics.softmax(np.array(logits))
        assert np.all(probs > 0.0) and np.all(probs < 1.0)


@pytest.mark.parametrize("size", [8, 9, 16, 32])
def test_centered_band_side_is_odd(size):
    for beta in np.linspace(0.05, 0.95, 19):
        mask = pullseg.numerics.centered_band(size, size, float(beta))
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        nominal = max(1, int(np.floor(beta * size)))
        if nominal >= size:
            assert mask.all()
            continue
        side = nominal if nominal % 2 else nominal + 1
        assert rows.size == cols.size == side
        assert mask.sum() == side * side
        assert rows.mean() == size // 2 and cols.mean() == size // 2
