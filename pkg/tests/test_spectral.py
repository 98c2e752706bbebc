import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from freqpure.exceptions import InvalidInputError
from freqpure.spectral import (SpectralDecomposition, SpectrumHistogram, decompose, radial_spectrum, recompose,
                               reflect, symmetrize)
from freqpure.validation import ImageBatch


def rand_images(seed, shape, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=dtype)


def test_constant_image_is_dc_only():
    c = 0.7
    spec = decompose(torch.full((1, 1, 4, 4), c, dtype=torch.float64))
    expected = torch.zeros(4, 4, dtype=torch.float64)
    expected[0, 0] = c * 16
    assert torch.allclose(spec.magnitude[0, 0], expected, atol=1e-12)
    assert spec.phase[0, 0, 0, 0] == 0


def test_impulse_has_flat_spectrum():
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    x[..., 0, 0] = 1
    spec = decompose(x)
    assert torch.allclose(spec.magnitude, torch.ones_like(x))
    assert torch.allclose(spec.phase, torch.zeros_like(x))


def test_parseval_8x8():
    x = rand_images(0, (2, 3, 8, 8))
    spec = decompose(x)
    lhs = (x**2).sum(dim=(-2, -1))
    rhs = (spec.magnitude**2).sum(dim=(-2, -1)) / 64
    assert torch.allclose(lhs, rhs, rtol=1e-12)


def test_round_trip_and_real_spectrum_symmetry():
    x = rand_images(1, (3, 3, 9, 12))
    spec = decompose(x)
    rec = recompose(spec)
    assert (rec.image.data - x).abs().max() < 1e-12
    assert rec.imag_residual < 1e-12
    m, p = spec.magnitude, spec.phase
    assert torch.allclose(m, reflect(m), rtol=1e-10, atol=1e-10)
    # odd phase up to 2*pi wrapping at bins whose phase sits on the branch cut
    diff = torch.remainder(p + reflect(p) + math.pi, 2 * math.pi) - math.pi
    assert diff.abs().max() < 1e-9


def test_phase_range_and_magnitude_sign():
    spec = decompose(rand_images(2, (2, 1, 7, 7)) - 0.5)
    assert (spec.magnitude >= 0).all()
    assert (spec.phase > -math.pi).all() and (spec.phase <= math.pi).all()


def test_decompose_rejects_non_finite():
    x = torch.zeros(1, 1, 4, 4)
    x[0, 0, 1, 1] = float("nan")
    with pytest.raises(InvalidInputError):
        decompose(x)


def test_decompose_rejects_wrong_rank():
    with pytest.raises(InvalidInputError):
        decompose(torch.zeros(4, 4))


def test_recompose_rejects_negative_magnitude():
    spec = SpectralDecomposition(-torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))
    with pytest.raises(InvalidInputError):
        recompose(spec)


def test_hermitian_spectrum_has_tiny_residual():
    g = torch.Generator().manual_seed(3)
    mag = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    ph = (torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) - 0.5) * 2 * math.pi
    mag, ph = symmetrize(mag, ph)
    rec = recompose(SpectralDecomposition(mag, ph))
    assert rec.imag_residual <= 1e-6 * mag.abs().max().item()


def test_asymmetric_spectrum_reports_residual():
    x = rand_images(4, (1, 1, 8, 8))
    spec = decompose(x)
    phase = spec.phase.clone()
    phase[0, 0, 1, 2] += 0.5
    rec = recompose(SpectralDecomposition(spec.magnitude, phase))
    assert rec.imag_residual > 1e-3
    assert rec.image.shape == (1, 1, 8, 8)


def test_symmetrize_examples():
    g = torch.Generator().manual_seed(5)
    m = torch.rand(2, 2, 6, 6, generator=g, dtype=torch.float64)
    p = torch.rand(2, 2, 6, 6, generator=g, dtype=torch.float64)
    even, odd = symmetrize(m, p)
    again = symmetrize(even, odd)
    assert torch.equal(again[0], even) and torch.equal(again[1], odd)
    assert torch.allclose(even, reflect(even)) and torch.allclose(odd, -reflect(odd))
    _, zero = symmetrize(m, torch.ones_like(p))
    assert torch.equal(zero, torch.zeros_like(p))


def test_symmetrize_zeroes_self_conjugate_bins():
    p = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    _, odd = symmetrize(torch.ones_like(p), p)
    for u, v in [(0, 0), (0, 4), (4, 0), (4, 4)]:
        assert odd[0, 0, u, v] == 0


def test_symmetrize_shape_mismatch():
    with pytest.raises(InvalidInputError):
        symmetrize(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(2, 17), w=st.integers(2, 17), c=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_symmetrize_is_idempotent_projection(h, w, c, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.randn(1, c, h, w, generator=g, dtype=torch.float64)
    p = torch.randn(1, c, h, w, generator=g, dtype=torch.float64)
    even, odd = symmetrize(m, p)
    e2, o2 = symmetrize(even, odd)
    assert (e2 - even).abs().max() <= 1e-12 and (o2 - odd).abs().max() <= 1e-12
    x = torch.rand(1, c, h, w, generator=g, dtype=torch.float64)
    spec = decompose(x)
    rec = recompose(SpectralDecomposition(spec.magnitude * even.abs(), spec.phase + odd))
    assert rec.imag_residual <= 1e-6


def test_radial_spectrum_zero_perturbation():
    hist = radial_spectrum(torch.zeros(2, 3, 16, 16), bins=8)
    assert hist.bin_count == 8
    assert np.all(hist.energy == 0)
    assert np.all(np.diff(hist.radii) > 0)
    assert hist.radii[0] > 0 and hist.radii[-1] < math.sqrt(2) / 2


def test_radial_spectrum_low_frequency_sinusoid():
    n = 32
    yy, xx = np.mgrid[0:n, 0:n]
    wave = 0.05 * np.cos(2 * np.pi * xx / n)
    hist = radial_spectrum(torch.tensor(wave)[None, None], bins=16)
    mean = hist.mean()
    # radius 1/32 falls in the first bin, together with DC (which is zero here)
    assert np.argmax(mean) == 0
    assert mean[0] > 10 * mean[1:].max()


def test_radial_spectrum_white_noise_is_flat():
    g = torch.Generator().manual_seed(0)
    noise = torch.randn(10, 1, 32, 32, generator=g, dtype=torch.float64)
    mean = radial_spectrum(noise, bins=8).mean()
    assert mean.max() / mean.min() < 2


def test_radial_spectrum_is_per_item():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(5, 3, 12, 12, generator=g)
    perm = torch.tensor([3, 0, 4, 1, 2])
    a = radial_spectrum(x, bins=6).energy
    b = radial_spectrum(x[perm], bins=6).energy
    np.testing.assert_array_equal(a[perm.numpy()], b)


def test_radial_spectrum_rejects_one_bin():
    with pytest.raises(InvalidInputError):
        radial_spectrum(torch.zeros(1, 1, 8, 8), bins=1)


def test_histogram_file_round_trip(tmp_path):
    hist = radial_spectrum(torch.randn(3, 3, 16, 16), bins=12)
    path = tmp_path / "hist.tsv"
    hist.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "radius\tenergy" and len(lines) == 13
    loaded = SpectrumHistogram.load(path)
    np.testing.assert_allclose(loaded.radii, hist.radii, rtol=1e-9)
    np.testing.assert_allclose(loaded.mean(), hist.mean(), rtol=1e-9)


def test_image_batch_range_conversion():
    b = ImageBatch(torch.rand(2, 3, 4, 4))
    s = b.to_signed()
    assert s.range_tag == "signed" and s.data.min() >= -1
    assert torch.allclose(s.to_unit().data, b.data)
    with pytest.raises(InvalidInputError):
        ImageBatch(torch.zeros(2, 3, 4), "unit")
    with pytest.raises(InvalidInputError):
        ImageBatch(torch.zeros(1, 1, 2, 2), "percent")
