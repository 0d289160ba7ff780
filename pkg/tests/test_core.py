import numpy as np
import pytest
from scipy import stats

from glowlab.core import (
    RngStream,
    build_frame,
    frame_vectors,
    reflect,
    sample_cosine_hemisphere,
)


def random_units(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestBuildFrame:
    def test_axis_aligned_z(self):
        f = build_frame(np.array([0.0, 0.0, 1.0]))
        assert np.allclose(f.normal, [0, 0, 1])
        assert abs(np.dot(f.tangent, f.normal)) <= 1e-6
        assert abs(np.linalg.norm(f.tangent) - 1) <= 1e-6

    def test_axis_aligned_y(self):
        f = build_frame(np.array([0.0, 1.0, 0.0]))
        for a, b in [(f.tangent, f.bitangent), (f.tangent, f.normal),
                     (f.bitangent, f.normal)]:
            assert abs(np.dot(a, b)) <= 1e-6
        for v in (f.tangent, f.bitangent, f.normal):
            assert abs(np.linalg.norm(v) - 1) <= 1e-6

    def test_random_units_orthonormal(self):
        rng = np.random.default_rng(12345)
        n = random_units(rng, 1000)
        t, b = frame_vectors(n)
        assert np.all(np.abs(np.sum(t * b, axis=1)) <= 1e-6)
        assert np.all(np.abs(np.sum(t * n, axis=1)) <= 1e-6)
        assert np.all(np.abs(np.sum(b * n, axis=1)) <= 1e-6)
        assert np.all(np.abs(np.linalg.norm(t, axis=1) - 1) <= 1e-6)
        # right-handed: t x b = n
        assert np.allclose(np.cross(t, b), n, atol=1e-6)

    def test_zero_normal_raises(self):
        with pytest.raises(ValueError):
            build_frame(np.zeros(3))


class TestCosineHemisphere:
    def test_pole_sample(self):
        d, pdf = sample_cosine_hemisphere(0.0, 0.0)
        assert d[2] == pytest.approx(1.0)
        assert pdf == pytest.approx(d[2] / np.pi)

    def test_pdf_identity(self):
        rng = np.random.default_rng(7)
        d, pdf = sample_cosine_hemisphere(rng.random(1000), rng.random(1000))
        assert np.allclose(pdf, d[:, 2] / np.pi)
        assert np.all(d[:, 2] >= 0)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_mean_cos_is_two_thirds(self):
        # E[cos theta] under the cosine density = int 2 z^2 dz on [0,1] = 2/3
        rng = np.random.default_rng(11)
        d, _ = sample_cosine_hemisphere(rng.random(100_000), rng.random(100_000))
        assert np.mean(d[:, 2]) == pytest.approx(2.0 / 3.0, abs=0.01)

    def test_mc_hemisphere_integral_of_cos(self):
        # int_H cos(theta) domega = pi
        rng = np.random.default_rng(13)
        d, pdf = sample_cosine_hemisphere(rng.random(100_000), rng.random(100_000))
        est = np.mean(d[:, 2] / pdf)
        assert est == pytest.approx(np.pi, rel=0.01)

    def test_chi_square_against_analytic_density(self):
        # z = cos(theta) has CDF z^2; phi is uniform. Joint binning.
        rng = np.random.default_rng(1)
        n = 100_000
        d, _ = sample_cosine_hemisphere(rng.random(n), rng.random(n))
        z_edges = np.sqrt(np.linspace(0.0, 1.0, 11))  # equal-probability bins
        phi = np.arctan2(d[:, 1], d[:, 0])
        phi_edges = np.linspace(-np.pi, np.pi, 9)
        counts, *_ = np.histogram2d(d[:, 2], phi, bins=(z_edges, phi_edges))
        expected = n / counts.size
        chi2 = np.sum((counts - expected) ** 2 / expected)
        p = stats.chi2.sf(chi2, counts.size - 1)
        assert p > 0.01


class TestReflect:
    def test_normal_incidence(self):
        out = reflect(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(out, [0, 0, 1])

    def test_grazing_unchanged(self):
        d = np.array([1.0, 0.0, 0.0])
        out = reflect(d, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(out, d)

    def test_matches_component_formula(self):
        rng = np.random.default_rng(3)
        d = random_units(rng, 100)
        n = random_units(rng, 100)
        out = reflect(d, n)
        expected = d - 2 * np.sum(d * n, axis=1, keepdims=True) * n
        assert np.allclose(out, expected)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


class TestRngStream:
    def test_identical_streams_bitwise(self):
        a = RngStream(42, 7).uniform(1000)
        b = RngStream(42, 7).uniform(1000)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(42, 0).uniform(1000)
        b = RngStream(42, 1).uniform(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_split_deterministic_and_distinct(self):
        s = RngStream(1, 5)
        c1 = s.split(0)
        c2 = s.split(1)
        assert c1.stream_id != c2.stream_id
        assert np.array_equal(c1.uniform(10), RngStream(1, 5).split(0).uniform(10))

    def test_counter_tracks_draws(self):
        s = RngStream(0, 0)
        s.uniform((4, 5))
        s.integers(0, 10, size=3)
        assert s.counter == 23
