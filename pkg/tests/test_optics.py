import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pelm3d import experiments, optics
from pelm3d.config import PRESETS
from pelm3d.optics import Geometry, OpticalField, OpticsError, PlaneSpec


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def desk_planes(mode="angular-spectrum", bits=0):
    return [PlaneSpec(j, z, bits, mode) for j, z in enumerate(PRESETS["desk"]["z"])]


def rel_energy_error(a, b):
    ea = np.sum(np.abs(a) ** 2, axis=(-2, -1))
    eb = np.sum(np.abs(b) ** 2, axis=(-2, -1))
    return np.max(np.abs(ea - eb) / eb)


class TestSynthesis:
    def test_zero_phase(self):
        w = optics.EmbeddingMatrix(np.zeros((4, 4)), 0)
        np.testing.assert_array_equal(optics.synthesize_field(np.zeros((4, 4)), w).grid, np.ones((4, 4)))

    def test_constant_phase(self):
        w = optics.EmbeddingMatrix(np.full((4, 4), np.pi / 2), 0)
        g = optics.synthesize_field(np.zeros((4, 4)), w).grid
        assert np.max(np.abs(g - 1j)) <= 2 * np.pi / 256

    def test_unit_modulus(self):
        rng = np.random.default_rng(0)
        w = optics.make_embedding(16, 1)
        g = optics.synthesize_field(rng.uniform(0, np.pi, (3, 16, 16)), w).grid
        np.testing.assert_allclose(np.abs(g), 1.0, rtol=0, atol=1e-15)

    def test_slm_levels(self):
        rng = np.random.default_rng(0)
        w = optics.make_embedding(16, 1)
        g = optics.synthesize_field(rng.uniform(0, np.pi, (16, 16)), w, slm_bits=8).grid
        assert len(np.unique(np.round(np.angle(g) % (2 * np.pi), 9))) <= 256

    def test_shape_mismatch(self):
        with pytest.raises(OpticsError):
            optics.synthesize_field(np.zeros((4, 4)), optics.make_embedding(5, 0))

    def test_embedding_seeded_and_in_range(self):
        a, b = optics.make_embedding(32, 7), optics.make_embedding(32, 7)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.min() >= 0 and a.values.max() <= np.pi


class TestPropagation:
    def test_far_field_matches_dft_matrix(self):
        n = 8
        rng = np.random.default_rng(0)
        a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        F = dft_matrix(n)
        s = np.fft.ifftshift(np.eye(n), axes=0)  # permutation matrix of ifftshift
        P = np.fft.fftshift(np.eye(n), axes=0)
        ref = P @ F @ s @ a @ s.T @ F.T @ P.T
        np.testing.assert_allclose(optics.far_field(a), ref, atol=1e-12)

    def test_fresnel_step_matches_dft_matrix(self):
        n, z, lam, dx = 8, 5e-3, 532e-9, 8e-6
        rng = np.random.default_rng(1)
        focal = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        F = dft_matrix(n)
        f = np.fft.fftfreq(n, dx)
        H = np.exp(-1j * np.pi * lam * z * (f[:, None] ** 2 + f[None, :] ** 2))
        ref = F.conj().T @ ((F @ focal @ F.T) * H) @ F.conj()
        # Undo the lens step so that propagate() sees `focal` at the focal plane.
        fld = OpticalField(np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(focal), norm="ortho")))
        out = optics.propagate(fld, PlaneSpec(0, z), Geometry(lam, dx)).grid
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_uniform_field_focuses_to_center(self):
        n = 16
        focal = optics.far_field(np.ones((n, n)))
        assert abs(focal[n // 2, n // 2]) ** 2 == pytest.approx(n * n, rel=1e-12)
        focal[n // 2, n // 2] = 0
        assert np.max(np.abs(focal)) < 1e-12

    @pytest.mark.parametrize("mode", optics.MODES)
    @pytest.mark.parametrize("grid", [None, 48])
    def test_unitary(self, mode, grid):
        rng = np.random.default_rng(2)
        g = Geometry(grid=grid)
        fld = optics.synthesize_field(rng.uniform(0, np.pi, (4, 32, 32)), optics.make_embedding(32, 0), 8, g)
        for p in desk_planes(mode):
            assert rel_energy_error(optics.propagate(fld, p, g).grid, fld.grid) < 1e-9

    def test_random_unitary_is_unitary_matrix(self):
        n = 4
        U = optics.random_unitary(n, 3)
        cols = np.stack([U(np.eye(n * n)[k].reshape(n, n)).ravel() for k in range(n * n)], axis=1)
        np.testing.assert_allclose(cols.conj().T @ cols, np.eye(n * n), atol=1e-12)
        assert np.all(np.abs(cols) > 0)

    def test_nonpositive_z(self):
        with pytest.raises(OpticsError):
            optics.propagate(OpticalField(np.ones((4, 4))), PlaneSpec(0, 0.0))

    def test_grid_too_small(self):
        with pytest.raises(OpticsError):
            optics.propagate(OpticalField(np.ones((8, 8))), PlaneSpec(0, 1e-3), Geometry(grid=4))

    def test_planes_differ(self):
        rng = np.random.default_rng(3)
        fld = optics.synthesize_field(rng.uniform(0, np.pi, (32, 32)), optics.make_embedding(32, 0))
        a, b = (np.abs(optics.propagate(fld, p).grid) ** 2 for p in desk_planes()[:2])
        assert np.max(np.abs(a - b)) > 1e-3


class TestDetection:
    def test_ones(self):
        assert optics.detect(np.ones((3, 3)), PlaneSpec(0, 1e-3)).tolist() == [[1.0] * 3] * 3

    def test_full_precision_is_modulus_squared(self):
        z = np.random.default_rng(0).standard_normal((5, 5)) * (1 + 2j)
        np.testing.assert_array_equal(optics.detect(z, PlaneSpec(0, 1e-3)), np.abs(z) ** 2)

    @pytest.mark.parametrize("bits", [8, 12])
    def test_quantized_levels(self, bits):
        z = np.random.default_rng(0).standard_normal((64, 64)) * 3
        out = optics.detect(z, PlaneSpec(0, 1e-3, bits), scale=5.0)
        assert len(np.unique(out)) <= 2 ** bits
        assert out.min() >= 0 and out.max() <= 5.0 + 1e-12

    def test_quantization_needs_scale(self):
        with pytest.raises(OpticsError):
            optics.detect(np.ones((2, 2)), PlaneSpec(0, 1e-3, 8))

    def test_noise_clamped_at_zero(self):
        out = optics.detect(np.zeros((2, 2)), PlaneSpec(0, 1e-3), noise=-np.ones((2, 2)))
        assert np.all(out == 0)


class TestBinning:
    def test_constant(self):
        np.testing.assert_array_equal(optics.bin_channels(np.full((6, 6), 2.5), 3), np.full(4, 2.5))

    def test_quadrants(self):
        a = np.arange(16.0).reshape(4, 4)
        assert optics.bin_channels(a, 2).tolist() == [2.5, 4.5, 10.5, 12.5]

    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        assert optics.bin_channels(a, 1).tolist() == list(range(9))

    def test_remainder_dropped(self):
        a = np.arange(25.0).reshape(5, 5)
        assert optics.bin_channels(a, 2).tolist() == [3.0, 5.0, 13.0, 15.0]

    def test_bad_block(self):
        with pytest.raises(OpticsError):
            optics.bin_channels(np.ones((4, 4)), 5)


class TestMapDataset:
    def _masks(self, n=6, side=16, seed=0):
        return np.random.default_rng(seed).uniform(0, np.pi, (n, side, side))

    def test_shape_and_channel_map(self):
        fm = optics.map_dataset(self._masks(), optics.make_embedding(16, 0), desk_planes(), block=2)
        assert fm.shape == (6, 3 * 64)
        assert fm.values.dtype == np.float32
        assert np.all(fm.values >= 0)
        assert fm.channel_map.shape == (192, 3)
        assert fm.plane_columns(1).tolist() == list(range(64, 128))

    def test_capacity_shape(self):
        planes = [PlaneSpec(j, z) for j, z in enumerate(PRESETS["paper"]["z"])]
        g = Geometry(grid=PRESETS["paper"]["grid"])
        fm = optics.map_dataset(self._masks(1, 362), optics.make_embedding(362, 0), planes, PRESETS["paper"]["block"], g)
        assert fm.shape == (1, 120_000)
        assert experiments.capacity(362 * 362, fm.shape[1]).capacity == 15_725_280_000

    def test_single_channel(self):
        fm = optics.map_dataset(self._masks(), optics.make_embedding(16, 0), [PlaneSpec(0, 1e-3)], block=16)
        assert fm.shape == (6, 1)
        # Mean intensity over the whole grid is the (unit) energy per mode.
        np.testing.assert_allclose(fm.values[:, 0], 1.0, rtol=1e-5)

    def test_identical_rows(self):
        m = self._masks(1)
        fm = optics.map_dataset(np.concatenate([m, m]), optics.make_embedding(16, 0), desk_planes())
        np.testing.assert_array_equal(fm.values[0], fm.values[1])

    def test_deterministic_and_batch_invariant(self):
        m, w = self._masks(9), optics.make_embedding(16, 4)
        g = Geometry(noise_std=0.01, noise_seed=3)
        a = optics.map_dataset(m, w, desk_planes(), geometry=g, batch_size=4)
        b = optics.map_dataset(m, w, desk_planes(), geometry=g, batch_size=9)
        np.testing.assert_array_equal(a.values, b.values)

    def test_not_affine(self):
        rng = np.random.default_rng(5)
        w = optics.make_embedding(16, 0)
        a, b = rng.uniform(0, np.pi / 2, (2, 16, 16))
        g = Geometry(slm_bits=0)
        f = lambda x: optics.map_dataset(x, w, desk_planes(), geometry=g).values.astype(np.float64)[0]
        zero = f(np.zeros((16, 16)))
        lhs = f(a + b) - zero
        rhs = (f(a) - zero) + (f(b) - zero)
        assert np.linalg.norm(lhs - rhs) > 1e-2 * np.linalg.norm(rhs)

    def test_quantized_distinct_values_per_plane(self):
        m, w = self._masks(8), optics.make_embedding(16, 0)
        planes = desk_planes(bits=8)
        cal = optics.calibrate(m[:4], w, planes, Geometry())
        fm = optics.map_dataset(m, w, planes, calibration=cal)
        for p in planes:
            assert len(np.unique(fm.values[:, fm.plane_columns(p.plane_id)])) <= 256

    def test_quantized_needs_calibration(self):
        with pytest.raises(OpticsError, match="calibration"):
            optics.map_dataset(self._masks(), optics.make_embedding(16, 0), desk_planes(bits=8))

    def test_duplicate_plane_ids(self):
        with pytest.raises(OpticsError):
            optics.map_dataset(self._masks(), optics.make_embedding(16, 0), [PlaneSpec(0, 1e-3), PlaneSpec(0, 2e-3)])

    def test_plane_spec_validation(self):
        with pytest.raises(OpticsError):
            PlaneSpec(0, 1e-3, detector_bits=10)
        with pytest.raises(OpticsError):
            PlaneSpec(0, 1e-3, mode="ray-tracing")

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 16), st.sampled_from(optics.MODES))
    def test_features_nonnegative_finite(self, seed, mode):
        fm = optics.map_dataset(self._masks(2, 8, seed), optics.make_embedding(8, seed), desk_planes(mode))
        assert np.all(np.isfinite(fm.values)) and np.all(fm.values >= 0)


class TestFeatureFile:
    def _fm(self):
        m = np.random.default_rng(0).uniform(0, np.pi, (3, 8, 8))
        return optics.map_dataset(m, optics.make_embedding(8, 2), desk_planes(), block=2, geometry=Geometry(plane_seed=5))

    def test_round_trip(self, tmp_path):
        fm = self._fm()
        optics.write_features(tmp_path / "f.bin", fm)
        back = optics.read_features(tmp_path / "f.bin")
        np.testing.assert_array_equal(back.values, fm.values)
        np.testing.assert_array_equal(back.channel_map, fm.channel_map)
        assert back.planes == fm.planes
        assert back.block == 2 and back.embedding_seed == 2 and back.geometry.plane_seed == 5

    def test_truncated(self, tmp_path):
        p = tmp_path / "f.bin"
        optics.write_features(p, self._fm())
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(optics.FeatureFileError):
            optics.read_features(p)

    def test_missing_sidecar(self, tmp_path):
        p = tmp_path / "f.bin"
        optics.write_features(p, self._fm())
        (tmp_path / "f.bin.json").unlink()
        with pytest.raises((optics.FeatureFileError, OSError)):
            optics.read_features(p)


class TestDecorrelation:
    def test_desk_preset(self):
        masks = np.random.default_rng(0).uniform(0, np.pi, (64, 128, 128))
        rep = experiments.plane_correlation_diagnostic(masks, optics.make_embedding(128, 0), desk_planes())
        np.testing.assert_allclose(np.diag(rep.mean), 1.0)
        assert rep.max_off_diagonal() < 0.05
        assert rep.undefined == []
