import math

import numpy as np
import pytest

from deqlab import numerics
from deqlab.ensembles import EnsembleSpec, Family, sample, seed_for
from deqlab.freeprob import kolmogorov_distance, semicircle_cdf


class TestSolveLinear:
    def test_identity(self):
        b = np.arange(1.0, 6.0)
        assert np.allclose(numerics.solve_linear(np.eye(5), b), b)

    def test_scaled_identity(self):
        x = numerics.solve_linear(2 * np.eye(4), np.ones(4))
        assert np.allclose(x, 0.5)

    def test_orthogonal_shift_residual(self):
        n = 300
        w = sample(EnsembleSpec(Family.ORTHOGONAL, n, 0.25), seed_for(0, Family.ORTHOGONAL, 0, 0))
        a = np.eye(n) - w
        b = seed_for(0, Family.ORTHOGONAL, 0, 1).generator().standard_normal(n)
        x = numerics.solve_linear(a, b)
        assert np.linalg.norm(a @ x - b) < 1e-10 * np.linalg.norm(b)

    def test_singular_raises(self):
        a = np.ones((3, 3))
        with pytest.raises(numerics.SingularMatrixError):
            numerics.solve_linear(a, np.ones(3))

    def test_nonfinite_rejected(self):
        a = np.eye(2)
        a[0, 0] = np.nan
        with pytest.raises(ValueError):
            numerics.solve_linear(a, np.ones(2))


class TestGramInverseSqTrace:
    def test_identity(self):
        assert numerics.gram_inverse_sq_trace(np.eye(12)) == pytest.approx(1.0)

    def test_scaled_identity(self):
        assert numerics.gram_inverse_sq_trace(2 * np.eye(9)) == pytest.approx(0.0625)

    def test_orthogonal_shift_matches_closed_form(self):
        # I - W for an orthogonal draw at scale 0.5: the normalized trace of
        # the squared inverse gram equals 2/(1-V)^3 - 1/(1-V)^2 = 12.
        n = 2000
        w = sample(EnsembleSpec(Family.ORTHOGONAL, n, 0.5), seed_for(1, Family.ORTHOGONAL, 0, 0))
        val = numerics.gram_inverse_sq_trace(np.eye(n) - w)
        assert val == pytest.approx(12.0, rel=0.05)

    def test_singular_raises(self):
        with pytest.raises(numerics.SingularMatrixError):
            numerics.gram_inverse_sq_trace(np.diag([1.0, 0.0, 2.0]))

    def test_hutchinson_agrees_within_three_sigma(self):
        n = 500
        w = sample(EnsembleSpec(Family.RANDOM, n, 0.4), seed_for(2, Family.RANDOM, 0, 0))
        a = np.eye(n) - w
        exact = numerics.gram_inverse_sq_trace(a)
        est, stderr = numerics.gram_inverse_sq_trace_hutchinson(
            a, n_probes=64, rng=np.random.default_rng(42)
        )
        assert abs(est - exact) < 3 * stderr


class TestSymSpectrum:
    def test_diagonal(self):
        assert np.allclose(numerics.sym_spectrum(np.diag([3.0, 1.0, 2.0])), [1, 2, 3])

    def test_zero(self):
        assert np.allclose(numerics.sym_spectrum(np.zeros((5, 5))), 0.0)

    def test_goe_semicircle_ks(self):
        n, v = 2000, 1.0
        w = sample(EnsembleSpec(Family.GOE, n, v), seed_for(3, Family.GOE, 0, 0))
        eigs = numerics.sym_spectrum(w)
        assert kolmogorov_distance(eigs, lambda x: semicircle_cdf(x, 2.0 * np.sqrt(v))) < 0.05

    def test_eigenpair_residuals(self):
        n = 300
        w = sample(EnsembleSpec(Family.GOE, n, 0.5), seed_for(4, Family.GOE, 0, 0))
        eigs, vecs = np.linalg.eigh(w)
        lib_eigs = numerics.sym_spectrum(w)
        assert np.allclose(lib_eigs, eigs)
        residual = np.linalg.norm(w @ vecs - vecs * eigs, axis=0).max()
        assert residual <= 1e-8 * np.linalg.norm(w, 2)

    def test_asymmetric_rejected(self):
        m = np.eye(3)
        m[0, 1] = 1e-6
        with pytest.raises(ValueError):
            numerics.sym_spectrum(m)


class TestSpectralRadius:
    def test_diagonal(self):
        r = numerics.spectral_radius_estimate(np.diag([0.3, -0.9]))
        assert abs(r - 0.9) <= 1e-3

    def test_scaled_rotation_complex_pair(self):
        m = 0.7 * np.array([[0.0, -1.0], [1.0, 0.0]])
        assert abs(numerics.spectral_radius_estimate(m) - 0.7) <= 1e-3

    def test_scaled_orthogonal(self):
        w = sample(EnsembleSpec(Family.ORTHOGONAL, 200, 0.49), seed_for(5, Family.ORTHOGONAL, 0, 0))
        assert abs(numerics.spectral_radius_estimate(w) - 0.7) <= 1e-3

    def test_zero_matrix(self):
        assert numerics.spectral_radius_estimate(np.zeros((4, 4))) == 0.0

    def test_matches_symmetric_solver(self):
        w = sample(EnsembleSpec(Family.GOE, 400, 0.3), seed_for(6, Family.GOE, 0, 0))
        direct = np.abs(numerics.sym_spectrum(w)).max()
        assert abs(numerics.spectral_radius_estimate(w, tol=1e-3) - direct) <= 1e-3 * direct

    def test_nonfinite_rejected(self):
        m = np.eye(2)
        m[1, 1] = np.inf
        with pytest.raises(ValueError):
            numerics.spectral_radius_estimate(m)


class TestGaussHermiteExpect:
    def test_second_moment(self):
        for s in (0.3, 1.0, 7.0, 100.0):
            val = numerics.gauss_hermite_expect(lambda h: h**2, 0.0, s)
            assert val == pytest.approx(s, rel=1e-10)

    def test_polynomial_moments_exact(self):
        # E[h^4] = 3 s^2, E[h^6] = 15 s^3 for centered Gaussians
        s = 2.5
        assert numerics.gauss_hermite_expect(lambda h: h**4, 0.0, s) == pytest.approx(3 * s * s, rel=1e-12)
        assert numerics.gauss_hermite_expect(lambda h: h**6, 0.0, s) == pytest.approx(15 * s**3, rel=1e-12)

    def test_mean_shift(self):
        val = numerics.gauss_hermite_expect(lambda h: h, 1.7, 0.9)
        assert val == pytest.approx(1.7, rel=1e-12)

    def test_hard_tanh_square_vanishes_at_zero_variance(self):
        val = numerics.gauss_hermite_expect(lambda h: np.clip(h, -1, 1) ** 2, 0.0, 0.0)
        assert val == 0.0

    def test_indicator_matches_erf(self):
        val = numerics.gauss_hermite_expect(lambda h: (np.abs(h) < 1).astype(float), 0.0, 0.319)
        assert abs(val - math.erf(1 / math.sqrt(2 * 0.319))) < 1e-3
        # erf(1/sqrt(2*0.319)) = 0.9233620372384727
        assert val == pytest.approx(0.9233620372384727, abs=1e-6)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            numerics.gauss_hermite_expect(lambda h: h, 0.0, -1.0)

    def test_node_floor_enforced(self):
        with pytest.raises(ValueError):
            numerics.gauss_hermite_expect(lambda h: h, 0.0, 1.0, n_nodes=32)


class TestSpectralDensity:
    def test_normalization_enforced(self):
        grid = np.linspace(-1, 1, 101)
        density = np.full(101, 0.5)
        sd = numerics.SpectralDensity(atoms=(), grid=grid, density=density)
        assert sd.total_mass() == pytest.approx(1.0)
        with pytest.raises(ValueError):
            numerics.SpectralDensity(atoms=(), grid=grid, density=2 * density)

    def test_negative_density_rejected(self):
        grid = np.linspace(-1, 1, 11)
        density = np.full(11, 0.5)
        density[3] = -0.1
        with pytest.raises(ValueError):
            numerics.SpectralDensity(atoms=(), grid=grid, density=density)

    def test_atoms_and_cdf(self):
        sd = numerics.SpectralDensity(
            atoms=((0.0, 0.4),),
            grid=np.linspace(1.0, 2.0, 101),
            density=np.full(101, 0.6),
        )
        assert sd.atom_mass() == pytest.approx(0.4)
        assert sd.continuous_mass() == pytest.approx(0.6)
        assert sd.cdf(np.array([-1.0]))[0] == 0.0
        assert sd.cdf(np.array([0.5]))[0] == pytest.approx(0.4)
        assert sd.cdf(np.array([2.5]))[0] == pytest.approx(1.0)
        assert sd.moment(1) == pytest.approx(0.6 * 1.5)
