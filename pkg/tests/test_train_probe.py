import math

import numpy as np
import pytest

from deqlab import train_probe as tp
from deqlab.ensembles import EnsembleSpec, Family, sample, seed_for
from deqlab.linear_deq import solve_closed_form
from deqlab.nonlinear_deq import HARD_TANH, IDENTITY
from deqlab.numerics import SingularMatrixError


def _x(n, seed=0):
    return np.random.default_rng(seed).standard_normal(n)


def finite_difference_grad(w, x, phi, v, step=1e-5):
    """Central-difference reference gradient; solves to near machine precision."""
    n = w.shape[0]
    grad = np.empty_like(w)
    for a in range(n):
        for b in range(n):
            wp, wm = w.copy(), w.copy()
            wp[a, b] += step
            wm[a, b] -= step
            fp = tp.deq_forward(wp, x, phi, tol=1e-13)
            fm = tp.deq_forward(wm, x, phi, tol=1e-13)
            assert fp.converged and fm.converged
            grad[a, b] = (v @ fp.solution - v @ fm.solution) / (2 * step)
    return grad


class TestDeqForward:
    def test_zero_weights(self):
        x = _x(9)
        res = tp.deq_forward(np.zeros((9, 9)), x, HARD_TANH, tol=1e-12)
        assert res.converged and np.allclose(res.solution, x)

    def test_identity_matches_closed_form(self):
        n = 120
        w = sample(EnsembleSpec(Family.RANDOM, n, 0.2), seed_for(0, Family.RANDOM, 0, 0))
        x = _x(n, 1)
        res = tp.deq_forward(w, x, IDENTITY, tol=1e-12)
        assert res.converged
        assert np.abs(res.solution - solve_closed_form(w, x)).max() < 1e-9

    def test_hardtanh_residual(self):
        n = 300
        w = sample(EnsembleSpec(Family.ORTHOGONAL, n, 0.25), seed_for(1, Family.ORTHOGONAL, 0, 0))
        x = _x(n, 2)
        res = tp.deq_forward(w, x, HARD_TANH, tol=1e-11)
        assert res.converged
        assert np.abs(res.solution - HARD_TANH.phi(w @ res.solution) - x).max() < 1e-9

    def test_supercritical_flagged_not_raised(self):
        n = 60
        w = sample(EnsembleSpec(Family.ORTHOGONAL, n, 1.44), seed_for(2, Family.ORTHOGONAL, 0, 0))
        res = tp.deq_forward(w, _x(n, 3), IDENTITY, t_max=500)
        assert not res.converged


class TestDeqVjp:
    def test_zero_weights_identity(self):
        n = 7
        x, v = _x(n, 4), _x(n, 5)
        grad = tp.deq_vjp(np.zeros((n, n)), x, IDENTITY, v)
        assert np.allclose(grad, np.outer(v, x))

    def test_identity_closed_form(self):
        n = 40
        w = sample(EnsembleSpec(Family.RANDOM, n, 0.25), seed_for(3, Family.RANDOM, 0, 0))
        x, v = _x(n, 6), _x(n, 7)
        grad = tp.deq_vjp(w, x, IDENTITY, v)
        eye = np.eye(n)
        expected = np.outer(np.linalg.solve(eye - w.T, v), np.linalg.solve(eye - w, x))
        assert np.abs(grad - expected).max() < 1e-10 * np.abs(expected).max()

    @pytest.mark.parametrize("phi", [IDENTITY, HARD_TANH])
    def test_matches_finite_differences(self, phi):
        n = 10
        w = sample(EnsembleSpec(Family.RANDOM, n, 0.09), seed_for(4, Family.RANDOM, 0, 0))
        x, v = _x(n, 8), _x(n, 9)
        grad = tp.deq_vjp(w, x, phi, v)
        fd = finite_difference_grad(w, x, phi, v)
        rel = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
        assert rel < 1e-5

    def test_singular_adjoint_raises(self):
        n = 5
        with pytest.raises(SingularMatrixError):
            tp.deq_vjp(np.eye(n), _x(n, 10), IDENTITY, _x(n, 11), z_star=np.zeros(n))


class TestProbeTask:
    def test_dataset_deterministic_and_split(self):
        task = tp.ProbeTask(teacher_seed=3, n_samples=20, dim=6)
        xs1, ys1, xv1, yv1 = task.dataset()
        xs2, ys2, _, _ = task.dataset()
        assert np.array_equal(xs1, xs2) and np.array_equal(ys1, ys2)
        assert xs1.shape == (16, 6) and xv1.shape == (4, 6)


class TestTrainSweep:
    def test_deep_subcritical_never_diverges(self):
        task = tp.ProbeTask(teacher_seed=1, n_samples=12, dim=24)
        records = tp.train_stability_sweep(
            task, [Family.RANDOM], [0.05], n_seeds=10, lr=0.05, steps=8, phi=HARD_TANH
        )
        assert len(records) == 10
        assert all(not r.diverged for r in records)

    def test_supercritical_identity_fails_at_step_zero(self):
        task = tp.ProbeTask(teacher_seed=1, n_samples=8, dim=24)
        records = tp.train_stability_sweep(
            task, [Family.ORTHOGONAL], [1.2], n_seeds=5, lr=0.01, steps=5, phi=IDENTITY
        )
        assert all(r.diverged for r in records)
        assert all(r.steps_to_threshold is None for r in records)

    def test_loss_decreases_in_subcritical_regime(self):
        # ten plain descent steps through the implicit gradient
        task = tp.ProbeTask(teacher_seed=2, n_samples=12, dim=20)
        xs, ys, _, _ = task.dataset()
        for sq in (0.1, 0.2):
            spec = EnsembleSpec(Family.RANDOM, 20, sq * sq)
            seed = seed_for(10, Family.RANDOM, 0, 0)
            w = sample(spec, seed)
            v = seed.child(1).generator().standard_normal(20) / math.sqrt(20)
            losses = []
            for _ in range(10):
                preds = np.empty(len(ys))
                grad_w = np.zeros_like(w)
                grad_v = np.zeros_like(v)
                z_stars = []
                for i in range(len(ys)):
                    fp = tp.deq_forward(w, xs[i], HARD_TANH, tol=1e-12)
                    z_stars.append(fp.solution)
                    preds[i] = v @ fp.solution
                errs = preds - ys
                losses.append(float(np.mean(errs**2)))
                for i in range(len(ys)):
                    grad_w += (2 * errs[i] / len(ys)) * tp.deq_vjp(w, xs[i], HARD_TANH, v, z_star=z_stars[i])
                    grad_v += (2 * errs[i] / len(ys)) * z_stars[i]
                w = w - 0.05 * grad_w
                v = v - 0.05 * grad_v
            assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_summary_shapes(self):
        task = tp.ProbeTask(teacher_seed=1, n_samples=10, dim=16)
        records = tp.train_stability_sweep(
            task, [Family.GOE, Family.ORTHOGONAL], [0.1, 0.4], n_seeds=3, lr=0.05, steps=5, phi=HARD_TANH
        )
        cells = tp.summarize_sweep(records)
        assert len(cells) == 4
        assert all(0.0 <= c.divergence_rate <= 1.0 for c in cells)
