"""Linear equilibrium layer: exact solutions, iteration, and Monte-Carlo
estimators for every statistic the closed forms predict.

The fixed point of ``z = W z + x`` is ``z* = (I - W)^{-1} x``; statistics are
averaged over matrix seeds with streams derived from
(base_seed, family, grid label, replicate), so sweeps are reproducible and
parallelizable.  Seeds whose matrix is singular to tolerance or whose
iteration overflows are counted as diverged, never fatal: near threshold,
occasional divergence is the phenomenon under study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics
from .analytic_moments import (
    MomentQuery,
    MomentReport,
    Quantity,
    WeightMode,
    critical_scale,
    gram_trace_factor_theory,
    length_variance_theory,
    variance_factor_theory,
)
from .ensembles import EnsembleSpec, SeedDerivation, sample, seed_for

_OVERFLOW_NORM = 1e150


class InputMode(str, Enum):
    FIXED_VECTOR = "fixed_vector"
    GAUSSIAN_RANDOM = "gaussian_random"


@dataclass(frozen=True)
class LinearDeqProblem:
    spec: EnsembleSpec
    x: np.ndarray
    weight_mode: WeightMode = WeightMode.TIED
    input_mode: InputMode = InputMode.FIXED_VECTOR
    input_variance: float = 1.0

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "input_mode", InputMode(self.input_mode))
        if not np.all(np.isfinite(x)):
            raise ValueError("input vector contains non-finite entries")
        if self.input_variance < 0:
            raise ValueError("input variance must be >= 0")


@dataclass(frozen=True)
class FixedPointResult:
    solution: np.ndarray
    iterations: int
    final_residual: float
    converged: bool


def solve_closed_form(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``z* = (I - W)^{-1} x``; raises SingularMatrixError at threshold."""
    w = np.asarray(w, dtype=float)
    return numerics.solve_linear(np.eye(w.shape[0]) - w, np.asarray(x, dtype=float))


def iterate_tied(
    w: np.ndarray,
    x: np.ndarray,
    z0: np.ndarray | None = None,
    t_max: int = 10_000,
    tol: float = 1e-10,
) -> FixedPointResult:
    """Run ``z <- W z + x`` until the step norm ``||dz|| / sqrt(N)`` drops
    below tol or the budget runs out.  Overflow yields a diverged result,
    not an exception."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    z = np.zeros_like(x) if z0 is None else np.asarray(z0, dtype=float).copy()
    residual = math.inf
    for t in range(1, t_max + 1):
        z_next = w @ z + x
        residual = float(np.linalg.norm(z_next - z) / math.sqrt(n))
        z = z_next
        if not np.isfinite(residual) or np.linalg.norm(z) > _OVERFLOW_NORM:
            return FixedPointResult(z, t, math.inf, False)
        if residual <= tol:
            return FixedPointResult(z, t, residual, True)
    return FixedPointResult(z, t_max, residual, False)


def iterate_untied(spec: EnsembleSpec, x: np.ndarray, t: int, seed: SeedDerivation) -> np.ndarray:
    """State after t weight applications of ``z <- W_k z + x`` with a fresh
    matrix each step, starting from the zero state.

    t = 0 returns the zero initial state; for t >= 1 the deepest term of the
    unrolled sum carries t matrices, so the per-coordinate variance is
    ``(x.x / N) * sum_{k=1..t} V^k``.  Step k uses the stream
    ``seed.child(k)``.
    """
    if t < 0:
        raise ValueError(f"step count must be >= 0, got {t}")
    x = np.asarray(x, dtype=float)
    if t == 0:
        return np.zeros_like(x)
    z = x.copy()
    for k in range(1, t + 1):
        w = sample(spec, seed.child(k))
        z = w @ z + x
    return z


def untied_propagator(spec: EnsembleSpec, seed: SeedDerivation, t_stop: int) -> np.ndarray:
    """Truncated summed product ``M = I + W_1 + W_2 W_1 + ...`` with t_stop terms."""
    n = spec.dim
    m = np.eye(n)
    prod = np.eye(n)
    for k in range(1, t_stop + 1):
        w = sample(spec, seed.child(k))
        prod = w @ prod
        m += prod
    return m


def untied_truncation_depth(v: float, bias_tol: float = 1e-6) -> int:
    """Smallest t with ``V^t < bias_tol`` (series tail below the noise floor)."""
    if not 0.0 <= v < 1.0:
        raise ValueError(f"need 0 <= V < 1, got {v}")
    if v == 0.0:
        return 1
    return max(1, math.ceil(math.log(bias_tol) / math.log(v)))


def _stats_report(
    query: MomentQuery,
    theory: float,
    values: list[float],
    n_seeds: int,
    n_diverged: int,
) -> MomentReport:
    arr = np.asarray(values, dtype=float)
    return MomentReport(
        query=query,
        theory_value=theory,
        mc_mean=float(arr.mean()),
        mc_stderr=float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0,
        mc_median=float(np.median(arr)),
        mc_q25=float(np.quantile(arr, 0.25)),
        mc_q75=float(np.quantile(arr, 0.75)),
        n_seeds=n_seeds,
        n_diverged=n_diverged,
    )


def estimate_moments(
    problem: LinearDeqProblem, n_seeds: int, base_seed: int = 0, grid_label: int = 0
) -> MomentReport:
    """Monte-Carlo variance factor ``N Var[z*_i] / (x.x)`` over matrix seeds.

    Uses the identity ``N Var[z*_i] = E[z*.z*] - x.x`` (mean is x), so each
    seed contributes the self-averaging statistic ``(z*.z* - x.x)/(x.x)``.
    Untied mode propagates to the truncation depth instead of solving.
    Singular or overflowing seeds are excluded and counted.
    """
    if n_seeds < 2:
        raise ValueError("need at least 2 seeds")
    spec, x, mode = problem.spec, problem.x, problem.weight_mode
    query = MomentQuery(spec.family, mode, spec.scale, Quantity.VARIANCE_FACTOR)
    theory = variance_factor_theory(spec.family, mode, spec.scale)
    xx = float(x @ x)
    if xx == 0.0:
        raise ValueError("input vector must be nonzero")
    t_stop = untied_truncation_depth(spec.scale) if mode is WeightMode.UNTIED else 0
    values: list[float] = []
    n_diverged = 0
    for rep in range(n_seeds):
        seed = seed_for(base_seed, spec.family, grid_label, rep)
        try:
            if mode is WeightMode.TIED:
                z = solve_closed_form(sample(spec, seed), x)
            else:
                z = iterate_untied(spec, x, t_stop, seed)
            if not np.all(np.isfinite(z)):
                raise numerics.SingularMatrixError("overflow")
            values.append((float(z @ z) - xx) / xx)
        except numerics.SingularMatrixError:
            n_diverged += 1
    if not values:
        raise numerics.SingularMatrixError("all seeds diverged")
    return _stats_report(query, theory, values, n_seeds, n_diverged)


def estimate_length_variance(
    spec: EnsembleSpec,
    weight_mode: WeightMode,
    n_seeds: int,
    estimator_mode: str = "exact",
    base_seed: int = 0,
    grid_label: int = 0,
    n_probes: int = 32,
) -> MomentReport:
    """Monte-Carlo fourth-moment factor ``tr[(M^T M)^2] / N`` over seeds.

    Tied: M = (I - W)^{-1}, per-seed trace exact or Hutchinson.  Untied: the
    summed product truncated where the scale bias drops below 1e-6, then the
    exact normalized trace.  The median and quartiles are reported alongside
    the mean because single-seed values are heavy-tailed near threshold for
    the non-orthogonal families.
    """
    weight_mode = WeightMode(weight_mode)
    if estimator_mode not in ("exact", "hutchinson"):
        raise ValueError(f"unknown estimator mode {estimator_mode!r}")
    query = MomentQuery(spec.family, weight_mode, spec.scale, Quantity.LENGTH_VARIANCE_T)
    theory = length_variance_theory(spec.family, weight_mode, spec.scale)
    values: list[float] = []
    n_diverged = 0
    t_stop = untied_truncation_depth(spec.scale) if weight_mode is WeightMode.UNTIED else 0
    for rep in range(n_seeds):
        seed = seed_for(base_seed, spec.family, grid_label, rep)
        try:
            if weight_mode is WeightMode.TIED:
                a = np.eye(spec.dim) - sample(spec, seed)
                if estimator_mode == "exact":
                    values.append(numerics.gram_inverse_sq_trace(a))
                else:
                    est, _ = numerics.gram_inverse_sq_trace_hutchinson(
                        a, n_probes=n_probes, rng=seed.child(10_001).generator()
                    )
                    values.append(est)
            else:
                m = untied_propagator(spec, seed, t_stop)
                gram = m.T @ m
                values.append(float(np.sum(gram * gram)) / spec.dim)
        except numerics.SingularMatrixError:
            n_diverged += 1
    if not values:
        raise numerics.SingularMatrixError("all seeds diverged")
    return _stats_report(query, theory, values, n_seeds, n_diverged)


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    lhs: float
    rhs: float
    diverged: bool = False


def check_convergence_bound(w: np.ndarray, x: np.ndarray, t: int, v: float) -> BoundCheck:
    """Check ``max_i |z*_i - (z_t)_i|^2 <= (2t / (1-V)) (x.x) V^{t+1}``.

    The bound is probabilistic over matrix draws, so callers aggregate the
    pass rate over seeds.  A singular ``I - W`` yields a diverged record.
    """
    if not 0.0 <= v < 1.0:
        raise ValueError(f"need 0 <= V < 1, got {v}")
    x = np.asarray(x, dtype=float)
    rhs = (2.0 * t / (1.0 - v)) * float(x @ x) * v ** (t + 1)
    try:
        z_star = solve_closed_form(w, x)
    except numerics.SingularMatrixError:
        return BoundCheck(False, math.inf, rhs, diverged=True)
    z_t = iterate_tied(w, x, t_max=t, tol=0.0).solution
    if not np.all(np.isfinite(z_t)):
        return BoundCheck(False, math.inf, rhs, diverged=True)
    lhs = float(np.max((z_star - z_t) ** 2))
    return BoundCheck(lhs <= rhs, lhs, rhs)


@dataclass(frozen=True)
class LinearKernels:
    """Empirical output-covariance and gradient kernels with the theory factor.

    ``nngp_empirical`` is ``E[z*(x) . z*(x')] / N``.  ``ntk_empirical`` is the
    gradient-alignment kernel divided by ``x . x'``, so at V = 0 it equals 1;
    the matching theory factor is the squared normalized gram trace of
    ``(I - W)^{-1}``.
    """

    nngp_empirical: float
    ntk_empirical: float
    ntk_stderr: float
    ntk_theory_factor: float
    n_seeds: int
    n_diverged: int


def linear_kernels(
    spec: EnsembleSpec,
    x: np.ndarray,
    x_prime: np.ndarray,
    n_seeds: int,
    base_seed: int = 0,
) -> LinearKernels:
    """Monte-Carlo kernels of the linear layer with readout ``f = v . z*``.

    Per seed: draw W and a readout v with coordinate variance 1/N; the
    gradient of f with respect to W is the rank-one matrix
    ``((I-W)^{-T} v) z*^T``, so the kernel sample for an input pair is
    ``||(I-W)^{-T} v||^2 * (z*(x) . z*(x'))``.
    """
    if critical_scale(spec.family, WeightMode.TIED) <= spec.scale:
        raise ValueError("kernels require a subcritical scale")
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    xxp = float(x @ xp)
    if xxp == 0.0:
        raise ValueError("x . x' must be nonzero to normalize the kernel")
    n = spec.dim
    eye = np.eye(n)
    gram_factor = gram_trace_factor_theory(spec.family, WeightMode.TIED, spec.scale)
    nngp_vals: list[float] = []
    ntk_vals: list[float] = []
    n_diverged = 0
    for rep in range(n_seeds):
        seed = seed_for(base_seed, spec.family, 1, rep)
        w = sample(spec, seed)
        try:
            z = numerics.solve_linear(eye - w, x)
            zp = numerics.solve_linear(eye - w, xp)
            v = seed.child(2).generator().standard_normal(n) / math.sqrt(n)
            a = numerics.solve_linear(eye - w.T, v)
        except numerics.SingularMatrixError:
            n_diverged += 1
            continue
        nngp_vals.append(float(z @ zp) / n)
        ntk_vals.append(float(a @ a) * float(z @ zp) / xxp)
    if not ntk_vals:
        raise numerics.SingularMatrixError("all seeds diverged")
    ntk = np.asarray(ntk_vals)
    return LinearKernels(
        nngp_empirical=float(np.mean(nngp_vals)),
        ntk_empirical=float(ntk.mean()),
        ntk_stderr=float(ntk.std(ddof=1) / math.sqrt(ntk.size)) if ntk.size > 1 else 0.0,
        ntk_theory_factor=gram_factor**2,
        n_seeds=n_seeds,
        n_diverged=n_diverged,
    )
