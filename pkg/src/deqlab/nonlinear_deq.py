"""Nonlinear equilibrium layer: pre-activation iteration, the scalar
self-consistent variance, and fixed-point stability theory vs. measurement.

The pre-activation map is ``h <- W phi(h) + W x``; its fixed point h* has
``z* = phi(h*) + x``.  Stability is governed by the spectral radius of
``W diag(phi'(h*))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .ensembles import EnsembleSpec, Family, sample, seed_for
from .linear_deq import FixedPointResult

_RESIDUAL_CLIP = 1e6
_OVERFLOW_NORM = 1e120


@dataclass(frozen=True)
class Nonlinearity:
    """Elementwise map with its derivative; monotone nondecreasing, phi(0)=0."""

    name: str
    phi: object
    dphi: object

    def __call__(self, h):
        return self.phi(h)


IDENTITY = Nonlinearity("identity", lambda h: np.asarray(h, dtype=float), lambda h: np.ones_like(np.asarray(h, dtype=float)))
HARD_TANH = Nonlinearity("hard_tanh", lambda h: np.clip(h, -1.0, 1.0), lambda h: (np.abs(np.asarray(h, dtype=float)) < 1.0).astype(float))
TANH = Nonlinearity("tanh", np.tanh, lambda h: 1.0 / np.cosh(np.asarray(h, dtype=float)) ** 2)

NONLINEARITIES = {f.name: f for f in (IDENTITY, HARD_TANH, TANH)}


class SelfConsistencyError(RuntimeError):
    """Damped scalar iteration failed to settle; carries the last state."""

    def __init__(self, message: str, last_state: "SelfConsistentState"):
        super().__init__(message)
        self.last_state = last_state


class UnsupportedNonlinearityError(ValueError):
    """GOE radius for this nonlinearity requires numerical free convolution."""


@dataclass(frozen=True)
class SelfConsistentState:
    """Solution of ``sigma_h^2 = V (sigma_phi^2 + 2 C + sigma_x^2)``.

    ``p_active`` is the mean derivative gate E[phi'(h)] under
    ``h ~ N(0, sigma_h^2)`` (the active-set probability for hard-tanh).
    """

    sigma_h_sq: float
    sigma_phi_sq: float
    c_x_phi: float
    p_active: float
    scale: float
    sigma_x_sq: float
    mean_x: float
    iterations: int
    residual: float


def iterate_h(
    w: np.ndarray,
    x: np.ndarray,
    phi: Nonlinearity,
    t_max: int = 1000,
    tol: float = 1e-9,
    h0: np.ndarray | None = None,
) -> FixedPointResult:
    """Iterate ``h <- W phi(h) + W x`` from h0 (default 0).

    Divergence is recorded (converged=False, residual clipped at 1e6), never
    raised; the residual is the step norm ``||h' - h|| / sqrt(N)``.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("input vector contains non-finite entries")
    w = np.asarray(w, dtype=float)
    n = x.shape[0]
    wx = w @ x
    h = np.zeros(n) if h0 is None else np.asarray(h0, dtype=float).copy()
    residual = math.inf
    for t in range(1, t_max + 1):
        h_next = w @ phi.phi(h) + wx
        residual = float(np.linalg.norm(h_next - h) / math.sqrt(n))
        h = h_next
        if not np.all(np.isfinite(h)) or np.linalg.norm(h) > _OVERFLOW_NORM:
            return FixedPointResult(h, t, _RESIDUAL_CLIP, False)
        if residual <= tol:
            return FixedPointResult(h, t, residual, True)
    return FixedPointResult(h, t_max, min(residual, _RESIDUAL_CLIP), False)


def sigma_h_selfconsistent(
    v: float,
    sigma_x_sq: float,
    mean_x: float,
    phi: Nonlinearity,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> SelfConsistentState:
    """Solve the scalar fixed point for the pre-activation variance.

    Models ``h_i ~ N(0, s)`` and damps ``s <- (1-a) s + a V (E[phi(h)^2]
    + 2 mean_x E[phi(h)] + sigma_x^2)`` until the update falls below tol.
    Gaussian expectations go through the quadrature kernel, so kinked maps
    (hard-tanh) are handled exactly.
    """
    if v < 0 or sigma_x_sq < 0:
        raise ValueError("scale and input variance must be >= 0")

    def rhs_parts(s: float) -> tuple[float, float]:
        sig_phi = numerics.gauss_hermite_expect(lambda h: phi.phi(h) ** 2, 0.0, s)
        c = 0.0 if mean_x == 0.0 else mean_x * numerics.gauss_hermite_expect(phi.phi, 0.0, s)
        return sig_phi, c

    s = v * sigma_x_sq
    growth_cap = 1e12 * max(1.0, sigma_x_sq) * max(1.0, v)
    residual = math.inf
    prev_delta: float | None = None
    for it in range(1, max_iter + 1):
        sig_phi, c = rhs_parts(s)
        target = v * (sig_phi + 2.0 * c + sigma_x_sq)
        residual = abs(target - s)
        if residual <= tol:
            p = numerics.gauss_hermite_expect(phi.dphi, 0.0, s)
            return SelfConsistentState(s, sig_phi, c, p, v, sigma_x_sq, mean_x, it, residual)
        delta = damping * (target - s)
        # Aitken jump when successive damped steps contract geometrically;
        # without it the iteration stalls near-threshold where the
        # contraction rate approaches 1.
        if prev_delta is not None and prev_delta != 0.0:
            ratio = delta / prev_delta
            if 1e-6 < ratio < 0.99995:
                jump = s + delta / (1.0 - ratio)
                if math.isfinite(jump) and jump >= 0.0:
                    s = jump
                    prev_delta = None
                    continue
        s += delta
        prev_delta = delta
        if not math.isfinite(s) or s < 0 or s > growth_cap:
            break
    state = SelfConsistentState(s, math.nan, math.nan, math.nan, v, sigma_x_sq, mean_x, max_iter, residual)
    raise SelfConsistencyError(
        f"no self-consistent variance after {max_iter} damped iterations (residual {residual:.2e})",
        state,
    )


def radius_theory(family: Family, v: float, phi: Nonlinearity, sigma_h_sq: float) -> float:
    """Predicted spectral radius of ``W diag(phi'(h*))`` at the fixed point.

    Random/orthogonal: ``sqrt(V E[phi'(h)^2])`` with ``h ~ N(0, sigma_h^2)``.
    GOE with a 0/1 derivative gate (identity, hard-tanh): ``2 sqrt(V p)``.
    GOE with other monotone maps is not supported here; computing that radius
    needs a numerical free multiplicative convolution.
    """
    family = Family(family)
    if sigma_h_sq < 0:
        raise ValueError("sigma_h_sq must be >= 0")
    if family is Family.GOE:
        if phi.name not in ("identity", "hard_tanh"):
            raise UnsupportedNonlinearityError(
                f"GOE radius for {phi.name!r} requires numerical free convolution"
            )
        p = numerics.gauss_hermite_expect(phi.dphi, 0.0, sigma_h_sq)
        return 2.0 * math.sqrt(v * p)
    gate_sq = numerics.gauss_hermite_expect(lambda h: phi.dphi(h) ** 2, 0.0, sigma_h_sq)
    return math.sqrt(v * gate_sq)


def radius_empirical(w: np.ndarray, h_star: np.ndarray, phi: Nonlinearity, tol: float = 1e-3) -> float:
    """Spectral radius of ``W diag(phi'(h*))``.

    Symmetric W: same spectrum as ``diag(sqrt(phi')) W diag(sqrt(phi'))``,
    handled by the symmetric eigensolver (requires phi' >= 0).  Otherwise the
    normalized-squaring radius estimator.
    """
    w = np.asarray(w, dtype=float)
    gates = np.asarray(phi.dphi(h_star), dtype=float)
    scale = max(1.0, float(np.abs(w).max()))
    if float(np.abs(w - w.T).max()) <= 1e-12 * scale:
        if np.any(gates < 0):
            raise ValueError("symmetric path requires nonnegative phi' entries")
        root = np.sqrt(gates)
        sym = root[:, None] * w * root[None, :]
        eigs = numerics.sym_spectrum(sym)
        return float(np.max(np.abs(eigs)))
    return numerics.spectral_radius_estimate(w * gates[None, :], tol=tol)


def predict_critical_v(
    family: Family,
    phi: Nonlinearity,
    sigma_x_sq: float,
    bracket: tuple[float, float] = (0.05, 4.0),
    tol: float = 1e-4,
) -> float:
    """Critical root scale: the sqrt(V) at which the predicted radius hits 1.

    Bisection on sqrt(V) of the coupled system (self-consistent variance,
    radius = 1); returns the critical value in sqrt(V) units.
    """

    def excess(sq: float) -> float:
        v = sq * sq
        try:
            state = sigma_h_selfconsistent(v, sigma_x_sq, 0.0, phi)
        except SelfConsistencyError:
            # No bounded variance solution: the layer is certainly unstable.
            return math.inf
        return radius_theory(family, v, phi, state.sigma_h_sq) - 1.0

    lo, hi = bracket
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo >= 0 or f_hi <= 0:
        raise ValueError(
            f"radius does not cross 1 on the bracket {bracket}: "
            f"excess({lo})={f_lo:.3f}, excess({hi})={f_hi:.3f}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ResidualCell:
    """One (family, sqrt-scale) cell of the long-iteration residual sweep."""

    family: Family
    sqrt_scale: float
    residual_median: float
    residual_mean: float
    residual_q25: float
    residual_q75: float
    frac_above_1e3: float
    predicted_critical: float
    n_seeds: int


def residual_sweep(
    families,
    sqrt_v_grid,
    n: int,
    n_seeds: int,
    t_probe: int = 500,
    phi: Nonlinearity = HARD_TANH,
    sigma_x_sq: float = 1.0,
    base_seed: int = 0,
    converge_floor: float = 1e-12,
) -> list[ResidualCell]:
    """Step-norm residual after t_probe iterations, per (family, sqrt V).

    Inputs have i.i.d. N(0, sigma_x^2) coordinates.  Each replicate draws one
    unit-scale base matrix and rescales it across the grid (the sweep probes
    scale dependence at fixed disorder), so grid points share seeds but each
    point's marginal law is exact.  Residuals are clipped at 1e6; iteration
    stops early once the residual falls below ``converge_floor``.
    """
    sqrt_v_grid = [float(s) for s in sqrt_v_grid]
    results: list[ResidualCell] = []
    for family in families:
        family = Family(family)
        unit = EnsembleSpec(family, n, 1.0)
        residuals = np.empty((len(sqrt_v_grid), n_seeds))
        for rep in range(n_seeds):
            seed = seed_for(base_seed, family, 7, rep)
            w_unit = sample(unit, seed)
            x = seed.child(1).generator().standard_normal(n) * math.sqrt(sigma_x_sq)
            for gi, sq in enumerate(sqrt_v_grid):
                residuals[gi, rep] = _probe_residual(sq * w_unit, x, phi, t_probe, converge_floor)
        predicted = predict_critical_v(family, phi, sigma_x_sq)
        for gi, sq in enumerate(sqrt_v_grid):
            row = residuals[gi]
            results.append(
                ResidualCell(
                    family=family,
                    sqrt_scale=sq,
                    residual_median=float(np.median(row)),
                    residual_mean=float(np.mean(row)),
                    residual_q25=float(np.quantile(row, 0.25)),
                    residual_q75=float(np.quantile(row, 0.75)),
                    frac_above_1e3=float(np.mean(row > 1e-3)),
                    predicted_critical=predicted,
                    n_seeds=n_seeds,
                )
            )
    return results


def _probe_residual(w, x, phi, t_probe, converge_floor):
    n = x.shape[0]
    wx = w @ x
    h = np.zeros(n)
    residual = _RESIDUAL_CLIP
    for _ in range(t_probe):
        h_next = w @ phi.phi(h) + wx
        residual = float(np.linalg.norm(h_next - h) / math.sqrt(n))
        h = h_next
        if not np.all(np.isfinite(h)) or np.linalg.norm(h) > _OVERFLOW_NORM:
            return _RESIDUAL_CLIP
        if residual < converge_floor:
            return residual
    return min(residual, _RESIDUAL_CLIP)


@dataclass(frozen=True)
class NtkEstimate:
    mean: float
    stderr: float
    n_seeds: int
    n_diverged: int


def ntk_nonlinear_empirical(
    spec: EnsembleSpec,
    x: np.ndarray,
    x_prime: np.ndarray,
    phi: Nonlinearity,
    n_seeds: int,
    base_seed: int = 0,
    t_max: int = 2000,
    tol: float = 1e-10,
) -> NtkEstimate:
    """Monte-Carlo gradient kernel of the nonlinear layer over matrix seeds.

    Per seed the sample is ``tr_N[(I - D W)^{-T} (I - D' W)^{-1}] *
    (phi'(h*) o z*) . (phi'(h*') o z*')`` with the derivative gates evaluated
    at the pre-activations (the linearization point of the forward map; the
    implicit-gradient tests pin this choice down).  Non-converged seeds are
    excluded and counted.
    """
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    n = spec.dim
    eye = np.eye(n)
    vals: list[float] = []
    n_diverged = 0
    for rep in range(n_seeds):
        seed = seed_for(base_seed, spec.family, 3, rep)
        w = sample(spec, seed)
        fp = iterate_h(w, x, phi, t_max=t_max, tol=tol)
        fpp = iterate_h(w, xp, phi, t_max=t_max, tol=tol)
        if not (fp.converged and fpp.converged):
            n_diverged += 1
            continue
        h, hp = fp.solution, fpp.solution
        z, zp = phi.phi(h) + x, phi.phi(hp) + xp
        d, dp = phi.dphi(h), phi.dphi(hp)
        try:
            inv1 = numerics.solve_linear(eye - d[:, None] * w, eye)
            inv2 = numerics.solve_linear(eye - dp[:, None] * w, eye)
        except numerics.SingularMatrixError:
            n_diverged += 1
            continue
        jac_align = float(np.sum(inv1 * inv2)) / n
        vals.append(jac_align * float((d * z) @ (dp * zp)))
    if not vals:
        raise numerics.SingularMatrixError("all seeds diverged")
    arr = np.asarray(vals)
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return NtkEstimate(float(arr.mean()), stderr, n_seeds, n_diverged)
