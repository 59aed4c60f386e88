"""Closed-form moment predictions per (family, weight mode, scale).

Conventions used throughout:

* ``V`` is the squared scale (normalized trace of ``W^T W``).
* ``V_c`` is the critical scale: 1/4 for tied GOE, 1 otherwise.
* ``delta = 1 - V / V_c`` is the distance to threshold.
* ``T(V)`` is the normalized-trace fourth-moment factor
  ``E tr[(M^T M)^2] / N`` of the relevant propagator M; the length variance
  of an output ``z = M x`` with unit-variance Gaussian input is
  ``2 * sigma_x^4 * T / N``.

All functions are pure and cheap; series are summed with exact-integer
Catalan coefficients and cross-checked against their closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import scipy.integrate

from .ensembles import Family


class WeightMode(str, Enum):
    TIED = "tied"
    UNTIED = "untied"


class Quantity(str, Enum):
    VARIANCE_FACTOR = "variance_factor"
    LENGTH_VARIANCE_T = "length_variance_T"
    GRAM_TRACE_FACTOR = "gram_trace_factor"


class CriticalScaleError(ValueError):
    """Requested scale at or beyond the family's critical value."""

    def __init__(self, scale: float, critical: float, what: str = "scale"):
        self.scale = scale
        self.critical_scale = critical
        super().__init__(f"{what} {scale} is at or beyond the critical value {critical}")


def critical_scale(family: Family, weight_mode: WeightMode) -> float:
    """Scale V at which the tied/untied statistics diverge."""
    family = Family(family)
    if WeightMode(weight_mode) is WeightMode.TIED and family is Family.GOE:
        return 0.25
    return 1.0


def delta_to_scale(family: Family, weight_mode: WeightMode, delta: float) -> float:
    """Map distance-to-threshold delta in (0, 1] to the scale V."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return critical_scale(family, weight_mode) * (1.0 - delta)


def scale_to_delta(family: Family, weight_mode: WeightMode, scale: float) -> float:
    return 1.0 - scale / critical_scale(family, weight_mode)


def _check_subcritical(family: Family, weight_mode: WeightMode, v: float) -> None:
    if v < 0 or not math.isfinite(v):
        raise ValueError(f"scale must be finite and >= 0, got {v}")
    vc = critical_scale(family, weight_mode)
    if v >= vc:
        raise CriticalScaleError(v, vc)


@dataclass(frozen=True)
class MomentQuery:
    family: Family
    weight_mode: WeightMode
    scale: float
    quantity: Quantity

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "quantity", Quantity(self.quantity))
        _check_subcritical(self.family, self.weight_mode, self.scale)


@dataclass(frozen=True)
class MomentReport:
    """Theory value for one query, optionally paired with a Monte-Carlo run."""

    query: MomentQuery
    theory_value: float
    mc_mean: float | None = None
    mc_stderr: float | None = None
    mc_median: float | None = None
    mc_q25: float | None = None
    mc_q75: float | None = None
    n_seeds: int = 0
    n_diverged: int = 0

    def __post_init__(self) -> None:
        if self.n_diverged > self.n_seeds:
            raise ValueError("diverged count cannot exceed seed count")


def catalan(k: int) -> int:
    """k-th Catalan number, exact integer arithmetic."""
    if k < 0:
        raise ValueError(f"Catalan index must be >= 0, got {k}")
    return math.comb(2 * k, k) // (k + 1)


def catalan_generating(x: float) -> float:
    """``sum_k C_k x^k = (1 - sqrt(1 - 4x)) / (2x)`` for ``x < 1/4``."""
    if x == 0.0:
        return 1.0
    if x >= 0.25:
        raise CriticalScaleError(x, 0.25, what="series argument")
    return (1.0 - math.sqrt(1.0 - 4.0 * x)) / (2.0 * x)


_SERIES_CAP = 200_000


def _sum_series(term, v: float, rel_cutoff: float = 1e-14) -> float:
    """Sum ``term(i) * v**i`` until terms drop below rel_cutoff of the total."""
    total = 0.0
    vi = 1.0
    for i in range(_SERIES_CAP):
        t = term(i) * vi
        total += t
        if i > 4 and abs(t) < rel_cutoff * max(abs(total), 1e-300):
            return total
        vi *= v
    raise RuntimeError(f"series did not converge within {_SERIES_CAP} terms at scale {v}")


def _goe_gram_trace_series(v: float) -> float:
    """``sum_i (2i+1) C_i V^i`` summed term by term."""
    return _sum_series(lambda i: (2 * i + 1) * catalan(i), v)


def gram_trace_factor_theory(family: Family, weight_mode: WeightMode, v: float) -> float:
    """``E tr[(I-W)^{-T} (I-W)^{-1}] / N`` (equals variance factor + 1)."""
    return variance_factor_theory(family, weight_mode, v) + 1.0


def variance_factor_theory(family: Family, weight_mode: WeightMode, v: float) -> float:
    """``N Var[z*_i] / (x . x)`` for the linear fixed point.

    ``V / (1 - V)`` in the untied case for any rotationally invariant family
    and in the tied case for the random and orthogonal families.  Tied GOE is
    the Catalan series ``sum_{i>=1} (2i+1) C_i V^i``, evaluated in closed form
    as ``2 / sqrt(1 - 4V) - f_c(V) - 1`` with ``f_c`` the Catalan generating
    function; the explicit partial sums are cross-checked internally.
    """
    family, weight_mode = Family(family), WeightMode(weight_mode)
    _check_subcritical(family, weight_mode, v)
    if v == 0.0:
        return 0.0
    if weight_mode is WeightMode.UNTIED or family is not Family.GOE:
        return v / (1.0 - v)
    closed = 2.0 / math.sqrt(1.0 - 4.0 * v) - catalan_generating(v) - 1.0
    series = _goe_gram_trace_series(v) - 1.0
    if abs(series - closed) > 1e-10 * max(1.0, abs(closed)):
        raise AssertionError(
            f"GOE variance-factor series {series!r} disagrees with closed form {closed!r}"
        )
    return closed


def length_variance_theory(family: Family, weight_mode: WeightMode, v: float) -> float:
    """Fourth-moment factor ``T(V) = E tr[(M^T M)^2] / N`` of the propagator.

    Tied M is ``(I - W)^{-1}``; untied M is the limit of summed step
    products.  T(0) = 1 for every family and mode.
    """
    family, weight_mode = Family(family), WeightMode(weight_mode)
    _check_subcritical(family, weight_mode, v)
    if v == 0.0:
        return 1.0
    if weight_mode is WeightMode.UNTIED:
        if family is Family.ORTHOGONAL:
            return 2.0 / (1.0 - v) ** 2 - 1.0 / (1.0 - v * v)
        return 2.0 / (1.0 - v) ** 2 + 1.0 / (1.0 - v * v) ** 2 - 2.0 / (1.0 - v * v)
    if family is Family.ORTHOGONAL:
        return 2.0 / (1.0 - v) ** 3 - 1.0 / (1.0 - v) ** 2
    if family is Family.RANDOM:
        return v * v / (1.0 - v) ** 4 + 2.0 * v / (1.0 - v) ** 3 + 1.0 / (1.0 - v) ** 2
    # Tied GOE: (1/4V) ((1-4V)^{-5/2} - (1-4V)^{-3/2}), which simplifies to
    # (1-4V)^{-5/2}; the V -> 0 limit is 1.
    return (1.0 - 4.0 * v) ** -2.5


def tied_orthogonal_series(v: float, rel_cutoff: float = 1e-14) -> float:
    """``sum_i (i+1)^2 V^i``, the series route to the tied-orthogonal T(V)."""
    _check_subcritical(Family.ORTHOGONAL, WeightMode.TIED, v)
    return _sum_series(lambda i: (i + 1) ** 2, v, rel_cutoff)


def goe_tied_integral(v: float) -> float:
    """Semicircle quadrature for the tied-GOE fourth-moment factor.

    ``(2/pi) * integral_{-1}^{1} (1 - 2 sqrt(V) x)^{-4} sqrt(1 - x^2) dx``,
    via adaptive quadrature to absolute error below 1e-9.  Converges for
    ``sqrt(V) < 1/2`` and agrees with the closed form ``(1-4V)^{-5/2}``.
    """
    if v < 0:
        raise ValueError(f"scale must be >= 0, got {v}")
    if math.sqrt(v) >= 0.5:
        raise CriticalScaleError(v, 0.25)
    if v == 0.0:
        return 1.0
    a = 2.0 * math.sqrt(v)

    def integrand(x: float) -> float:
        return (1.0 - a * x) ** -4 * math.sqrt(1.0 - x * x)

    val, err = scipy.integrate.quad(integrand, -1.0, 1.0, epsabs=1e-11, epsrel=1e-11, limit=400)
    if err > 1e-9 * max(1.0, abs(val)):
        raise RuntimeError(f"quadrature error estimate {err:.2e} too large")
    return 2.0 / math.pi * val


def goe_tied_asymptotic(delta: float) -> float:
    """Leading small-delta behavior of the tied-GOE factor, ``(2 delta)^{-5/2}``.

    delta here is ``1 - 2 sqrt(V)``, the edge gap of the shifted semicircle;
    the ratio integral/asymptotic equals ``(1 - delta/2)^{-5/2} -> 1`` as
    delta -> 0.  The coefficient 2^{-5/2} follows from the edge integral
    ``(1/(2 pi)) * integral_0^inf sqrt(y) (1+y)^{-4} dy = 1/32`` after
    rescaling; see the decisions ledger for the provenance note.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return (2.0 * delta) ** -2.5


def divergence_exponent(family: Family, weight_mode: WeightMode) -> float:
    """Exact log-log slope of T(delta) as delta -> 0."""
    family, weight_mode = Family(family), WeightMode(weight_mode)
    if weight_mode is WeightMode.UNTIED:
        return -2.0
    return {Family.ORTHOGONAL: -3.0, Family.RANDOM: -4.0, Family.GOE: -2.5}[family]


def theory_value(query: MomentQuery) -> float:
    """Dispatch a MomentQuery to its closed form."""
    fn = {
        Quantity.VARIANCE_FACTOR: variance_factor_theory,
        Quantity.LENGTH_VARIANCE_T: length_variance_theory,
        Quantity.GRAM_TRACE_FACTOR: gram_trace_factor_theory,
    }[query.quantity]
    return fn(query.family, query.weight_mode, query.scale)
