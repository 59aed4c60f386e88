"""Experiment drivers behind the command line: each produces tidy result rows.

Grids are in delta (distance to threshold) for fig1 and the moments dump, and
in sqrt(V) for fig2/fig3/fig4.  Every cell derives its random streams from
(seed, family, grid index, replicate), so results are independent of
execution order and thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import freeprob, numerics
from .analytic_moments import (
    MomentQuery,
    Quantity,
    WeightMode,
    catalan_generating,
    delta_to_scale,
    theory_value,
)
from .ensembles import EnsembleSpec, Family, sample, seed_for
from .linear_deq import (
    LinearDeqProblem,
    estimate_length_variance,
    estimate_moments,
)
from .nonlinear_deq import (
    HARD_TANH,
    Nonlinearity,
    iterate_h,
    predict_critical_v,
    radius_empirical,
    radius_theory,
    residual_sweep,
    sigma_h_selfconsistent,
)
from .train_probe import ProbeTask, summarize_sweep, train_stability_sweep

DEFAULT_FIG1_DELTAS = (0.05, 0.075, 0.1, 0.15, 0.22, 0.3, 0.5, 0.7, 0.9)
DEFAULT_SQRT_V_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
ALL_FAMILIES = (Family.RANDOM, Family.GOE, Family.ORTHOGONAL)

CSV_COLUMNS = (
    "experiment",
    "family",
    "weight_mode",
    "v",
    "delta",
    "sqrt_v",
    "n",
    "seeds",
    "statistic",
    "theory",
    "emp_mean",
    "emp_median",
    "emp_stderr",
    "emp_q25",
    "emp_q75",
    "diverged",
)


@dataclass(frozen=True)
class ResultRow:
    """One statistic for one sweep cell; empty fields stay None in the CSV."""

    experiment: str
    statistic: str
    family: str = ""
    weight_mode: str = ""
    v: float | None = None
    delta: float | None = None
    sqrt_v: float | None = None
    n: int | None = None
    seeds: int | None = None
    theory: float | None = None
    emp_mean: float | None = None
    emp_median: float | None = None
    emp_stderr: float | None = None
    emp_q25: float | None = None
    emp_q75: float | None = None
    diverged: int | None = None

    def as_csv(self) -> list[str]:
        def fmt(value) -> str:
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(value)
            return str(value)

        return [fmt(getattr(self, col)) for col in CSV_COLUMNS]


@dataclass
class SweepSettings:
    """Resolved knobs shared by the experiment drivers."""

    n: int = 1000
    seeds: int = 20
    seed: int = 0
    families: tuple[Family, ...] = ALL_FAMILIES
    grid: tuple[float, ...] | None = None
    estimator: str = "exact"
    phi: Nonlinearity = HARD_TANH
    sigma_x_sq: float = 1.0
    lr: float = 0.05
    steps: int = 40
    dataset_size: int = 32
    extras: dict = field(default_factory=dict)


def _cells(settings: SweepSettings, grid) -> list[tuple[int, Family, int, float]]:
    out = []
    index = 0
    for family in settings.families:
        for gi, g in enumerate(grid):
            out.append((index, Family(family), gi, float(g)))
            index += 1
    return out


# ---------------------------------------------------------------------------
# fig1: length variance against the closed forms, per delta
# ---------------------------------------------------------------------------


def fig1_cell(settings: SweepSettings, family: Family, gi: int, delta: float) -> ResultRow:
    v = delta_to_scale(family, WeightMode.TIED, delta)
    spec = EnsembleSpec(family, settings.n, v)
    report = estimate_length_variance(
        spec,
        WeightMode.TIED,
        settings.seeds,
        estimator_mode=settings.estimator,
        base_seed=settings.seed,
        grid_label=gi,
    )
    return ResultRow(
        experiment="fig1",
        statistic="length_variance_T",
        family=family.value,
        weight_mode=WeightMode.TIED.value,
        v=v,
        delta=delta,
        n=settings.n,
        seeds=settings.seeds,
        theory=report.theory_value,
        emp_mean=report.mc_mean,
        emp_median=report.mc_median,
        emp_stderr=report.mc_stderr,
        emp_q25=report.mc_q25,
        emp_q75=report.mc_q75,
        diverged=report.n_diverged,
    )


def run_fig1(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    grid = settings.grid or DEFAULT_FIG1_DELTAS
    cells = _cells(settings, grid)
    rows = parallel_map(lambda c: (c[0], fig1_cell(settings, c[1], c[2], c[3])), cells)
    return [row for _, row in sorted(rows, key=lambda item: item[0])]


# ---------------------------------------------------------------------------
# fig2: empirical pre-activation variance vs the self-consistent value
# ---------------------------------------------------------------------------


def fig2_cell(settings: SweepSettings, family: Family, gi: int, sqrt_v: float) -> ResultRow:
    v = sqrt_v * sqrt_v
    theory = sigma_h_selfconsistent(v, settings.sigma_x_sq, 0.0, settings.phi).sigma_h_sq
    spec = EnsembleSpec(family, settings.n, v)
    values = []
    n_diverged = 0
    for rep in range(settings.seeds):
        seed = seed_for(settings.seed, family, gi, rep)
        w = sample(spec, seed)
        x = seed.child(1).generator().standard_normal(settings.n) * math.sqrt(settings.sigma_x_sq)
        fp = iterate_h(w, x, settings.phi, t_max=1000, tol=1e-9)
        if not fp.converged:
            n_diverged += 1
        values.append(float(fp.solution @ fp.solution) / settings.n)
    arr = np.asarray(values)
    return ResultRow(
        experiment="fig2",
        statistic="sigma_h_sq",
        family=family.value,
        v=v,
        sqrt_v=sqrt_v,
        n=settings.n,
        seeds=settings.seeds,
        theory=theory,
        emp_mean=float(arr.mean()),
        emp_median=float(np.median(arr)),
        emp_stderr=float(arr.std(ddof=1) / math.sqrt(arr.size)),
        emp_q25=float(np.quantile(arr, 0.25)),
        emp_q75=float(np.quantile(arr, 0.75)),
        diverged=n_diverged,
    )


def run_fig2(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    grid = settings.grid or DEFAULT_SQRT_V_GRID
    cells = _cells(settings, grid)
    rows = parallel_map(lambda c: (c[0], fig2_cell(settings, c[1], c[2], c[3])), cells)
    return [row for _, row in sorted(rows, key=lambda item: item[0])]


# ---------------------------------------------------------------------------
# fig3: empirical vs predicted spectral radius of the Jacobian
# ---------------------------------------------------------------------------


def fig3_cell(settings: SweepSettings, family: Family, gi: int, sqrt_v: float) -> ResultRow:
    v = sqrt_v * sqrt_v
    state = sigma_h_selfconsistent(v, settings.sigma_x_sq, 0.0, settings.phi)
    theory = radius_theory(family, v, settings.phi, state.sigma_h_sq)
    spec = EnsembleSpec(family, settings.n, v)
    values = []
    n_diverged = 0
    for rep in range(settings.seeds):
        seed = seed_for(settings.seed, family, gi, rep)
        w = sample(spec, seed)
        x = seed.child(1).generator().standard_normal(settings.n) * math.sqrt(settings.sigma_x_sq)
        fp = iterate_h(w, x, settings.phi, t_max=1000, tol=1e-9)
        if not fp.converged:
            n_diverged += 1
        values.append(radius_empirical(w, fp.solution, settings.phi))
    arr = np.asarray(values)
    return ResultRow(
        experiment="fig3",
        statistic="spectral_radius",
        family=family.value,
        v=v,
        sqrt_v=sqrt_v,
        n=settings.n,
        seeds=settings.seeds,
        theory=theory,
        emp_mean=float(arr.mean()),
        emp_median=float(np.median(arr)),
        emp_stderr=float(arr.std(ddof=1) / math.sqrt(arr.size)),
        emp_q25=float(np.quantile(arr, 0.25)),
        emp_q75=float(np.quantile(arr, 0.75)),
        diverged=n_diverged,
    )


def run_fig3(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    grid = settings.grid or DEFAULT_SQRT_V_GRID
    cells = _cells(settings, grid)
    rows = parallel_map(lambda c: (c[0], fig3_cell(settings, c[1], c[2], c[3])), cells)
    return [row for _, row in sorted(rows, key=lambda item: item[0])]


# ---------------------------------------------------------------------------
# fig4: long-iteration residual and the predicted stability transition
# ---------------------------------------------------------------------------


def run_fig4(settings: SweepSettings, parallel_map=map, t_probe: int = 500) -> list[ResultRow]:
    rows: list[ResultRow] = []

    def family_grid(family: Family) -> list[float]:
        if settings.grid:
            return [float(g) for g in settings.grid]
        predicted = predict_critical_v(family, settings.phi, settings.sigma_x_sq)
        return [predicted * m for m in np.linspace(0.8, 1.3, 11)]

    def one_family(item):
        index, family = item
        cells = residual_sweep(
            [family],
            family_grid(family),
            settings.n,
            settings.seeds,
            t_probe=t_probe,
            phi=settings.phi,
            sigma_x_sq=settings.sigma_x_sq,
            base_seed=settings.seed,
        )
        return index, [
            ResultRow(
                experiment="fig4",
                statistic="residual_at_probe",
                family=cell.family.value,
                v=cell.sqrt_scale**2,
                sqrt_v=cell.sqrt_scale,
                n=settings.n,
                seeds=cell.n_seeds,
                theory=cell.predicted_critical,
                emp_mean=cell.residual_mean,
                emp_median=cell.residual_median,
                emp_q25=cell.residual_q25,
                emp_q75=cell.residual_q75,
                diverged=int(round(cell.frac_above_1e3 * cell.n_seeds)),
            )
            for cell in cells
        ]

    for _, family_rows in sorted(
        parallel_map(one_family, list(enumerate(settings.families))), key=lambda item: item[0]
    ):
        rows.extend(family_rows)
    return rows


# ---------------------------------------------------------------------------
# moments: closed forms with optional Monte-Carlo attachment
# ---------------------------------------------------------------------------


def run_moments(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    grid = settings.grid or DEFAULT_FIG1_DELTAS
    weight_modes = settings.extras.get("weight_modes", (WeightMode.TIED, WeightMode.UNTIED))
    cells = []
    index = 0
    for family in settings.families:
        for mode in weight_modes:
            for gi, delta in enumerate(grid):
                cells.append((index, Family(family), WeightMode(mode), gi, float(delta)))
                index += 1

    def one(cell):
        index, family, mode, gi, delta = cell
        v = delta_to_scale(family, mode, delta)
        out = []
        for quantity in Quantity:
            query = MomentQuery(family, mode, v, quantity)
            row = ResultRow(
                experiment="moments",
                statistic=quantity.value,
                family=family.value,
                weight_mode=mode.value,
                v=v,
                delta=delta,
                n=settings.n,
                theory=theory_value(query),
            )
            out.append(row)
        if settings.seeds > 0:
            spec = EnsembleSpec(family, settings.n, v)
            problem = LinearDeqProblem(spec, np.ones(settings.n), mode)
            vf = estimate_moments(problem, settings.seeds, settings.seed, grid_label=gi)
            lv = estimate_length_variance(
                spec, mode, settings.seeds, settings.estimator, settings.seed, grid_label=gi
            )
            for i, report in ((0, vf), (1, lv)):
                out[i] = _attach_mc(out[i], report, settings.seeds)
        return index, out

    rows: list[ResultRow] = []
    for _, cell_rows in sorted(parallel_map(one, cells), key=lambda item: item[0]):
        rows.extend(cell_rows)
    return rows


def _attach_mc(row: ResultRow, report, seeds: int) -> ResultRow:
    return ResultRow(
        **{
            **row.__dict__,
            "seeds": seeds,
            "emp_mean": report.mc_mean,
            "emp_median": report.mc_median,
            "emp_stderr": report.mc_stderr,
            "emp_q25": report.mc_q25,
            "emp_q75": report.mc_q75,
            "diverged": report.n_diverged,
        }
    )


# ---------------------------------------------------------------------------
# freeprob-check: transform consistency rows
# ---------------------------------------------------------------------------


def run_freeprob_check(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    rows: list[ResultRow] = []
    n = settings.n

    def row(statistic, theory, observed, **kw):
        return ResultRow(
            experiment="freeprob-check",
            statistic=statistic,
            theory=theory,
            emp_mean=observed,
            **kw,
        )

    # semicircle density peak via boundary-value recovery
    g = freeprob.StieltjesFn(lambda z: freeprob.semicircle_stieltjes(z, 1.0), (-2.0, 2.0))
    dens = freeprob.density_from_stieltjes(g, freeprob.recovery_grid((-2.0, 2.0)))
    rows.append(row("semicircle_peak_density", 1.0 / math.pi, float(dens.density.max())))

    # GOE resolvent moment series against the Catalan generating function
    v = 0.1
    series = freeprob.goe_resolvent_mgf(v, k_max=6)
    rows.append(row("goe_mgf_m1", catalan_generating(v), float(series.coefficient(1)), v=v))
    closed = freeprob.goe_resolvent_mgf_value(5.0, v)
    rows.append(row("goe_mgf_closed_vs_series_z5", abs(complex(closed)), abs(series.evaluate(5.0)), v=v))

    # gram-moment cubic: exact low moments and a Monte-Carlo cross-check
    m = freeprob.random_gram_moment_series(Fraction(1, 2), 2)
    rows.append(row("cubic_m1_at_half", 2.0, float(m.coefficient(1)), v=0.5))
    rows.append(row("cubic_m2_at_half", 16.0, float(m.coefficient(2)), v=0.5))
    v_mc = 0.25
    m_mc = freeprob.random_gram_moment_series(Fraction(1, 4), 3)
    mc_seeds = max(2, min(settings.seeds, 8))
    spec = EnsembleSpec(Family.RANDOM, n, v_mc)
    vals2, vals3 = [], []
    for rep in range(mc_seeds):
        w = sample(spec, seed_for(settings.seed, Family.RANDOM, 21, rep))
        sv = np.linalg.svd(np.eye(n) - w, compute_uv=False)
        vals2.append(float(np.mean(sv**-4.0)))
        vals3.append(float(np.mean(sv**-6.0)))
    rows.append(row("cubic_m2_vs_mc", float(m_mc.coefficient(2)), float(np.mean(vals2)), v=v_mc, n=n, seeds=mc_seeds))
    rows.append(row("cubic_m3_vs_mc", float(m_mc.coefficient(3)), float(np.mean(vals3)), v=v_mc, n=n, seeds=mc_seeds))

    # closed-form second moment against the length-variance formula on a grid
    grid = np.linspace(0.01, 0.24, 20)
    max_err = max(freeprob.goe_gram_length_variance_consistency(float(x)) for x in grid)
    rows.append(row("goe_second_moment_grid_max_abs_err", 0.0, max_err))

    # hard-tanh Jacobian spectrum against one empirical draw
    p, v_j = 0.5, 0.2
    target = freeprob.hardtanh_jacobian_density(p, v_j)
    seed = seed_for(settings.seed, Family.GOE, 22, 0)
    w = sample(EnsembleSpec(Family.GOE, n, v_j), seed)
    gates = (seed.child(1).generator().random(n) < p).astype(float)
    root = np.sqrt(gates)
    eigs = numerics.sym_spectrum(root[:, None] * w * root[None, :])
    zero = np.abs(eigs) < 1e-10
    atom_mass = float(np.mean(zero))
    radius = 2.0 * math.sqrt(v_j * p)
    ks = freeprob.kolmogorov_distance(eigs[~zero], lambda x: freeprob.semicircle_cdf(x, radius))
    rows.append(row("hardtanh_atom_mass", 1.0 - p, atom_mass, v=v_j, n=n))
    rows.append(row("hardtanh_continuous_ks", 0.0, ks, v=v_j, n=n))
    rows.append(row("hardtanh_second_moment", p * p * v_j, target.moment(2), v=v_j))

    # spectral support of (I-W)^{-1} recovered from the transform
    lo, hi = freeprob.goe_resolvent_support(0.1)
    g_res = freeprob.goe_resolvent_stieltjes(0.1)
    recovered = freeprob.density_from_stieltjes(g_res, freeprob.recovery_grid((lo, hi)))
    thresh = 1e-3 * recovered.density.max()
    occupied = recovered.grid[recovered.density > thresh]
    rows.append(row("goe_resolvent_support_lo", lo, float(occupied.min()), v=0.1))
    rows.append(row("goe_resolvent_support_hi", hi, float(occupied.max()), v=0.1))
    return rows


# ---------------------------------------------------------------------------
# train-probe: gradient-descent stability sweep
# ---------------------------------------------------------------------------


def run_train_probe(settings: SweepSettings, parallel_map=map) -> list[ResultRow]:
    grid = settings.grid or (0.05, 0.3, 0.6, 0.9, 1.2)
    task = ProbeTask(
        teacher_seed=settings.seed + 1,
        n_samples=settings.dataset_size,
        dim=min(settings.n, 64),
    )
    records = train_stability_sweep(
        task,
        settings.families,
        grid,
        settings.seeds,
        lr=settings.lr,
        steps=settings.steps,
        phi=settings.phi,
        base_seed=settings.seed,
    )
    rows: list[ResultRow] = []
    for cell in summarize_sweep(records):
        common = dict(
            experiment="train-probe",
            family=cell.family.value,
            v=cell.sqrt_scale**2,
            sqrt_v=cell.sqrt_scale,
            n=task.dim,
            seeds=cell.n_seeds,
        )
        rows.append(ResultRow(statistic="divergence_rate", emp_mean=cell.divergence_rate, **common))
        rows.append(ResultRow(statistic="mean_final_train_loss", emp_mean=cell.mean_final_loss, **common))
        rows.append(
            ResultRow(
                statistic="median_steps_to_half_loss",
                emp_mean=cell.median_steps_to_threshold,
                **common,
            )
        )
    return rows


EXPERIMENTS = {
    "fig1": run_fig1,
    "fig2": run_fig2,
    "fig3": run_fig3,
    "fig4": run_fig4,
    "moments": run_moments,
    "freeprob-check": run_freeprob_check,
    "train-probe": run_train_probe,
}
