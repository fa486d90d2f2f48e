"""Conditional-gradient improvement of a control pair.

Each iteration linearizes the cost through the adjoint-based directional
derivative, picks the extreme direction of the feasible set (per-step point
masses for the measure part, bang-bang capped increments for the singular
part), and steps with a diminishing schedule safeguarded by Armijo
backtracking on the common-random-number cost.  All simulations inside one
optimization reuse a single draw of Brownian increments, so accepted steps
never increase the sampled cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import solve_adjoint_phi, solve_adjoint_regression
from .dynamics import CoefficientField, TrajectoryBundle, coefficient_integrals
from .maxprinciple import (
    VariationalDerivative,
    mean_hamiltonian_values,
    slack_paths,
    variational_derivative,
)
from .measures import (
    RelaxedControl,
    SingularControl,
    combine_singular,
    convex_combine,
    integrate_against,
    stieltjes_integral,
)
from .problems import ControlProblem, RunningCost, TerminalCost


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo cost estimate; non-finite scenarios are excluded and counted."""

    value: float
    stderr: float
    excluded: int
    samples: np.ndarray = field(repr=False)


def evaluate_cost(
    bundle: TrajectoryBundle,
    running: RunningCost,
    k_path: np.ndarray,
    terminal: TerminalCost,
    xi: SingularControl | None = None,
    fieldref: CoefficientField | None = None,
    points: np.ndarray | None = None,
) -> CostEstimate:
    """Sample mean and standard error of the cost functional.

    Left-point quadrature of the running cost integrated against the relaxed
    control, plus the singular cost against the jump increments, plus the
    terminal cost.  Grid points default to the field's; pass either
    ``fieldref`` or ``points``.
    """
    xi = bundle.xi if xi is None else xi
    if points is None:
        if fieldref is None:
            raise ValueError("need grid points: pass fieldref or points")
        points = fieldref.grid.points
    tg = bundle.tg
    times = tg.times()
    run = np.zeros(bundle.scenarios)
    for k in range(tg.steps):
        h_pt = running.value(times[k], bundle.x[:, k], bundle.y[:, k], points)
        run += (h_pt @ bundle.mu.weights[k]) * tg.dt
    samples = run + stieltjes_integral(k_path, xi) + terminal.value(
        bundle.x[:, -1], bundle.y[:, -1]
    )
    finite = np.isfinite(samples)
    excluded = int(bundle.scenarios - finite.sum())
    if excluded == bundle.scenarios:
        raise FloatingPointError("every cost sample is non-finite")
    kept = samples[finite]
    se = float(kept.std(ddof=1) / np.sqrt(kept.size)) if kept.size > 1 else 0.0
    return CostEstimate(value=float(kept.mean()), stderr=se, excluded=excluded, samples=samples)


@dataclass(frozen=True)
class FirstVariation:
    """State sensitivities to a convex perturbation of the controls.

    ``alpha_x`` and ``alpha_y`` respond to the singular direction, ``beta``
    to the measure direction; all start at zero.
    """

    alpha_x: np.ndarray   # (scenarios, steps + 1)
    alpha_y: np.ndarray
    beta: np.ndarray


def solve_first_variation(
    fieldref: CoefficientField,
    mu: RelaxedControl,
    bundle: TrajectoryBundle,
    stock,
    direction,
) -> FirstVariation:
    """Forward Euler on the three linear sensitivity equations.

    The alpha equations carry the coefficient slopes at the base measure and
    are driven by the jump gains against (eta - xi); beta carries the same
    homogeneous part and is driven by the drift/diffusion increments from
    replacing the base measure by the direction measure along the base path.
    Reuses the bundle's Brownian increments.
    """
    q, eta = direction
    tg = bundle.tg
    n, dt = tg.steps, tg.dt
    times = tg.times()
    scen = bundle.scenarios
    delta = eta.increments - bundle.xi.increments
    jump_x = (fieldref.jump_gain_x * delta).sum(axis=1)
    jump_y = (fieldref.jump_gain_y * delta).sum(axis=1)

    alpha_x = np.zeros((scen, n + 1))
    alpha_y = np.zeros((scen, n + 1))
    beta = np.zeros((scen, n + 1))
    for k in range(n):
        w = mu.weights[k]
        wq = q.weights[k]
        dw = bundle.noise[:, k]
        xk, yk = bundle.x[:, k], bundle.y[:, k]
        lev, slo, vlev, vslo = coefficient_integrals(fieldref, k, w)
        lev_q, slo_q, vlev_q, vslo_q = coefficient_integrals(fieldref, k, wq)
        shock = (vslo * dw).sum(axis=-1)
        alpha_x[:, k + 1] = alpha_x[:, k] * (1.0 + slo * dt + shock) + jump_x[k]
        bdy = stock.drift_dy(times[k], yk)
        sdy = stock.diffusion_dy(times[k], yk)
        alpha_y[:, k + 1] = (
            alpha_y[:, k] * (1.0 + bdy * dt + (sdy * dw).sum(axis=-1)) + jump_y[k]
        )
        drift_diff = (lev_q - lev) + (slo_q - slo) * xk
        vol_diff = (vlev_q - vlev) + (vslo_q - vslo) * xk[:, None]
        beta[:, k + 1] = (
            beta[:, k] * (1.0 + slo * dt + shock)
            + drift_diff * dt
            + (vol_diff * dw).sum(axis=-1)
        )
    return FirstVariation(alpha_x=alpha_x, alpha_y=alpha_y, beta=beta)


def first_variation_derivative(
    fieldref: CoefficientField,
    bundle: TrajectoryBundle,
    fv: FirstVariation,
    running: RunningCost,
    terminal: TerminalCost,
    k_path: np.ndarray,
    direction,
) -> VariationalDerivative:
    """Directional derivative assembled from the first-variation processes.

    The singular addend pairs the terminal/running gradients with the alpha
    sensitivities plus the direct singular cost; the measure addend pairs the
    x-gradients with beta plus the running-cost increment of the direction
    measure.  An independent estimate of the same quantity as
    :func:`rscontrol.maxprinciple.variational_derivative`.
    """
    q, eta = direction
    tg = bundle.tg
    times = tg.times()
    pts = fieldref.grid.points
    xn, yn = bundle.x[:, -1], bundle.y[:, -1]
    gx = terminal.dx(xn, yn)
    gy = terminal.dy(xn, yn)

    singular = gx * fv.alpha_x[:, -1] + gy * fv.alpha_y[:, -1]
    measure = gx * fv.beta[:, -1]
    for k in range(tg.steps):
        w = bundle.mu.weights[k]
        xk, yk = bundle.x[:, k], bundle.y[:, k]
        hx = integrate_against(running.dx(times[k], xk, yk, pts), w, axis=-1)
        hy = integrate_against(running.dy(times[k], xk, yk, pts), w, axis=-1)
        singular += (hx * fv.alpha_x[:, k] + hy * fv.alpha_y[:, k]) * tg.dt
        h_pt = running.value(times[k], xk, yk, pts)
        measure += (hx * fv.beta[:, k] + h_pt @ (q.weights[k] - w)) * tg.dt
    delta = eta.increments - bundle.xi.increments
    singular = singular + float(np.sum(k_path * delta))
    return VariationalDerivative.from_samples(singular, measure)


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs for the conditional-gradient loop."""

    max_iter: int = 50
    singular_rate: float = 1.0     # max increment per unit time and component
    armijo_c1: float = 1e-4
    max_halvings: int = 12
    gap_tol: float | None = None   # None: 3 stderr of the gap estimate + floor
    gap_floor: float = 1e-10
    adjoint_degree: int = 2
    ridge: float = 1e-8
    phi_check_every: int = 0       # 0 disables the construction-method drift check


@dataclass(frozen=True)
class IterationRecord:
    """Post-iteration snapshot appended to the optimization trace."""

    iteration: int
    cost: float
    cost_stderr: float
    gap: float
    gap_stderr: float
    theta: float
    accepted: bool
    phi_check_rms: float | None = None


@dataclass(frozen=True)
class IterationState:
    """Current control pair with its sampled cost and last duality gap."""

    mu: RelaxedControl
    xi: SingularControl
    bundle: TrajectoryBundle = field(repr=False)
    cost: float = np.nan
    cost_stderr: float = 0.0
    gap: float = np.inf
    gap_stderr: float = 0.0
    iteration: int = 0
    converged: bool = False
    reason: str = ""


def _singular_direction(mean_slack: np.ndarray, rate: float, dt: float, cap: float) -> SingularControl:
    """Extreme point of the capped increment set against the mean slack.

    Fills the most negative slack entries first at the per-step rate cap
    until the total-variation budget is exhausted; entries with nonnegative
    slack stay at zero.
    """
    inc = np.zeros_like(mean_slack)
    tiny = 1e-12 * (1.0 + float(np.abs(mean_slack).max(initial=0.0)))
    order = np.argsort(mean_slack, axis=None)
    budget = cap
    per_step = rate * dt
    for flat in order:
        if mean_slack.flat[flat] >= -tiny or budget <= 0.0:
            break
        amount = min(per_step, budget)
        inc.flat[flat] = amount
        budget -= amount
    return SingularControl(inc, tv_cap=cap)


def _measure_direction(mean_h: np.ndarray) -> RelaxedControl:
    """Per-step point mass at the scenario-mean Hamiltonian maximizer."""
    idx = np.argmax(mean_h, axis=1)
    w = np.zeros_like(mean_h)
    w[np.arange(mean_h.shape[0]), idx] = 1.0
    return RelaxedControl(w)


def frank_wolfe_iterate(
    state: IterationState,
    problem: ControlProblem,
    fieldref: CoefficientField,
    noise: np.ndarray,
    options: OptimizerOptions | None = None,
):
    """One conditional-gradient iteration.

    Computes regression adjoints for the current pair, builds the extreme
    descent direction, and steps with the 2/(n+2) schedule backed off by
    Armijo halving on the fixed-noise cost.  Returns (state, record); a state
    with ``converged`` set is returned when the duality gap is within
    tolerance or no halving produces descent.
    """
    opts = options or OptimizerOptions()
    adj = solve_adjoint_regression(
        fieldref, state.mu, state.bundle, problem.running, problem.terminal,
        problem.stock, opts.adjoint_degree, opts.ridge,
    )
    phi_rms = None
    if opts.phi_check_every and state.iteration % opts.phi_check_every == 0:
        ref = solve_adjoint_phi(
            fieldref, state.mu, state.bundle, problem.running, problem.terminal,
            problem.stock, opts.adjoint_degree, opts.ridge,
        )
        denom = float(np.sqrt(np.mean(adj.px ** 2))) or 1.0
        phi_rms = float(np.sqrt(np.mean((ref.px - adj.px) ** 2))) / denom

    mean_h = mean_hamiltonian_values(fieldref, state.bundle, adj, problem.running, state.mu)
    q_star = _measure_direction(mean_h)
    mean_slack = slack_paths(fieldref, problem.k_path, adj).mean(axis=0)
    eta_star = _singular_direction(mean_slack, opts.singular_rate, problem.tg.dt, problem.tv_cap)

    deriv = variational_derivative(
        fieldref, state.bundle, adj, problem.running, problem.k_path, (q_star, eta_star)
    )
    gap = -deriv.total + 0.0   # normalize -0.0
    gap_se = deriv.stderr
    tol = opts.gap_tol if opts.gap_tol is not None else (3.0 * gap_se + opts.gap_floor)

    if gap <= tol:
        new = replace(state, gap=gap, gap_stderr=gap_se, converged=True,
                      reason="duality gap within tolerance")
        return new, IterationRecord(
            iteration=state.iteration, cost=state.cost, cost_stderr=state.cost_stderr,
            gap=gap, gap_stderr=gap_se, theta=0.0, accepted=False, phi_check_rms=phi_rms,
        )

    theta = min(1.0, 2.0 / (state.iteration + 2.0))
    for _ in range(opts.max_halvings + 1):
        mu_new = convex_combine(state.mu, q_star, theta)
        xi_new = combine_singular(state.xi, eta_star, theta)
        bundle_new = problem.simulate(fieldref, mu_new, xi_new, noise)
        cost_new = evaluate_cost(
            bundle_new, problem.running, problem.k_path, problem.terminal, fieldref=fieldref
        )
        if cost_new.value <= state.cost - opts.armijo_c1 * theta * gap + 1e-12 * (1.0 + abs(state.cost)):
            new = IterationState(
                mu=mu_new, xi=xi_new, bundle=bundle_new,
                cost=cost_new.value, cost_stderr=cost_new.stderr,
                gap=gap, gap_stderr=gap_se,
                iteration=state.iteration + 1,
            )
            return new, IterationRecord(
                iteration=new.iteration, cost=new.cost, cost_stderr=new.cost_stderr,
                gap=gap, gap_stderr=gap_se, theta=theta, accepted=True,
                phi_check_rms=phi_rms,
            )
        theta *= 0.5

    new = replace(state, gap=gap, gap_stderr=gap_se, converged=True,
                  reason="no descent step within halving budget")
    return new, IterationRecord(
        iteration=state.iteration, cost=state.cost, cost_stderr=state.cost_stderr,
        gap=gap, gap_stderr=gap_se, theta=0.0, accepted=False, phi_check_rms=phi_rms,
    )


@dataclass(frozen=True)
class OptimizeResult:
    state: IterationState
    records: list
    fieldref: CoefficientField = field(repr=False)
    noise: np.ndarray = field(repr=False)


def optimize_problem(
    problem: ControlProblem,
    scenarios: int,
    seed: int,
    mu0: RelaxedControl | None = None,
    xi0: SingularControl | None = None,
    options: OptimizerOptions | None = None,
    threads: int = 1,
) -> OptimizeResult:
    """Run the conditional-gradient loop from the given (or default) controls.

    One noise draw and one coefficient field are shared by the whole run, so
    the iteration trace is deterministic in (problem, scenarios, seed).
    """
    opts = options or OptimizerOptions()
    noise = problem.noise(scenarios, seed)
    fieldref = problem.sample_field(scenarios, seed, noise)
    mu, xi = problem.default_controls()
    mu = mu0 if mu0 is not None else mu
    xi = xi0 if xi0 is not None else xi
    bundle = problem.simulate(fieldref, mu, xi, noise, threads=threads)
    cost = evaluate_cost(bundle, problem.running, problem.k_path, problem.terminal, fieldref=fieldref)
    state = IterationState(mu=mu, xi=xi, bundle=bundle, cost=cost.value, cost_stderr=cost.stderr)
    records: list[IterationRecord] = []
    while not state.converged and state.iteration < opts.max_iter:
        state, record = frank_wolfe_iterate(state, problem, fieldref, noise, opts)
        records.append(record)
    if not state.converged:
        state = replace(state, reason="max iterations reached")
    return OptimizeResult(state=state, records=records, fieldref=fieldref, noise=noise)
