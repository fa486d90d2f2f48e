"""Backward adjoint (costate) solvers for the controlled linear SDE.

Two independent methods are provided and cross-validated in the test suite:

* an explicit construction through the fundamental solution of the
  homogeneous linear SDE plus a regression estimate of the martingale part,
  mirroring the analytical derivation of the costate, and
* a backward least-squares Monte Carlo scheme on the adjoint backward SDE,
  the production method.

Both estimate conditional expectations by cross-scenario polynomial
regression in the state pair (x, y).  That projection is exact when the true
costate is a polynomial of the states (the toy problems used for validation);
with state-dependent diffusion slopes the fundamental-solution method
acquires a projection bias because the flow itself is an extra state, so the
regression scheme is preferred for production runs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import CoefficientField, StockModel, TrajectoryBundle
from .measures import RelaxedControl, integrate_against
from .problems import RunningCost, TerminalCost

CONDITION_LIMIT = 1e12


def polynomial_basis(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    """Monomials in (x, y) of total degree <= degree, shape (scenarios, k)."""
    cols = [np.ones_like(x)]
    if degree >= 1:
        cols += [x, y]
    if degree >= 2:
        cols += [x * x, x * y, y * y]
    if degree >= 3:
        raise ValueError("regression basis supports total degree <= 2")
    return np.column_stack(cols)


def fit_conditional(
    target: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    degree: int = 2,
    ridge: float = 1e-8,
):
    """Least-squares estimate of E[target | x, y] evaluated on the sample.

    Solves the ridge-regularized normal equations on RMS-standardized
    monomial columns.  If the normal matrix is numerically singular the
    degree is lowered (ultimately to the plain mean) with a warning.

    Returns (fitted, degree_used); ``target`` may be (scenarios,) or
    (scenarios, r) for a shared design matrix.
    """
    t = np.asarray(target, dtype=float)
    squeeze = t.ndim == 1
    if squeeze:
        t = t[:, None]
    for deg in range(degree, -1, -1):
        basis = polynomial_basis(x, y, deg)
        # center non-intercept columns so the ridge never biases the mean
        shift = basis.mean(axis=0)
        shift[0] = 0.0
        centered = basis - shift
        scale = np.sqrt(np.mean(centered * centered, axis=0))
        scale[scale == 0.0] = 1.0
        design = centered / scale
        gram = design.T @ design / design.shape[0]
        gram[np.diag_indices_from(gram)] += ridge
        gram[0, 0] -= ridge
        rhs = design.T @ t / design.shape[0]
        if not np.isfinite(gram).all():
            continue
        if deg > 0 and np.linalg.cond(gram) > CONDITION_LIMIT:
            warnings.warn(
                f"singular regression design; falling back to degree {deg - 1}",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        coef = np.linalg.solve(gram, rhs)
        fitted = design @ coef
        if np.isfinite(fitted).all():
            return (fitted[:, 0] if squeeze else fitted), deg
    fitted = np.broadcast_to(t.mean(axis=0), t.shape).copy()
    return (fitted[:, 0] if squeeze else fitted), 0


@dataclass(frozen=True)
class FundamentalPair:
    """Fundamental solution of the homogeneous linear SDE and its inverse.

    ``flow_inv`` is the exact reciprocal used downstream; ``flow_inv_sde``
    integrates the inverse's own SDE with the same Euler steps and is kept as
    a consistency diagnostic (the product flow * flow_inv_sde drifts from 1
    at rate O(dt)).
    """

    flow: np.ndarray          # (scenarios, steps + 1)
    flow_inv: np.ndarray
    flow_inv_sde: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.flow).all():
            k = int(np.argwhere(~np.isfinite(self.flow))[0][1])
            raise FloatingPointError(f"fundamental solution non-finite at step {k}")
        if np.any(self.flow[:, 0] != 1.0):
            raise ValueError("fundamental solution must start at 1")

    def inverse_defect(self) -> float:
        """max_k |flow * flow_inv_sde - 1|, the Euler consistency error."""
        return float(np.abs(self.flow * self.flow_inv_sde - 1.0).max())


@dataclass(frozen=True)
class AdjointSolution:
    """Costate paths for both state components.

    px, py : (scenarios, steps + 1) costate values; the terminal slice equals
        the terminal-cost gradient exactly.
    Px, Py : (scenarios, steps, dim) diffusion loadings of the costates.
    """

    px: np.ndarray
    Px: np.ndarray
    py: np.ndarray
    Py: np.ndarray
    method: str

    def __post_init__(self):
        for name, arr in (("px", self.px), ("Px", self.Px), ("py", self.py), ("Py", self.Py)):
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"adjoint path {name} contains non-finite values")


def solve_fundamental(
    field: CoefficientField,
    mu: RelaxedControl,
    bundle: TrajectoryBundle,
    stock: StockModel,
):
    """Forward Euler on the fundamental solutions for both components.

    Reuses the bundle's Brownian increments.  Returns (pair_x, pair_y) where
    the x-pair uses the measure-integrated drift/diffusion slopes and the
    y-pair the stock model's derivatives along the simulated y path.
    """
    tg = bundle.tg
    n, dt = tg.steps, tg.dt
    times = tg.times()
    scen = bundle.scenarios
    flow_x = np.empty((scen, n + 1))
    inv_x = np.empty((scen, n + 1))
    flow_y = np.empty((scen, n + 1))
    inv_y = np.empty((scen, n + 1))
    flow_x[:, 0] = inv_x[:, 0] = flow_y[:, 0] = inv_y[:, 0] = 1.0
    for k in range(n):
        w = mu.weights[k]
        dw = bundle.noise[:, k]
        slo = integrate_against(field.drift_slope_at(k), w, axis=-1)
        vslo = integrate_against(field.vol_slope_at(k), w, axis=-2)
        shock = (vslo * dw).sum(axis=-1)
        quad = (vslo * vslo).sum(axis=-1)
        flow_x[:, k + 1] = flow_x[:, k] * (1.0 + slo * dt + shock)
        inv_x[:, k + 1] = inv_x[:, k] * (1.0 + (quad - slo) * dt - shock)
        yk = bundle.y[:, k]
        bdy = stock.drift_dy(times[k], yk)
        sdy = stock.diffusion_dy(times[k], yk)
        shock_y = (sdy * dw).sum(axis=-1)
        quad_y = (sdy * sdy).sum(axis=-1)
        flow_y[:, k + 1] = flow_y[:, k] * (1.0 + bdy * dt + shock_y)
        inv_y[:, k + 1] = inv_y[:, k] * (1.0 + (quad_y - bdy) * dt - shock_y)
    pair_x = FundamentalPair(flow=flow_x, flow_inv=1.0 / flow_x, flow_inv_sde=inv_x)
    pair_y = FundamentalPair(flow=flow_y, flow_inv=1.0 / flow_y, flow_inv_sde=inv_y)
    return pair_x, pair_y


def _gradient_paths(field, mu, bundle, running):
    """Measure-integrated running-cost gradients along the paths, (S, steps)."""
    tg = bundle.tg
    times = tg.times()
    pts = field.grid.points
    scen = bundle.scenarios
    hx = np.empty((scen, tg.steps))
    hy = np.empty((scen, tg.steps))
    for k in range(tg.steps):
        w = mu.weights[k]
        xk, yk = bundle.x[:, k], bundle.y[:, k]
        hx[:, k] = integrate_against(running.dx(times[k], xk, yk, pts), w, axis=-1)
        hy[:, k] = integrate_against(running.dy(times[k], xk, yk, pts), w, axis=-1)
    return hx, hy


def _assemble_phi_component(flow_pair, terminal_grad, h_grad, slope_at, bundle, dt, degree, ridge):
    """Costate from one fundamental pair: weight the terminal/running
    gradients by the flow, project on the state basis, strip the accumulated
    running part, and deflate by the inverse flow."""
    n = bundle.tg.steps
    scen = bundle.scenarios
    d = bundle.dim
    flow = flow_pair.flow
    weighted = flow[:, :n] * h_grad * dt
    total = flow[:, n] * terminal_grad + weighted.sum(axis=1)
    prefix = np.zeros((scen, n + 1))
    np.cumsum(weighted, axis=1, out=prefix[:, 1:])
    mart = np.empty((scen, n + 1))
    mart[:, 0] = total.mean()
    mart[:, n] = total
    for k in range(1, n):
        mart[:, k], _ = fit_conditional(total, bundle.x[:, k], bundle.y[:, k], degree, ridge)
    p = (mart - prefix) * flow_pair.flow_inv
    load = np.empty((scen, n, d))
    for k in range(n):
        incr = (mart[:, k + 1] - mart[:, k])[:, None] * bundle.noise[:, k] / dt
        integrand, _ = fit_conditional(incr, bundle.x[:, k], bundle.y[:, k], degree, ridge)
        load[:, k] = flow_pair.flow_inv[:, k, None] * integrand - slope_at(k) * p[:, k, None]
    p[:, n] = terminal_grad
    return p, load


def solve_adjoint_phi(
    field: CoefficientField,
    mu: RelaxedControl,
    bundle: TrajectoryBundle,
    running: RunningCost,
    terminal: TerminalCost,
    stock: StockModel,
    degree: int = 2,
    ridge: float = 1e-8,
) -> AdjointSolution:
    """Costates via the fundamental-solution construction.

    The conditional expectation of the flow-weighted terminal variable is
    estimated per step by cross-scenario regression on the (x, y) basis; the
    diffusion loading comes from projecting the martingale increments on the
    Brownian increments.  Terminal slices are set to the exact gradients.
    """
    pair_x, pair_y = solve_fundamental(field, mu, bundle, stock)
    hx, hy = _gradient_paths(field, mu, bundle, running)
    times = bundle.tg.times()
    xn, yn = bundle.x[:, -1], bundle.y[:, -1]

    def x_slope(k):
        return integrate_against(field.vol_slope_at(k), mu.weights[k], axis=-2)

    def y_slope(k):
        return stock.diffusion_dy(times[k], bundle.y[:, k])

    px, Px = _assemble_phi_component(
        pair_x, terminal.dx(xn, yn), hx, x_slope, bundle, bundle.tg.dt, degree, ridge
    )
    py, Py = _assemble_phi_component(
        pair_y, terminal.dy(xn, yn), hy, y_slope, bundle, bundle.tg.dt, degree, ridge
    )
    return AdjointSolution(px=px, Px=Px, py=py, Py=Py, method="phi-construction")


def solve_adjoint_regression(
    field: CoefficientField,
    mu: RelaxedControl,
    bundle: TrajectoryBundle,
    running: RunningCost,
    terminal: TerminalCost,
    stock: StockModel,
    degree: int = 2,
    ridge: float = 1e-8,
) -> AdjointSolution:
    """Costates via backward least-squares Monte Carlo.

    Backward Euler on the adjoint backward SDEs: the diffusion loading is the
    covariance regression of the next costate against the Brownian increment
    (centered by the projected costate, which leaves the estimand unchanged
    and removes the dominant variance term), and the costate is the projected
    one-step target

        p[k] = E[ p[k+1] + (slope * p[k+1] + vol_slope . P[k] + h') dt | x, y ].
    """
    tg = bundle.tg
    n, dt = tg.steps, tg.dt
    times = tg.times()
    scen, d = bundle.scenarios, bundle.dim
    x, y, dw = bundle.x, bundle.y, bundle.noise
    pts = field.grid.points

    px = np.empty((scen, n + 1))
    py = np.empty((scen, n + 1))
    Px = np.empty((scen, n, d))
    Py = np.empty((scen, n, d))
    px[:, n] = terminal.dx(x[:, n], y[:, n])
    py[:, n] = terminal.dy(x[:, n], y[:, n])
    for k in range(n - 1, -1, -1):
        w = mu.weights[k]
        xk, yk = x[:, k], y[:, k]
        pbar_x, _ = fit_conditional(px[:, k + 1], xk, yk, degree, ridge)
        pbar_y, _ = fit_conditional(py[:, k + 1], xk, yk, degree, ridge)
        Px[:, k], _ = fit_conditional(
            (px[:, k + 1] - pbar_x)[:, None] * dw[:, k] / dt, xk, yk, degree, ridge
        )
        Py[:, k], _ = fit_conditional(
            (py[:, k + 1] - pbar_y)[:, None] * dw[:, k] / dt, xk, yk, degree, ridge
        )
        slo = integrate_against(field.drift_slope_at(k), w, axis=-1)
        vslo = integrate_against(field.vol_slope_at(k), w, axis=-2)
        hxk = integrate_against(running.dx(times[k], xk, yk, pts), w, axis=-1)
        hyk = integrate_against(running.dy(times[k], xk, yk, pts), w, axis=-1)
        target_x = px[:, k + 1] + (slo * px[:, k + 1] + (vslo * Px[:, k]).sum(-1) + hxk) * dt
        px[:, k], _ = fit_conditional(target_x, xk, yk, degree, ridge)
        bdy = stock.drift_dy(times[k], yk)
        sdy = stock.diffusion_dy(times[k], yk)
        target_y = py[:, k + 1] + (bdy * py[:, k + 1] + (sdy * Py[:, k]).sum(-1) + hyk) * dt
        py[:, k], _ = fit_conditional(target_y, xk, yk, degree, ridge)
    return AdjointSolution(px=px, Px=Px, py=py, Py=Py, method="regression")


def save_adjoints(adj: AdjointSolution, directory, key: str):
    """Binary cache companion to the trajectory cache, keyed the same way."""
    from pathlib import Path

    path = Path(directory) / f"adjoints_{key}.npz"
    np.savez_compressed(path, px=adj.px, Px=adj.Px, py=adj.py, Py=adj.Py,
                        method=np.array(adj.method))
    return path


def load_adjoints(directory, key: str) -> AdjointSolution:
    from pathlib import Path

    path = Path(directory) / f"adjoints_{key}.npz"
    with np.load(path) as data:
        return AdjointSolution(px=data["px"], Px=data["Px"], py=data["py"],
                               Py=data["Py"], method=str(data["method"]))


def adjoints_to_csv(adj: AdjointSolution, tg, path) -> None:
    """One row per (scenario, step); loading columns empty at the terminal step."""
    times = tg.times()
    d = adj.Px.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["scenario", "step", "t", "px", "py"]
        header += [f"Px{i}" for i in range(d)] + [f"Py{i}" for i in range(d)]
        writer.writerow(header)
        for s in range(adj.px.shape[0]):
            for k in range(tg.steps + 1):
                row = [s, k, repr(float(times[k])),
                       repr(float(adj.px[s, k])), repr(float(adj.py[s, k]))]
                if k < tg.steps:
                    row += [repr(float(v)) for v in adj.Px[s, k]]
                    row += [repr(float(v)) for v in adj.Py[s, k]]
                else:
                    row += [""] * (2 * d)
                writer.writerow(row)
