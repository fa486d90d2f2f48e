"""Bond-portfolio / consumption problem with proportional transaction costs.

Maps the bond-market investment problem onto the canonical controlled SDE:
the action is a (time-to-maturity, consumption-rate) pair on a product grid,
the drift slope of the bond position is ``short_rate - v(u) * price_of_risk
- c``, its diffusion slope is the integrated volatility ``v(u)`` on the first
Brownian axis, the stock is a geometric Brownian motion on the second axis,
and lump transfers between the two accounts pay proportional costs through
the jump gains ``((1-cost_buy), -1)`` and ``(-1, (1-cost_sell))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .dynamics import CoefficientField, TimeGrid, brownian_increments, linear_stock
from .measures import ActionGrid
from .problems import (
    ControlProblem,
    TerminalCost,
    discounted_utility_running,
    tanh_wealth_terminal,
)


@dataclass(frozen=True)
class MarketModel:
    """Bond-market primitives: integrated volatility family, short-rate and
    price-of-risk generators, and the two action grids."""

    volatility: str                      # "ho-lee" | "hull-white"
    sigma: float
    maturities: np.ndarray               # times to maturity (years)
    consumption: np.ndarray              # consumption rates (1/time)
    mean_reversion: float = 0.0          # hull-white only
    short_rate: dict = dc_field(default_factory=lambda: {"kind": "gaussian", "r0": 0.03, "drift": 0.0})
    market_price_of_risk: dict = dc_field(default_factory=lambda: {"kind": "constant", "value": 0.1})
    clamp_quantile: float | None = None

    def __post_init__(self):
        if self.volatility not in ("ho-lee", "hull-white"):
            raise ValueError(f"unknown volatility model {self.volatility!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.volatility == "hull-white" and not self.mean_reversion > 0:
            raise ValueError("hull-white requires a positive mean-reversion rate")
        object.__setattr__(self, "maturities", np.asarray(self.maturities, float))
        object.__setattr__(self, "consumption", np.asarray(self.consumption, float))
        if self.maturities.size == 0 or self.consumption.size == 0:
            raise ValueError("maturity and consumption grids must be nonempty")

    def to_dict(self) -> dict:
        return {
            "volatility": self.volatility,
            "sigma": self.sigma,
            "mean_reversion": self.mean_reversion,
            "maturities": self.maturities.tolist(),
            "consumption": self.consumption.tolist(),
            "short_rate": self.short_rate,
            "market_price_of_risk": self.market_price_of_risk,
            "clamp_quantile": self.clamp_quantile,
        }

    @staticmethod
    def from_dict(doc: dict) -> "MarketModel":
        return MarketModel(
            volatility=doc["volatility"],
            sigma=doc["sigma"],
            mean_reversion=doc.get("mean_reversion", 0.0),
            maturities=doc["maturities"],
            consumption=doc["consumption"],
            short_rate=doc.get("short_rate", {"kind": "gaussian", "r0": 0.03, "drift": 0.0}),
            market_price_of_risk=doc.get("market_price_of_risk", {"kind": "constant", "value": 0.1}),
            clamp_quantile=doc.get("clamp_quantile"),
        )


def integrated_volatility(market: MarketModel, maturities) -> np.ndarray:
    """Pointwise integrated bond-price volatility v(u).

    Ho-Lee: v(u) = -sigma * u.  Hull-White: v(u) = (sigma/c) * (exp(-c u) - 1),
    which recovers Ho-Lee as c -> 0.
    """
    u = np.asarray(maturities, dtype=float)
    if market.volatility == "ho-lee":
        return -market.sigma * u
    c = market.mean_reversion
    if c == 0.0:
        raise ValueError("hull-white requires a nonzero mean-reversion rate")
    return (market.sigma / c) * np.expm1(-c * u)


def volatility_field(market: MarketModel, maturities, tg: TimeGrid) -> np.ndarray:
    """Integrated volatility per (step, maturity), shape (steps, len(maturities)).

    Both supported families are time-invariant; the time axis is kept for
    interface uniformity with sampled coefficient fields.
    """
    row = integrated_volatility(market, maturities)
    return np.broadcast_to(row, (tg.steps, row.size)).copy()


def product_grid(maturities, consumption) -> ActionGrid:
    """Product action grid over (maturity, consumption), lexicographic order."""
    u = np.asarray(maturities, float)
    c = np.asarray(consumption, float)
    points = np.column_stack([np.repeat(u, c.size), np.tile(c, u.size)])
    return ActionGrid(points)


def product_weights(maturity_weights, consumption_weights) -> np.ndarray:
    """Flattened product measure row matching :func:`product_grid` ordering."""
    return np.outer(
        np.asarray(maturity_weights, float), np.asarray(consumption_weights, float)
    ).ravel()


def _clamp(paths: np.ndarray, quantile: float | None):
    if quantile is None or quantile <= 0.0:
        return paths, 0
    lo = np.quantile(paths, quantile)
    hi = np.quantile(paths, 1.0 - quantile)
    events = int(np.count_nonzero((paths < lo) | (paths > hi)))
    return np.clip(paths, lo, hi), events


def _short_rate_and_mpr(market: MarketModel, tg: TimeGrid, scenarios: int, noise: np.ndarray):
    """Adapted short-rate and price-of-risk paths, shapes (scenarios | 1, steps).

    The value at step k depends only on Brownian increments before k.  Returns
    (short_rate, price_of_risk, clamp_events).
    """
    n, dt = tg.steps, tg.dt
    times = tg.times()[:n]
    spec = market.short_rate
    kind = spec.get("kind")
    if kind == "gaussian":
        b_path = np.zeros((scenarios, n))
        np.cumsum(noise[:, : n - 1, 0], axis=1, out=b_path[:, 1:])
        r0 = spec.get("r0", 0.03) + spec.get("drift", 0.0) * times + market.sigma * b_path
    elif kind == "ou":
        speed = spec.get("speed", market.mean_reversion)
        level = spec.get("level", spec.get("r0", 0.03))
        r0 = np.empty((scenarios, n))
        r0[:, 0] = spec.get("r0", 0.03)
        for k in range(n - 1):
            r0[:, k + 1] = r0[:, k] + speed * (level - r0[:, k]) * dt + market.sigma * noise[:, k, 0]
    elif kind == "tabulated":
        vals = np.asarray(spec["values"], float)
        r0 = vals[None, :] if vals.ndim == 1 else vals
        if r0.shape[1] != n or r0.shape[0] not in (1, scenarios):
            raise ValueError("tabulated short rate must have shape (steps,) or (scenarios, steps)")
    else:
        raise ValueError(f"unknown short-rate generator {kind!r}")

    mpr_spec = market.market_price_of_risk
    if mpr_spec.get("kind") == "constant":
        theta = np.full((1, n), float(mpr_spec.get("value", 0.0)))
    elif mpr_spec.get("kind") == "tabulated":
        vals = np.asarray(mpr_spec["values"], float)
        theta = vals[None, :] if vals.ndim == 1 else vals
        if theta.shape[1] != n or theta.shape[0] not in (1, scenarios):
            raise ValueError("tabulated price of risk must have shape (steps,) or (scenarios, steps)")
    else:
        raise ValueError(f"unknown price-of-risk generator {mpr_spec.get('kind')!r}")

    r0, events_r = _clamp(r0, market.clamp_quantile)
    theta, events_t = _clamp(theta, market.clamp_quantile)
    return r0, theta, events_r + events_t


class FinanceCoefficientField(CoefficientField):
    """Lazy coefficient field for the bond-portfolio problem.

    Only the short rate and price of risk are stored per scenario; the
    per-grid-point drift slope is assembled on demand, and the diffusion
    slope (the integrated volatility on the first noise axis) is
    deterministic.
    """

    def __init__(self, grid, tg, scenarios, short_rate, price_of_risk, vol_rows,
                 maturity_index, consumption_index, consumption, cost_buy, cost_sell,
                 clamp_events=0):
        self.grid = grid
        self.steps = tg.steps
        self.dim = 2
        self.scenarios = scenarios
        self.short_rate = short_rate            # (S|1, steps)
        self.price_of_risk = price_of_risk      # (S|1, steps)
        self._vol_rows = vol_rows               # (steps, len(maturities))
        self._iu = maturity_index
        self._ic = consumption_index
        self._cons = consumption
        self.clamp_events = clamp_events
        m = grid.count
        self._zeros_scalar = np.zeros((1, m))
        self._zeros_vector = np.zeros((1, m, 2))
        slope = np.zeros((tg.steps, m, 2))
        slope[:, :, 0] = vol_rows[:, maturity_index]
        self._vol_slope = slope
        self.vol_slope_bound = float(np.abs(slope).max())
        self.jump_gain_x = np.broadcast_to(
            np.array([1.0 - cost_buy, -1.0]), (tg.steps, 2)
        ).copy()
        self.jump_gain_y = np.broadcast_to(
            np.array([-1.0, 1.0 - cost_sell]), (tg.steps, 2)
        ).copy()
        self.validate()

    def drift_level_at(self, k, rows=None):
        return self._zeros_scalar

    def drift_slope_at(self, k, rows=None):
        r = self.short_rate[:, k] if rows is None or self.short_rate.shape[0] == 1 \
            else self.short_rate[rows, k]
        th = self.price_of_risk[:, k] if rows is None or self.price_of_risk.shape[0] == 1 \
            else self.price_of_risk[rows, k]
        vu = self._vol_rows[k, self._iu]
        return r[:, None] - th[:, None] * vu[None, :] - self._cons[self._ic][None, :]

    def vol_level_at(self, k, rows=None):
        return self._zeros_vector

    def vol_slope_at(self, k, rows=None):
        return self._vol_slope[None, k]


def build_coefficient_field(
    model: dict,
    tg: TimeGrid,
    grid: ActionGrid,
    scenarios: int,
    seed: int,
    noise: np.ndarray | None = None,
) -> FinanceCoefficientField:
    """Sample the bond-market coefficient field from a model specification.

    ``model`` carries the market under ``"market"`` plus the transaction
    costs ``"cost_buy"`` / ``"cost_sell"``.  The grid must be the product
    grid of the market's maturities and consumption rates.
    """
    market = model["market"]
    if isinstance(market, dict):
        market = MarketModel.from_dict(market)
    cost_buy = float(model.get("cost_buy", 0.0))
    cost_sell = float(model.get("cost_sell", 0.0))
    if not (0.0 <= cost_buy < 1.0 and 0.0 <= cost_sell < 1.0):
        raise ValueError("transaction costs must lie in [0, 1)")
    if noise is None:
        noise = brownian_increments(seed, scenarios, tg.steps, 2, tg.dt)

    pts = grid.points
    if grid.action_dim != 2:
        raise ValueError("finance problems need a (maturity, consumption) product grid")
    iu = np.searchsorted(market.maturities, pts[:, 0])
    ic = np.searchsorted(market.consumption, pts[:, 1])
    iu = np.clip(iu, 0, market.maturities.size - 1)
    ic = np.clip(ic, 0, market.consumption.size - 1)
    if not (np.allclose(market.maturities[iu], pts[:, 0])
            and np.allclose(market.consumption[ic], pts[:, 1])):
        raise ValueError("grid is not the product of the market's maturity and consumption grids")

    r0, theta, clamp_events = _short_rate_and_mpr(market, tg, scenarios, noise)
    return FinanceCoefficientField(
        grid=grid, tg=tg, scenarios=scenarios,
        short_rate=r0, price_of_risk=theta,
        vol_rows=volatility_field(market, market.maturities, tg),
        maturity_index=iu, consumption_index=ic,
        consumption=market.consumption,
        cost_buy=cost_buy, cost_sell=cost_sell,
        clamp_events=clamp_events,
    )


@dataclass(frozen=True)
class PortfolioParams:
    """Parameters of the investment/consumption instance."""

    x0: float = 1.0
    y0: float = 1.0
    stock_drift: float = 0.05
    stock_vol: float = 0.2
    cost_buy: float = 0.01        # proportional cost moving stock -> bonds
    cost_sell: float = 0.01       # proportional cost moving bonds -> stock
    discount: float = 0.05
    utility: str = "sqrt"
    utility_sign: float = -1.0    # -1: maximize utility via minimized cost
    terminal_weight: float = 1.0
    terminal_scale: float = 4.0
    tv_cap: float = 10.0

    def __post_init__(self):
        if not (0.0 <= self.cost_buy < 1.0 and 0.0 <= self.cost_sell < 1.0):
            raise ValueError("transaction costs must lie in [0, 1)")


@dataclass(frozen=True)
class PortfolioProblem:
    """Canonical problem instance together with its market description."""

    problem: ControlProblem
    market: MarketModel
    params: PortfolioParams


def build_portfolio_problem(
    market: MarketModel,
    params: PortfolioParams,
    tg: TimeGrid,
    terminal: TerminalCost | None = None,
    k_path=None,
) -> PortfolioProblem:
    """Assemble the bond/stock/consumption problem in canonical form.

    The running cost is ``utility_sign * exp(-discount t) * f(c)`` (the
    default sign turns utility maximization into cost minimization); the
    terminal cost defaults to a bounded saturating function of total wealth.
    The singular marginal cost defaults to zero: transfers are penalized only
    through the proportional-cost jump gains.
    """
    grid = product_grid(market.maturities, market.consumption)
    running = discounted_utility_running(
        params.discount, params.utility, params.utility_sign, component=1
    )
    if terminal is None:
        terminal = tanh_wealth_terminal(params.terminal_weight, params.terminal_scale)
    if k_path is None:
        k_path = np.zeros((tg.steps, 2))
    coefficients = {
        "model": "finance",
        "market": market.to_dict(),
        "cost_buy": params.cost_buy,
        "cost_sell": params.cost_sell,
    }
    problem = ControlProblem(
        tg=tg,
        grid=grid,
        dim=2,
        x0=params.x0,
        y0=params.y0,
        coefficients=coefficients,
        stock=linear_stock(params.stock_drift, params.stock_vol, 2, component=1),
        running=running,
        terminal=terminal,
        k_path=k_path,
        tv_cap=params.tv_cap,
    )
    return PortfolioProblem(problem=problem, market=market, params=params)


def bond_price_path(
    market: MarketModel,
    maturity: float,
    tg: TimeGrid,
    seed: int,
    scenarios: int = 1,
    initial_price: float = 1.0,
    forward_rate=None,
    log_euler: bool = False,
):
    """Diagnostic simulation of a single bond price.

    dP = P (short_rate - forward_rate(u) - v(u) * price_of_risk) dt
         + P v(u) dW  on the first noise axis.

    ``forward_rate`` may be an array of shape (steps,) or (scenarios, steps);
    by default the curve is flat at the short rate.  Returns (paths,
    negative_price_count); with ``log_euler`` prices stay positive by
    construction.
    """
    noise = brownian_increments(seed, scenarios, tg.steps, 2, tg.dt)
    r0, theta, _ = _short_rate_and_mpr(market, tg, scenarios, noise)
    if forward_rate is None:
        r_u = r0
    else:
        r_u = np.asarray(forward_rate, float)
        if r_u.ndim == 1:
            r_u = r_u[None, :]
        if r_u.shape[1] != tg.steps:
            raise ValueError("forward rate must provide one value per step")
    v = float(integrated_volatility(market, [maturity])[0])
    n, dt = tg.steps, tg.dt
    prices = np.empty((scenarios, n + 1))
    prices[:, 0] = initial_price
    negative = 0
    for k in range(n):
        drift = r0[:, k] - r_u[:, k] - v * theta[:, k]
        dw = noise[:, k, 0]
        if log_euler:
            prices[:, k + 1] = prices[:, k] * np.exp((drift - 0.5 * v * v) * dt + v * dw)
        else:
            prices[:, k + 1] = prices[:, k] * (1.0 + drift * dt + v * dw)
            negative += int(np.count_nonzero(prices[:, k + 1] < 0.0))
    return prices, negative
