"""The three benchmark control problems and the interbank analytic solution.

Each problem packages dimensions, horizon, volatilities, initial laws, and the
drift / running cost / terminal cost callables evaluated on tape tensors. The
measure argument arrives as a particle cloud tensor `pop` (normally the batch
itself), so population statistics stay differentiable and can be swapped for a
perturbed cloud in stability experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ProblemError(Exception):
    pass


@dataclass(frozen=True)
class Problem:
    name: str
    d: int
    k: int
    T: float
    dt: float
    sigma: np.ndarray          # (d,) idiosyncratic volatility
    sigma0: np.ndarray         # (d,) common-noise volatility in the dynamics
    mu0_mean: np.ndarray       # (d,) Gaussian initial law, per dimension
    mu0_std: np.ndarray
    common_init_std: np.ndarray  # (d,) std of the shared initial shift (0 = none)
    drift: Callable
    running_cost: Callable
    terminal_cost: Callable
    params: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ProblemError(f"horizon {self.T} is not a multiple of dt {self.dt}")
        return int(round(n))


def _vec(x, d):
    return np.full(d, float(x)) if np.isscalar(x) else np.asarray(x, dtype=float)


def _dev_from_mean(states: Tensor, pop: Tensor) -> Tensor:
    """population mean minus each particle's state, (N, d)."""
    mean = ad.mean_axis(pop, 0)
    return ad.sub(ad.broadcast_row(mean, states.shape[0]), states)


# ---------------------------------------------------------------------------
# interbank lending / borrowing (1-d, explicit solution available)


def systemic_risk(T: float = 1.0, dt: float = 0.01, mu0_mean: float = 1.0,
                  mu0_std: float = 0.1, rho: float = 0.1, a: float = 1.0,
                  c: float = 1.0, q: float = 0.5, eps: float = 10.0,
                  sigma: float = 1.0) -> Problem:
    """Banks steer their log-reserves toward the population average.

    Dynamics a*(mean - x) + action; running cost
    action^2/2 - q*action*(mean - x) + eps/2*(mean - x)^2; terminal
    c/2*(mean - x)^2. The driving noise mixes an idiosyncratic and a common
    Brownian motion with correlation rho, expressed through the two volatility
    channels as sigma*sqrt(1-rho^2) and sigma*rho.
    """
    if q * q > eps:
        raise ProblemError(f"need q^2 <= eps for a convex running cost (q={q}, eps={eps})")
    if not (0.0 <= rho <= 1.0):
        raise ProblemError(f"correlation rho must be in [0, 1], got {rho}")

    def drift(tape, t, states, acts, pop):
        return ad.add(ad.scale(_dev_from_mean(states, pop), a), acts)

    def running_cost(tape, t, states, acts, pop):
        dev = _dev_from_mean(states, pop)
        quad = ad.axpy(ad.scale(ad.square(acts), 0.5), ad.square(dev), eps / 2.0)
        return ad.axpy(quad, ad.mul(acts, dev), -q)

    def terminal_cost(tape, states, pop):
        return ad.scale(ad.square(_dev_from_mean(states, pop)), c / 2.0)

    return Problem(
        name="systemic_risk", d=1, k=1, T=T, dt=dt,
        sigma=_vec(sigma * np.sqrt(1.0 - rho * rho), 1),
        sigma0=_vec(sigma * rho, 1),
        mu0_mean=_vec(mu0_mean, 1), mu0_std=_vec(mu0_std, 1),
        common_init_std=_vec(0.0, 1),
        drift=drift, running_cost=running_cost, terminal_cost=terminal_cost,
        params=dict(T=T, dt=dt, mu0_mean=mu0_mean, mu0_std=mu0_std, rho=rho,
                    a=a, c=c, q=q, eps=eps, sigma=sigma))


# ---------------------------------------------------------------------------
# two-asset execution with market impact through the mean trading rate


def price_impact(T: float = 1.0, dt: float = 0.01,
                 mu0_mean=(1.0, 2.0), mu0_std=(0.3, 1.0),
                 c_alpha: float = 2.0, c_x: float = 0.1, c_g: float = 0.3,
                 h=(1.0, 0.8), common_init_std=(1.0, 1.0),
                 sigma=(0.7, 1.0)) -> Problem:
    """Traders liquidate two inventories; the order flow of the crowd moves
    prices, coupling each trader to the mean trading rate per asset.

    Running cost per particle, summed over assets:
    c_alpha/2*a_i^2 + c_x/2*x_i^2 - h_i*x_i*mean(a_i); terminal
    c_g/2*|x|^2. Common randomness enters through the shared initial shift.
    """
    if c_alpha <= 0 or c_x <= 0 or c_g <= 0:
        raise ProblemError("c_alpha, c_x, c_g must be positive")
    h_arr = _vec(h, 2)

    def drift(tape, t, states, acts, pop):
        return acts

    def running_cost(tape, t, states, acts, pop):
        mean_act = ad.mean_axis(acts, 0)
        impact = ad.mul(states, ad.broadcast_row(mean_act, states.shape[0]))
        per_dim = ad.axpy(ad.scale(ad.square(acts), c_alpha / 2.0),
                          ad.square(states), c_x / 2.0)
        per_dim = ad.add(per_dim, ad.mul_const(impact, -h_arr))
        return ad.sum_axis(per_dim, 1)

    def terminal_cost(tape, states, pop):
        return ad.scale(ad.sum_axis(ad.square(states), 1), c_g / 2.0)

    return Problem(
        name="price_impact", d=2, k=2, T=T, dt=dt,
        sigma=_vec(sigma, 2), sigma0=_vec(0.0, 2),
        mu0_mean=_vec(mu0_mean, 2), mu0_std=_vec(mu0_std, 2),
        common_init_std=_vec(common_init_std, 2),
        drift=drift, running_cost=running_cost, terminal_cost=terminal_cost,
        params=dict(T=T, dt=dt, mu0_mean=tuple(np.atleast_1d(mu0_mean)),
                    mu0_std=tuple(np.atleast_1d(mu0_std)), c_alpha=c_alpha,
                    c_x=c_x, c_g=c_g, h=tuple(h_arr),
                    common_init_std=tuple(np.atleast_1d(common_init_std)),
                    sigma=tuple(np.atleast_1d(sigma))))


# ---------------------------------------------------------------------------
# crowd motion with congestion


def congestion_field(eval_points: Tensor, cloud: Tensor, bandwidth: float,
                     amplitude: float, c0: float) -> Tensor:
    """c0 + smoothed local density at each evaluation point: the mean over the
    cloud of a Gaussian bump amplitude*exp(-|x - y|^2 / (2 bw^2))."""
    n, m = eval_points.shape[0], cloud.shape[0]
    sq_e = ad.sum_axis(ad.square(eval_points), 1)            # (n,)
    sq_c = ad.sum_axis(ad.square(cloud), 1)                  # (m,)
    cross = ad.matmul(eval_points, ad.transpose(cloud))      # (n, m)
    sqdist = ad.add(ad.add(ad.broadcast_col(sq_e, m), ad.broadcast_row(sq_c, n)),
                    ad.scale(cross, -2.0))
    bump = ad.exp(ad.scale(sqdist, -1.0 / (2.0 * bandwidth ** 2)))
    dens = ad.scale(ad.mean_axis(bump, 1), amplitude)
    return ad.add_scalar(dens, c0)


def crowd_motion(T: float = 1.0, dt: float = 0.01,
                 mu0_mean=(0.0, 0.0), mu0_std=(0.1, 0.2),
                 c0: float = 0.1, c1: float = 0.0, c2: float = 1.0,
                 c3: float = 1.0, target=(0.0, 0.0), target2=(2.0, 2.0),
                 common_init_std=(1.0, 1.0), sigma=(0.7, 1.0),
                 kernel_bandwidth: float = 0.5,
                 kernel_amplitude: float = 1.0) -> Problem:
    """Agents choose their velocity; moving through a crowded region costs
    more. Congestion at x is c0 plus the Gaussian-smoothed local density,
    and the running cost is congestion/2*|a|^2 + c1*|x-target|^2 +
    c2*congestion; terminal cost c3*|x-target2|^2.
    """
    if c0 <= 0:
        raise ProblemError("c0 must be positive")
    if kernel_bandwidth <= 0:
        raise ProblemError("kernel bandwidth must be positive")
    t1 = _vec(target, 2)
    t2 = _vec(target2, 2)

    def running_cost(tape, t, states, acts, pop):
        cong = congestion_field(states, pop, kernel_bandwidth, kernel_amplitude, c0)
        speed2 = ad.sum_axis(ad.square(acts), 1)
        move = ad.scale(ad.mul(cong, speed2), 0.5)
        out = ad.axpy(move, cong, c2)
        if c1 != 0.0:
            dist2 = ad.sum_axis(ad.square(ad.add_const(states, -t1)), 1)
            out = ad.axpy(out, dist2, c1)
        return out

    def drift(tape, t, states, acts, pop):
        return acts

    def terminal_cost(tape, states, pop):
        dist2 = ad.sum_axis(ad.square(ad.add_const(states, -t2)), 1)
        return ad.scale(dist2, c3)

    return Problem(
        name="crowd_motion", d=2, k=2, T=T, dt=dt,
        sigma=_vec(sigma, 2), sigma0=_vec(0.0, 2),
        mu0_mean=_vec(mu0_mean, 2), mu0_std=_vec(mu0_std, 2),
        common_init_std=_vec(common_init_std, 2),
        drift=drift, running_cost=running_cost, terminal_cost=terminal_cost,
        params=dict(T=T, dt=dt, mu0_mean=tuple(np.atleast_1d(mu0_mean)),
                    mu0_std=tuple(np.atleast_1d(mu0_std)), c0=c0, c1=c1, c2=c2,
                    c3=c3, target=tuple(t1), target2=tuple(t2),
                    common_init_std=tuple(np.atleast_1d(common_init_std)),
                    sigma=tuple(np.atleast_1d(sigma)),
                    kernel_bandwidth=kernel_bandwidth,
                    kernel_amplitude=kernel_amplitude))


# ---------------------------------------------------------------------------
# explicit solution of the interbank benchmark
#
# Write y = (population mean - x). Averaging the dynamics over the batch makes
# the mean evolve by the mean action plus common noise, so y follows
#   dy = (mean_action - action - a*y) dt - sigma*sqrt(1-rho^2) dW,
# and the whole cost is a function of y alone. Restricting to the symmetric
# linear feedback action = phi_t * y (offsets cancel in y and only add cost),
# the planner controls the second moment mm_t = E[y^2]:
#   mm' = -2(a + phi) mm + sigma_tilde^2,
# paying (phi^2/2 - q phi + eps/2) mm per unit time and c/2 mm_T at the end.
# Pontryagin on this scalar deterministic problem gives phi = q + eta with
#   eta' = eta^2 + 2(a + q) eta - (eps - q^2),   eta_T = c,
# which is the Riccati equation solved below. The discrete-time dynamic
# program `lq_backward_induction` re-derives the gain independently for the
# Euler time grid (exact for the discretized problem) and is used to
# cross-check the ODE route.


@dataclass(frozen=True)
class RiccatiSolution:
    """Terminal-value Riccati solution on the simulation grid.

    gain[i] = q + eta[i] is the optimal feedback slope multiplying
    (population mean - x) at time times[i].
    """
    times: np.ndarray
    eta: np.ndarray
    gain: np.ndarray

    def gain_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.gain))


def _riccati_rhs(eta: float, a: float, q: float, eps: float) -> float:
    return eta * eta + 2.0 * (a + q) * eta - (eps - q * q)


def systemic_risk_analytic(problem: Problem, substeps: int = 1) -> RiccatiSolution:
    """Solve the Riccati terminal-value problem by RK4 backward in time on the
    problem's grid (refined by `substeps` per step)."""
    p = problem.params
    a, q, eps, c = p["a"], p["q"], p["eps"], p["c"]
    if q * q > eps:
        raise ProblemError("q^2 <= eps required")
    n = problem.n_steps
    h = problem.dt / substeps
    eta = np.empty(n * substeps + 1)
    eta[-1] = c
    y = c
    for i in range(n * substeps, 0, -1):
        # integrating backward: d(eta)/d(-t) = -rhs
        k1 = -_riccati_rhs(y, a, q, eps)
        k2 = -_riccati_rhs(y + 0.5 * h * k1, a, q, eps)
        k3 = -_riccati_rhs(y + 0.5 * h * k2, a, q, eps)
        k4 = -_riccati_rhs(y + h * k3, a, q, eps)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y) or abs(y) > 1e6:
            raise ProblemError(f"Riccati blow-up at t ~ {(i - 1) * h:.4f}")
        eta[i - 1] = y
    eta = eta[::substeps]
    times = np.arange(n + 1) * problem.dt
    return RiccatiSolution(times=times, eta=eta, gain=q + eta)


def lq_backward_induction(problem: Problem, substeps: int = 1) -> RiccatiSolution:
    """Exact dynamic program for the time-discretized deviation problem.

    One-step recursion with value (eta/2)*mm + const on the deviation second
    moment mm: minimizing over the feedback slope phi in
      (phi^2/2 - q phi + eps/2) h + (eta'/2) (1 - (a + phi) h)^2 mm-coefficient
    gives phi = (q + eta' (1 - a h)) / (1 + eta' h) and
      eta = (phi^2 - 2 q phi + eps) h + eta' (1 - (a + phi) h)^2.
    Derived by completing the square; independent of the ODE route.
    """
    p = problem.params
    a, q, eps, c = p["a"], p["q"], p["eps"], p["c"]
    n = problem.n_steps
    h = problem.dt / substeps
    eta_fine = np.empty(n * substeps + 1)
    phi_fine = np.empty(n * substeps + 1)
    eta_fine[-1] = c
    phi_fine[-1] = q + c
    for i in range(n * substeps, 0, -1):
        et = eta_fine[i]
        phi = (q + et * (1.0 - a * h)) / (1.0 + et * h)
        eta_fine[i - 1] = (phi * phi - 2.0 * q * phi + eps) * h \
            + et * (1.0 - (a + phi) * h) ** 2
        phi_fine[i - 1] = phi
    times = np.arange(n + 1) * problem.dt
    return RiccatiSolution(times=times, eta=eta_fine[::substeps],
                           gain=phi_fine[::substeps])


def lq_optimal_cost(problem: Problem, gains: np.ndarray) -> float:
    """Mean-field-limit expected cost of the linear feedback with the given
    per-step slopes, from the deviation second-moment recursion."""
    p = problem.params
    a, q, eps, c = p["a"], p["q"], p["eps"], p["c"]
    sig2 = float(problem.sigma[0]) ** 2
    h = problem.dt
    mm = float(problem.mu0_std[0]) ** 2
    total = 0.0
    for i in range(problem.n_steps):
        phi = gains[i]
        total += (0.5 * phi * phi - q * phi + 0.5 * eps) * mm * h
        mm = (1.0 - (a + phi) * h) ** 2 * mm + sig2 * h
    return total + 0.5 * c * mm
