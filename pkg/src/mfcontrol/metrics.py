"""Wasserstein-2 distances between equal-size empirical measures and the
empirical studies backing the approximation guarantees: the N-sample
convergence rate, the coupled perturbation-stability experiment, and the
clipped-moment Lipschitz check.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import simulate as sim

MAX_ASSIGNMENT_SIZE = 512


def _rng(*parts) -> np.random.Generator:
    """Deterministic generator from a tuple of small ints (128-bit key)."""
    word0 = np.uint64(int(parts[0]) & 0xFFFFFFFFFFFFFFFF)
    rest = 0
    for p in parts[1:]:
        rest = (rest * 1_000_003 + int(p) + 1) & 0xFFFFFFFFFFFFFFFF
    return np.random.default_rng(np.random.Philox(key=np.array([word0, rest],
                                                               dtype=np.uint64)))


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniformly weighted support points, one row per atom."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or not np.all(np.isfinite(pts)):
            raise MetricsError("support must be a nonempty finite (N, d) array")
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def _points(x) -> np.ndarray:
    if isinstance(x, EmpiricalMeasure):
        return x.points
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def w2_empirical(mu, nu) -> float:
    """Exact Wasserstein-2 distance between equal-size empirical measures.

    One dimension uses the order-statistics coupling; higher dimensions solve
    the optimal assignment on the squared-distance matrix, guarded to
    N <= 512.
    """
    x, y = _points(mu), _points(nu)
    if x.shape != y.shape:
        raise MetricsError(f"support size/dimension mismatch: {x.shape} vs {y.shape}")
    if x.shape[1] == 1:
        dx = np.sort(x[:, 0]) - np.sort(y[:, 0])
        return float(np.sqrt(np.mean(dx * dx)))
    if x.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise MetricsError(f"assignment W2 limited to N <= {MAX_ASSIGNMENT_SIZE}, "
                           f"got N = {x.shape[0]}")
    # canonical argument order makes symmetry bitwise exact
    if x.tobytes() > y.tobytes():
        x, y = y, x
    cost = _sqdist_matrix(x, y)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def w2_bruteforce(mu, nu) -> float:
    """Reference for tiny instances: minimum over all permutations.

    Uses the same canonical argument orientation as the assignment route so
    the two independent solvers sum identical addends in identical order and
    can be compared exactly.
    """
    x, y = _points(mu), _points(nu)
    if x.shape != y.shape:
        raise MetricsError(f"support size/dimension mismatch: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n > 8:
        raise MetricsError("brute force is factorial; use w2_empirical")
    if x.tobytes() > y.tobytes():
        x, y = y, x
    cost = _sqdist_matrix(x, y)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        tot = cost[np.arange(n), perm].sum()
        if tot < best:
            best = tot
    return float(np.sqrt(best / n))


def _sqdist_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _w2sq_against_refined(x: np.ndarray, y: np.ndarray) -> float:
    """Squared W2 between an N-point measure and a (factor*N)-point measure by
    repeating each atom of the smaller support, which preserves the measure."""
    n, m = x.shape[0], y.shape[0]
    if m % n != 0:
        raise MetricsError("reference size must be a multiple of the sample size")
    rep = m // n
    if x.shape[1] == 1:
        xr = np.repeat(np.sort(x[:, 0]), rep)
        dx = xr - np.sort(y[:, 0])
        return float(np.mean(dx * dx))
    xr = np.repeat(x, rep, axis=0)
    d = w2_empirical(xr, y)
    return d * d


# ---------------------------------------------------------------------------
# N-sample convergence rate


@dataclass(frozen=True)
class RateFit:
    n_list: tuple[int, ...]
    estimates: tuple[float, ...]   # mean squared W2 against the reference
    stderr: tuple[float, ...]
    slope: float
    intercept: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "mean_w2sq", "stderr"])
            for n, e, s in zip(self.n_list, self.estimates, self.stderr):
                wr.writerow([n, repr(e), repr(s)])


def particle_rate_experiment(law_sampler, d: int, n_list, trials: int,
                             seed: int = 0, ref_factor: int = 20) -> RateFit:
    """Monte-Carlo estimate of E[W2^2] between an N-point sample of a law and
    a (ref_factor*N)-point proxy of the same law, with a log-log slope fit.

    law_sampler(rng, n, d) must return an (n, d) array of i.i.d. draws.
    """
    if trials < 30:
        raise MetricsError("use at least 30 trials")
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise MetricsError("n_list must be strictly increasing with >= 2 sizes")
    rng = _rng(seed)
    ests, errs = [], []
    for n in n_list:
        vals = np.empty(trials)
        for t in range(trials):
            x = law_sampler(rng, n, d)
            y = law_sampler(rng, ref_factor * n, d)
            vals[t] = _w2sq_against_refined(np.atleast_2d(x.reshape(n, d)),
                                            np.atleast_2d(y.reshape(ref_factor * n, d)))
        ests.append(float(vals.mean()))
        errs.append(float(vals.std(ddof=1) / np.sqrt(trials)))
    if any(e <= 0 for e in ests):
        slope, intercept = 0.0, -math.inf  # degenerate law: all mass at a point
    else:
        slope, intercept = np.polyfit(np.log(n_list), np.log(ests), 1)
    return RateFit(tuple(n_list), tuple(ests), tuple(errs),
                   float(slope), float(intercept))


def gaussian_sampler(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.standard_normal((n, d))


# ---------------------------------------------------------------------------
# coupled perturbation-stability experiment


@dataclass(frozen=True)
class PerturbationRow:
    delta: float           # requested integrated squared-W2 budget
    achieved: float        # measured budget after calibration
    cost_gap: float        # mean |J - J~| over paired trials
    state_gap: float       # mean over trials of sup_t mean-square state gap


def _integrated_budget(states: list[np.ndarray], jitter: np.ndarray, dt: float) -> float:
    total = 0.0
    for s, x in enumerate(states[:-1]):
        w = w2_empirical(x, x + jitter[s])
        total += w * w * dt
    return total


def perturbation_gap_experiment(problem, policy, deltas, trials: int = 50,
                                seed: int = 0, pilot_trials: int = 5,
                                n_particles: int = 200) -> list[PerturbationRow]:
    """For each budget, rerun the same noise plan twice: once feeding the true
    particle cloud to every distribution input, once feeding a jittered copy
    (states themselves keep their true dynamics inputs). Records the cost gap
    and the worst per-step mean-square state gap.

    The jitter scale is calibrated per budget so the time-integrated squared
    W2 between the true and jittered clouds hits the budget on pilot runs.
    """
    deltas = sorted(float(x) for x in deltas)
    n_steps = problem.n_steps

    def run_pair(trial_seed, scale):
        plan = sim.make_noise_plan(n_particles, problem.d, problem.n_steps,
                                   problem.dt, seed=(seed, 3, trial_seed))
        base = sim.rollout(problem, policy, plan, keep_trajectory=True)
        if scale == 0.0:
            return base, base, np.zeros((n_steps + 1, plan.n_particles, problem.d))
        jrng = _rng(seed, 4, trial_seed)
        jitter = scale * jrng.standard_normal((n_steps + 1, plan.n_particles, problem.d))
        pert = sim.rollout(problem, policy, plan, keep_trajectory=True,
                           population_jitter=jitter)
        return base, pert, jitter

    # pilot calibration: budget scales ~ scale^2 near the identity matching
    scales = {}
    for delta in deltas:
        if delta == 0.0:
            scales[delta] = 0.0
            continue
        s = math.sqrt(delta / (problem.T * problem.d))
        for _ in range(2):
            measured = []
            for p in range(pilot_trials):
                base, _, jitter = run_pair(10_000 + p, s)
                measured.append(_integrated_budget(base.states, jitter, problem.dt))
            mean_b = float(np.mean(measured))
            if mean_b > 0:
                s *= math.sqrt(delta / mean_b)
        scales[delta] = s

    rows = []
    for delta in deltas:
        gaps, sgaps, budgets = [], [], []
        for trial in range(trials):
            base, pert, jitter = run_pair(trial, scales[delta])
            gaps.append(abs(base.cost_value - pert.cost_value))
            worst = 0.0
            for xb, xp in zip(base.states, pert.states):
                worst = max(worst, float(np.mean(np.sum((xb - xp) ** 2, axis=1))))
            sgaps.append(worst)
            budgets.append(_integrated_budget(base.states, jitter, problem.dt))
        rows.append(PerturbationRow(delta=delta, achieved=float(np.mean(budgets)),
                                    cost_gap=float(np.mean(gaps)),
                                    state_gap=float(np.mean(sgaps))))
    return rows


def write_perturbation_csv(path, rows: list[PerturbationRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["delta", "cost_gap", "state_gap"])
        for r in rows:
            wr.writerow([repr(r.delta), repr(r.cost_gap), repr(r.state_gap)])


# ---------------------------------------------------------------------------
# clipped-moment Lipschitz check


@dataclass(frozen=True)
class MomentCheck:
    k: int
    clip_bound: float
    max_ratio: float
    bound: float
    pairs_used: int


def moment_lipschitz_check(clip_bound: float, k: int, trials: int,
                           seed: int = 0, support: int = 50) -> MomentCheck:
    """Max over random empirical pairs of |clipped k-th moment gap| / W2,
    which the clipped construction bounds by k * clip_bound^(k-1). Pairs at
    zero distance are skipped."""
    if k < 1 or clip_bound <= 0:
        raise MetricsError("need k >= 1 and a positive clip bound")
    rng = _rng(seed, k)
    worst = 0.0
    used = 0
    half = 1.2 * clip_bound  # sample beyond the clip so truncation is active
    for _ in range(trials):
        x = rng.uniform(-half, half, size=support)
        y = rng.uniform(-half, half, size=support)
        w = w2_empirical(x, y)
        if w == 0.0:
            continue
        mx = float(np.mean(np.clip(x, -clip_bound, clip_bound) ** k))
        my = float(np.mean(np.clip(y, -clip_bound, clip_bound) ** k))
        worst = max(worst, abs(mx - my) / w)
        used += 1
    return MomentCheck(k=k, clip_bound=clip_bound, max_ratio=worst,
                       bound=k * clip_bound ** (k - 1), pairs_used=used)


def write_moment_csv(path, checks: list[MomentCheck]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "M", "max_ratio", "bound"])
        for c in checks:
            wr.writerow([c.k, repr(c.clip_bound), repr(c.max_ratio), repr(c.bound)])
