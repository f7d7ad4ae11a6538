"""Monte Carlo simulation of an interacting particle batch under a feedback
policy, with idiosyncratic noise, common noise, and common initial randomness.

All randomness is pre-sampled into a `NoisePlan` before the rollout, so the
rollout is a deterministic function of (plan, policy parameters) and the total
sampled cost is differentiable in the parameters pathwise. Noise streams are
split per particle with counter-based generators: enlarging N leaves the
draws of existing particles untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from .autodiff import Tensor

# stream tags within one seed's key space
_STREAM_PARTICLE = 1
_STREAM_COMMON = 2


class SimulationError(Exception):
    pass


def _key(seed, tag: int) -> np.ndarray:
    """Pack (seed[, purpose[, index]]) plus a stream tag into a 128-bit key."""
    if np.iterable(seed):
        parts = [int(s) for s in seed]
    else:
        parts = [int(seed)]
    parts = (parts + [0, 0])[:3]
    word0 = np.uint64(parts[0] & 0xFFFFFFFFFFFFFFFF)
    word1 = np.uint64(((parts[1] & 0xFF) << 56)
                      | ((parts[2] & 0xFFFFFFFFFFFF) << 8)
                      | (tag & 0xFF))
    return np.array([word0, word1], dtype=np.uint64)


@dataclass(frozen=True)
class NoisePlan:
    """Pre-sampled driving noise for one rollout of N particles.

    idio[s] ~ N(0, dt) per particle per dimension at step s; common[s] ~
    N(0, dt) shared by the batch; initial_idio are standard normals scaled by
    the initial law inside `sample_initial`; initial_common is the standard
    normal behind the shared initial shift.
    """
    seed: object
    dt: float
    idio: np.ndarray            # (steps, N, d)
    common: np.ndarray          # (steps, d)
    initial_idio: np.ndarray    # (N, d)
    initial_common: np.ndarray  # (d,)

    @property
    def n_particles(self):
        return self.idio.shape[1]

    @property
    def n_steps(self):
        return self.idio.shape[0]


def _counter_normals(key: np.ndarray, count: int) -> np.ndarray:
    """Standard normals at fixed counter positions of a Philox stream: one
    raw 64-bit word per draw through the inverse normal CDF. Draw j is a pure
    function of (key, j), so per-particle blocks never move when the total
    count grows."""
    raw = np.random.Philox(key=key).random_raw(count)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54
    return ndtri(u)


def make_noise_plan(n_particles: int, d: int, n_steps: int, dt: float, seed) -> NoisePlan:
    """Draw a full plan; bitwise reproducible for a given seed.

    seed may be an int or a tuple of up to three ints (run seed, purpose,
    index), letting callers keep training and validation streams disjoint.
    Particle i consumes a dedicated block of the idiosyncratic stream, so
    enlarging N extends the plan without reshuffling existing particles.
    """
    if n_particles < 1:
        raise SimulationError("need at least one particle")
    block = (n_steps + 1) * d
    draws = _counter_normals(_key(seed, _STREAM_PARTICLE),
                             n_particles * block).reshape(n_particles, block)
    initial_idio = draws[:, :d].copy()
    idio = np.ascontiguousarray(
        draws[:, d:].reshape(n_particles, n_steps, d).transpose(1, 0, 2))
    cdraws = _counter_normals(_key(seed, _STREAM_COMMON), block)
    initial_common = cdraws[:d]
    common = cdraws[d:].reshape(n_steps, d)
    root_dt = np.sqrt(dt)
    return NoisePlan(seed=seed, dt=dt, idio=idio * root_dt, common=common * root_dt,
                     initial_idio=initial_idio, initial_common=initial_common)


def sample_initial(problem, plan: NoisePlan) -> np.ndarray:
    """Initial states: i.i.d. draws from the initial law plus one shared shift
    drawn from the common initial law (zero-variance law = no shift)."""
    shift = problem.common_init_std * plan.initial_common
    return problem.mu0_mean + problem.mu0_std * plan.initial_idio + shift


def euler_step(states: Tensor, drift: Tensor, sigma: np.ndarray, sigma0: np.ndarray,
               idio: np.ndarray, common: np.ndarray, dt: float, step: int) -> Tensor:
    """One explicit step: X + b dt + sigma*eps_i + sigma0*eps0, the same
    common draw applied to every particle."""
    noise = sigma * idio + sigma0 * common
    out = ad.add_const(ad.axpy(states, drift, dt), noise)
    if not np.all(np.isfinite(out.value)):
        raise SimulationError(f"non-finite state after step {step}")
    return out


@dataclass
class RolloutRecord:
    """One simulated population: trajectory snapshots, per-step cost
    increments, and the total sampled cost (a tape node when training)."""
    total_cost: Tensor
    cost_value: float
    terminal_value: float
    running_values: list[float]
    times: list[float]
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    embeddings: list[np.ndarray] = field(default_factory=list)
    tape: ad.Tape | None = None
    param_leaves: list[Tensor] = field(default_factory=list)


def rollout(problem, policy, plan: NoisePlan, record_for_training: bool = False,
            keep_trajectory: bool = False,
            population_jitter: np.ndarray | None = None) -> RolloutRecord:
    """Simulate the batch under the policy and accumulate the sampled cost:
    mean running cost summed over the left endpoints of the grid plus the
    mean terminal cost.

    population_jitter, shape (steps+1, N, d), offsets the particle cloud fed
    to every distribution input (policy summary, drift, costs) while leaving
    the true dynamics untouched; used by the perturbation-stability study.
    """
    n_steps = problem.n_steps
    if plan.n_steps < n_steps:
        raise SimulationError(f"plan has {plan.n_steps} steps, problem needs {n_steps}")
    tape = ad.Tape(grad=record_for_training)
    leaves = policy.bind(tape)
    states = tape.tensor(sample_initial(problem, plan))
    total = tape.tensor(0.0)
    rec = RolloutRecord(total_cost=total, cost_value=0.0, terminal_value=0.0,
                        running_values=[], times=[],
                        tape=tape if record_for_training else None,
                        param_leaves=leaves)
    dt = problem.dt
    for s in range(n_steps):
        t = s * dt
        pop = states
        if population_jitter is not None:
            pop = ad.add_const(states, population_jitter[s])
        acts, m_row = policy.actions(tape, t, states, population=pop)
        f_vec = problem.running_cost(tape, t, states, acts, pop)
        total = ad.axpy(total, ad.mean_all(f_vec), dt)
        if keep_trajectory:
            rec.states.append(states.value.copy())
            rec.actions.append(acts.value.copy())
            if m_row is not None:
                rec.embeddings.append(m_row.value.reshape(-1).copy())
        rec.times.append(t)
        rec.running_values.append(float(f_vec.value.mean()))
        drift = problem.drift(tape, t, states, acts, pop)
        states = euler_step(states, drift, problem.sigma, problem.sigma0,
                            plan.idio[s], plan.common[s], dt, s)
    pop = states
    if population_jitter is not None:
        pop = ad.add_const(states, population_jitter[n_steps])
    g_vec = problem.terminal_cost(tape, states, pop)
    total = ad.add(total, ad.mean_all(g_vec))
    if keep_trajectory:
        rec.states.append(states.value.copy())
    rec.times.append(n_steps * dt)
    rec.terminal_value = float(g_vec.value.mean())
    rec.total_cost = total
    rec.cost_value = float(total.value)
    if not np.isfinite(rec.cost_value):
        raise SimulationError("non-finite total cost")
    return rec


def write_trajectories_csv(path, rec: RolloutRecord, d: int, k: int) -> None:
    """Dump per-particle states and actions: step,time,particle,x...,a..."""
    if not rec.states:
        raise SimulationError("rollout was run without keep_trajectory")
    header = (["step", "time", "particle"]
              + [f"x{j + 1}" for j in range(d)]
              + [f"a{j + 1}" for j in range(k)])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for s, x in enumerate(rec.states):
            acts = rec.actions[s] if s < len(rec.actions) else np.full((x.shape[0], k), np.nan)
            for i in range(x.shape[0]):
                row = [s, repr(float(rec.times[s])), i]
                row += [repr(float(v)) for v in x[i]]
                row += ["" if np.isnan(a) else repr(float(a)) for a in acts[i]]
                wr.writerow(row)
