"""Stochastic gradient descent on the one-population sampled cost.

Each iteration draws a fresh noise plan, simulates one taped population,
backpropagates the sampled cost, and applies an Adam (or plain SGD) update.
Validation runs on noise plans keyed only by the validation seed, so runs that
differ in architecture or training seed are scored on identical noise.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import networks as nets
from . import simulate as sim
from .embeddings import EmbeddingConfig
from .policy import NetworkPolicy, PolicyParams, init_policy, save_policy
from .problems import Problem


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class ValidationSpec:
    populations: int = 1
    particles: int = 1000
    seed: int = 424242  # shared across experiments so curves are comparable


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    particles: int
    learning_rate: object = 1e-3   # float or sequence of per-iteration rates
    seed: int = 0
    optimizer: str = "adam"        # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    validate_every: int = 50
    validation: ValidationSpec = ValidationSpec()
    checkpoint_every: int = 100
    checkpoint_dir: object = None
    control_hidden: tuple[int, ...] = (100, 100, 100, 100)
    embed_hidden: tuple[int, ...] = (100, 100, 100, 100)
    cnn_channels: int = 6
    cnn_dense: int = 100

    def rate(self, k: int) -> float:
        lr = self.learning_rate
        if np.isscalar(lr):
            return float(lr)
        return float(lr[k])

    def __post_init__(self):
        if self.iterations < 1:
            raise TrainingError("need at least one iteration")
        try:
            rates = [self.rate(k) for k in range(self.iterations)] \
                if not np.isscalar(self.learning_rate) else [self.rate(0)]
        except (IndexError, TypeError):
            raise TrainingError("learning-rate sequence shorter than the "
                                "iteration count")
        if any(r < 0 for r in rates):
            raise TrainingError("learning rates must be nonnegative")


@dataclass
class TrainLogRow:
    iteration: int
    train_cost: float
    val_cost: float  # nan until the first validation pass
    grad_norm: float
    wall_ms: float


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    def final_val_cost(self) -> float:
        for row in reversed(self.rows):
            if not math.isnan(row.val_cost):
                return row.val_cost
        return math.nan

    def val_curve(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.val_cost) for r in self.rows if not math.isnan(r.val_cost)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "train_cost", "val_cost", "grad_norm", "wall_ms"])
            for r in self.rows:
                wr.writerow([r.iteration, repr(r.train_cost),
                             "" if math.isnan(r.val_cost) else repr(r.val_cost),
                             repr(r.grad_norm), f"{r.wall_ms:.3f}"])


def sampled_cost(record: sim.RolloutRecord):
    """The taped scalar a training rollout minimizes: mean running cost summed
    over the grid plus the mean terminal cost."""
    if record.tape is None:
        raise TrainingError("rollout was not recorded for training")
    return record.total_cost


def evaluate(problem: Problem, policy, spec: ValidationSpec,
             particles: int | None = None) -> float:
    """Mean sampled cost over the configured held-out populations."""
    n = particles if particles is not None else spec.particles
    total = 0.0
    for j in range(spec.populations):
        plan = sim.make_noise_plan(n, problem.d, problem.n_steps, problem.dt,
                                   seed=(spec.seed, 2, j))
        rec = sim.rollout(problem, policy, plan, record_for_training=False)
        total += rec.cost_value
    return total / spec.populations


def train(problem: Problem, embed_cfg: EmbeddingConfig | None,
          cfg: TrainConfig) -> tuple[PolicyParams, TrainLog]:
    """Run the descent loop; returns the trained parameters and the log.

    Deterministic for a fixed config: the k-th iteration's noise plan is keyed
    by (seed, 0, k), validation plans by the validation seed only. Aborts on a
    non-finite cost or gradient, keeping the last checkpoint on disk.
    """
    params = init_policy(problem.d, problem.k, embed_cfg, cfg.particles,
                         cfg.seed, control_hidden=cfg.control_hidden,
                         embed_hidden=cfg.embed_hidden,
                         cnn_channels=cfg.cnn_channels, cnn_dense=cfg.cnn_dense)
    policy = NetworkPolicy(params)
    named = params.named_arrays()
    state = nets.adam_init([a for _, a in named], cfg.rate(0),
                           cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = TrainLog()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    val_cost = math.nan
    for k in range(cfg.iterations):
        t0 = time.perf_counter()
        plan = sim.make_noise_plan(cfg.particles, problem.d, problem.n_steps,
                                   problem.dt, seed=(cfg.seed, 0, k))
        rec = sim.rollout(problem, policy, plan, record_for_training=True)
        if not math.isfinite(rec.cost_value):
            raise TrainingError(f"non-finite training cost at iteration {k}")
        grads_all = rec.tape.backward(rec.total_cost)
        grads = [grads_all[leaf.nid] for leaf in rec.param_leaves]
        sq = 0.0
        for g in grads:
            if g is not None:
                sq += float((g * g).sum())
        grad_norm = math.sqrt(sq)
        if not math.isfinite(grad_norm):
            raise TrainingError(f"non-finite gradient at iteration {k}")
        if cfg.optimizer == "adam":
            nets.adam_step(named, grads, state, lr=cfg.rate(k))
        elif cfg.optimizer == "sgd":
            nets.sgd_step(named, grads, cfg.rate(k))
        else:
            raise TrainingError(f"unknown optimizer {cfg.optimizer!r}")
        is_last = k == cfg.iterations - 1
        if (k + 1) % cfg.validate_every == 0 or is_last or k == 0:
            val_cost = evaluate(problem, policy, cfg.validation)
            row_val = val_cost
        else:
            row_val = math.nan
        if ckpt_dir and ((k + 1) % cfg.checkpoint_every == 0 or is_last):
            save_policy(ckpt_dir / "policy.ckpt", params,
                        {"iteration": k + 1, "problem": problem.name})
        log.rows.append(TrainLogRow(
            iteration=k, train_cost=rec.cost_value, val_cost=row_val,
            grad_norm=grad_norm, wall_ms=(time.perf_counter() - t0) * 1e3))
    return params, log


def train_state_only(problem: Problem, cfg: TrainConfig) -> tuple[PolicyParams, TrainLog]:
    """Baseline: the same loop with a control net that sees (t, x) only."""
    return train(problem, None, cfg)


def desk_config(problem: Problem, **overrides) -> TrainConfig:
    """Small-budget preset used by tests and quick experiments.

    Validation populations match the training size: the flattened-positions
    embedding hard-wires its input width to N*d, and shared-noise cost
    comparisons need a common N anyway.
    """
    base = dict(
        systemic_risk=dict(iterations=2000, particles=200,
                           validation=ValidationSpec(populations=3, particles=200)),
        price_impact=dict(iterations=3000, particles=200,
                          validation=ValidationSpec(populations=3, particles=200)),
        crowd_motion=dict(iterations=1500, particles=128,
                          validation=ValidationSpec(populations=3, particles=128)),
    )[problem.name]
    base.update(control_hidden=(32, 32, 32), embed_hidden=(32, 32),
                cnn_channels=4, cnn_dense=32, learning_rate=1e-3)
    base.update(overrides)
    return TrainConfig(**base)


def full_config(problem: Problem, **overrides) -> TrainConfig:
    """Full-scale preset: one population of 1000 (or 800) particles per
    iteration, 10k iterations, width-100 four-layer stacks."""
    base = dict(
        systemic_risk=dict(iterations=10000, particles=1000,
                           validation=ValidationSpec(populations=1, particles=1000)),
        price_impact=dict(iterations=10000, particles=800,
                          validation=ValidationSpec(populations=5, particles=800)),
        crowd_motion=dict(iterations=10000, particles=800,
                          validation=ValidationSpec(populations=5, particles=800)),
    )[problem.name]
    base.update(overrides)
    return TrainConfig(**base)
