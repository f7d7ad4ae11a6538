"""Experiment runner: INI configs, presets, training, artifact emission.

A run directory receives `config.resolved` (a complete, rerunnable copy of
the effective configuration), `train_log.csv`, `policy.ckpt`, the optional
`trajectories.csv` / `control_slice.csv` / `theory_*.csv` dumps, and a
`manifest.txt` with a checksum per artifact. Numeric artifacts are bitwise
reproducible from `config.resolved` on the same build; the wall-clock column
of the training log is the one measured quantity.

Exit codes: 0 success, 2 invalid configuration, 3 aborted on non-finite
numbers (the last checkpoint is kept).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from . import metrics
from . import networks as nets
from . import presets
from . import simulate as sim
from . import training as tr
from .policy import LinearDeviationPolicy, NetworkPolicy
from .problems import Problem, systemic_risk_analytic

OUTPUT_ROOT_ENV = "MFCONTROL_OUT"


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "systemic_risk"
    embedding: str = "mom"
    scale: str = "desk"              # desk | full
    seed: int = 0
    out: str = ""
    nbin: int | None = None
    nmom: int | None = None
    domain_center: float | None = None
    domain_side: float | None = None
    particles: int | None = None
    iterations: int | None = None
    learning_rate: float | None = None
    validate_every: int | None = None
    optimizer: str | None = None
    control_hidden: tuple[int, ...] | None = None
    embed_hidden: tuple[int, ...] | None = None
    val_populations: int | None = None
    val_particles: int | None = None
    val_seed: int | None = None
    problem_overrides: dict = field(default_factory=dict)
    dump_trajectories: bool = False
    dump_control_slice: bool = True
    theory: tuple[str, ...] = ()

    def validate(self):
        if self.problem not in presets.PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; "
                              f"valid: {sorted(presets.PROBLEMS)}")
        if self.embedding not in presets.EMBEDDINGS:
            raise ConfigError(f"unknown embedding {self.embedding!r}; "
                              f"valid: {presets.embedding_names()}")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be desk or full, got {self.scale!r}")
        for t in self.theory:
            if t not in ("rate", "perturbation", "moments"):
                raise ConfigError(f"unknown theory experiment {t!r}; "
                                  "valid: rate, perturbation, moments")
        if not self.out:
            raise ConfigError("no output directory (config [experiment] out or --out)")


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"bad layer widths {text!r}; expected e.g. 32,32")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # problem parameters are case-sensitive (T vs t)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    try:
        if parser.has_section("experiment"):
            sec = parser["experiment"]
            cfg.problem = sec.get("problem", cfg.problem)
            cfg.embedding = sec.get("embedding", cfg.embedding)
            cfg.scale = sec.get("scale", cfg.scale)
            cfg.seed = sec.getint("seed", cfg.seed)
            cfg.out = sec.get("out", cfg.out)
        if parser.has_section("embedding"):
            sec = parser["embedding"]
            if "nbin" in sec:
                cfg.nbin = sec.getint("nbin")
            if "nmom" in sec:
                cfg.nmom = sec.getint("nmom")
            if "center" in sec:
                cfg.domain_center = sec.getfloat("center")
            if "side" in sec:
                cfg.domain_side = sec.getfloat("side")
        if parser.has_section("train"):
            sec = parser["train"]
            if "particles" in sec:
                cfg.particles = sec.getint("particles")
            if "iterations" in sec:
                cfg.iterations = sec.getint("iterations")
            if "learning_rate" in sec:
                cfg.learning_rate = sec.getfloat("learning_rate")
            if "validate_every" in sec:
                cfg.validate_every = sec.getint("validate_every")
            if "optimizer" in sec:
                cfg.optimizer = sec.get("optimizer")
            if "control_hidden" in sec:
                cfg.control_hidden = _parse_hidden(sec.get("control_hidden"))
            if "embed_hidden" in sec:
                cfg.embed_hidden = _parse_hidden(sec.get("embed_hidden"))
            for key in ("val_populations", "val_particles", "val_seed"):
                if key in sec:
                    setattr(cfg, key, sec.getint(key))
        if parser.has_section("problem"):
            for key, val in parser["problem"].items():
                cfg.problem_overrides[key] = _parse_problem_value(val)
        if parser.has_section("dump"):
            sec = parser["dump"]
            if "trajectories" in sec:
                cfg.dump_trajectories = _parse_bool(sec.get("trajectories"))
            if "control_slice" in sec:
                cfg.dump_control_slice = _parse_bool(sec.get("control_slice"))
            if "theory" in sec:
                items = [p.strip() for p in sec.get("theory").split(",") if p.strip()]
                cfg.theory = tuple(p for p in items if p != "none")
    except ValueError as exc:
        raise ConfigError(f"bad value in {path}: {exc}")
    return cfg


def _parse_problem_value(text: str):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    vals = []
    for p in parts:
        try:
            vals.append(float(p))
        except ValueError:
            raise ConfigError(f"bad problem parameter value {text!r}")
    return vals[0] if len(vals) == 1 else tuple(vals)


def resolve(cfg: ExperimentConfig):
    """Materialize the problem, embedding, and train config from a validated
    experiment config."""
    cfg.validate()
    try:
        problem = presets.build_problem(cfg.problem, **cfg.problem_overrides)
    except TypeError as exc:
        raise ConfigError(f"bad problem override: {exc}")
    except Exception as exc:
        raise ConfigError(str(exc))
    try:
        embed_cfg = presets.build_embedding(cfg.problem, cfg.embedding,
                                            nbin=cfg.nbin, nmom=cfg.nmom,
                                            center=cfg.domain_center,
                                            side=cfg.domain_side)
    except emb.EmbeddingError as exc:
        raise ConfigError(str(exc))
    maker = tr.desk_config if cfg.scale == "desk" else tr.full_config
    overrides = {"seed": cfg.seed}
    for key in ("particles", "iterations", "learning_rate", "validate_every",
                "optimizer", "control_hidden", "embed_hidden"):
        val = getattr(cfg, key)
        if val is not None:
            overrides[key] = val
    base_val = maker(problem).validation
    if cfg.particles is not None or cfg.val_populations is not None \
            or cfg.val_particles is not None or cfg.val_seed is not None:
        # validation populations track the training size unless pinned
        particles = cfg.val_particles if cfg.val_particles is not None \
            else (cfg.particles if cfg.particles is not None else base_val.particles)
        overrides["validation"] = tr.ValidationSpec(
            populations=cfg.val_populations if cfg.val_populations is not None
            else base_val.populations,
            particles=particles,
            seed=cfg.val_seed if cfg.val_seed is not None else base_val.seed)
    try:
        train_cfg = maker(problem, **overrides)
    except tr.TrainingError as exc:
        raise ConfigError(str(exc))
    return problem, embed_cfg, train_cfg


def write_resolved(path, cfg: ExperimentConfig, problem: Problem,
                   embed_cfg, train_cfg: tr.TrainConfig) -> None:
    """Write the complete effective configuration; rerunning from this file
    reproduces every numeric artifact bitwise on the same build."""
    out = configparser.ConfigParser()
    out.optionxform = str
    out["experiment"] = {
        "problem": cfg.problem,
        "embedding": cfg.embedding,
        "scale": cfg.scale,
        "seed": str(cfg.seed),
        "out": cfg.out,
    }
    out["problem"] = {k: _fmt(v) for k, v in sorted(problem.params.items())}
    if embed_cfg is not None:
        out["embedding"] = {
            "nbin": str(embed_cfg.nbin), "nmom": str(embed_cfg.nmom),
            "clip_bound": _fmt(embed_cfg.clip_bound),
            "center": _fmt(embed_cfg.center[0]), "side": _fmt(embed_cfg.side),
            "overflow_bin": str(embed_cfg.overflow_bin).lower(),
            "normalize_counts": str(embed_cfg.normalize_counts).lower(),
        }
    out["train"] = {
        "iterations": str(train_cfg.iterations),
        "particles": str(train_cfg.particles),
        "learning_rate": _fmt(float(train_cfg.learning_rate)),
        "optimizer": train_cfg.optimizer,
        "validate_every": str(train_cfg.validate_every),
        "control_hidden": ",".join(str(w) for w in train_cfg.control_hidden),
        "embed_hidden": ",".join(str(w) for w in train_cfg.embed_hidden),
        "val_populations": str(train_cfg.validation.populations),
        "val_particles": str(train_cfg.validation.particles),
        "val_seed": str(train_cfg.validation.seed),
    }
    out["dump"] = {
        "trajectories": str(cfg.dump_trajectories).lower(),
        "control_slice": str(cfg.dump_control_slice).lower(),
        "theory": ",".join(cfg.theory) if cfg.theory else "none",
    }
    with open(path, "w") as fh:
        out.write(fh)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# artifacts


def control_slice_rows(problem: Problem, policy: NetworkPolicy,
                       times, grid_halfwidth: float = 0.5, grid_points: int = 21,
                       population_seed: int = 424242):
    """Evaluate the learned control on a state grid against one fixed
    representative population per requested time (simulated under the policy
    itself on a pinned seed), next to the explicit solution when the problem
    has one. The first state dimension sweeps the grid around the population
    mean; remaining dimensions sit at the mean."""
    analytic = None
    if problem.name == "systemic_risk":
        analytic = systemic_risk_analytic(problem)
    plan = sim.make_noise_plan(200, problem.d, problem.n_steps, problem.dt,
                               seed=(population_seed, 2, 0))
    rec = sim.rollout(problem, policy, plan, keep_trajectory=True)
    rows = []
    for t_req in times:
        s = int(round(t_req / problem.dt))
        if not 0 <= s <= problem.n_steps:
            raise ConfigError(f"slice time {t_req} outside the horizon")
        batch = rec.states[s]
        mean = batch.mean(axis=0)
        grid = np.linspace(mean[0] - grid_halfwidth, mean[0] + grid_halfwidth,
                           grid_points)
        tape = ad.Tape(grad=False)
        policy.bind(tape)
        states = np.tile(mean, (grid_points, 1))
        states[:, 0] = grid
        cols = [tape.tensor(np.full((grid_points, 1), t_req)), tape.tensor(states)]
        if policy.params.embed_net is not None:
            m_row = emb.embed(policy.params.embed_cfg, policy._embed,
                              tape.tensor(batch))
            cols.append(ad.broadcast_row(m_row, grid_points))
        inputs = ad.concat_cols(cols)
        acts = np.column_stack([nets.mlp_forward(reg, inputs).value[:, 0]
                                for reg in policy._control])
        for i in range(grid_points):
            row = {"time": t_req}
            for j in range(problem.d):
                row[f"x{j + 1}"] = states[i, j]
            for j in range(problem.k):
                row[f"action{j + 1}"] = acts[i, j]
            if analytic is not None:
                row["analytic1"] = analytic.gain_at(t_req) * (mean[0] - grid[i])
            rows.append(row)
    return rows


def write_control_slice_csv(path, rows) -> None:
    if not rows:
        raise ConfigError("no control slice rows")
    header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                         else v for v in (row[h] for h in header)])


def write_manifest(out_dir: Path) -> None:
    lines = []
    for p in sorted(out_dir.iterdir()):
        if p.name in ("manifest.txt", ".lock") or p.is_dir():
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"{digest}  {p.name}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


class DirectoryLock:
    """One experiment process per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run "
                              f"(remove {self.path} if stale)")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def run_theory_experiments(problem: Problem, which, out_dir: Path, seed: int) -> None:
    if "rate" in which:
        fit = metrics.particle_rate_experiment(metrics.gaussian_sampler, d=1,
                                               n_list=(64, 256, 1024),
                                               trials=100, seed=seed)
        fit.write_csv(out_dir / "theory_rate.csv")
    if "perturbation" in which:
        gains = systemic_risk_analytic(problem) if problem.name == "systemic_risk" \
            else None
        if gains is None:
            raise ConfigError("the perturbation experiment runs on systemic_risk")
        pol = LinearDeviationPolicy(gains.gain_at)
        rows = metrics.perturbation_gap_experiment(
            problem, pol, deltas=(0.0, 0.01, 0.02, 0.04, 0.08), trials=50,
            seed=seed)
        metrics.write_perturbation_csv(out_dir / "theory_perturbation.csv", rows)
    if "moments" in which:
        checks = [metrics.moment_lipschitz_check(m, k, trials=1000, seed=seed)
                  for k, m in ((1, 2.0), (2, 2.0), (3, 1.0))]
        metrics.write_moment_csv(out_dir / "theory_moments.csv", checks)


def run(cfg: ExperimentConfig) -> Path:
    problem, embed_cfg, train_cfg = resolve(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with DirectoryLock(out_dir):
        write_resolved(out_dir / "config.resolved", cfg, problem, embed_cfg, train_cfg)
        train_cfg = _with_checkpoints(train_cfg, out_dir)
        params, log = tr.train(problem, embed_cfg, train_cfg)
        log.write_csv(out_dir / "train_log.csv")
        if cfg.dump_control_slice:
            policy = NetworkPolicy(params)
            rows = control_slice_rows(problem, policy, times=(0.25, 0.5, 0.75))
            write_control_slice_csv(out_dir / "control_slice.csv", rows)
        if cfg.dump_trajectories:
            policy = NetworkPolicy(params)
            plan = sim.make_noise_plan(train_cfg.particles, problem.d,
                                       problem.n_steps, problem.dt,
                                       seed=(cfg.seed, 5, 0))
            rec = sim.rollout(problem, policy, plan, keep_trajectory=True)
            sim.write_trajectories_csv(out_dir / "trajectories.csv", rec,
                                       problem.d, problem.k)
        if cfg.theory:
            run_theory_experiments(problem, cfg.theory, out_dir, cfg.seed)
        write_manifest(out_dir)
    return out_dir


def _with_checkpoints(train_cfg: tr.TrainConfig, out_dir: Path) -> tr.TrainConfig:
    kw = {f.name: getattr(train_cfg, f.name) for f in fields(train_cfg)}
    kw["checkpoint_dir"] = str(out_dir)
    return tr.TrainConfig(**kw)


# ---------------------------------------------------------------------------
# command line


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mfcontrol",
        description="Train population-dependent feedback controls on "
                    "interacting-particle benchmarks and dump the artifacts.")
    ap.add_argument("--config", help="INI experiment file (flags override it)")
    ap.add_argument("--problem", choices=sorted(presets.PROBLEMS))
    ap.add_argument("--embedding", help=f"one of {presets.embedding_names()}")
    ap.add_argument("--scale", choices=("desk", "full"))
    ap.add_argument("--nbin", type=int)
    ap.add_argument("--nmom", type=int)
    ap.add_argument("--particles", type=int)
    ap.add_argument("--iters", type=int, dest="iterations")
    ap.add_argument("--lr", type=float, dest="learning_rate")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help=f"output directory (default under "
                                  f"${OUTPUT_ROOT_ENV} or ./runs)")
    ap.add_argument("--dump-trajectories", action="store_true", default=None)
    ap.add_argument("--no-control-slice", action="store_true", default=None)
    ap.add_argument("--theory", help="comma list: rate,perturbation,moments")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for name in ("problem", "embedding", "scale", "seed", "nbin", "nmom",
                 "particles", "iterations", "learning_rate"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if args.out:
        cfg.out = args.out
    if not cfg.out:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg.out = str(Path(root) / f"{cfg.problem}_{cfg.embedding}_s{cfg.seed}")
    if args.dump_trajectories:
        cfg.dump_trajectories = True
    if args.no_control_slice:
        cfg.dump_control_slice = False
    if args.theory is not None:
        items = [p.strip() for p in args.theory.split(",") if p.strip()]
        cfg.theory = tuple(p for p in items if p != "none")
    return cfg


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out_dir = run(cfg)
    except (ConfigError, presets.PresetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (tr.TrainingError, nets.NetworkError, sim.SimulationError,
            ad.NonFiniteError) as exc:
        print(f"aborted: {exc} (last checkpoint kept)", file=sys.stderr)
        return 3
    print(f"artifacts in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
