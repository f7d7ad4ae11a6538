"""Experiment runner: config parsing, artifact layout, rerun reproducibility,
preset widths, and exit codes."""

import configparser
import hashlib

import numpy as np
import pytest

from mfcontrol import cli, presets
from mfcontrol.embeddings import EmbeddingConfig, input_dim


def micro_args(tmp_path, **extra):
    args = ["--problem", "systemic_risk", "--embedding", "mom",
            "--iters", "3", "--particles", "8", "--seed", "5",
            "--out", str(tmp_path / "run")]
    for key, val in extra.items():
        args += [f"--{key.replace('_', '-')}", str(val)]
    return args


def read_csv_lines(path, mask_wall_ms=False):
    lines = path.read_text().splitlines()
    if mask_wall_ms and lines and lines[0].endswith(",wall_ms"):
        lines = [",".join(line.split(",")[:-1]) for line in lines]
    return lines


# --- presets -----------------------------------------------------------------


def test_preset_names():
    assert set(presets.PROBLEMS) == {"systemic_risk", "price_impact", "crowd_motion"}
    assert set(presets.EMBEDDINGS) == {"emp", "mom", "hist", "hist_cnn",
                                       "emp_sym", "nodist"}


def test_preset_histogram_widths_match_reference_table():
    # flat histogram: 5 (1-d), 256 and 16 (2-d); conv grids 32 and 16x16
    cases = [
        ("systemic_risk", "hist", 1, 1000, 5),
        ("price_impact", "hist", 2, 800, 256),
        ("crowd_motion", "hist", 2, 800, 16),
        ("systemic_risk", "hist_cnn", 1, 1000, (32,)),
        ("price_impact", "hist_cnn", 2, 800, (16, 16)),
        ("crowd_motion", "hist_cnn", 2, 800, (16, 16)),
    ]
    for problem, name, d, n, expected in cases:
        cfg = presets.build_embedding(problem, name)
        assert input_dim(cfg.for_dim(d), n, d) == expected, (problem, name)


def test_preset_nodist_is_none():
    assert presets.build_embedding("systemic_risk", "nodist") is None


def test_unknown_names_rejected():
    with pytest.raises(presets.PresetError, match="unknown problem"):
        presets.build_problem("bank_runs")
    with pytest.raises(presets.PresetError, match="unknown embedding"):
        presets.build_embedding("systemic_risk", "wavelets")


def test_cli_nbin_override_controls_width():
    cfg = presets.build_embedding("systemic_risk", "hist", nbin=7)
    assert input_dim(cfg.for_dim(1), 100, 1) == 7


# --- runner -------------------------------------------------------------------


def test_unknown_embedding_exits_2_and_lists_names(capsys):
    rc = cli.main(["--problem", "systemic_risk", "--embedding", "nope",
                   "--out", "/tmp/unused-mfc-test"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "nope" in err
    for name in presets.embedding_names():
        assert name in err


def test_micro_run_writes_all_artifacts(tmp_path):
    rc = cli.main(micro_args(tmp_path))
    assert rc == 0
    out = tmp_path / "run"
    for name in ("config.resolved", "train_log.csv", "policy.ckpt",
                 "control_slice.csv", "manifest.txt"):
        assert (out / name).exists(), name
    assert not (out / ".lock").exists()

    log_lines = read_csv_lines(out / "train_log.csv")
    assert log_lines[0] == "iter,train_cost,val_cost,grad_norm,wall_ms"
    assert len(log_lines) == 4

    manifest = (out / "manifest.txt").read_text().strip().splitlines()
    names = [line.split()[-1] for line in manifest]
    assert "train_log.csv" in names and "config.resolved" in names
    for line in manifest:
        digest, name = line.split()
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_control_slice_schema_with_analytic_column(tmp_path):
    cli.main(micro_args(tmp_path))
    lines = read_csv_lines(tmp_path / "run" / "control_slice.csv")
    assert lines[0] == "time,x1,action1,analytic1"
    assert len(lines) == 1 + 3 * 21  # |times| x |grid|


def test_control_slice_no_analytic_column_without_explicit_solution(tmp_path):
    rc = cli.main(["--problem", "price_impact", "--embedding", "mom",
                   "--iters", "2", "--particles", "8", "--seed", "1",
                   "--out", str(tmp_path / "pi")])
    assert rc == 0
    lines = read_csv_lines(tmp_path / "pi" / "control_slice.csv")
    assert lines[0] == "time,x1,x2,action1,action2"


def test_rerun_from_resolved_is_bitwise_identical_outside_wall_ms(tmp_path):
    cli.main(micro_args(tmp_path))
    first = tmp_path / "run"
    rc = cli.main(["--config", str(first / "config.resolved"),
                   "--out", str(tmp_path / "rerun")])
    assert rc == 0
    second = tmp_path / "rerun"
    assert read_csv_lines(first / "train_log.csv", mask_wall_ms=True) \
        == read_csv_lines(second / "train_log.csv", mask_wall_ms=True)
    assert (first / "control_slice.csv").read_bytes() \
        == (second / "control_slice.csv").read_bytes()
    assert (first / "policy.ckpt").read_bytes() == (second / "policy.ckpt").read_bytes()


def test_resolved_config_is_complete(tmp_path):
    cli.main(micro_args(tmp_path))
    parser = configparser.ConfigParser()
    parser.read(tmp_path / "run" / "config.resolved")
    assert parser["experiment"]["problem"] == "systemic_risk"
    assert parser["train"]["iterations"] == "3"
    assert parser["train"]["particles"] == "8"
    assert parser["problem"]["rho"] == "0.1"
    assert parser["embedding"]["nmom"] == "1"


def test_problem_override_via_config_file(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text("""
[experiment]
problem = systemic_risk
embedding = mom
seed = 2
out = {out}

[problem]
rho = 0.0

[train]
iterations = 2
particles = 8
""".format(out=tmp_path / "norho"))
    rc = cli.main(["--config", str(ini)])
    assert rc == 0
    parser = configparser.ConfigParser()
    parser.read(tmp_path / "norho" / "config.resolved")
    assert parser["problem"]["rho"] == "0.0"


def test_directory_lock_blocks_concurrent_runs(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    rc = cli.main(["--problem", "systemic_risk", "--embedding", "mom",
                   "--iters", "1", "--particles", "4", "--out", str(out)])
    assert rc == 2


def test_invalid_problem_parameter_exits_2(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text(f"""
[experiment]
problem = systemic_risk
embedding = mom
out = {tmp_path / 'bad_run'}

[problem]
q = 9.0
""")
    rc = cli.main(["--config", str(ini)])
    assert rc == 2


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_nonfinite_abort_exits_3_and_keeps_checkpoint(tmp_path, capsys):
    out = tmp_path / "blowup"
    # one Adam step of 1e200 saturates the nets and overflows the squared
    # action in the running cost
    rc = cli.main(["--problem", "systemic_risk", "--embedding", "mom",
                   "--iters", "40", "--particles", "8", "--lr", "1e200",
                   "--seed", "3", "--out", str(out)])
    assert rc == 3
    assert "checkpoint" in capsys.readouterr().err
    assert not (out / ".lock").exists()  # lock released on abort


def test_theory_dump_rate_csv(tmp_path):
    rc = cli.main(micro_args(tmp_path) + ["--theory", "moments"])
    assert rc == 0
    lines = read_csv_lines(tmp_path / "run" / "theory_moments.csv")
    assert lines[0] == "k,M,max_ratio,bound"
    assert len(lines) == 4
