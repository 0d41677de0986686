"""Tests for the command-line interface.

Covers every subcommand, the exit-code contract (0 success, 1 usage or
config error, 2 divergence), the output-root environment variable, grid
map files, and the report path (figure-analog CSVs plus PNG renderings).

Most tests call main(argv) in-process for speed; one subprocess test
proves the module entry point works end to end.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from qdistlab.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from qdistlab.datasets import Dataset
from qdistlab.envs import make_env
from qdistlab.figures import CLIP_NOTE
from qdistlab.mdp import value_iteration

FAST_TRAIN = {"learning_steps": 30, "batch_size": 20,
              "target_update_period": 10, "n_eval_rollouts": 2}


def _read_lines(path: Path) -> list:
    return path.read_text().strip().split("\n")


class TestUsageErrors:
    """Everything malformed must exit 1, never raise, never exit 2."""

    def test_no_arguments(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_unknown_env(self):
        assert main(["solve", "gridworld99"]) == EXIT_USAGE

    def test_missing_required_option(self):
        assert main(["gen-dataset", "grid1", "--policy", "uniform"]) == EXIT_USAGE

    def test_bad_policy_choice(self):
        assert main(["gen-dataset", "grid1", "--policy", "softmaxish",
                     "--size", "10"]) == EXIT_USAGE

    def test_metrics_without_target(self):
        assert main(["metrics"]) == EXIT_USAGE

    def test_sweep_missing_config_file(self, tmp_path):
        assert main(["sweep", str(tmp_path / "nope.json")]) == EXIT_USAGE

    def test_sweep_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["sweep", str(p)]) == EXIT_USAGE

    def test_sweep_bad_config_values(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"kind": "offline_study", "n_runs": 0}))
        assert main(["sweep", str(p)]) == EXIT_USAGE

    def test_train_missing_dataset(self, tmp_path):
        assert main(["train", "dqn", "--dataset",
                     str(tmp_path / "nope.npz")]) == EXIT_USAGE

    def test_train_bad_penalty_choice(self, tmp_path):
        assert main(["train", "cql", "--dataset", "x.npz",
                     "--penalty", "bogus"]) == EXIT_USAGE

    def test_report_without_manifest(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_USAGE

    def test_report_unknown_kind(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"kind": "mystery"}))
        assert main(["report", str(tmp_path)]) == EXIT_USAGE

    def test_map_on_non_grid_env(self, tmp_path):
        layout = tmp_path / "m.txt"
        layout.write_text("SG\n")
        assert main(["solve", "multipath", "--map", str(layout)]) == EXIT_USAGE

    def test_help_exits_zero(self):
        assert main(["--help"]) == EXIT_OK
        assert main(["solve", "--help"]) == EXIT_OK


class TestSolve:
    def test_solve_grid1_writes_qref(self, tmp_path, capsys):
        stem = tmp_path / "g1"
        assert main(["solve", "grid1", "--out", str(stem)]) == EXIT_OK
        with np.load(stem.with_suffix(".npz")) as z:
            q = z["q"]
        handle = make_env("grid1")
        assert np.array_equal(q, value_iteration(handle.mdp).values)
        info = json.loads(stem.with_suffix(".json").read_text())
        assert info["env"] == "grid1"
        assert info["n_cells"] == handle.n_cells
        assert info["n_actions"] == handle.n_actions
        assert info["v_start"] == pytest.approx(q[0].max(), abs=1e-12) or \
            info["v_start"] > 0
        assert "wrote" in capsys.readouterr().out

    def test_output_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QDISTLAB_OUTPUT_ROOT", str(tmp_path))
        assert main(["solve", "fourstate", "--out", "sub/fs"]) == EXIT_OK
        assert (tmp_path / "sub" / "fs.npz").is_file()

    def test_solve_with_custom_map(self, tmp_path):
        """A hand-written layout replaces the built-in grid."""
        layout = tmp_path / "tiny.txt"
        layout.write_text("S..G\n")
        stem = tmp_path / "tiny"
        assert main(["solve", "grid1", "--map", str(layout),
                     "--out", str(stem)]) == EXIT_OK
        info = json.loads(stem.with_suffix(".json").read_text())
        assert info["n_cells"] == 4


@pytest.fixture(scope="module")
def multipath_dataset(tmp_path_factory):
    """A small uniform multipath dataset generated through the CLI."""
    stem = tmp_path_factory.mktemp("ds") / "mp"
    rc = main(["gen-dataset", "multipath", "--policy", "uniform",
               "--size", "400", "--seed", "5", "--out", str(stem)])
    assert rc == EXIT_OK
    return stem.with_suffix(".npz")


class TestGenDataset:
    def test_dataset_on_disk(self, multipath_dataset):
        ds = Dataset.load(multipath_dataset)
        assert ds.n == 400
        assert ds.spec.env == "multipath"
        assert ds.spec.policy_kind == "uniform"
        assert ds.spec.seed == 5
        sidecar = json.loads(multipath_dataset.with_suffix(".json").read_text())
        assert sidecar["hash"] == ds.spec.stable_hash()
        assert sidecar["n"] == 400

    def test_generation_deterministic(self, tmp_path, multipath_dataset):
        stem = tmp_path / "again"
        assert main(["gen-dataset", "multipath", "--policy", "uniform",
                     "--size", "400", "--seed", "5",
                     "--out", str(stem)]) == EXIT_OK
        a = Dataset.load(multipath_dataset)
        b = Dataset.load(stem.with_suffix(".npz"))
        for field in ("obs", "actions", "rewards", "next_obs", "cells"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field

    def test_coverage_flag(self, tmp_path):
        stem = tmp_path / "cov"
        assert main(["gen-dataset", "multipath", "--policy", "eps_greedy",
                     "--param", "0.0", "--size", "300", "--coverage",
                     "--out", str(stem)]) == EXIT_OK
        ds = Dataset.load(stem.with_suffix(".npz"))
        assert ds.spec.coverage_enforced
        handle = make_env("multipath")
        pairs = set(zip(ds.cells.tolist(), ds.actions.tolist()))
        assert len(pairs) == handle.n_cells * handle.n_actions

    def test_simulator_env_requires_qref(self):
        assert main(["gen-dataset", "pendulum", "--policy", "uniform",
                     "--size", "10"]) == EXIT_USAGE


class TestTrain:
    def test_train_dqn_writes_artifacts(self, tmp_path, multipath_dataset,
                                        capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(FAST_TRAIN))
        stem = tmp_path / "run1"
        rc = main(["train", "dqn", "--dataset", str(multipath_dataset),
                   "--config", str(cfg), "--out", str(stem), "--seed", "3"])
        assert rc == EXIT_OK
        assert stem.with_suffix(".json").is_file()
        assert stem.with_suffix(".csv").is_file()
        assert Path(str(stem) + ".ckpt").is_file()
        summary = json.loads(stem.with_suffix(".json").read_text())
        assert summary["algo"] == "dqn"
        assert "final normalized return" in capsys.readouterr().out

    def test_train_cql_max_q_penalty(self, tmp_path, multipath_dataset):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(FAST_TRAIN))
        stem = tmp_path / "run2"
        rc = main(["train", "cql", "--dataset", str(multipath_dataset),
                   "--config", str(cfg), "--penalty", "max_q",
                   "--out", str(stem)])
        assert rc == EXIT_OK
        assert json.loads(stem.with_suffix(".json").read_text())["algo"] == "cql"

    def test_divergence_exit_code(self, tmp_path, multipath_dataset):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(dict(FAST_TRAIN, divergence_threshold=1e-9)))
        stem = tmp_path / "run3"
        rc = main(["train", "dqn", "--dataset", str(multipath_dataset),
                   "--config", str(cfg), "--out", str(stem)])
        assert rc == EXIT_DIVERGED
        assert json.loads(stem.with_suffix(".json").read_text())["diverged"]


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    """A miniature experiment sweep driven through the CLI."""
    root = tmp_path_factory.mktemp("sweep")
    cfg = {"kind": "offline_study", "envs": ["multipath"],
           "policies": [{"kind": "eps_greedy", "param": 0.0},
                        {"kind": "eps_greedy", "param": 0.5}],
           "coverage": [False, True], "algos": ["dqn", "cql"],
           "n_runs": 1, "dataset_scale": 0.02, "n_eval_rollouts": 2,
           "seed_root": 1, "train_overrides": FAST_TRAIN,
           "out_dir": str(root / "study")}
    p = root / "exp.json"
    p.write_text(json.dumps(cfg))
    rc = main(["sweep", str(p)])
    assert rc == EXIT_OK
    return root / "study"


class TestSweep:
    def test_layout(self, sweep_dir, capsys):
        assert (sweep_dir / "manifest.json").is_file()
        assert (sweep_dir / "runs.csv").is_file()
        assert (sweep_dir / "aggregate.csv").is_file()
        man = json.loads((sweep_dir / "manifest.json").read_text())
        assert man["n_rows"] == 8  # 2 policies x 2 coverage x 2 algos x 1 run

    def test_out_override(self, tmp_path, sweep_dir):
        cfg = json.loads((sweep_dir / "config.json").read_text())
        p = tmp_path / "exp.json"
        p.write_text(json.dumps(cfg))
        rc = main(["sweep", str(p), "--out", str(tmp_path / "elsewhere")])
        assert rc == EXIT_OK
        assert (tmp_path / "elsewhere" / "runs.csv").is_file()

    def test_divergence_exit_code(self, tmp_path):
        cfg = {"kind": "offline_study", "envs": ["multipath"],
               "policies": [{"kind": "uniform", "param": 0.0}],
               "coverage": [False], "algos": ["dqn"], "n_runs": 1,
               "dataset_scale": 0.02, "n_eval_rollouts": 2,
               "train_overrides": dict(FAST_TRAIN, divergence_threshold=1e-9),
               "out_dir": str(tmp_path / "div")}
        p = tmp_path / "exp.json"
        p.write_text(json.dumps(cfg))
        assert main(["sweep", str(p)]) == EXIT_DIVERGED


@pytest.fixture(scope="module")
def fourstate_sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fs") / "sweep"
    rc = main(["fourstate", "sweep", "--mode", "both", "--alphas", "1.25",
               "--q-step", "0.25", "--out", str(out)])
    assert rc == EXIT_OK
    return out


@pytest.fixture(scope="module")
def fourstate_online_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fo") / "online"
    rc = main(["fourstate", "online", "--episodes", "60", "--stride", "10",
               "--out", str(out)])
    assert rc == EXIT_OK
    return out


class TestFourstateSweep:
    def test_csv_and_manifest(self, fourstate_sweep_dir):
        lines = _read_lines(fourstate_sweep_dir / "sweep.csv")
        assert lines[0].startswith("#")
        assert lines[1] == "alpha,q_ratio,mode,correct_actions,w1,w2,w3"
        # q grid {0.25, 0.5, 0.75} x modes {td, oracle}
        assert len(lines) == 2 + 6
        man = json.loads((fourstate_sweep_dir / "manifest.json").read_text())
        assert man["kind"] == "fourstate_sweep"
        assert man["mode"] == "both"

    def test_rerun_byte_identical(self, fourstate_sweep_dir, tmp_path):
        out2 = tmp_path / "again"
        assert main(["fourstate", "sweep", "--mode", "both", "--alphas",
                     "1.25", "--q-step", "0.25", "--out", str(out2)]) == EXIT_OK
        assert (out2 / "sweep.csv").read_bytes() == \
            (fourstate_sweep_dir / "sweep.csv").read_bytes()


class TestFourstateOnline:
    def test_standard_trio(self, fourstate_online_dir):
        man = json.loads((fourstate_online_dir / "manifest.json").read_text())
        assert man["kind"] == "fourstate_online"
        assert man["series"] == sorted(["online_uniform", "online_eps_1.0",
                                        "online_eps_0.05"])
        for name in man["series"]:
            lines = _read_lines(fourstate_online_dir / f"{name}.csv")
            assert lines[1].startswith("episode,w1,w2,w3,mu_s1a0")
            assert len(lines) >= 5  # 60 episodes, stride 10

    def test_capacity_study_naming(self, tmp_path):
        out = tmp_path / "caps"
        rc = main(["fourstate", "online", "--episodes", "40", "--stride",
                   "20", "--capacities", "20", "0", "--out", str(out)])
        assert rc == EXIT_OK
        assert (out / "online_cap_20.csv").is_file()
        assert (out / "online_cap_unlimited.csv").is_file()


class TestMetrics:
    def test_dataset_metrics_stdout_and_file(self, multipath_dataset,
                                             tmp_path, capsys):
        stem = tmp_path / "met"
        rc = main(["metrics", str(multipath_dataset), "--out", str(stem)])
        assert rc == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        saved = json.loads(stem.with_suffix(".json").read_text())
        assert printed == saved
        for key in ("entropy", "coverage", "d_pi_star", "size"):
            assert key in printed
        assert 0.0 <= printed["entropy"] <= 1.0
        assert printed["size"] == 400

    def test_dirichlet_study(self, tmp_path):
        out = tmp_path / "dstudy"
        rc = main(["metrics", "--dirichlet", "--pairs", "4", "--dists", "4",
                   "--sizes", "20", "50", "--peers", "3",
                   "--alphas", "0.5", "2.0", "--out", str(out)])
        assert rc == EXIT_OK
        lines = _read_lines(out / "dirichlet_table.csv")
        assert lines[1] == "alpha,mean_entropy,mean_chi2_to_peers," \
                           "coverage_20,coverage_50"
        assert len(lines) == 2 + 2  # one row per alpha
        man = json.loads((out / "manifest.json").read_text())
        assert man["kind"] == "dirichlet_study"


class TestReport:
    """`report <dir>` renders figure-analog CSVs plus PNGs for every
    result kind, and the CSV side is idempotent."""

    def _assert_png(self, path: Path):
        assert path.is_file()
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert path.stat().st_size > 1000

    def test_offline_study_report(self, sweep_dir, capsys):
        assert main(["report", str(sweep_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("wrote") == 6
        for name in ("fig_entropy", "fig_coverage", "fig_distance"):
            lines = _read_lines(sweep_dir / f"{name}.csv")
            assert lines[0] == CLIP_NOTE
            self._assert_png(sweep_dir / f"{name}.png")
        assert _read_lines(sweep_dir / "fig_entropy.csv")[1] == \
            "env,algorithm,normalized_entropy,mean_norm_reward,std"
        assert _read_lines(sweep_dir / "fig_coverage.csv")[1] == \
            "env,algorithm,eps,enforced,mean_norm_reward,std"
        assert _read_lines(sweep_dir / "fig_distance.csv")[1] == \
            "env,algorithm,d_pi_star,enforced,mean_norm_reward,std"

    def test_offline_report_idempotent(self, sweep_dir):
        before = {n: (sweep_dir / f"{n}.csv").read_bytes()
                  for n in ("fig_entropy", "fig_coverage", "fig_distance")}
        assert main(["report", str(sweep_dir)]) == EXIT_OK
        for n, blob in before.items():
            assert (sweep_dir / f"{n}.csv").read_bytes() == blob

    def test_entropy_rows_match_aggregate(self, sweep_dir):
        from qdistlab.experiments import read_csv_rows
        agg = read_csv_rows(sweep_dir / "aggregate.csv")
        fig = read_csv_rows(sweep_dir / "fig_entropy.csv")
        assert len(fig) == len(agg)
        agg_pairs = sorted((r["entropy"], r["mean_norm_return"]) for r in agg)
        fig_pairs = sorted((r["normalized_entropy"], r["mean_norm_reward"])
                           for r in fig)
        assert agg_pairs == pytest.approx(fig_pairs)

    def test_fourstate_sweep_report(self, fourstate_sweep_dir):
        assert main(["report", str(fourstate_sweep_dir)]) == EXIT_OK
        lines = _read_lines(fourstate_sweep_dir / "fig_fourstate_sweep.csv")
        assert lines[1] == "alpha,q,mode,correct_actions"
        assert len(lines) == 2 + 6
        self._assert_png(fourstate_sweep_dir / "fig_fourstate_sweep.png")

    def test_fourstate_online_report(self, fourstate_online_dir):
        assert main(["report", str(fourstate_online_dir)]) == EXIT_OK
        lines = _read_lines(fourstate_online_dir / "fig_fourstate_online.csv")
        assert lines[1] == ("series,episode,correct_actions,greedy_return,"
                            "q_abs_err,buffer_ratio")
        self._assert_png(fourstate_online_dir / "fig_fourstate_online.png")

    def test_dirichlet_report(self, tmp_path):
        out = tmp_path / "dstudy"
        assert main(["metrics", "--dirichlet", "--pairs", "4", "--dists", "4",
                     "--sizes", "20", "--peers", "3", "--alphas", "0.5", "2.0",
                     "--out", str(out)]) == EXIT_OK
        assert main(["report", str(out)]) == EXIT_OK
        lines = _read_lines(out / "fig_dirichlet.csv")
        assert lines[1] == "alpha,mean_entropy,mean_chi2_to_peers,coverage_20"
        self._assert_png(out / "fig_dirichlet.png")


class TestModuleEntryPoint:
    def test_python_dash_m(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "qdistlab.cli", "solve", "fourstate",
             "--out", str(tmp_path / "fs")],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == EXIT_OK, proc.stderr
        assert (tmp_path / "fs.npz").is_file()
        assert "wrote" in proc.stdout

    def test_python_dash_m_usage_error(self):
        proc = subprocess.run(
            [sys.executable, "-m", "qdistlab.cli", "solve", "nosuchenv"],
            capture_output=True, text=True, timeout=60)
        assert proc.returncode == EXIT_USAGE
