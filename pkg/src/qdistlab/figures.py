"""Report generation: per-figure CSV analogs plus rendered PNGs.

`report(result_dir)` inspects the directory's manifest and emits one
CSV per figure analog next to a PNG rendering of the same data. Re-runs
are idempotent: CSV bytes depend only on the input files.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import read_csv_rows  # noqa: E402

__all__ = ["report", "ReportError", "CLIP_NOTE"]

CLIP_NOTE = "# normalized returns clipped to [-0.1, 1.1]"


class ReportError(RuntimeError):
    pass


def report(result_dir) -> list:
    """Emit figure-analog CSVs and PNGs into result_dir; returns paths."""
    result_dir = Path(result_dir)
    manifest_path = result_dir / "manifest.json"
    if not manifest_path.exists():
        raise ReportError(f"no manifest.json in {result_dir}: nothing to report")
    manifest = json.loads(manifest_path.read_text())
    kind = manifest.get("kind")
    if kind == "offline_study":
        return _report_offline(result_dir)
    if kind == "fourstate_sweep":
        return _report_fourstate_sweep(result_dir)
    if kind == "fourstate_online":
        return _report_fourstate_online(result_dir, manifest)
    if kind == "dirichlet_study":
        return _report_dirichlet(result_dir)
    raise ReportError(f"unknown result kind: {kind!r}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def _emit(path: Path, columns: list, rows: list, note: str = CLIP_NOTE) -> Path:
    lines = [note, ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return path


def _save_png(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


_ALGO_COLOR = {"dqn": "tab:blue", "cql": "tab:orange"}
_ENV_MARKER = {"grid1": "o", "grid2": "s", "multipath": "^", "pendulum": "v",
               "mountaincar": "D", "cartpole": "P"}


def _report_offline(out: Path) -> list:
    agg_path = out / "aggregate.csv"
    if not agg_path.exists():
        raise ReportError(f"no aggregate.csv in {out}")
    agg = read_csv_rows(agg_path)
    if not agg:
        raise ReportError(f"aggregate.csv in {out} is empty")
    produced = []

    # entropy analog: every grid point
    rows5 = [{"env": r["env"], "algorithm": r["algo"],
              "normalized_entropy": r["entropy"],
              "mean_norm_reward": r["mean_norm_return"],
              "std": r["std_norm_return"]} for r in agg]
    rows5.sort(key=lambda r: (r["env"], r["algorithm"],
                              r["normalized_entropy"] or 0.0))
    produced.append(_emit(out / "fig_entropy.csv",
                          ["env", "algorithm", "normalized_entropy",
                           "mean_norm_reward", "std"], rows5))
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for r in rows5:
        if r["mean_norm_reward"] is None:
            continue
        ax.errorbar(r["normalized_entropy"], r["mean_norm_reward"],
                    yerr=r["std"] or 0.0,
                    marker=_ENV_MARKER.get(r["env"], "o"),
                    color=_ALGO_COLOR.get(r["algorithm"], "gray"),
                    linestyle="none", markersize=5, capsize=2, alpha=0.8)
    ax.set_xlabel("normalized entropy of dataset distribution")
    ax.set_ylabel("mean normalized reward")
    _legend_algos(ax)
    produced.append(_save_png(fig, out / "fig_entropy.png"))

    # coverage analog: eps-greedy grid, enforced vs not
    rows6 = [{"env": r["env"], "algorithm": r["algo"], "eps": r["param"],
              "enforced": int(r["coverage"]),
              "mean_norm_reward": r["mean_norm_return"],
              "std": r["std_norm_return"]}
             for r in agg if r["policy_kind"] == "eps_greedy"]
    rows6.sort(key=lambda r: (r["env"], r["algorithm"], r["eps"] or 0.0,
                              r["enforced"]))
    produced.append(_emit(out / "fig_coverage.csv",
                          ["env", "algorithm", "eps", "enforced",
                           "mean_norm_reward", "std"], rows6))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for enforced, ax in zip((0, 1), axes):
        for (env, algo) in sorted({(r["env"], r["algorithm"]) for r in rows6}):
            pts = [r for r in rows6 if r["env"] == env
                   and r["algorithm"] == algo and r["enforced"] == enforced
                   and r["mean_norm_reward"] is not None]
            if not pts:
                continue
            ax.errorbar([r["eps"] for r in pts],
                        [r["mean_norm_reward"] for r in pts],
                        yerr=[r["std"] or 0.0 for r in pts],
                        marker=_ENV_MARKER.get(env, "o"),
                        color=_ALGO_COLOR.get(algo, "gray"),
                        label=f"{env}/{algo}", capsize=2, markersize=4)
        ax.set_title("coverage enforced" if enforced else "as collected")
        ax.set_xlabel("eps of behavior policy")
    axes[0].set_ylabel("mean normalized reward")
    axes[1].legend(fontsize=7)
    produced.append(_save_png(fig, out / "fig_coverage.png"))

    # distance analog: every grid point, keyed by d_pi_star
    rows7 = [{"env": r["env"], "algorithm": r["algo"],
              "d_pi_star": r["d_pi_star"], "enforced": int(r["coverage"]),
              "mean_norm_reward": r["mean_norm_return"],
              "std": r["std_norm_return"]} for r in agg]
    rows7.sort(key=lambda r: (r["env"], r["algorithm"], r["d_pi_star"] or 0.0,
                              r["enforced"]))
    produced.append(_emit(out / "fig_distance.csv",
                          ["env", "algorithm", "d_pi_star", "enforced",
                           "mean_norm_reward", "std"], rows7))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for enforced, ax in zip((0, 1), axes):
        for r in rows7:
            if r["enforced"] != enforced or r["mean_norm_reward"] is None:
                continue
            ax.errorbar(r["d_pi_star"], r["mean_norm_reward"],
                        yerr=r["std"] or 0.0,
                        marker=_ENV_MARKER.get(r["env"], "o"),
                        color=_ALGO_COLOR.get(r["algorithm"], "gray"),
                        linestyle="none", markersize=5, capsize=2, alpha=0.8)
        ax.set_title("coverage enforced" if enforced else "as collected")
        ax.set_xlabel("distance to closest optimal occupancy")
    axes[0].set_ylabel("mean normalized reward")
    _legend_algos(axes[1])
    produced.append(_save_png(fig, out / "fig_distance.png"))
    return produced


def _legend_algos(ax) -> None:
    handles = [plt.Line2D([0], [0], marker="o", linestyle="none",
                          color=c, label=a) for a, c in _ALGO_COLOR.items()]
    ax.legend(handles=handles, fontsize=8)


def _report_fourstate_sweep(out: Path) -> list:
    src = out / "sweep.csv"
    if not src.exists():
        raise ReportError(f"no sweep.csv in {out}")
    rows = read_csv_rows(src)
    if not rows:
        raise ReportError("sweep.csv is empty")
    produced = []
    frows = [{"alpha": r["alpha"], "q": r["q_ratio"], "mode": r["mode"],
              "correct_actions": r["correct_actions"]} for r in rows]
    frows.sort(key=lambda r: (r["mode"], r["alpha"], r["q"]))
    produced.append(_emit(out / "fig_fourstate_sweep.csv",
                          ["alpha", "q", "mode", "correct_actions"], frows,
                          note="# correct actions of the fixed-point greedy"
                               " policy"))
    modes = sorted({r["mode"] for r in frows})
    fig, axes = plt.subplots(1, len(modes), figsize=(4.5 * len(modes), 3.5),
                             squeeze=False)
    for mode, ax in zip(modes, axes[0]):
        alphas = sorted({r["alpha"] for r in frows if r["mode"] == mode})
        for a in alphas:
            pts = [r for r in frows if r["mode"] == mode and r["alpha"] == a]
            ax.step([r["q"] for r in pts],
                    [r["correct_actions"] for r in pts],
                    where="mid", label=f"alpha={a}")
        ax.set_title(mode)
        ax.set_xlabel("share of the shared-weight pair at state 1")
        ax.set_ylabel("correct actions")
        ax.set_yticks([0, 1, 2])
        ax.legend(fontsize=7)
    produced.append(_save_png(fig, out / "fig_fourstate_sweep.png"))
    return produced


def _report_fourstate_online(out: Path, manifest: dict) -> list:
    names = manifest.get("series", [])
    series = {}
    for name in names:
        path = out / f"{name}.csv"
        if path.exists():
            series[name] = read_csv_rows(path)
    if not series:
        raise ReportError(f"no online series files in {out}")
    produced = []
    long_rows = []
    for name in sorted(series):
        for r in series[name]:
            long_rows.append({"series": name, "episode": r["episode"],
                              "correct_actions": r["correct_actions"],
                              "greedy_return": r["greedy_return"],
                              "q_abs_err": r["q_abs_err"],
                              "buffer_ratio": _ratio(r)})
    produced.append(_emit(out / "fig_fourstate_online.csv",
                          ["series", "episode", "correct_actions",
                           "greedy_return", "q_abs_err", "buffer_ratio"],
                          long_rows, note="# per-episode online diagnostics"))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for name in sorted(series):
        rows = series[name]
        eps = [r["episode"] for r in rows]
        axes[0].plot(eps, [r["correct_actions"] for r in rows], label=name,
                     alpha=0.85)
        axes[1].plot(eps, [r["greedy_return"] for r in rows], alpha=0.85)
        axes[2].plot(eps, [r["q_abs_err"] for r in rows], alpha=0.85)
    axes[0].set_ylabel("correct actions")
    axes[1].set_ylabel("greedy return")
    axes[2].set_ylabel("mean |Q - Q*|")
    for ax in axes:
        ax.set_xlabel("episode")
    axes[0].legend(fontsize=7)
    produced.append(_save_png(fig, out / "fig_fourstate_online.png"))
    return produced


def _ratio(row) -> float | None:
    denom = (row["mu_s1a0"] or 0.0) + (row["mu_s2a0"] or 0.0)
    if denom == 0.0:
        return None
    return (row["mu_s1a0"] or 0.0) / denom


def _report_dirichlet(out: Path) -> list:
    src = out / "dirichlet_table.csv"
    if not src.exists():
        raise ReportError(f"no dirichlet_table.csv in {out}")
    rows = read_csv_rows(src)
    if not rows:
        raise ReportError("dirichlet_table.csv is empty")
    cov_cols = [c for c in rows[0] if c.startswith("coverage_")]
    produced = [_emit(out / "fig_dirichlet.csv",
                      ["alpha", "mean_entropy", "mean_chi2_to_peers",
                       *cov_cols],
                      sorted(rows, key=lambda r: r["alpha"]),
                      note="# sampling-distribution study over Dirichlet"
                           " draws")]
    rows = sorted(rows, key=lambda r: r["mean_entropy"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    ent = [r["mean_entropy"] for r in rows]
    for c in cov_cols:
        axes[0].plot(ent, [r[c] for r in rows], marker="o",
                     label=c.replace("coverage_", "n="))
    axes[0].set_xlabel("mean entropy")
    axes[0].set_ylabel("mean coverage")
    axes[0].legend(fontsize=7)
    axes[1].plot(ent, [r["mean_chi2_to_peers"] for r in rows], marker="o",
                 color="tab:red")
    axes[1].set_xlabel("mean entropy")
    axes[1].set_ylabel("mean chi-square to peer distributions")
    axes[1].set_yscale("log")
    produced.append(_save_png(fig, out / "fig_dirichlet.png"))
    return produced
