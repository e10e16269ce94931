"""Run orchestration, persistence and cross-run comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from olora.bench import ContinualLearner, forgetting_report, make_suite
from olora.checkpoint import save_checkpoint
from olora.config import ADAPTIVE_METHODS, RunConfig

log = logging.getLogger(__name__)

TIMING_KEY = "timing"


class ComparisonError(ValueError):
    pass


def suite_fingerprint(cfg: RunConfig) -> str:
    """Identifies the task suite independent of method and seed."""
    blob = json.dumps({"tasks": asdict(cfg.tasks), "model_dim": cfg.model.model_dim,
                       "output_dim": cfg.model.output_dim}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summarize(cfg: RunConfig, learner: ContinualLearner) -> dict:
    results = learner.results
    report = forgetting_report(results)
    config_echo = cfg.to_dict()
    config_echo.pop("out")
    summary = {
        "method": learner.method,
        "seed": learner.seed,
        "n_tasks": len(learner.tasks),
        "task_suite": suite_fingerprint(cfg),
        "eval_matrix": [r.eval_losses for r in results],
        "new_task_losses": [r.eval_losses[r.stage] for r in results] if learner.method != "multi" else [],
        "forgetting": {
            "per_task": {str(k): v for k, v in report.forgetting.items()},
            "average": report.average_forgetting,
            "final_average_loss": report.final_average_loss,
        },
        "params": {
            "trainable": results[0].trainable_count,
            "fraction": results[0].trainable_fraction,
            "per_stage": [{"trainable": r.trainable_count, "fraction": r.trainable_fraction} for r in results],
        },
        "orthogonality": {"overlap_per_stage": [r.orth_overlap for r in results]},
        "orthonormality": [{"init": r.orthonormality_init, "final": r.orthonormality_final} for r in results],
        "frozen_checksums": [{"before": r.frozen_checksum_before, "after": r.frozen_checksum_after}
                             for r in results],
        "config": config_echo,
        TIMING_KEY: {
            "wall_clock_per_stage": [r.wall_clock for r in results],
            "finished_at": datetime.now(timezone.utc).isoformat(),
        },
    }
    if learner.method in ADAPTIVE_METHODS:
        last = results[-1].active_ranks
        summary["ranks"] = {
            "n_weights": len(last),
            "initial_total": len(last) * cfg.rank_init,
            "final_total": sum(last.values()),
            "final_per_weight": last,
        }
    return summary


def dump_summary(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def strip_timing(text: str) -> str:
    """The summary text without wall-clock fields, for replay comparisons."""
    data = json.loads(text)
    data.pop(TIMING_KEY, None)
    return dump_summary(data)


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    columns: list[str] = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_one(cfg: RunConfig, method: str, seed: int, tasks=None) -> tuple[ContinualLearner, dict]:
    learner = ContinualLearner(cfg, method, seed, tasks=tasks)
    learner.run()
    return learner, summarize(cfg, learner)


def run_experiment(cfg: RunConfig, out: Path | None = None) -> list[dict]:
    """Every (method, seed) run of ``cfg``; artifacts go under ``out`` when given.

    ``status.json`` records progress and ends as ``complete``, ``interrupted``
    or ``failed``.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    status = {"state": "running", "completed": [], "pending": [f"{m}/seed{s}" for m in cfg.methods
                                                            for s in cfg.seeds]}
    status_path = out / "status.json"

    def flush(state: str, **extra) -> None:
        status["state"] = state
        status.update(extra)
        status_path.write_text(json.dumps(status, indent=2) + "\n")

    flush("running")
    summaries = []
    try:
        for seed in cfg.seeds:
            tasks = make_suite(cfg, seed)
            for method in cfg.methods:
                t0 = time.perf_counter()
                learner, summary = run_one(cfg, method, seed, tasks)
                run_dir = out / method / f"seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "summary.json").write_text(dump_summary(summary))
                write_metrics(run_dir / "metrics.csv", learner.metrics)
                save_checkpoint(learner.model, run_dir / "checkpoint.npz")
                summaries.append(summary)
                tag = f"{method}/seed{seed}"
                status["pending"].remove(tag)
                status["completed"].append(tag)
                flush("running")
                log.info("%s done in %.1fs", tag, time.perf_counter() - t0)
    except KeyboardInterrupt:
        flush("interrupted")
        raise
    except Exception as exc:
        flush("failed", error=f"{type(exc).__name__}: {exc}")
        raise
    flush("complete")
    return summaries


# --------------------------------------------------------------------------- comparison


@dataclass
class MethodRow:
    method: str
    n_runs: int
    final_average_loss: float
    average_forgetting: float
    new_task_loss: float
    trainable_fraction: float


def load_summaries(paths: Iterable) -> list[dict]:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("summary.json")) if p.is_dir() else [p]
        for f in files:
            out.append(json.loads(f.read_text()))
    return out


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else float("nan")


def method_table(summaries: Sequence[dict]) -> dict[str, MethodRow]:
    by_method: dict[str, list[dict]] = {}
    for s in summaries:
        by_method.setdefault(s["method"], []).append(s)
    rows = {}
    for method, group in by_method.items():
        rows[method] = MethodRow(
            method=method,
            n_runs=len(group),
            final_average_loss=_median(s["forgetting"]["final_average_loss"] for s in group),
            average_forgetting=_median(s["forgetting"]["average"] for s in group),
            new_task_loss=_median(s["eval_matrix"][-1][-1] for s in group),
            trainable_fraction=_median(s["params"]["fraction"] for s in group),
        )
    return rows


def ordering_checks(rows: dict[str, MethodRow]) -> dict[str, bool | None]:
    """Qualitative orderings; ``None`` when a needed method is absent."""
    f = {m: r.average_forgetting for m, r in rows.items()}
    frac = {m: r.trainable_fraction for m, r in rows.items()}

    def have(*ms):
        return all(m in rows for m in ms)

    return {
        "F(o_lora) < F(lwf) < F(seq_lora)":
            f["o_lora"] < f["lwf"] < f["seq_lora"] if have("o_lora", "lwf", "seq_lora") else None,
        "F(o_lora) < F(seq_ft)": f["o_lora"] < f["seq_ft"] if have("o_lora", "seq_ft") else None,
        "new-task loss o_lora <= 1.5 x mono":
            rows["o_lora"].new_task_loss <= 1.5 * rows["mono"].new_task_loss if have("o_lora", "mono") else None,
        "fraction o_adalora < o_lora < seq_ft":
            frac["o_adalora"] < frac["o_lora"] < frac["seq_ft"] if have("o_adalora", "o_lora", "seq_ft") else None,
    }


def compare(summaries: Sequence[dict]) -> dict:
    """Per-run rows with deltas against the first run, per-method medians and orderings."""
    if len(summaries) < 2:
        raise ComparisonError("need at least two summaries")
    suites = {(s["task_suite"], s["n_tasks"]) for s in summaries}
    if len(suites) > 1:
        raise ComparisonError(f"summaries cover different task suites: {sorted(suites)}")
    ref = summaries[0]

    def metrics(s):
        return {
            "final_average_loss": s["forgetting"]["final_average_loss"],
            "average_forgetting": s["forgetting"]["average"],
            "new_task_loss": s["eval_matrix"][-1][-1],
            "trainable_fraction": s["params"]["fraction"],
        }

    ref_m = metrics(ref)
    runs = []
    for s in summaries:
        m = metrics(s)
        runs.append({"method": s["method"], "seed": s["seed"], **m,
                     "delta": {k: m[k] - ref_m[k] for k in m}})
    rows = method_table(summaries)
    return {
        "runs": runs,
        "methods": {m: asdict(r) for m, r in rows.items()},
        "orderings": ordering_checks(rows),
    }


def format_comparison(result: dict) -> str:
    lines = [f"{'method':<10} {'runs':>4} {'final_loss':>10} {'avg_forget':>10} {'new_task':>9} {'trainable':>9}"]
    for r in result["methods"].values():
        lines.append(f"{r['method']:<10} {r['n_runs']:>4} {r['final_average_loss']:>10.4f} "
                     f"{r['average_forgetting']:>10.4f} {r['new_task_loss']:>9.4f} {r['trainable_fraction']:>9.4f}")
    lines.append("")
    lines.append(f"{'method':<10} {'seed':>4} {'d_final':>10} {'d_forget':>10} {'d_new':>9} {'d_frac':>9}")
    for r in result["runs"]:
        d = r["delta"]
        lines.append(f"{r['method']:<10} {r['seed']:>4} {d['final_average_loss']:>+10.4f} "
                     f"{d['average_forgetting']:>+10.4f} {d['new_task_loss']:>+9.4f} {d['trainable_fraction']:>+9.4f}")
    lines.append("")
    for name, ok in result["orderings"].items():
        mark = "n/a" if ok is None else ("PASS" if ok else "FAIL")
        lines.append(f"[{mark}] {name}")
    return "\n".join(lines)
