"""Run every (algorithm x seed) cell of an experiment and persist its metrics."""

from __future__ import annotations

import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..optimizer import TrainingDiverged, train
from . import metrics as M
from .config import ExperimentConfig
from .report import generate_report

log = logging.getLogger(__name__)

EXPERIMENT_FILE = "experiment.json"


def _cell_paths(out: Path, algorithm: str, seed: int) -> dict:
    base = out / M.CELLS_DIR / M.cell_id(algorithm, seed)
    return {
        "jsonl": base.with_suffix(".jsonl"),
        "done": base.with_suffix(".done"),
        "failed": base.with_suffix(".failed"),
        "timing": base.with_suffix(".timing.json"),
        "checkpoints": out / "checkpoints" / M.cell_id(algorithm, seed),
    }


def run_cell(config: ExperimentConfig, algo_index: int, seed: int, out: Path, threshold: float) -> str:
    """Train one cell; returns ``"done"``, ``"skipped"`` or ``"failed"``."""
    entry = config.algorithms[algo_index]
    paths = _cell_paths(out, entry.name, seed)
    if paths["done"].exists():
        return "skipped"
    paths["failed"].unlink(missing_ok=True)
    opt = entry.optimizer_config(config.defaults, seed)
    opt.checkpoint_interval = config.checkpoint_interval
    env = config.make_env()
    ckpt_dir = None
    if config.checkpoint_interval:
        paths["checkpoints"].mkdir(parents=True, exist_ok=True)
        ckpt_dir = str(paths["checkpoints"])
    check_raw = not (opt.nstep_exhaustive and opt.n_step > 1)
    streak = [0]

    with open(paths["jsonl"], "w") as fh:

        def on_batch(row):
            if check_raw and row["raw_steps"] != opt.group_size * row["macro_steps"]:
                raise AssertionError(
                    f"raw-step accounting broken at batch {row['batch']}: "
                    f"{row['raw_steps']} != {opt.group_size} x {row['macro_steps']}")
            M.append_jsonl(fh, M.make_record(config.name, env.name, entry.name, seed, row))
            ret = row["mean_return"]
            streak[0] = streak[0] + 1 if ret is not None and ret >= threshold else 0
            return bool(config.patience) and streak[0] >= config.patience

        try:
            result = train(opt, env, on_batch=on_batch, checkpoint_dir=ckpt_dir)
        except TrainingDiverged as exc:
            paths["failed"].write_text(json.dumps({"error": str(exc), "state": exc.state}, indent=2))
            log.error("cell %s seed %d diverged: %s", entry.name, seed, exc)
            return "failed"
        except Exception as exc:  # keep the other cells running
            paths["failed"].write_text(json.dumps({"error": repr(exc), "traceback": traceback.format_exc()}))
            log.error("cell %s seed %d failed: %r", entry.name, seed, exc)
            return "failed"

    paths["timing"].write_text(json.dumps({"wall_clock_s": result.wall_clock}))
    paths["done"].write_text("ok\n")
    return "done"


def _run_cell_star(args):
    return run_cell(*args)


def run_experiment(config: ExperimentConfig, out, parallel: int = 1) -> int:
    """Run all cells, then write the merged CSV and the report.

    Returns 0 when every cell finished (now or on an earlier run), 1 otherwise.
    """
    out = Path(out)
    (out / M.CELLS_DIR).mkdir(parents=True, exist_ok=True)
    threshold = config.resolved_threshold()
    meta = {**config.to_dict(), "output_dir": str(out), "resolved_threshold": threshold}
    (out / EXPERIMENT_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    jobs = [(config, i, seed, out, threshold)
            for i in range(len(config.algorithms)) for seed in config.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            statuses = list(pool.map(_run_cell_star, jobs))
    else:
        statuses = [run_cell(*job) for job in jobs]
    for (_, i, seed, _, _), status in zip(jobs, statuses):
        log.info("%s seed %d: %s", config.algorithms[i].name, seed, status)

    records, _ = M.merge_cells(out)
    M.write_csv(out / M.CSV_NAME, records)
    generate_report(out)
    return 1 if "failed" in statuses else 0
