"""Offline aggregation of persisted metrics into a comparison report."""

from __future__ import annotations

import json
import math
import statistics
from pathlib import Path

from . import metrics as M

INF = math.inf
SENTINEL = "∞"


def _first_hit(rows: list[dict], threshold: float) -> dict | None:
    for r in rows:
        if r["mean_return"] is not None and r["mean_return"] >= threshold:
            return r
    return None


def _median(values):
    return statistics.median(values) if values else INF


def summarize_cell(rows: list[dict], threshold: float) -> dict:
    hit = _first_hit(rows, threshold)
    adv_var = [r["adv_var"] for r in rows]
    returns = [r["mean_return"] for r in rows if r["mean_return"] is not None]
    return {
        "batches": len(rows),
        "batches_to_threshold": hit["batch"] if hit else INF,
        "macro_steps_to_threshold": hit["macro_steps"] if hit else INF,
        "raw_steps_to_threshold": hit["raw_steps"] if hit else INF,
        "final_return": returns[-1] if returns else None,
        "adv_var_median": statistics.median(adv_var) if adv_var else None,
        "adv_var_first": adv_var[0] if adv_var else None,
        "adv_var_last": adv_var[-1] if adv_var else None,
    }


def _summarize_algorithm(cells: dict) -> dict:
    seeds = sorted(cells)
    finals = [cells[s]["final_return"] for s in seeds if cells[s]["final_return"] is not None]
    medians = [cells[s]["adv_var_median"] for s in seeds if cells[s]["adv_var_median"] is not None]
    return {
        "seeds": {str(s): cells[s] for s in seeds},
        "batches_to_threshold": _median([cells[s]["batches_to_threshold"] for s in seeds]),
        "macro_steps_to_threshold": _median([cells[s]["macro_steps_to_threshold"] for s in seeds]),
        "raw_steps_to_threshold": _median([cells[s]["raw_steps_to_threshold"] for s in seeds]),
        "final_return_mean": statistics.fmean(finals) if finals else None,
        "final_return_std": statistics.pstdev(finals) if finals else None,
        "adv_var_median": statistics.median(medians) if medians else None,
    }


def build_report(out_dir) -> dict:
    """Pure function of ``experiment.json`` and the cell metrics files."""
    out = Path(out_dir)
    meta = json.loads((out / "experiment.json").read_text())
    threshold = float(meta["resolved_threshold"])
    records, errors = M.merge_cells(out)
    for failed in sorted((out / M.CELLS_DIR).glob("*.failed")):
        errors.setdefault(failed.stem, "cell failed: " + json.loads(failed.read_text()).get("error", "?"))

    by_cell: dict = {}
    for r in records:
        by_cell.setdefault(r["algorithm"], {}).setdefault(r["seed"], []).append(r)
    expected = [a["name"] for a in meta["algorithms"]]
    algorithms = {}
    for name in expected:
        cells = {}
        for seed in meta["seeds"]:
            cid = M.cell_id(name, seed)
            if cid in errors:
                continue
            cells[seed] = summarize_cell(by_cell.get(name, {}).get(seed, []), threshold)
        algorithms[name] = _summarize_algorithm(cells)
    return {
        "experiment": meta["name"],
        "env": meta["env"]["name"],
        "threshold": threshold,
        "algorithms": algorithms,
        "errors": dict(sorted(errors.items())),
    }


def _encode(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return SENTINEL
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode(v) for v in obj]
    return obj


def _cell(v, fmt="{:.0f}") -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return SENTINEL
    return fmt.format(v)


def format_summary(report: dict) -> str:
    nw = max([12] + [len(n) + 2 for n in report["algorithms"]])
    lines = [
        f"experiment {report['experiment']} on {report['env']}  (success threshold {report['threshold']:.4f})",
        "",
        f"{'algorithm':<{nw}}{'batches':>10}{'macro-steps':>14}{'raw-steps':>12}{'final return':>22}{'adv var':>12}",
    ]
    for name, a in report["algorithms"].items():
        ret = "-" if a["final_return_mean"] is None else f"{a['final_return_mean']:.3f} ± {a['final_return_std']:.3f}"
        lines.append(
            f"{name:<{nw}}{_cell(a['batches_to_threshold']):>10}{_cell(a['macro_steps_to_threshold']):>14}"
            f"{_cell(a['raw_steps_to_threshold']):>12}{ret:>22}{_cell(a['adv_var_median'], '{:.3g}'):>12}"
        )
    lines.append("")
    lines.append("steps-to-threshold are medians over seeds; raw steps count every branch evaluation.")
    for cid, err in report["errors"].items():
        lines.append(f"! {cid}: {err}")
    return "\n".join(lines) + "\n"


def generate_report(out_dir) -> tuple[dict, str]:
    """Write ``report.json`` and ``report.txt`` into ``out_dir``."""
    out = Path(out_dir)
    report = build_report(out)
    text = format_summary(report)
    (out / "report.json").write_text(json.dumps(_encode(report), indent=2, ensure_ascii=False) + "\n")
    (out / "report.txt").write_text(text)
    return report, text
