"""Metrics records: per-cell JSON Lines and the merged, fixed-column CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

# fixed CSV column order; every JSONL record carries exactly these keys
COLUMNS = [
    "experiment", "env", "algorithm", "seed", "batch",
    "macro_steps", "raw_steps", "episodes", "mean_return",
    "policy_loss", "value_loss", "adv_mean", "adv_var", "ratio_mean",
    "clip_fraction", "entropy", "grad_norm", "macro_adv_mean",
]
INT_COLUMNS = {"seed", "batch", "macro_steps", "raw_steps", "episodes"}
STR_COLUMNS = {"experiment", "env", "algorithm"}

CELLS_DIR = "cells"
CSV_NAME = "metrics.csv"


def cell_id(algorithm: str, seed: int) -> str:
    return f"{algorithm}__seed{seed}"


def make_record(experiment: str, env: str, algorithm: str, seed: int, row: dict) -> dict:
    rec = {"experiment": experiment, "env": env, "algorithm": algorithm, "seed": seed}
    for col in COLUMNS[4:]:
        rec[col] = row[col]
    return rec


def append_jsonl(fh, record: dict) -> None:
    fh.write(json.dumps(record, allow_nan=False) + "\n")
    fh.flush()


def read_jsonl(path) -> list[dict]:
    """All records of one cell file; raises ValueError on a malformed line."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from None
            missing = [c for c in COLUMNS if c not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            out.append(rec)
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(col: str, text: str):
    if text == "":
        return None
    if col in STR_COLUMNS:
        return text
    if col in INT_COLUMNS:
        return int(text)
    return float(text)


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in COLUMNS])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    if header != COLUMNS:
        raise ValueError(f"{path}: unexpected CSV header")
    return [{c: _parse(c, v) for c, v in zip(COLUMNS, row)} for row in rows[1:]]


def cell_files(out_dir) -> list[Path]:
    return sorted((Path(out_dir) / CELLS_DIR).glob("*.jsonl"))


def merge_cells(out_dir) -> tuple[list[dict], dict]:
    """Records from every readable cell file, plus ``{cell: error}`` for unreadable ones."""
    records, errors = [], {}
    for path in cell_files(out_dir):
        try:
            records.extend(read_jsonl(path))
        except (OSError, ValueError) as exc:
            errors[path.stem] = str(exc)
    records.sort(key=lambda r: (r["algorithm"], r["seed"], r["batch"]))
    return records, errors
