"""Plot-ready summary tables derived from an attack-matrix CSV."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from statistics import mean, pstdev

from .matrix import MATRIX_FIELDS

BAR_FIELDS = ("task", "difficulty", "attack", "training_mode", "defense_mode", "mean_ap", "std_ap", "runs")
SWEEP_FIELDS = ("task", "difficulty", "attack", "defense_mode", "gate_threshold", "mean_ap", "std_ap", "runs")
CURVE_FIELDS = ("training_mode", "defense_mode", "attack", "task", "difficulty", "epoch", "mean_ap", "runs")

DIFFICULTY_ORDER = {"Easy": 0, "Moderate": 1, "Hard": 2}
ATTACK_ORDER = {"Clean": 0, "FGSM": 1, "BIM": 2, "PGD": 3, "MIFGSM": 4, "IDP": 5}
MODE_ORDER = {"standard": 0, "adversarial": 1, "dart3d": 2}


class ReportError(ValueError):
    pass


def read_matrix_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [f for f in MATRIX_FIELDS if f not in reader.fieldnames]
    if missing:
        raise ReportError(f"matrix CSV is missing columns: {', '.join(missing)}")
    rows = []
    for i, row in enumerate(reader, start=2):
        try:
            row["ap_r40"] = float(row["ap_r40"])
            row["gate_threshold"] = float(row["gate_threshold"])
            row["epoch"] = int(row["epoch"])
        except ValueError as err:
            raise ReportError(f"line {i}: {err}") from None
        rows.append(row)
    return rows


def _key_order(value, table):
    return (table.get(value, len(table)), value)


def _table(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    writer.writerows(rows)
    return buf.getvalue()


def _stats(values):
    return f"{mean(values) * 100:.3f}", f"{pstdev(values) * 100:.3f}", len(values)


def grouped_bar_table(rows) -> str:
    """Mean AP (percent) per attack and training mode, over seeds."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["task"], r["difficulty"], r["attack"], r["training_mode"], r["defense_mode"])].append(r["ap_r40"])
    keys = sorted(
        groups,
        key=lambda k: (k[0], _key_order(k[1], DIFFICULTY_ORDER), _key_order(k[2], ATTACK_ORDER), _key_order(k[3], MODE_ORDER), k[4]),
    )
    return _table(BAR_FIELDS, [(*k, *_stats(groups[k])) for k in keys])


def threshold_sweep_table(rows) -> str:
    """Gated models only: mean AP per gate threshold, one block of rows per metric."""
    groups = defaultdict(list)
    for r in rows:
        if r["training_mode"] != "dart3d":
            continue
        groups[(r["task"], r["difficulty"], r["attack"], r["defense_mode"], r["gate_threshold"])].append(r["ap_r40"])
    keys = sorted(
        groups,
        key=lambda k: (k[0], _key_order(k[1], DIFFICULTY_ORDER), _key_order(k[2], ATTACK_ORDER), k[3], k[4]),
    )
    return _table(SWEEP_FIELDS, [(*k[:4], f"{k[4]:.2f}", *_stats(groups[k])) for k in keys])


def epoch_curve_table(rows) -> str:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["training_mode"], r["defense_mode"], r["attack"], r["task"], r["difficulty"], r["epoch"])].append(r["ap_r40"])
    keys = sorted(
        groups,
        key=lambda k: (_key_order(k[0], MODE_ORDER), k[1], _key_order(k[2], ATTACK_ORDER), k[3], _key_order(k[4], DIFFICULTY_ORDER), k[5]),
    )
    return _table(CURVE_FIELDS, [(*k, *_stats(groups[k])[::2]) for k in keys])


def emit_report(matrix_csv: str, out_dir=None) -> dict:
    """Build the three tables; writes them as CSV files when ``out_dir`` is given."""
    rows = read_matrix_csv(matrix_csv)
    tables = {
        "grouped_bars.csv": grouped_bar_table(rows),
        "threshold_sweep.csv": threshold_sweep_table(rows),
        "epoch_curves.csv": epoch_curve_table(rows),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in tables.items():
            (out / name).write_text(text)
    return tables
