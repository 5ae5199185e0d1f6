"""
Reporting Service.
Evaluation reports as JSON and aligned text tables, rich tables for the CLI,
and intrusion worksheets for human annotation.
"""
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from services.corpus import StatsReport
from services.errors import InputError
from services.evaluation import IntrusionSet

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("RECALL@A", "RECALL@5", "RECALL@10", "RECALL@20", "LOS_RMSE")


@dataclass
class EvalReport:
    """
    Results of one `eval` run. `rows` maps a method name to its prediction-table
    columns (missing values are None).
    """

    metadata: Dict = field(default_factory=dict)
    intrusion: Optional[Dict] = None
    clustering: Optional[Dict] = None
    recall: Dict[str, Dict] = field(default_factory=dict)
    los: Dict[str, Dict] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, List[Optional[float]]]]:
        names = list(dict.fromkeys(list(self.recall) + list(self.los)))
        table = []
        for name in names:
            recall = self.recall.get(name, {})
            los = self.los.get(name, {})
            table.append((name, [
                recall.get("recall_a"), recall.get("recall_5"), recall.get("recall_10"),
                recall.get("recall_20"), los.get("los_rmse"),
            ]))
        return table

    def to_dict(self) -> Dict:
        return {
            "metadata": self.metadata,
            "intrusion": self.intrusion,
            "clustering": self.clustering,
            "recall": self.recall,
            "los": self.los,
            "table": {name: dict(zip(TABLE_COLUMNS, values)) for name, values in self.rows()},
        }

    def to_table(self) -> Table:
        table = Table(title="Prediction results")
        table.add_column("Method")
        for column in TABLE_COLUMNS:
            table.add_column(column, justify="right")
        for name, values in self.rows():
            table.add_row(name, *("-" if v is None else f"{v:.4f}" for v in values))
        return table

    def summary_lines(self) -> List[str]:
        lines = []
        if self.intrusion is not None:
            lines.append(
                f"Intrusion precision: {self.intrusion['precision']:.4f} "
                f"(shuffled-label control {self.intrusion['control_precision']:.4f}, {self.intrusion['n_sets']} sets)"
            )
        if self.clustering is not None:
            control = self.clustering.get("control_nmi")
            control_text = "n/a" if control is None else f"{control:.4f}"
            lines.append(
                f"Diagnosis clustering NMI: {self.clustering['nmi']:.4f} (k={self.clustering['k']}, "
                f"{self.clustering['mode']}; random-vector control {control_text})"
            )
        return lines

    def to_text(self) -> str:
        console = Console(record=True, width=100, file=io.StringIO())
        for line in self.summary_lines():
            console.print(line)
        if self.rows():
            console.print(self.to_table())
        return console.export_text()


def save_report(report: EvalReport, out_dir, stem: str = "eval_report") -> Tuple[Path, Path]:
    """Write `<stem>.json` and `<stem>.txt` into out_dir."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        text_path = out_dir / f"{stem}.txt"
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        text_path.write_text(report.to_text(), encoding="utf-8")
    except OSError as e:
        raise InputError(f"Cannot write report to {out_dir}: {e}") from e
    logger.info(f"Report written to {json_path}")
    return json_path, text_path


def stats_table(stats: StatsReport, title: str = "Dataset statistics") -> Table:
    table = Table(title=title)
    table.add_column("Statistic")
    table.add_column("Value", justify="right")
    for name, value in stats.rows():
        table.add_row(name, value)
    return table


def nearest_table(query: str, neighbours: Sequence[Tuple[str, float]]) -> Table:
    table = Table(title=f"Nearest activities to {query}")
    table.add_column("#", justify="right")
    table.add_column("Activity")
    table.add_column("Distance", justify="right")
    for rank, (code, distance) in enumerate(neighbours, start=1):
        table.add_row(str(rank), code, f"{distance:.6f}")
    return table


def write_intrusion_worksheet(
    sets: Sequence[IntrusionSet],
    codes: Sequence[str],
    worksheet_path,
    answer_path,
    seed: int = 0,
) -> Tuple[Path, Path]:
    """
    Annotation worksheet (set_id plus the six codes in shuffled order) and a
    separate answer key naming each set's intruder.
    """
    worksheet_path, answer_path = Path(worksheet_path), Path(answer_path)
    rng = np.random.default_rng(seed)
    try:
        worksheet_path.parent.mkdir(parents=True, exist_ok=True)
        answer_path.parent.mkdir(parents=True, exist_ok=True)
        with worksheet_path.open("w", newline="", encoding="utf-8") as sheet, \
                answer_path.open("w", newline="", encoding="utf-8") as key:
            sheet_writer, key_writer = csv.writer(sheet), csv.writer(key)
            sheet_writer.writerow(["set_id"] + [f"code_{i}" for i in range(1, 7)])
            key_writer.writerow(["set_id", "intruder", "anchor"])
            for set_id, s in enumerate(sets, start=1):
                members = [codes[m] for m in rng.permutation(list(s.members))]
                sheet_writer.writerow([set_id] + members)
                key_writer.writerow([set_id, codes[s.intruder], codes[s.anchor]])
    except OSError as e:
        raise InputError(f"Cannot write intrusion worksheet: {e}") from e
    return worksheet_path, answer_path


def write_embeddings(path, keys: Sequence[str], vectors: np.ndarray) -> Path:
    """TSV: key then the vector, 17 significant digits so values re-read exactly."""
    path = Path(path)
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(keys) != vectors.shape[0]:
        raise ValueError("one key per vector expected")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for key, row in zip(keys, vectors):
                f.write(key + "\t" + "\t".join("%.17g" % v for v in row) + "\n")
    except OSError as e:
        raise InputError(f"Cannot write embeddings to {path}: {e}") from e
    return path


def read_embeddings(path) -> Tuple[List[str], np.ndarray]:
    keys, rows = [], []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            keys.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return keys, np.array(rows, dtype=np.float64)
