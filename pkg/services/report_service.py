"""
Result tables, run bookkeeping in the run database, and the CSV/JSON report.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from sqlalchemy.orm import Session

from db.session import DB_FILENAME, database_url, session_factory
from models.artifact import Artifact
from models.result_row import ResultRow
from models.run import RUN_STATUSES, Run
from services.common import (
    atomic_path,
    atomic_write_json,
    get_column_value_by_condition,
    get_unique_column_values,
)
from services.errors import NoResultsError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["experiment", "model", "n_params", "metric", "value", "spread", "seed"]


@dataclass
class ResultRecord:
    model: str
    n_params: int
    metric: str
    value: float
    spread: Optional[float] = None
    seed: int = 0


@dataclass
class ResultTable:
    experiment: str
    config_hash: str
    rows: List[ResultRecord] = field(default_factory=list)

    def add(self, model: str, n_params: int, metric: str, value: float,
            spread: Optional[float] = None, seed: int = 0) -> None:
        self.rows.append(ResultRecord(model, int(n_params), metric, float(value),
                                      None if spread is None else float(spread), int(seed)))

    def value(self, model: str, metric: str) -> float:
        for row in self.rows:
            if row.model == model and row.metric == metric:
                return row.value
        raise KeyError(f"No row for model={model} metric={metric}")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([vars(r) for r in self.rows], columns=CSV_COLUMNS[1:])
        frame.insert(0, "experiment", self.experiment)
        return frame


# --- run bookkeeping --------------------------------------------------------------


def start_run(db: Session, command: str, experiment: str, config_hash: str, seed: int = 0) -> Run:
    run = Run(command=command, experiment=experiment, config_hash=config_hash, seed=seed, status="Running")
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def finish_run(db: Session, run: Run, status: str = "Completed", error: Optional[str] = None) -> Run:
    if status not in RUN_STATUSES:
        raise ValueError(f"Invalid run status: {status}")
    run.status = status
    run.error = error
    run.finished_at = datetime.utcnow()
    db.commit()
    return run


def register_artifact(db: Session, run: Run, kind: str, name: str, path: Union[str, Path]) -> Artifact:
    artifact = Artifact(run_id=run.id, kind=kind, name=name, path=str(path), config_hash=run.config_hash)
    db.add(artifact)
    db.commit()
    return artifact


def record_table(db: Session, run: Run, table: ResultTable) -> int:
    """Persist every row of `table` under `run`; returns the number of rows."""
    for row in table.rows:
        db.add(
            ResultRow(
                run_id=run.id,
                experiment=table.experiment,
                model=row.model,
                n_params=row.n_params,
                metric=row.metric,
                value=None if not np.isfinite(row.value) else row.value,
                spread=None if row.spread is None or not np.isfinite(row.spread) else row.spread,
                seed=row.seed,
                config_hash=table.config_hash,
            )
        )
    db.commit()
    logger.info("Recorded %d %s result rows for run %d", len(table.rows), table.experiment, run.id)
    return len(table.rows)


# --- report ---------------------------------------------------------------------------


def load_results(run_dir: Union[str, Path]) -> pd.DataFrame:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise NoResultsError(f"Run directory {run_dir} does not exist")
    if database_url(run_dir).startswith("sqlite:///") and not (run_dir / DB_FILENAME).exists():
        raise NoResultsError(f"No results database in {run_dir}")
    db = session_factory(run_dir)()
    try:
        query = db.query(ResultRow).order_by(ResultRow.id)
        frame = pd.read_sql(query.statement, db.bind)
        experiments = get_unique_column_values(db, ResultRow, ["experiment"])
    finally:
        db.close()
    if frame.empty:
        raise NoResultsError(f"No result rows recorded in {run_dir}")
    logger.info("Loaded %d result rows (%s) from %s", len(frame), ", ".join(experiments), run_dir)
    return frame


def write_report(run_dir: Union[str, Path]) -> Dict[str, Any]:
    """results.csv (fixed column order) and summary.json from the run database.

    The summary also lists the commands of runs that ended in Failed.
    """
    run_dir = Path(run_dir)
    frame = load_results(run_dir)
    with atomic_path(run_dir / "results.csv") as tmp:
        frame[CSV_COLUMNS].to_csv(tmp, index=False)

    db = session_factory(run_dir)()
    try:
        failed = get_column_value_by_condition(db, Run, "status", "Failed", "command", multiple=True)
    finally:
        db.close()
    if failed:
        logger.warning("%d failed run(s) in %s: %s", len(failed), run_dir, ", ".join(failed))

    summary: Dict[str, Any] = {"n_rows": int(len(frame)), "failed_commands": failed, "experiments": {}}
    for experiment, group in frame.groupby("experiment", sort=True):
        summary["experiments"][experiment] = {
            "config_hashes": sorted(group["config_hash"].unique().tolist()),
            "rows": [
                {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in rec.items()}
                for rec in group[CSV_COLUMNS[1:]].to_dict(orient="records")
            ],
        }
    atomic_write_json(run_dir / "summary.json", summary)
    logger.info("Wrote report with %d rows to %s", len(frame), run_dir)
    return summary
