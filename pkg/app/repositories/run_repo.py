from sqlalchemy.orm import Session
from datetime import datetime
from typing import Dict, Iterable, Optional
import pandas as pd
from sqlalchemy.exc import SQLAlchemyError
from app.core.errors import RegistryError
from app.models.run_record import ExperimentRun, MetricRecord
from app.core.logger import logger

METRIC_COLUMNS = ["pattern", "stage", "metric", "volume_id", "slice_id", "value"]

class RunRepository:
    """Handles all database operations for experiment runs and their metrics."""

    def __init__(self, db: Session):
        self.db = db

    def create_run(self, name: str, config_digest: str, config: Dict, out_dir: str) -> ExperimentRun:
        """Register a new run in the 'running' state."""
        try:
            run = ExperimentRun(
                name=name,
                config_digest=config_digest,
                config=config,
                out_dir=out_dir,
                status="running",
                started_at=datetime.utcnow()
            )
            self.db.add(run)
            self.db.commit()
            self.db.refresh(run)
            logger.info(f"Registered run {run.id} ({name}, config {config_digest[:8]})")
            return run
        except SQLAlchemyError as e:
            self.db.rollback()
            logger.error(f"Error creating run record: {e}")
            raise RegistryError(f"could not register run {name}: {e}") from e

    def get_run(self, run_id: int) -> Optional[ExperimentRun]:
        return self.db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()

    def latest_run(self, out_dir: str) -> Optional[ExperimentRun]:
        return (self.db.query(ExperimentRun)
                .filter(ExperimentRun.out_dir == out_dir)
                .order_by(ExperimentRun.id.desc())
                .first())

    def update_run(self, run_id: int, **kwargs):
        try:
            run = self.get_run(run_id)
            if run:
                for key, value in kwargs.items():
                    setattr(run, key, value)
                self.db.commit()
                logger.info(f"Updated run {run_id}")
            return run
        except SQLAlchemyError as e:
            self.db.rollback()
            logger.error(f"Error updating run {run_id}: {e}")
            raise RegistryError(f"could not update run {run_id}: {e}") from e

    def complete_run(self, run_id: int):
        return self.update_run(run_id, status="completed", completed_at=datetime.utcnow())

    def fail_run(self, run_id: int, stage: str, error: str):
        return self.update_run(run_id, status="failed", failed_stage=stage, error=error,
                               completed_at=datetime.utcnow())

    def replace_metrics(self, run_id: int, rows: Iterable[Dict]) -> int:
        """Replace every metric row of a run (re-running `eval` stays idempotent)."""
        try:
            self.db.query(MetricRecord).filter(MetricRecord.run_id == run_id).delete()
            records = [MetricRecord(run_id=run_id, **{k: row[k] for k in METRIC_COLUMNS}) for row in rows]
            self.db.add_all(records)
            self.db.commit()
            logger.info(f"Stored {len(records)} metric rows for run {run_id}")
            return len(records)
        except SQLAlchemyError as e:
            self.db.rollback()
            logger.error(f"Error storing metrics for run {run_id}: {e}")
            raise RegistryError(f"could not store metrics for run {run_id}: {e}") from e

    def metric_frame(self, run_id: int) -> pd.DataFrame:
        rows = (self.db.query(MetricRecord)
                .filter(MetricRecord.run_id == run_id)
                .order_by(MetricRecord.id)
                .all())
        return pd.DataFrame([{c: getattr(r, c) for c in METRIC_COLUMNS} for r in rows], columns=METRIC_COLUMNS)
