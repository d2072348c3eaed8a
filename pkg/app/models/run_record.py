# app/models/run_record.py
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, JSON, String, Text
from datetime import datetime
from app.db.session import Base

class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, default="ringpet")
    config_digest = Column(String, index=True)
    config = Column(JSON, nullable=True)
    status = Column(String, default="running")  # running, completed, failed
    out_dir = Column(String, nullable=True)

    # Failure details
    failed_stage = Column(String, nullable=True)
    error = Column(Text, nullable=True)

    # Timestamps
    started_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime, nullable=True)


class MetricRecord(Base):
    __tablename__ = "metric_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), index=True)
    pattern = Column(Integer)
    stage = Column(String)  # sinogram, reconstructed, refined, ...
    metric = Column(String)  # PSNR, SSIM
    volume_id = Column(Integer)
    slice_id = Column(Integer)
    value = Column(Float)
