from sqlalchemy import Column, Integer, String, Text, DateTime, ForeignKey, Float
from sqlalchemy.orm import relationship

from core import get_current_time
from database import Base


class TrainingRun(Base):
    __tablename__ = "training_runs"
    id = Column(Integer, primary_key=True, index=True)
    run_key = Column(String, index=True)  # config digest, hex
    dataset = Column(String)
    mode = Column(String, default="lsskd")
    seed = Column(Integer)
    out_dir = Column(String)
    status = Column(String, default="running")
    best_top1 = Column(Float, default=0.0)
    best_epoch = Column(Integer, default=0)
    started_at = Column(DateTime, default=get_current_time)
    finished_at = Column(DateTime, nullable=True)

    epochs = relationship("EpochRecord", back_populates="run", cascade="all, delete-orphan", order_by="EpochRecord.epoch")
    audit_logs = relationship("AuditLog", back_populates="run", cascade="all, delete-orphan")


class EpochRecord(Base):
    __tablename__ = "epoch_records"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), index=True)
    epoch = Column(Integer)
    lr = Column(Float)
    train_total = Column(Float)
    ls_loss = Column(Float)
    is_loss = Column(Float)
    test_top1 = Column(Float)
    test_top5 = Column(Float)
    stage_top1 = Column(String, default="")  # comma list, one per auxiliary branch
    wall_s = Column(Float)
    recorded_at = Column(DateTime, default=get_current_time)
    run = relationship("TrainingRun", back_populates="epochs")


class AuditLog(Base):
    __tablename__ = "audit_logs"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=True)
    timestamp = Column(DateTime, default=get_current_time)
    action = Column(String)
    target = Column(String)
    details = Column(Text)
    run = relationship("TrainingRun", back_populates="audit_logs")
