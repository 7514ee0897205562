"""Run registry kept next to the metrics CSV."""
import os
import logging
from typing import Optional, Sequence

from sqlalchemy.orm import Session

import models
from core import Settings, config_digest, get_current_time
from database import get_db, open_ledger

logger = logging.getLogger("lsskd.ledger")


def _now():
    return get_current_time().replace(tzinfo=None)


def log_activity(db: Session, run_id: Optional[int], action: str, target: str, details: str):
    safe_details = (details[:495] + '..') if len(details) > 500 else details
    db.add(models.AuditLog(run_id=run_id, timestamp=_now(), action=action, target=target, details=safe_details))


class RunLedger:
    def __init__(self, out_dir: str, SessionLocal=None):
        os.makedirs(out_dir, exist_ok=True)
        self.SessionLocal = SessionLocal or open_ledger(out_dir)
        self.out_dir = out_dir

    def start(self, settings: Settings, resume_epoch: Optional[int] = None) -> int:
        key = config_digest(settings).hex()
        with get_db(self.SessionLocal) as db:
            run = None
            if resume_epoch is not None:
                run = (db.query(models.TrainingRun).filter(models.TrainingRun.run_key == key, models.TrainingRun.out_dir == self.out_dir)
                       .order_by(models.TrainingRun.id.desc()).first())
            if run is None:
                run = models.TrainingRun(run_key=key, dataset=settings.dataset.name, mode=settings.train.mode, seed=settings.seed,
                                         out_dir=self.out_dir, started_at=_now())
                db.add(run); db.flush()
                log_activity(db, run.id, "start", self.out_dir, f"seed={settings.seed} epochs={settings.train.epochs}")
            else:
                db.query(models.EpochRecord).filter(models.EpochRecord.run_id == run.id, models.EpochRecord.epoch > resume_epoch).delete()
                run.status = "running"
                log_activity(db, run.id, "resume", self.out_dir, f"after epoch {resume_epoch}")
            return run.id

    def record_epoch(self, run_id: int, metrics, stage_top1: Sequence[float]):
        with get_db(self.SessionLocal) as db:
            db.add(models.EpochRecord(run_id=run_id, epoch=metrics.epoch, lr=metrics.lr, train_total=metrics.train_total,
                                      ls_loss=metrics.ls_loss, is_loss=metrics.is_loss, test_top1=metrics.test_top1,
                                      test_top5=metrics.test_top5, stage_top1=",".join(f"{a:.2f}" for a in stage_top1),
                                      wall_s=metrics.wall_s, recorded_at=_now()))

    def activity(self, run_id: Optional[int], action: str, target: str, details: str = ""):
        with get_db(self.SessionLocal) as db: log_activity(db, run_id, action, target, details)

    def finish(self, run_id: int, status: str, best_top1: float, best_epoch: int):
        with get_db(self.SessionLocal) as db:
            run = db.get(models.TrainingRun, run_id)
            run.status, run.best_top1, run.best_epoch, run.finished_at = status, best_top1, best_epoch, _now()
        logger.info("run %d %s (best top1 %.2f at epoch %d)", run_id, status, best_top1, best_epoch)
