import os
from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from core import LEDGER_URL

Base = declarative_base()


def ledger_url(out_dir: str) -> str:
    return LEDGER_URL or f"sqlite:///{os.path.abspath(os.path.join(out_dir, 'ledger.db'))}"


def open_ledger(out_dir: str):
    import models  # noqa: F401  registers the tables on Base
    engine = create_engine(ledger_url(out_dir))
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def get_db(SessionLocal):
    db = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()
