from pathlib import Path
from typing import Generator, Optional, Union
import os

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

# Load environment variables from .env file
load_dotenv()

DB_FILENAME = "results.db"

# Base class for models
Base = declarative_base()


def database_url(run_dir: Union[str, Path]) -> str:
    """DATABASE_URL if set, otherwise a SQLite file inside the run directory."""
    return os.getenv("DATABASE_URL") or f"sqlite:///{Path(run_dir) / DB_FILENAME}"


def make_engine(run_dir: Union[str, Path], url: Optional[str] = None) -> Engine:
    url = url or database_url(run_dir)
    if url.startswith("sqlite:///"):
        Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    # SQLite-specific connection arguments
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args, future=True)
    # Register every table on Base before creating them
    import models.artifact  # noqa: F401
    import models.result_row  # noqa: F401
    import models.run  # noqa: F401

    Base.metadata.create_all(bind=engine)
    return engine


def session_factory(run_dir: Union[str, Path]) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=make_engine(run_dir), future=True)


# Dependency for getting DB session
def get_db(run_dir: Union[str, Path]) -> Generator[Session, None, None]:
    db = session_factory(run_dir)()
    try:
        yield db
    finally:
        db.close()
