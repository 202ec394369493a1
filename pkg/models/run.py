"""
Run model: one invocation of an experiment subcommand.
Parent table of ResultRows and Artifacts.
"""
from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from db.session import Base

RUN_STATUSES = ("Running", "Completed", "Failed")


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(50), nullable=False)
    experiment = Column(String(50), nullable=False, index=True)
    config_hash = Column(String(16), nullable=False, index=True)
    seed = Column(Integer, nullable=False, default=0)
    status = Column(String(20), nullable=False, default="Running")
    error = Column(Text, nullable=True)
    started_at = Column(DateTime, server_default=func.now())
    finished_at = Column(DateTime, nullable=True)

    # If a Run is deleted, its results and artifact records go with it.
    results = relationship("ResultRow", back_populates="run", cascade="all, delete-orphan")
    artifacts = relationship("Artifact", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self) -> str:
        return f"<Run {self.id} {self.command}/{self.experiment} {self.status}>"
