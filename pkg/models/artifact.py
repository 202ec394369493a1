from sqlalchemy import Column, DateTime, ForeignKey, Integer, String
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from db.session import Base


class Artifact(Base):
    """A file written by a run: dataset bank, checkpoint, graph or raw arrays."""

    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    kind = Column(String(50), nullable=False, index=True)
    name = Column(String(255), nullable=False)
    path = Column(String, nullable=False)
    config_hash = Column(String(16), nullable=False)
    created_at = Column(DateTime, server_default=func.now())

    run = relationship("Run", back_populates="artifacts")

    def __repr__(self) -> str:
        return f"<Artifact {self.kind}:{self.name}>"
