"""
ResultRow model: one metric value of one contender, the unit of a ResultTable.
"""
from sqlalchemy import Column, Float, ForeignKey, Integer, String
from sqlalchemy.orm import relationship

from db.session import Base


class ResultRow(Base):
    __tablename__ = "result_rows"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    experiment = Column(String(50), nullable=False, index=True)
    model = Column(String(100), nullable=False)
    n_params = Column(Integer, nullable=False)
    metric = Column(String(100), nullable=False)
    value = Column(Float, nullable=True)
    spread = Column(Float, nullable=True)
    seed = Column(Integer, nullable=False, default=0)
    config_hash = Column(String(16), nullable=False)

    run = relationship("Run", back_populates="results")

    def __repr__(self) -> str:
        return f"<ResultRow {self.experiment}/{self.model} {self.metric}={self.value}>"
