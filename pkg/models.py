import json
import logging
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker
from sqlalchemy.pool import StaticPool

from config import get_config

logger = logging.getLogger(__name__)

Base = declarative_base()
engine = None
SessionLocal = sessionmaker(autocommit=False, autoflush=False)


def configure(database_url: str = None):
    """(Re)bind the session factory to ``database_url`` (defaults to the active config)."""
    global engine
    url = database_url or get_config().DATABASE_URL
    if url.startswith("sqlite") and ":memory:" in url:
        engine = create_engine(url, echo=False, connect_args={"check_same_thread": False}, poolclass=StaticPool)
    else:
        engine = create_engine(url, echo=False, **get_config().SQLALCHEMY_ENGINE_OPTIONS)
    SessionLocal.configure(bind=engine)
    return engine


class Experiment(Base):
    """One invocation of an experiment file."""
    __tablename__ = "experiments"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(100), nullable=False, index=True)
    kind = Column(String(20), nullable=False, default="matrix")
    description = Column(Text, nullable=True)
    source = Column(String(255), nullable=True)   # path of the .exp file
    output_dir = Column(String(255), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    runs = relationship("SimulationRun", back_populates="experiment", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<Experiment(id={self.id}, name='{self.name}')>"


class SimulationRun(Base):
    """Summary of one (workload, policy, seed) cell."""
    __tablename__ = "simulation_runs"

    id = Column(Integer, primary_key=True, index=True)
    experiment_id = Column(Integer, ForeignKey("experiments.id"), nullable=False)
    cell = Column(String(200), nullable=False)
    workload = Column(String(100), nullable=False, index=True)
    policy = Column(String(50), nullable=False, index=True)
    seed = Column(Integer, nullable=False, default=0)
    epochs = Column(Integer, nullable=False)
    throughput = Column(Float, nullable=False)          # MB/s over the steady window
    mean_latency = Column(Float, nullable=True)         # ns
    energy_per_access = Column(Float, nullable=True)    # nJ per cacheline
    migrated_pages = Column(Integer, nullable=False, default=0)
    violations = Column(Integer, nullable=False, default=0)
    tier_signature = Column(String(100), nullable=True)
    regions_json = Column(Text, nullable=True)          # {"region": {"latency": .., "bandwidth": ..}}
    artifacts_json = Column(Text, nullable=True)        # {"metrics": path, "events": path, ...}
    created_at = Column(DateTime, default=datetime.utcnow)

    experiment = relationship("Experiment", back_populates="runs")

    def to_dict(self):
        return {
            "id": self.id,
            "experiment_id": self.experiment_id,
            "cell": self.cell,
            "workload": self.workload,
            "policy": self.policy,
            "seed": self.seed,
            "epochs": self.epochs,
            "throughput": self.throughput,
            "mean_latency": self.mean_latency,
            "energy_per_access": self.energy_per_access,
            "migrated_pages": self.migrated_pages,
            "violations": self.violations,
            "tier_signature": self.tier_signature,
            "regions": json.loads(self.regions_json or "{}"),
            "artifacts": json.loads(self.artifacts_json or "{}"),
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }

    def __repr__(self):
        return f"<SimulationRun(id={self.id}, policy='{self.policy}', workload='{self.workload}')>"


def create_tables():
    """Create all database tables."""
    if engine is None:
        configure()
    Base.metadata.create_all(bind=engine)
