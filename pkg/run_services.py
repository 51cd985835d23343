import json
import logging
import os
from typing import Any, Dict, List, Optional

import models
from errors import ComparisonError
from models import Experiment, SimulationRun
from sim_engine import RunSummary, average_runs, compare_matrix

logger = logging.getLogger(__name__)


def _session():
    if models.engine is None:
        models.create_tables()
    return models.SessionLocal()


def record_experiment(name: str, kind: str = "matrix", description: str = "", source: Optional[str] = None,
                      output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Create an experiment row for one invocation."""
    db = _session()
    try:
        exp = Experiment(name=name, kind=kind, description=description, source=source, output_dir=output_dir)
        db.add(exp)
        db.commit()
        db.refresh(exp)
        return {
            "success": True,
            "experiment_id": exp.id,
            "name": exp.name,
            "created_at": exp.created_at.isoformat(),
        }
    except Exception as e:
        db.rollback()
        logger.error("could not record experiment %s: %s", name, e)
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def save_run(experiment_id: int, cell: str, summary: RunSummary,
             artifacts: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    """Store one cell summary under an experiment."""
    db = _session()
    try:
        if db.query(Experiment).filter(Experiment.id == experiment_id).first() is None:
            return {"success": False, "error": "Experiment not found"}
        regions = {
            name: {"latency": summary.region_latency.get(name), "bandwidth": bw}
            for name, bw in summary.region_bw.items()
        }
        run = SimulationRun(
            experiment_id=experiment_id,
            cell=cell,
            workload=summary.workload,
            policy=summary.policy,
            seed=summary.seed,
            epochs=summary.epochs,
            throughput=summary.steady_throughput,
            mean_latency=summary.mean_latency,
            energy_per_access=summary.energy_per_access,
            migrated_pages=summary.migrated_pages,
            violations=sum(summary.violations.values()),
            tier_signature=summary.tier_signature,
            regions_json=json.dumps(regions, sort_keys=True),
            artifacts_json=json.dumps(artifacts or {}, sort_keys=True),
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        return {"success": True, "run_id": run.id}
    except Exception as e:
        db.rollback()
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def save_result(result, source: Optional[str] = None) -> Dict[str, Any]:
    """Record a harness ExperimentResult and every cell that finished."""
    exp = result.experiment
    out_dir = None
    if result.files:
        out_dir = os.path.dirname(next(iter(result.files.values())))
    recorded = record_experiment(exp.name, exp.kind, exp.description, source or exp.source, out_dir)
    if not recorded["success"]:
        return recorded
    saved = 0
    for outcome in result.outcomes:
        if outcome.aborted:
            continue
        if save_run(recorded["experiment_id"], outcome.cell.cell_id, outcome.summary, outcome.artifacts)["success"]:
            saved += 1
    return {"success": True, "experiment_id": recorded["experiment_id"], "runs_saved": saved}


def list_experiments() -> Dict[str, Any]:
    db = _session()
    try:
        experiments = db.query(Experiment).order_by(Experiment.id).all()
        return {
            "success": True,
            "experiments": [
                {
                    "id": e.id,
                    "name": e.name,
                    "kind": e.kind,
                    "description": e.description,
                    "runs": len(e.runs),
                    "created_at": e.created_at.isoformat(),
                }
                for e in experiments
            ],
            "total": len(experiments),
        }
    except Exception as e:
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def _latest(db, name: str) -> Optional[Experiment]:
    return db.query(Experiment).filter(Experiment.name == name).order_by(Experiment.id.desc()).first()


def list_runs(name: str) -> Dict[str, Any]:
    """Runs of the latest invocation of experiment ``name``."""
    db = _session()
    try:
        exp = _latest(db, name)
        if exp is None:
            return {"success": False, "error": "Experiment not found"}
        runs = db.query(SimulationRun).filter(SimulationRun.experiment_id == exp.id).order_by(SimulationRun.id).all()
        return {
            "success": True,
            "experiment_id": exp.id,
            "name": exp.name,
            "runs": [r.to_dict() for r in runs],
            "total": len(runs),
        }
    except Exception as e:
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def get_run(run_id: int) -> Dict[str, Any]:
    db = _session()
    try:
        run = db.query(SimulationRun).filter(SimulationRun.id == run_id).first()
        if run is None:
            return {"success": False, "error": "Run not found"}
        return {"success": True, "run": run.to_dict()}
    except Exception as e:
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def delete_experiment(name: str) -> Dict[str, Any]:
    """Delete every stored invocation of ``name`` with its runs."""
    db = _session()
    try:
        experiments = db.query(Experiment).filter(Experiment.name == name).all()
        if not experiments:
            return {"success": False, "error": "Experiment not found"}
        for exp in experiments:
            db.delete(exp)
        db.commit()
        return {"success": True, "deleted": len(experiments)}
    except Exception as e:
        db.rollback()
        return {"success": False, "error": str(e)}
    finally:
        db.close()


def _summary_from_row(row: SimulationRun) -> RunSummary:
    return RunSummary(
        name=row.cell, policy=row.policy, workload=row.workload, seed=row.seed, epochs=row.epochs,
        steady_throughput=row.throughput, mean_latency=row.mean_latency or 0.0,
        energy_per_access=row.energy_per_access or 0.0, migrated_pages=row.migrated_pages,
        tier_signature=row.tier_signature or "",
    )


def comparison_for(name: str, baseline: str = "admdefault") -> Dict[str, Any]:
    """Speedup/energy table of the latest invocation of ``name`` against ``baseline``."""
    db = _session()
    try:
        exp = _latest(db, name)
        if exp is None:
            return {"success": False, "error": "Experiment not found"}
        groups: Dict[tuple, List[RunSummary]] = {}
        for row in exp.runs:
            groups.setdefault((row.workload, row.policy), []).append(_summary_from_row(row))
        averaged = [average_runs(groups[k]) for k in sorted(groups)]
        matrix = compare_matrix(averaged, baseline)
        return {
            "success": True,
            "name": exp.name,
            "baseline": baseline,
            "rows": [
                {"workload": r.workload, "policy": r.policy, "throughput": r.throughput, "speedup": r.speedup,
                 "energy_ratio": r.energy_ratio, "mean_latency": r.mean_latency,
                 "migrated_pages": r.migrated_pages, "throughput_range": r.throughput_range}
                for r in matrix["rows"]
            ],
            "geomean": matrix["geomean"],
            "energy_speedup_spearman": matrix["energy_speedup_spearman"],
        }
    except ComparisonError as e:
        return {"success": False, "error": str(e), "invalid": True}
    except Exception as e:
        return {"success": False, "error": str(e)}
    finally:
        db.close()
