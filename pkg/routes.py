from flask import Blueprint, jsonify, request

from policies import POLICIES, POLICY_DEFAULTS, HyPlacerConfig, PolicyParams
from run_services import comparison_for, delete_experiment, get_run, list_experiments, list_runs

bp = Blueprint("api", __name__, url_prefix="/api")


@bp.get("/health")
def health():
    return jsonify({"status": "ok"})


@bp.get("/policies")
def get_policies():
    """Available placement policies with their default parameters."""
    policies = {}
    for name, cls in POLICIES.items():
        if name == "hyplacer":
            params = HyPlacerConfig().__dict__
        else:
            params = {**PolicyParams().__dict__, **POLICY_DEFAULTS.get(name, {})}
        policies[name] = {"description": (cls.__doc__ or "").strip(), "defaults": params}
    return jsonify({"policies": policies, "total": len(policies)})


@bp.get("/experiments")
def get_experiments():
    result = list_experiments()
    if result["success"]:
        return jsonify(result)
    return jsonify(result), 500


@bp.get("/experiments/<name>/runs")
def get_experiment_runs(name):
    """Runs of the latest invocation of an experiment."""
    result = list_runs(name)
    if result["success"]:
        return jsonify(result)
    if result["error"] == "Experiment not found":
        return jsonify(result), 404
    return jsonify(result), 500


@bp.get("/experiments/<name>/compare")
def compare_experiment(name):
    """Speedup and energy ratio against a baseline policy (default admdefault)."""
    baseline = request.args.get("baseline", "admdefault")
    result = comparison_for(name, baseline)
    if result["success"]:
        return jsonify(result)
    if result.get("invalid"):
        return jsonify(result), 400
    if result["error"] == "Experiment not found":
        return jsonify(result), 404
    return jsonify(result), 500


@bp.get("/runs/<int:run_id>")
def get_single_run(run_id):
    result = get_run(run_id)
    if result["success"]:
        return jsonify(result)
    if result["error"] == "Run not found":
        return jsonify(result), 404
    return jsonify(result), 500


@bp.delete("/experiments/<name>")
def remove_experiment(name):
    """Delete every stored invocation of an experiment."""
    result = delete_experiment(name)
    if result["success"]:
        return jsonify(result)
    return jsonify(result), 404
