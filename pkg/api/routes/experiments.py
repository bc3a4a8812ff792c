import logging
from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException
from pydantic import ValidationError

from api.dependencies import get_output_dir, get_run_config
from schemas.models import ExperimentRequest, SuccessResponse
from services.exceptions import FewShotError
from services.experiments import run_experiment
from services.reporting import load_results, result_rows, seed_means
from storage.manifests import read_json

logger = logging.getLogger(__name__)
router = APIRouter()


@router.post("/experiments/run", response_model=SuccessResponse)
def run_experiment_endpoint(request: ExperimentRequest):
    """Run a preset (or a config file) synchronously and return the result table"""
    try:
        config = get_run_config(request.preset, request.config_path)
        report = run_experiment(config, out_dir=request.out_dir, seed=request.seed)
        return SuccessResponse(
            status="success",
            message=f"Experiment '{config.experiment.name}' finished with {len(report.results)} results",
            data={"out_dir": report.out_dir, "results": result_rows(report.results),
                  "checks": report.checks, "files": report.files}
        )
    except (FewShotError, ValidationError) as e:
        logger.error(f"Experiment rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Experiment failed: {e}")
        raise HTTPException(status_code=500, detail=f"Failed to run experiment: {str(e)}")


@router.get("/reports/{run_name}", response_model=SuccessResponse)
async def get_report(run_name: str, output_dir: Path = Depends(get_output_dir)):
    run_dir = output_dir / run_name
    if not (run_dir / "results.json").exists():
        raise HTTPException(status_code=404, detail=f"No report for run '{run_name}'")
    try:
        results = load_results(str(run_dir))
        checks = read_json(str(run_dir / "checks.json")) if (run_dir / "checks.json").exists() else None
        return SuccessResponse(
            status="success",
            message=f"Report for '{run_name}'",
            data={"results": result_rows(results), "seed_means": seed_means(results), "checks": checks}
        )
    except Exception as e:
        logger.error(f"Error reading report {run_name}: {e}")
        raise HTTPException(status_code=500, detail=f"Failed to read report: {str(e)}")
