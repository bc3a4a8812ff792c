import logging

from fastapi import APIRouter, Depends, HTTPException
from pydantic import ValidationError

from api.dependencies import get_data_dir, get_run_config
from schemas.models import SampleRequest, SuccessResponse
from services.exceptions import FewShotError
from services.experiments import sample_to_file

logger = logging.getLogger(__name__)
router = APIRouter()


@router.post("/episodes/sample", response_model=SuccessResponse)
def sample_episodes(request: SampleRequest, data_dir: str = Depends(get_data_dir)):
    """Sample a frozen meta-set from the prepared dataset and write it as JSONL"""
    try:
        config = get_run_config("main")
        config.experiment.dataset = "disk"
        summary = sample_to_file(config, request.split, request.ways, request.shots, request.tasks,
                                 request.seed, request.partition, request.out, request.data_dir or data_dir)
        return SuccessResponse(
            status="success",
            message=f"Sampled {summary['tasks']} episodes",
            data=summary
        )
    except (FewShotError, ValidationError) as e:
        logger.error(f"Episode sampling rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Episode sampling failed: {e}")
        raise HTTPException(status_code=500, detail=f"Failed to sample episodes: {str(e)}")
