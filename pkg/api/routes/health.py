from pathlib import Path

import torch
from fastapi import APIRouter

from config.settings import settings
from schemas.models import SuccessResponse

router = APIRouter()


@router.get("/health", response_model=SuccessResponse)
async def health_check():
    """Health check endpoint"""
    return SuccessResponse(
        status="success",
        message="Service is healthy",
        data={"service": "Few-shot Acoustic Event Detection", "status": "operational",
              "device": settings.DEVICE, "torch": torch.__version__}
    )


@router.get("/health/data", response_model=SuccessResponse)
async def data_health():
    """Reports whether DATA_DIR holds a prepared dataset"""
    root = Path(settings.DATA_DIR)
    if not (root / "manifest.jsonl").exists():
        return SuccessResponse(
            status="error",
            message=f"No dataset manifest under {root}"
        )
    return SuccessResponse(
        status="success",
        message="Dataset is available",
        data={"data_dir": str(root), "ontology": (root / "ontology.json").exists(),
              "features": (root / "features").is_dir()}
    )
