from contextlib import asynccontextmanager
import logging

from fastapi import FastAPI

from api.routes import episodes, experiments, health
from config.settings import settings
from utils.logger import setup_logging

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    setup_logging()
    logger.info("Starting up Few-shot AED service...")
    logger.info(f"Data dir: {settings.DATA_DIR}, output dir: {settings.OUTPUT_DIR}, device: {settings.DEVICE}")
    yield
    logger.info("Shutting down...")


app = FastAPI(
    title="Few-shot Acoustic Event Detection",
    description="Episode sampling, few-shot training and evaluation for multi-label acoustic event detection",
    version="1.0.0",
    lifespan=lifespan
)

app.include_router(health.router, tags=["Health"])
app.include_router(episodes.router, prefix="/api/v1", tags=["Episodes"])
app.include_router(experiments.router, prefix="/api/v1", tags=["Experiments"])


@app.get("/")
async def root():
    return {
        "service": "Few-shot Acoustic Event Detection",
        "version": "1.0.0",
        "status": "healthy",
        "docs": "/docs",
        "health": "/health",
        "healthz": "/healthz"
    }


@app.get("/healthz")
async def rapid_health_check():
    """Quick liveness probe, touches no data"""
    return {"status": "ok", "service": "fewshot-aed", "version": "1.0.0"}


if __name__ == "__main__":
    from start import main
    main()
