import logging
import os
from contextlib import asynccontextmanager
from pathlib import Path

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api.routes import router
from app.core.config import settings

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


def output_dir_ready() -> bool:
    """True when no run directory is configured or the configured one is writable."""
    if settings.OUTPUT_DIR is None:
        return True
    path = Path(settings.OUTPUT_DIR)
    return path.is_dir() and os.access(path, os.W_OK)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Pipeline runs started from this server write below OUTPUT_DIR
    if settings.OUTPUT_DIR is not None:
        try:
            Path(settings.OUTPUT_DIR).mkdir(parents=True, exist_ok=True)
            logger.info(f"Run outputs go to {settings.OUTPUT_DIR}")
        except OSError as e:
            logger.error(f"Cannot create OUTPUT_DIR {settings.OUTPUT_DIR}: {str(e)}")
    yield


# Create FastAPI application
app = FastAPI(
    title="Plenoptic Metric Depth API",
    description="Scale alignment, depth evaluation and virtual depth conversion for plenoptic captures",
    version="1.0.0",
    lifespan=lifespan,
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # Allow all origins in development
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include API routes
app.include_router(router, prefix="/api/v1")

# Root endpoint
@app.get("/")
async def root():
    return {
        "message": "Welcome to the Plenoptic Metric Depth API",
        "docs_url": "/docs",
        "redoc_url": "/redoc",
        "endpoints": ["/api/v1/align", "/api/v1/evaluate", "/api/v1/virtual-depth"],
    }

# Health check endpoint
@app.get("/health")
async def health_check():
    return {
        "status": "healthy" if output_dir_ready() else "degraded",
        "output_dir": settings.OUTPUT_DIR,
    }

if __name__ == "__main__":
    # Run the application
    uvicorn.run(
        "app.main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=settings.DEBUG,
    )
