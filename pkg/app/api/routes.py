import os
import shutil
import logging
import tempfile
from fastapi import APIRouter, UploadFile, File, Form, HTTPException

from app.core.errors import BehindFocalPlane, DataError, NumericError, PipelineError
from app.models.pipeline import PipelineConfig
from app.schemas.api import AlignResponse, EvaluateResponse, VirtualDepthRequest, VirtualDepthResponse
from app.services.alignment import ScaleAligner, sample_correspondences
from app.services.image_io import read_depth_pfm, read_disparity_pfm, read_sparse_csv
from app.services.lfs import virtual_to_metric
from app.services.metrics import DepthEvaluator

router = APIRouter()
logger = logging.getLogger(__name__)

# Initialize services
scale_aligner = ScaleAligner()


def _save_upload(upload: UploadFile, temp_dir: str, name: str) -> str:
    path = os.path.join(temp_dir, name)
    with open(path, "wb") as buffer:
        shutil.copyfileobj(upload.file, buffer)
    return path


def _http_error(e: Exception, action: str) -> HTTPException:
    """Map pipeline errors onto HTTP status codes."""
    if isinstance(e, (DataError, ValueError, BehindFocalPlane)):
        return HTTPException(status_code=422, detail=str(e))
    if isinstance(e, (NumericError, PipelineError)):
        return HTTPException(status_code=400, detail=str(e))
    logger.error(f"Error during {action}: {str(e)}")
    return HTTPException(status_code=500, detail=f"Failed to {action}: {str(e)}")


@router.post("/align", response_model=AlignResponse)
async def align_disparity(
    disparity: UploadFile = File(..., description="Dense relative disparity PFM"),
    sparse: UploadFile = File(..., description="Sparse depth CSV q,r,u,v,depth_m"),
    focal_px: float = Form(..., gt=0),
    baseline_m: float = Form(..., gt=0),
    estimator: str = Form("theil-sen"),
):
    """
    Fit the relative-to-metric disparity model.

    Samples the relative map at every sparse centroid and fits y = m x + b.
    """
    temp_dir = tempfile.mkdtemp()
    try:
        dense = read_disparity_pfm(_save_upload(disparity, temp_dir, "disparity.pfm"))
        depths = read_sparse_csv(_save_upload(sparse, temp_dir, "sparse.csv"))
        pairs = sample_correspondences(dense, depths, focal_px * baseline_m)
        model = scale_aligner.fit(pairs, estimator=estimator)
        return AlignResponse(**model.model_dump(), correspondence_count=len(pairs))
    except Exception as e:
        raise _http_error(e, "align disparity") from e
    finally:
        shutil.rmtree(temp_dir, ignore_errors=True)


@router.post("/evaluate", response_model=EvaluateResponse)
async def evaluate_depth(
    prediction: UploadFile = File(..., description="Predicted depth PFM"),
    ground_truth: UploadFile = File(..., description="Ground-truth depth PFM"),
    mode: str = Form("pooled"),
    bpr_threshold: float = Form(0.25),
):
    """Evaluate a predicted depth map against ground truth."""
    temp_dir = tempfile.mkdtemp()
    try:
        evaluator = DepthEvaluator(PipelineConfig(metrics_mode=mode, bpr_threshold=bpr_threshold))
        pred = read_depth_pfm(_save_upload(prediction, temp_dir, "prediction.pfm"))
        gt = read_depth_pfm(_save_upload(ground_truth, temp_dir, "ground_truth.pfm"))
        return EvaluateResponse(report=evaluator.evaluate(pred, gt))
    except Exception as e:
        raise _http_error(e, "evaluate depth") from e
    finally:
        shutil.rmtree(temp_dir, ignore_errors=True)


@router.post("/virtual-depth", response_model=VirtualDepthResponse)
async def convert_virtual_depth(request: VirtualDepthRequest):
    """Convert virtual depths to metric depths with the thin-lens model."""
    try:
        config = PipelineConfig(
            focal_length_m=request.focal_length_m,
            mla_distance_m=request.mla_distance_m,
            mla_sensor_spacing_m=request.mla_sensor_spacing_m,
        )
        depths = virtual_to_metric(request.virtual_depths, config)
        return VirtualDepthResponse(metric_depths=[float(z) for z in depths])
    except Exception as e:
        raise _http_error(e, "convert virtual depth") from e
