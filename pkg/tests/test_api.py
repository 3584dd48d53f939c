import numpy as np
import pytest
from fastapi.testclient import TestClient
from unittest.mock import patch

from app.core.config import settings
from app.main import app
from app.models.alignment import LinearScaleModel
from app.models.image import DepthMap, DisparityMap
from app.models.stack import SparseDepthMap
from app.services.alignment import ScaleAligner
from app.services.image_io import write_depth_pfm, write_disparity_pfm, write_sparse_csv


# Create test client
client = TestClient(app)

FOCAL_PX = 100.0
BASELINE_M = 0.5


def write_alignment_inputs(tmp_path, m=2.0, b=1.0):
    """Relative disparity u + 1 and sparse depths whose metric disparity is m * x + b."""
    values = np.tile(np.arange(1.0, 31.0), (20, 1))
    write_disparity_pfm(tmp_path / "rel.pfm", DisparityMap(values=values, valid=np.ones_like(values, dtype=bool)))

    u = np.arange(10) * 3.0
    x = u + 1.0
    sparse = SparseDepthMap(
        coords=np.stack([np.arange(10), np.zeros(10, dtype=int)], axis=1),
        centroids=np.stack([u, np.full(10, 5.0)], axis=1),
        depths=FOCAL_PX * BASELINE_M / (m * x + b),
    )
    write_sparse_csv(tmp_path / "sparse.csv", sparse)
    return tmp_path / "rel.pfm", tmp_path / "sparse.csv"


def post_alignment(disparity_path, sparse_path, **form):
    data = {"focal_px": FOCAL_PX, "baseline_m": BASELINE_M, **form}
    with open(disparity_path, "rb") as d, open(sparse_path, "rb") as s:
        return client.post(
            "/api/v1/align",
            files={
                "disparity": ("rel.pfm", d, "application/octet-stream"),
                "sparse": ("sparse.csv", s, "text/csv"),
            },
            data=data,
        )


def test_health_check(monkeypatch):
    """Test the health check endpoint."""
    monkeypatch.setattr(settings, "OUTPUT_DIR", None)
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "output_dir": None}


def test_startup_creates_output_dir(tmp_path, monkeypatch):
    """Test that the server prepares the configured run directory."""
    runs = tmp_path / "runs" / "latest"
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(runs))
    with TestClient(app) as started:
        assert runs.is_dir()
        body = started.get("/health").json()
    assert body == {"status": "healthy", "output_dir": str(runs)}


def test_health_reports_unusable_output_dir(tmp_path, monkeypatch):
    """Test that an OUTPUT_DIR that is a file degrades the health status."""
    blocker = tmp_path / "runs"
    blocker.write_text("not a directory")
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(blocker))
    with TestClient(app) as started:
        assert started.get("/health").json()["status"] == "degraded"


def test_root():
    """Test the root endpoint."""
    response = client.get("/")
    assert response.status_code == 200
    assert "message" in response.json()
    assert "docs_url" in response.json()


def test_align_endpoint(tmp_path):
    """Test fitting the scale model from uploaded files."""
    response = post_alignment(*write_alignment_inputs(tmp_path))
    assert response.status_code == 200
    body = response.json()
    assert body["m"] == pytest.approx(2.0, abs=1e-6)
    assert body["b"] == pytest.approx(1.0, abs=1e-6)
    assert body["estimator"] == "theil-sen"
    assert body["correspondence_count"] == 10


@patch.object(ScaleAligner, "fit")
def test_align_endpoint_forwards_estimator(mock_fit, tmp_path):
    """Test the align endpoint with a mocked estimator."""
    mock_fit.return_value = LinearScaleModel(m=3.0, b=-1.0, estimator="ransac", inlier_count=7)

    response = post_alignment(*write_alignment_inputs(tmp_path), estimator="ransac")

    assert response.status_code == 200
    assert response.json()["m"] == 3.0
    assert response.json()["inlier_count"] == 7
    mock_fit.assert_called_once()
    assert mock_fit.call_args.kwargs["estimator"] == "ransac"


def test_align_endpoint_rejects_constant_disparity(tmp_path):
    """Test that a degenerate fit is reported as a bad request."""
    disparity, sparse = write_alignment_inputs(tmp_path)
    flat = np.full((20, 30), 4.0)
    write_disparity_pfm(disparity, DisparityMap(values=flat, valid=np.ones_like(flat, dtype=bool)))

    response = post_alignment(disparity, sparse)
    assert response.status_code == 400


def test_align_endpoint_rejects_bad_files(tmp_path):
    """Test that unreadable uploads are reported as unprocessable."""
    disparity, sparse = write_alignment_inputs(tmp_path)
    (tmp_path / "junk.pfm").write_bytes(b"not a pfm")
    response = post_alignment(tmp_path / "junk.pfm", sparse)
    assert response.status_code == 422


def test_evaluate_endpoint(tmp_path):
    """Test evaluating uploaded depth maps."""
    write_depth_pfm(tmp_path / "pred.pfm", DepthMap.from_array(np.array([[2.0, 4.0]])))
    write_depth_pfm(tmp_path / "gt.pfm", DepthMap.from_array(np.array([[1.0, 4.0]])))

    with open(tmp_path / "pred.pfm", "rb") as p, open(tmp_path / "gt.pfm", "rb") as g:
        response = client.post(
            "/api/v1/evaluate",
            files={"prediction": ("pred.pfm", p), "ground_truth": ("gt.pfm", g)},
        )

    assert response.status_code == 200
    report = response.json()["report"]
    assert report["mse"] == pytest.approx(5000.0, rel=1e-6)
    assert report["mare"] == pytest.approx(50.0, rel=1e-6)
    assert report["valid_count"] == 2
    assert response.json()["success"] is True


def test_evaluate_endpoint_shape_mismatch(tmp_path):
    """Test that maps of different size are rejected."""
    write_depth_pfm(tmp_path / "pred.pfm", DepthMap.from_array(np.ones((2, 3))))
    write_depth_pfm(tmp_path / "gt.pfm", DepthMap.from_array(np.ones((3, 2))))

    with open(tmp_path / "pred.pfm", "rb") as p, open(tmp_path / "gt.pfm", "rb") as g:
        response = client.post(
            "/api/v1/evaluate",
            files={"prediction": ("pred.pfm", p), "ground_truth": ("gt.pfm", g)},
        )
    assert response.status_code == 422


def test_virtual_depth_endpoint():
    """Test the thin-lens conversion endpoint."""
    response = client.post("/api/v1/virtual-depth", json={"virtual_depths": [-40.0, 0.0]})
    assert response.status_code == 200
    depths = response.json()["metric_depths"]
    assert depths[0] == pytest.approx(0.07, rel=1e-9)
    # a_img = 0.05 = 0.035 * z / (z - 0.035)
    assert depths[1] == pytest.approx(0.035 * 0.05 / 0.015, rel=1e-9)


def test_virtual_depth_endpoint_errors():
    """Test the focal plane singularity and request validation."""
    response = client.post("/api/v1/virtual-depth", json={"virtual_depths": [30.0]})
    assert response.status_code == 422

    response = client.post("/api/v1/virtual-depth", json={"virtual_depths": []})
    assert response.status_code == 422
