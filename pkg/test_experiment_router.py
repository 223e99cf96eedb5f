import os
import sys

from fastapi import FastAPI
from fastapi.testclient import TestClient

# Add the project root to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from api.experiment_router import router

FLAT_CIRCLE = {
    "manifold": {"kind": "circle", "circumference": 4.0},
    "connection": {"type": "flat_u1", "periods": [0.3]},
    "m": 64,
    "samples": 300,
    "transport": "exact-u1",
    "bootstrap": 50,
}


class TestExperimentRouter:
    """HTTP surface of the experiment runners"""

    def setup_method(self):
        app = FastAPI()
        app.include_router(router)
        self.client = TestClient(app)

    def test_health(self):
        response = self.client.get("/experiments/health")
        assert response.status_code == 200
        body = response.json()
        assert body["status"] == "ok"
        assert "bs-detect" in body["subcommands"]
        assert "selftest" in body["subcommands"]

    def test_dist_returns_report_and_measure(self):
        response = self.client.post("/experiments/dist", json={"config": FLAT_CIRCLE, "seed": 42, "workers": 1})
        assert response.status_code == 200
        body = response.json()
        assert body["report"]["subcommand"] == "dist"
        assert body["report"]["seed"] == 42
        assert body["report"]["files"] == []
        assert body["measure"]["group"] == "U1"
        assert abs(sum(atom["weight"] for atom in body["measure"]["atoms"]) - 1.0) < 1e-12

    def test_unknown_subcommand(self):
        response = self.client.post("/experiments/plot", json={"config": FLAT_CIRCLE, "seed": 1})
        assert response.status_code == 404

    def test_missing_seed_is_a_bad_request(self):
        response = self.client.post("/experiments/dist", json={"config": FLAT_CIRCLE})
        assert response.status_code == 400
        assert "ConfigError" in response.json()["detail"]

    def test_invalid_config_is_rejected(self):
        response = self.client.post("/experiments/dist", json={"config": dict(FLAT_CIRCLE, m=48), "seed": 1})
        assert response.status_code == 422

    def test_bs_detect_has_no_measure(self):
        config = {
            "manifold": {"kind": "flat_torus", "basis": [[1.0, 0.0], [0.0, 1.0]]},
            "connection": {"type": "flat_u1", "periods": [0.5, 0.0]},
        }
        response = self.client.post("/experiments/bs-detect", json={"config": config, "seed": 1})
        assert response.status_code == 200
        body = response.json()
        assert body["report"]["verdict"] == "FAIL"
        assert "measure" not in body
