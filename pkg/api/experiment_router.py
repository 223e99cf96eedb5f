from fastapi import APIRouter, HTTPException
from typing import Any, Dict
import logging

from services.experiment_service import RUNNERS, load_settings, run_experiment
from services.selftest_service import run_selftest
from utils.errors import HolonomyError

from .models import ExperimentReport, ExperimentRequest
from .utils import dumps_json

import json

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])


@router.get("/health")
async def health() -> Dict[str, Any]:
    return {"status": "ok", "subcommands": list(RUNNERS) + ["selftest"]}


@router.post("/selftest", response_model=ExperimentReport)
async def selftest():
    try:
        return run_selftest().report
    except Exception as e:
        logger.error(f"Selftest error: {e}")
        raise HTTPException(status_code=500, detail=f"Selftest failed: {str(e)}")


@router.post("/{subcommand}")
async def run(subcommand: str, request: ExperimentRequest):
    """
    Run one experiment subcommand on a full config.

    Returns the report plus, for single-measure runs, the measure itself
    (same JSON layout as the files written by the CLI).
    """
    try:
        if subcommand not in RUNNERS:
            raise HTTPException(status_code=404, detail=f"Unknown subcommand '{subcommand}'")
        logger.info(f"Experiment request received: {subcommand} (seed={request.seed or request.config.seed})")
        outcome = run_experiment(subcommand, request.config, load_settings(), seed=request.seed,
                                 workers=request.workers, write_files=request.write_files)
        body: Dict[str, Any] = {"report": outcome.report.model_dump()}
        if "measure" in outcome.measures:
            body["measure"] = outcome.measures["measure"].to_dict()
        # numpy scalars go through the same encoder as the CLI files
        return json.loads(dumps_json(body))

    except HTTPException:
        # Re-raise HTTPExceptions as-is to preserve their status codes and details
        raise
    except HolonomyError as e:
        logger.error(f"Experiment {subcommand} rejected: {e}")
        raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")
    except Exception as e:
        logger.error(f"Experiment {subcommand} error: {e}")
        raise HTTPException(status_code=500, detail=f"Experiment failed: {str(e)}")
