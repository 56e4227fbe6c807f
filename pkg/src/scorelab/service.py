"""HTTP front end for the experiment runner.

Start with ``uvicorn scorelab.service:app``.  Errors map to the same codes as
the CLI: configuration problems return 422 with ``exit_code`` 2, numerical or
certification failures return 500 with ``exit_code`` 3.
"""

from typing import List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import __version__, lab
from .cli import exit_code_for
from .errors import ConfigError, ScoreLabError

app = FastAPI(title="scorelab", version=__version__)


class ValidateRequest(BaseModel):
    config: dict


class ValidateResponse(BaseModel):
    valid: bool
    experiment: Optional[str] = None
    config_hash: Optional[str] = None
    error: Optional[str] = None


class RunRequest(BaseModel):
    config: dict
    seed_override: Optional[int] = None
    out_dir: Optional[str] = None
    parallel_seeds: bool = False


class Check(BaseModel):
    seed: str
    check: str
    passed: bool
    detail: str


class RunResponse(BaseModel):
    exit_code: int
    out_dir: str
    config_hash: str
    wall_time_s: float
    checks: List[Check]


class ReportRequest(BaseModel):
    results_dir: str


class ReportResponse(BaseModel):
    summary: List[dict]
    checks: List[dict]


def _raise(exc):
    status = 422 if isinstance(exc, ConfigError) else 500
    raise HTTPException(status, detail={"exit_code": exit_code_for(exc), "message": str(exc)})


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/validate", response_model=ValidateResponse)
def validate(req: ValidateRequest):
    try:
        cfg = lab.parse_config(req.config)
    except ConfigError as exc:
        return ValidateResponse(valid=False, error=str(exc))
    return ValidateResponse(valid=True, experiment=cfg.experiment, config_hash=cfg.config_hash())


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest):
    try:
        cfg = lab.parse_config(req.config)
        res = lab.run(cfg, req.out_dir, req.seed_override, req.parallel_seeds)
    except ScoreLabError as exc:
        _raise(exc)
    checks = [Check(seed=str(c["seed"]), check=c["check"], passed=c["passed"], detail=c["detail"])
              for c in res.checks]
    return RunResponse(exit_code=res.status, out_dir=res.out_dir, config_hash=res.config_hash,
                       wall_time_s=res.wall_time, checks=checks)


@app.post("/report", response_model=ReportResponse)
def report(req: ReportRequest):
    try:
        summary, checks = lab.report(req.results_dir)
    except ScoreLabError as exc:
        _raise(exc)
    return ReportResponse(summary=summary, checks=checks)
