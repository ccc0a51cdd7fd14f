"""FastAPI service wrapping the experiment runner.

Training and sweep jobs run in a background worker; clients poll job status
and fetch artifacts (metrics CSV, sample grids, summaries). Interpolation is
synchronous (it only samples a checkpoint). Job outputs live under the
service workspace, `<workspace>/jobs/<job_id>/`.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse, Response

from .. import __version__
from ..config import ConfigError, apply_overrides, default_config_text, from_text
from ..service.jobs import Job, JobManager
from ..service.models import (
    ConfigTemplateResponse,
    HealthResponse,
    InterpolateRequest,
    InterpolateResponse,
    JobStatus,
    JobSubmitted,
    RunRequest,
    SweepRow,
    SweepStatus,
)


def _job_status(job: Job) -> JobStatus:
    return JobStatus(
        job_id=job.job_id, kind=job.kind, state=job.state, step=job.step,
        total_steps=job.total_steps, out_dir=job.out_dir,
        best_proxy_fid=job.best_proxy_fid, best_step=job.best_step,
        halted=job.halted, error=job.error)


def create_app(workspace: str = "runs/service") -> FastAPI:
    app = FastAPI(title="diffaug", version=__version__,
                  description="GAN training with differentiable augmentations")
    app.state.workspace = Path(workspace)
    app.state.jobs = JobManager()

    def parse_config(req: RunRequest, job_dir: Path):
        try:
            cfg = from_text(req.config_text)
            apply_overrides(cfg, req.overrides)
            cfg.out_dir = str(job_dir)
            cfg.validate()
        except ConfigError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        return cfg

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/config/template", response_model=ConfigTemplateResponse)
    def config_template():
        return ConfigTemplateResponse(config_text=default_config_text())

    @app.post("/runs", response_model=JobSubmitted, status_code=202)
    def submit_run(req: RunRequest):
        from ..runner import run_experiment

        manager: JobManager = app.state.jobs
        job_dir = app.state.workspace / "jobs"

        def execute(job: Job):
            cfg = from_text(req.config_text)
            apply_overrides(cfg, req.overrides)
            cfg.out_dir = str(job_dir / job.job_id)
            job.out_dir = cfg.out_dir
            result = run_experiment(cfg, progress_cb=lambda s, t: setattr(job, "step", s))
            job.best_proxy_fid = result.best_proxy_fid
            job.best_step = result.best_step
            job.halted = result.halted
            job.step = result.final_step

        # validate before queueing so bad configs fail fast with 422
        cfg = parse_config(req, job_dir / "pending")
        job = manager.submit("run", execute, total_steps=cfg.train.total_steps)
        return JobSubmitted(job_id=job.job_id)

    @app.post("/sweeps", response_model=JobSubmitted, status_code=202)
    def submit_sweep(req: RunRequest):
        from ..runner import run_sweep

        manager: JobManager = app.state.jobs
        job_dir = app.state.workspace / "jobs"

        cfg0 = parse_config(req, job_dir / "pending")
        if not cfg0.sweep_axis:
            raise HTTPException(status_code=422, detail="sweep requires sweep_axis")

        def execute(job: Job):
            cfg = from_text(req.config_text)
            apply_overrides(cfg, req.overrides)
            cfg.out_dir = str(job_dir / job.job_id)
            job.out_dir = cfg.out_dir
            result = run_sweep(cfg, progress_cb=lambda s, t: setattr(job, "step", s))
            job.rows = result.rows

        job = manager.submit("sweep", execute, total_steps=cfg0.train.total_steps)
        return JobSubmitted(job_id=job.job_id)

    def get_job(job_id: str) -> Job:
        job = app.state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job

    @app.get("/runs/{job_id}", response_model=JobStatus)
    def run_status(job_id: str):
        return _job_status(get_job(job_id))

    @app.get("/sweeps/{job_id}", response_model=SweepStatus)
    def sweep_status(job_id: str):
        job = get_job(job_id)
        status = SweepStatus(**_job_status(job).model_dump())
        status.rows = [SweepRow(**r) for r in job.rows]
        return status

    @app.get("/runs/{job_id}/metrics", response_class=PlainTextResponse)
    def run_metrics(job_id: str):
        job = get_job(job_id)
        path = Path(job.out_dir) / "metrics.csv"
        if not path.is_file():
            raise HTTPException(status_code=404, detail="metrics not written yet")
        return path.read_text()

    @app.get("/runs/{job_id}/summary", response_class=PlainTextResponse)
    def run_summary(job_id: str):
        job = get_job(job_id)
        path = Path(job.out_dir) / "summary.txt"
        if not path.is_file():
            raise HTTPException(status_code=404, detail="summary not written yet")
        return path.read_text()

    @app.get("/runs/{job_id}/grids/{step}")
    def run_grid(job_id: str, step: int):
        job = get_job(job_id)
        path = Path(job.out_dir) / "grids" / f"step_{step:08d}.png"
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"no grid for step {step}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/interpolations", response_model=InterpolateResponse)
    def make_interpolation(req: InterpolateRequest):
        from ..runner import interpolate

        ckpt = Path(req.checkpoint)
        if not ckpt.is_file():
            raise HTTPException(status_code=404, detail=f"checkpoint not found: {ckpt}")
        out = app.state.workspace / "interpolations"
        try:
            files = interpolate(str(ckpt), req.pairs, req.steps, req.seed, out)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        return InterpolateResponse(files=files)

    return app
