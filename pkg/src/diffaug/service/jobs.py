"""In-process job registry with a single worker thread.

Training jobs run strictly one at a time (the training loop owns its state
and the numeric kernels already use the machine's cores); queued jobs wait.
"""

from __future__ import annotations

import itertools
import queue
import threading
import traceback
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional


@dataclass
class Job:
    job_id: str
    kind: str  # "run" | "sweep"
    state: str = "queued"
    step: int = 0
    total_steps: int = 0
    out_dir: str = ""
    best_proxy_fid: Optional[float] = None
    best_step: Optional[int] = None
    halted: bool = False
    error: Optional[str] = None
    rows: List[dict] = field(default_factory=list)


class JobManager:
    def __init__(self):
        self._jobs: Dict[str, Job] = {}
        self._queue: "queue.Queue" = queue.Queue()
        self._lock = threading.Lock()
        self._counter = itertools.count(1)
        self._worker = threading.Thread(target=self._loop, daemon=True)
        self._worker.start()

    def submit(self, kind: str, fn: Callable[[Job], None], total_steps: int = 0,
               out_dir: str = "") -> Job:
        with self._lock:
            job = Job(f"{kind}-{next(self._counter):06d}", kind,
                      total_steps=total_steps, out_dir=out_dir)
            self._jobs[job.job_id] = job
        self._queue.put((job, fn))
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def list_jobs(self) -> List[Job]:
        with self._lock:
            return list(self._jobs.values())

    def _loop(self) -> None:
        while True:
            job, fn = self._queue.get()
            job.state = "running"
            try:
                fn(job)
                job.state = "done"
            except Exception as e:  # surfaced through the status endpoint
                job.state = "failed"
                job.error = f"{type(e).__name__}: {e}"
                traceback.print_exc()
            finally:
                self._queue.task_done()

    def wait_idle(self, timeout: Optional[float] = None) -> None:
        """Testing hook: block until the queue drains."""
        if timeout is None:
            self._queue.join()
            return
        done = threading.Event()

        def _j():
            self._queue.join()
            done.set()

        threading.Thread(target=_j, daemon=True).start()
        done.wait(timeout)
