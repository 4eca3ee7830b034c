"""Worker process: pull a job, train the child, upload artifacts, report back."""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

from ..environment import EnvConfig
from ..store import CheckpointStore
from ..trainer import TrainerConfig, train_child
from .jobs import JobResult, TrainJob

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    def __init__(self, status: int, body: dict):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body}")


class SchedulerClient:
    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict | None]:
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(self.address + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
                return resp.status, (json.loads(raw) if raw else None)
        except urllib.error.HTTPError as e:
            raw = e.read()
            raise ClientError(e.code, json.loads(raw) if raw else {}) from None

    def next_job(self, worker_id: str) -> dict | None:
        status, body = self._call("POST", f"/workers/{worker_id}/next-job", {})
        return None if status == 204 else body

    def complete(self, result: JobResult) -> str:
        return self._call("POST", f"/jobs/{result.job_id}/complete", result.to_dict())[1]["status"]

    def heartbeat(self, worker_id: str, job_id: str) -> float:
        return self._call("POST", f"/jobs/{job_id}/heartbeat", {"worker_id": worker_id})[1]["expiry"]

    def fail(self, worker_id: str, job_id: str, attempt: int) -> None:
        self._call("POST", f"/jobs/{job_id}/fail", {"worker_id": worker_id, "attempt": attempt})

    def submit(self, job_doc: dict) -> str:
        return self._call("POST", "/jobs", job_doc)[1]["job_id"]

    def job(self, job_id: str) -> dict:
        return self._call("GET", f"/jobs/{job_id}")[1]

    def tree(self) -> dict:
        return self._call("GET", "/tree")[1]

    def status(self) -> dict:
        return self._call("GET", "/status")[1]


def execute_job(job: TrainJob, store: CheckpointStore, worker_id: str, progress=None) -> JobResult:
    """Run one job locally and upload its checkpoint and metrics."""
    started = time.monotonic()
    experts = {t: store.load_params(ref) for t, ref in job.expert_refs.items()}
    trainer_cfg = TrainerConfig.from_dict({**job.trainer_config, "iterations": job.plan.iteration_budget})
    report = train_child(sorted(job.plan.target_terrains), job.plan.schedule, job.plan.seed, experts,
                         trainer_cfg, EnvConfig.from_dict(job.env_config), progress=progress)
    tag = f"{job.job_id}-a{job.attempt}"
    ckpt = store.save_params(f"checkpoints/{tag}.pgck", report.params)
    metrics = store.write_text(f"metrics/{tag}.csv", report.metrics_csv())
    return JobResult(job.job_id, job.attempt, worker_id, ckpt, report.scores, metrics,
                     time.monotonic() - started)


@dataclass
class WorkerConfig:
    idle_timeout: float = 60.0
    poll_interval: float = 2.0
    heartbeat_interval: float | None = None   # default: a third of the lease
    worker_id: str | None = None


def _heartbeat_loop(client: SchedulerClient, worker_id: str, job_id: str, interval: float,
                    stop: threading.Event) -> None:
    while not stop.wait(interval):
        try:
            client.heartbeat(worker_id, job_id)
        except (ClientError, OSError) as e:
            log.warning("heartbeat for %s failed: %s", job_id, e)


def run_worker(address: str, store: CheckpointStore, config: WorkerConfig | None = None) -> int:
    """Pull-train-report loop; returns the number of completed jobs once idle for ``idle_timeout``."""
    cfg = config or WorkerConfig()
    worker_id = cfg.worker_id or f"{socket.gethostname()}-{os.getpid()}"
    client = SchedulerClient(address)
    completed = 0
    idle_since = time.monotonic()
    while True:
        try:
            doc = client.next_job(worker_id)
        except (ClientError, OSError) as e:
            log.warning("scheduler unreachable: %s", e)
            doc = None
        if doc is None:
            if time.monotonic() - idle_since >= cfg.idle_timeout:
                return completed
            time.sleep(cfg.poll_interval)
            continue
        job = TrainJob.from_dict(doc)
        log.info("%s: training %s (attempt %d)", worker_id, job.job_id, job.attempt)
        interval = cfg.heartbeat_interval or float(doc.get("lease_duration", 1800.0)) / 3.0
        stop = threading.Event()
        beat = threading.Thread(target=_heartbeat_loop, args=(client, worker_id, job.job_id, interval, stop),
                                daemon=True)
        beat.start()
        try:
            result = execute_job(job, store, worker_id)
        except Exception:
            log.exception("job %s failed", job.job_id)
            stop.set()
            try:
                client.fail(worker_id, job.job_id, job.attempt)
            except (ClientError, OSError) as e:
                log.warning("could not report failure: %s", e)
            idle_since = time.monotonic()
            continue
        finally:
            stop.set()
        try:
            status = client.complete(result)
            log.info("%s: %s -> %s", worker_id, job.job_id, status)
            completed += 1
        except ClientError as e:
            log.warning("result for %s rejected: %s", job.job_id, e)
        idle_since = time.monotonic()
