"""Central scheduler: owns the species tree and the job journal, leases jobs to pulling workers.

All mutations go through one lock, so the HTTP layer may call in from many
threads. After every mutation ``jobs.json`` (the journal) and then
``tree.json`` are rewritten by atomic rename. The journal is therefore never
behind the tree, and on start-up any node the journal knows better about is
repaired from it, so a crash between the two writes loses nothing.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .. import phylogeny as phy
from ..phylogeny import EvolutionState, NodeStatus, ReproductionPlan, SelectionConfig
from ..schedules import PURE_RL, TransitionSchedule
from ..store import atomic_write
from .jobs import JobResult, JobState, Lease, TrainJob

log = logging.getLogger(__name__)


class SchedulerError(RuntimeError):
    code = "error"


class UnknownJob(SchedulerError):
    code = "unknown-job"


class JobNotLeased(SchedulerError):
    code = "not-leased"


class StaleLease(SchedulerError):
    code = "stale-lease"


class LeaseRejected(SchedulerError):
    code = "lease-rejected"


@dataclass
class SchedulerConfig:
    root_terrains: tuple[str, ...] = ("flat", "ice")
    max_children: int = 1
    root_iterations: int = 1000
    child_iterations: int = 1000
    child_schedule: TransitionSchedule = field(default_factory=lambda: TransitionSchedule.geometric(0.95))
    lease_duration: float = 1800.0
    max_attempts: int = 3
    seed: int = 0
    env: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "root_terrains": list(self.root_terrains),
            "max_children": self.max_children,
            "root_iterations": self.root_iterations,
            "child_iterations": self.child_iterations,
            "child_schedule": self.child_schedule.to_dict(),
            "lease_duration": self.lease_duration,
            "max_attempts": self.max_attempts,
            "seed": self.seed,
            "env": self.env,
            "trainer": self.trainer,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "SchedulerConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchedulerError(f"unknown scheduler config keys {sorted(unknown)}")
        if "root_terrains" in d:
            d["root_terrains"] = tuple(d["root_terrains"])
        if "child_schedule" in d:
            d["child_schedule"] = TransitionSchedule.from_dict(d["child_schedule"])
        return cls(**d)


_NODE_STATUS = {
    JobState.QUEUED: NodeStatus.PENDING,
    JobState.LEASED: NodeStatus.TRAINING,
    JobState.DONE: NodeStatus.DONE,
    JobState.FAILED: NodeStatus.FAILED,
}


def _id_counter(node_id: str) -> int:
    parts = node_id.split("-")
    return int(parts[1]) if len(parts) == 3 and parts[1].isdigit() else 0


@dataclass
class WorkerInfo:
    worker_id: str
    last_heartbeat: float
    current_job: str | None = None


class Scheduler:
    def __init__(self, config: SchedulerConfig | None = None, state_dir: str | Path | None = None,
                 clock: Callable[[], float] = time.time):
        self.config = config or SchedulerConfig()
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.clock = clock
        self._lock = threading.RLock()
        self.tree = EvolutionState()
        self.jobs: dict[str, TrainJob] = {}
        self.workers: dict[str, WorkerInfo] = {}
        if self.state_dir is not None:
            self._load()

    # -- persistence -----------------------------------------------------------

    @property
    def tree_path(self) -> Path:
        return self.state_dir / "tree.json"

    @property
    def jobs_path(self) -> Path:
        return self.state_dir / "jobs.json"

    def _load(self) -> None:
        if self.tree_path.exists():
            self.tree = phy.load_tree(json.loads(self.tree_path.read_text()))
        if self.jobs_path.exists():
            doc = json.loads(self.jobs_path.read_text())
            self.jobs = {d["job_id"]: TrainJob.from_dict(d) for d in doc["jobs"]}
        if self._reconcile():
            self._persist()

    def _reconcile(self) -> bool:
        """Bring tree nodes in line with the journal. Returns True if anything changed."""
        changed = False
        # recreate nodes created after the last tree write, parents before children
        for job in sorted(self.jobs.values(), key=lambda j: _id_counter(j.child_id or "")):
            if not job.child_id:
                continue
            node = self.tree.nodes.get(job.child_id)
            if node is None:
                node = phy.SpeciesNode(job.child_id, list(job.plan.parent_ids), frozenset(job.plan.target_terrains))
                self.tree.nodes[job.child_id] = node
                self.tree.generation_counter = max(self.tree.generation_counter, _id_counter(job.child_id))
                changed = True
            want = _NODE_STATUS[job.state]
            if node.status is not want:
                node.status = want
                changed = True
            if job.state is JobState.DONE and job.result is not None and node.checkpoint_ref != \
                    job.result.child_checkpoint_ref:
                node.scores = dict(job.result.scores)
                node.checkpoint_ref = job.result.child_checkpoint_ref
                changed = True
        if changed:
            violations = phy.validate_dag(self.tree)
            if violations:
                raise phy.TreeValidationError(violations)
        return changed

    def _persist(self) -> None:
        if self.state_dir is None:
            return
        doc = {"version": 1, "jobs": [j.to_dict() for j in self.jobs.values()]}
        atomic_write(self.jobs_path, json.dumps(doc, indent=1).encode())
        atomic_write(self.tree_path, json.dumps(phy.save_tree(self.tree), indent=1).encode())

    # -- planning --------------------------------------------------------------

    def _new_job_id(self) -> str:
        return f"job-{len(self.jobs) + 1:04d}-{uuid.uuid4().hex[:8]}"

    def _queued(self) -> list[TrainJob]:
        return [j for j in self.jobs.values() if j.state is JobState.QUEUED]

    def _children(self) -> list[phy.SpeciesNode]:
        return [n for n in self.tree.nodes.values() if n.parent_ids and n.status is not NodeStatus.FAILED]

    def _enqueue(self, plan: ReproductionPlan, expert_refs: dict[str, str], child_id: str | None) -> TrainJob:
        job = TrainJob(self._new_job_id(), plan, expert_refs, child_id,
                       env_config=dict(self.config.env), trainer_config=dict(self.config.trainer))
        self.jobs[job.job_id] = job
        return job

    def _refill(self) -> bool:
        """Add evolution jobs when the queue is dry. Returns True if anything was added."""
        cfg = self.config
        if not self.tree.nodes:
            for k, terrain in enumerate(cfg.root_terrains):
                plan = ReproductionPlan((), frozenset([terrain]), PURE_RL, cfg.seed + k, cfg.root_iterations)
                child = phy.add_species(self.tree, [], [terrain])
                self._enqueue(plan, {}, child)
            return True
        if any(j.child_id for j in self._queued()) or len(self._children()) >= cfg.max_children:
            return False
        plan = phy.select_reproduction(
            self.tree, SelectionConfig(cfg.child_schedule, cfg.child_iterations, cfg.seed))
        if plan is None:
            return False
        experts = {}
        for terrain in sorted(plan.target_terrains):
            owners = [self.tree.nodes[p] for p in plan.parent_ids if terrain in self.tree.nodes[p].terrain_set]
            best = max(owners, key=lambda n: (n.scores.get(terrain, 0.0), n.id))
            experts[terrain] = best.checkpoint_ref
        child = phy.add_species(self.tree, list(plan.parent_ids), plan.target_terrains)
        self._enqueue(plan, experts, child)
        return True

    @property
    def finished(self) -> bool:
        """Generation budget met and nothing left in flight."""
        with self._lock:
            in_flight = any(j.state in (JobState.QUEUED, JobState.LEASED) for j in self.jobs.values())
            if in_flight or not self.tree.nodes:
                return False
            done_children = [n for n in self._children() if n.status is NodeStatus.DONE]
            if len(done_children) >= self.config.max_children:
                return True
            return phy.select_reproduction(
                self.tree, SelectionConfig(self.config.child_schedule, 1, 0)) is None

    # -- worker protocol -----------------------------------------------------------

    def _set_node(self, job: TrainJob, status: NodeStatus) -> None:
        if job.child_id and job.child_id in self.tree.nodes:
            self.tree.nodes[job.child_id].status = status

    def next_job(self, worker_id: str) -> TrainJob | None:
        with self._lock:
            now = self.clock()
            requeued = self._requeue_expired(now)
            info = self.workers.setdefault(worker_id, WorkerInfo(worker_id, now))
            info.last_heartbeat = now
            for job in self.jobs.values():
                if job.state is JobState.LEASED and job.lease.worker_id == worker_id:
                    info.current_job = job.job_id
                    return job
            queued = self._queued()
            if not queued and self._refill():
                queued = self._queued()
            if not queued:
                info.current_job = None
                if requeued:
                    self._persist()
                return None
            job = queued[0]
            job.state = JobState.LEASED
            job.lease = Lease(worker_id, now + self.config.lease_duration)
            self._set_node(job, NodeStatus.TRAINING)
            info.current_job = job.job_id
            self._persist()
            return job

    def heartbeat(self, worker_id: str, job_id: str) -> float:
        with self._lock:
            now = self.clock()
            job = self.jobs.get(job_id)
            if job is None or job.state is not JobState.LEASED or job.lease.worker_id != worker_id \
                    or job.lease.expiry < now:
                raise LeaseRejected(f"{worker_id} holds no live lease on {job_id}")
            job.lease.expiry = now + self.config.lease_duration
            info = self.workers.setdefault(worker_id, WorkerInfo(worker_id, now))
            info.last_heartbeat = now
            info.current_job = job_id
            self._persist()
            return job.lease.expiry

    def complete_job(self, job_id: str, result: JobResult) -> str:
        """Attach a result. Returns "ok" or "already-done" (idempotent repeat)."""
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None:
                raise UnknownJob(job_id)
            if job.state is JobState.DONE:
                prev = job.result
                if prev is not None and prev.attempt == result.attempt and prev.worker_id == result.worker_id:
                    return "already-done"
                raise StaleLease(f"{job_id} already completed by attempt {prev.attempt if prev else '?'}")
            if result.attempt != job.attempt:
                raise StaleLease(f"{job_id}: result from attempt {result.attempt}, current is {job.attempt}")
            if job.state is not JobState.LEASED:
                raise JobNotLeased(f"{job_id} is {job.state.value}")
            if job.lease.worker_id != result.worker_id:
                raise StaleLease(f"{job_id} is leased to {job.lease.worker_id}, not {result.worker_id}")
            if job.child_id and not result.scores:
                raise SchedulerError("a successful result must carry scores")
            job.state, job.lease, job.result = JobState.DONE, None, result
            if job.child_id:
                node = self.tree.nodes[job.child_id]
                node.status = NodeStatus.DONE
                node.scores = dict(result.scores)
                node.checkpoint_ref = result.child_checkpoint_ref
            info = self.workers.get(result.worker_id)
            if info is not None and info.current_job == job_id:
                info.current_job = None
            self._persist()
            return "ok"

    def fail_job(self, job_id: str, worker_id: str, attempt: int) -> None:
        """Worker-reported failure: counts as a spent attempt."""
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None:
                raise UnknownJob(job_id)
            if job.state is not JobState.LEASED or job.attempt != attempt or job.lease.worker_id != worker_id:
                raise StaleLease(f"{job_id}: no matching lease")
            self._retry_or_fail(job)
            self._persist()

    def _retry_or_fail(self, job: TrainJob) -> None:
        job.lease = None
        if job.attempt >= self.config.max_attempts:
            job.state = JobState.FAILED
            self._set_node(job, NodeStatus.FAILED)
        else:
            job.attempt += 1
            job.state = JobState.QUEUED
            self._set_node(job, NodeStatus.PENDING)

    def _requeue_expired(self, now: float) -> int:
        count = 0
        for job in self.jobs.values():
            if job.state is JobState.LEASED and job.lease.expiry < now:
                self._retry_or_fail(job)
                count += 1
        return count

    def requeue_expired(self, now: float | None = None) -> int:
        with self._lock:
            n = self._requeue_expired(self.clock() if now is None else now)
            if n:
                self._persist()
            return n

    # -- ad-hoc jobs (sweeps) ------------------------------------------------------

    def submit_job(self, plan: ReproductionPlan, expert_refs: dict[str, str], env: dict | None = None,
                   trainer: dict | None = None) -> TrainJob:
        with self._lock:
            job = TrainJob(self._new_job_id(), plan, dict(expert_refs), None,
                           env_config=dict(self.config.env if env is None else env),
                           trainer_config=dict(self.config.trainer if trainer is None else trainer))
            self.jobs[job.job_id] = job
            self._persist()
            return job

    def get_job(self, job_id: str) -> TrainJob:
        with self._lock:
            if job_id not in self.jobs:
                raise UnknownJob(job_id)
            return self.jobs[job_id]

    # -- read side -------------------------------------------------------------

    def tree_document(self) -> dict:
        with self._lock:
            return phy.save_tree(self.tree)

    def snapshot_status(self) -> dict:
        with self._lock:
            counts = {s.value: 0 for s in JobState}
            for j in self.jobs.values():
                counts[j.state.value] += 1
            return {
                "version": 1,
                "queue_depth": counts["queued"],
                "jobs": counts,
                "leases": {j.job_id: {"worker_id": j.lease.worker_id, "expiry": j.lease.expiry,
                                      "attempt": j.attempt}
                           for j in self.jobs.values() if j.state is JobState.LEASED},
                "frontier": {t: {"score": s, "node_id": n} for t, (s, n) in phy.frontier_scores(self.tree).items()},
                "generation_counter": self.tree.generation_counter,
                "workers": {w.worker_id: {"last_heartbeat": w.last_heartbeat, "current_job": w.current_job}
                            for w in self.workers.values()},
                "finished": self.finished,
            }
