"""Wire-level job documents exchanged between scheduler and workers."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..phylogeny import ReproductionPlan

JOB_VERSION = 1


class JobState(str, Enum):
    QUEUED = "queued"
    LEASED = "leased"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Lease:
    worker_id: str
    expiry: float


@dataclass
class JobResult:
    job_id: str
    attempt: int
    worker_id: str
    child_checkpoint_ref: str
    scores: dict[str, float]
    metrics_ref: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"version": JOB_VERSION, "job_id": self.job_id, "attempt": self.attempt,
                "worker_id": self.worker_id, "child_checkpoint_ref": self.child_checkpoint_ref,
                "scores": dict(self.scores), "metrics_ref": self.metrics_ref, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d: dict) -> "JobResult":
        return cls(str(d["job_id"]), int(d["attempt"]), str(d["worker_id"]), str(d["child_checkpoint_ref"]),
                   {str(k): float(v) for k, v in d["scores"].items()}, str(d.get("metrics_ref", "")),
                   float(d.get("wall_time", 0.0)))


@dataclass
class TrainJob:
    job_id: str
    plan: ReproductionPlan
    expert_refs: dict[str, str] = field(default_factory=dict)   # terrain -> parent checkpoint ref
    child_id: str | None = None                                 # tree node; None for ad-hoc jobs
    env_config: dict = field(default_factory=dict)
    trainer_config: dict = field(default_factory=dict)
    state: JobState = JobState.QUEUED
    lease: Lease | None = None
    attempt: int = 1
    result: JobResult | None = None

    @property
    def parent_checkpoint_refs(self) -> list[str]:
        return sorted(set(self.expert_refs.values()))

    def to_dict(self) -> dict:
        return {
            "version": JOB_VERSION,
            "job_id": self.job_id,
            "plan": self.plan.to_dict(),
            "parent_checkpoint_refs": self.parent_checkpoint_refs,
            "expert_refs": dict(self.expert_refs),
            "child_id": self.child_id,
            "env_config": self.env_config,
            "trainer_config": self.trainer_config,
            "state": self.state.value,
            "lease": None if self.lease is None else {"worker_id": self.lease.worker_id,
                                                      "expiry": self.lease.expiry},
            "attempt": self.attempt,
            "result": None if self.result is None else self.result.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainJob":
        lease = d.get("lease")
        result = d.get("result")
        return cls(
            job_id=str(d["job_id"]),
            plan=ReproductionPlan.from_dict(d["plan"]),
            expert_refs={str(k): str(v) for k, v in d.get("expert_refs", {}).items()},
            child_id=d.get("child_id"),
            env_config=dict(d.get("env_config") or {}),
            trainer_config=dict(d.get("trainer_config") or {}),
            state=JobState(d.get("state", "queued")),
            lease=None if lease is None else Lease(str(lease["worker_id"]), float(lease["expiry"])),
            attempt=int(d.get("attempt", 1)),
            result=None if result is None else JobResult.from_dict(result),
        )
