"""Central scheduler, its HTTP front end, and the pulling worker."""

from .jobs import JobResult, JobState, TrainJob
from .scheduler import Scheduler, SchedulerConfig

__all__ = ["JobResult", "JobState", "Scheduler", "SchedulerConfig", "TrainJob"]
