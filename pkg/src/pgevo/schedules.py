"""BC-weight schedules: how fast imitation hands over to reinforcement learning."""

from __future__ import annotations

import math
from dataclasses import dataclass

TRANSITION_THRESHOLD = 0.01
NEVER = -1  # transition_step sentinel for schedules that never drop below the threshold

FORMS = ("constant", "geometric", "step", "linear", "geometric_hold")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionSchedule:
    form: str
    w: float | None = None          # constant
    lam: float | None = None        # geometric, geometric_hold
    i_switch: int | None = None     # step
    i_end: int | None = None        # linear
    i_hold: int | None = None       # geometric_hold

    def __post_init__(self) -> None:
        need = {
            "constant": ("w",),
            "geometric": ("lam",),
            "step": ("i_switch",),
            "linear": ("i_end",),
            "geometric_hold": ("lam", "i_hold"),
        }
        if self.form not in need:
            raise ScheduleError(f"unknown schedule form {self.form!r}")
        for name in need[self.form]:
            if getattr(self, name) is None:
                raise ScheduleError(f"{self.form} schedule requires {name}")
        if self.w is not None and not 0.0 <= self.w <= 1.0:
            raise ScheduleError("constant weight must lie in [0, 1]")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ScheduleError("decay rate must lie in [0, 1]")
        if self.i_end is not None and self.i_end <= 0:
            raise ScheduleError("linear schedule needs i_end > 0")
        for name in ("i_switch", "i_hold"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ScheduleError(f"{name} must be >= 0")

    @classmethod
    def constant(cls, w: float) -> "TransitionSchedule":
        return cls("constant", w=float(w))

    @classmethod
    def geometric(cls, lam: float) -> "TransitionSchedule":
        return cls("geometric", lam=float(lam))

    @classmethod
    def step(cls, i_switch: int) -> "TransitionSchedule":
        return cls("step", i_switch=int(i_switch))

    @classmethod
    def linear(cls, i_end: int) -> "TransitionSchedule":
        return cls("linear", i_end=int(i_end))

    @classmethod
    def geometric_hold(cls, lam: float, i_hold: int) -> "TransitionSchedule":
        return cls("geometric_hold", lam=float(lam), i_hold=int(i_hold))

    @property
    def id(self) -> str:
        if self.form == "constant":
            return {1.0: "pure_bc", 0.0: "pure_rl"}.get(self.w, f"const_{self.w:g}")
        if self.form == "geometric":
            return f"geo_{self.lam:g}"
        if self.form == "step":
            return f"step_{self.i_switch}"
        if self.form == "linear":
            return f"linear_{self.i_end}"
        return f"geo_{self.lam:g}_hold_{self.i_hold}"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if getattr(self, k) is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionSchedule":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScheduleError(f"unknown schedule keys {sorted(unknown)}")
        return cls(**d)


PURE_BC = TransitionSchedule.constant(1.0)
PURE_RL = TransitionSchedule.constant(0.0)


def bc_weight(schedule: TransitionSchedule, i: int) -> float:
    """BC weight at (zero-based) training iteration ``i``."""
    if i < 0:
        raise ScheduleError("iteration index must be >= 0")
    f = schedule.form
    if f == "constant":
        return float(schedule.w)
    if f == "geometric":
        return float(schedule.lam ** i)
    if f == "step":
        return 1.0 if i < schedule.i_switch else 0.0
    if f == "linear":
        return max(0.0, 1.0 - i / schedule.i_end)
    return 1.0 if i < schedule.i_hold else float(schedule.lam ** (i - schedule.i_hold))


def transition_step(schedule: TransitionSchedule) -> int:
    """First iteration whose BC weight is below 0.01, or NEVER."""
    f = schedule.form
    if f == "constant":
        return 0 if schedule.w < TRANSITION_THRESHOLD else NEVER
    if f == "step":
        return schedule.i_switch
    if f in ("geometric", "geometric_hold"):
        lam = schedule.lam
        if lam >= 1.0:
            return NEVER
        if lam == 0.0:
            first = 1
        else:
            first = max(0, math.floor(math.log(TRANSITION_THRESHOLD) / math.log(lam)) - 1)
        offset = schedule.i_hold if f == "geometric_hold" else 0
        i = first + offset
    else:
        i = max(0, math.floor((1.0 - TRANSITION_THRESHOLD) * schedule.i_end) - 1)
    # closed forms land within a step of the answer; settle on the exact float comparison
    while i > 0 and bc_weight(schedule, i - 1) < TRANSITION_THRESHOLD:
        i -= 1
    while bc_weight(schedule, i) >= TRANSITION_THRESHOLD:
        i += 1
    return i
