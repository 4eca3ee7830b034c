"""Experiment harness: BC->RL schedule sweeps, ranking, family comparison, curve export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .environment import EnvConfig
from .phylogeny import ReproductionPlan, load_tree
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .schedules import NEVER, PURE_BC, PURE_RL, TransitionSchedule, transition_step
from .store import CheckpointStore
from .trainer import TrainerConfig, evaluate, train_child

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.90, 0.93, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999)
DEFAULT_HOLDS = tuple(range(0, 500, 50))


class ExperimentError(RuntimeError):
    pass


def default_schedules() -> list[TransitionSchedule]:
    """The 80-schedule grid: geometric decay after a hold of pure BC."""
    return [TransitionSchedule.geometric_hold(lam, hold) for lam in DEFAULT_LAMBDAS for hold in DEFAULT_HOLDS]


@dataclass
class ParentSpec:
    name: str
    checkpoint: str
    terrains: tuple[str, ...]


@dataclass
class SweepSpec:
    parents: list[ParentSpec]
    seeds: list[int] = field(default_factory=lambda: [0])
    schedules: list[TransitionSchedule] = field(default_factory=default_schedules)
    baselines: list[TransitionSchedule] = field(default_factory=lambda: [PURE_BC, PURE_RL])
    iterations: int = 200
    trainer: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [s.id for s in self.all_schedules]
        if len(set(ids)) != len(ids):
            raise ExperimentError("schedule ids must be unique")
        if not 1 <= len(self.parents) <= 2:
            raise ExperimentError("a sweep needs one or two parents")

    @property
    def all_schedules(self) -> list[TransitionSchedule]:
        return list(self.schedules) + list(self.baselines)

    @property
    def terrains(self) -> list[str]:
        return sorted({t for p in self.parents for t in p.terrains})

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "SweepSpec":
        base_dir = base_dir or Path(".")
        parents = []
        tree = None
        for k, p in enumerate(d["parents"]):
            if "node_id" in p:
                if tree is None:
                    tree = load_tree(json.loads((base_dir / d["tree"]).read_text()))
                node = tree.nodes[p["node_id"]]
                store = CheckpointStore(d.get("store"))
                parents.append(ParentSpec(p.get("name", node.id), str(store.path(node.checkpoint_ref)),
                                          tuple(sorted(node.terrain_set))))
            else:
                path = Path(p["checkpoint"])
                if not path.is_absolute():
                    path = base_dir / path
                parents.append(ParentSpec(p.get("name", f"parent{k}"), str(path), tuple(p["terrains"])))
        kw = {}
        if d.get("schedules") is not None:
            kw["schedules"] = [TransitionSchedule.from_dict(s) for s in d["schedules"]]
        if d.get("baselines") is not None:
            kw["baselines"] = [TransitionSchedule.from_dict(s) for s in d["baselines"]]
        return cls(parents=parents, seeds=list(d.get("seeds", [0])), iterations=int(d.get("iterations", 200)),
                   trainer=dict(d.get("trainer") or {}), env=dict(d.get("env") or {}), **kw)


def expert_paths(parents: Sequence[ParentSpec]) -> dict[str, str]:
    experts: dict[str, str] = {}
    for p in parents:
        for t in p.terrains:
            experts.setdefault(t, p.checkpoint)
    return experts


def _run_one(args) -> dict:
    schedule, seed, terrains, experts, trainer, env, run_dir = args
    experts = {t: load_checkpoint(path)[0] for t, path in experts.items()}
    report = train_child(terrains, schedule, seed, experts, TrainerConfig.from_dict(trainer),
                         EnvConfig.from_dict(env))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.csv").write_text(report.metrics_csv())
    save_checkpoint(report.params, run_dir / "child.pgck")
    reward = report.series("reward_mean")
    return {"scores": report.scores, "reward_auc": float(np.sum(reward))}


SWEEP_BASE_COLUMNS = ["schedule_id", "form", "lambda", "i_hold", "seed", "transition_step", "union_score"]


def sweep_columns(terrains: Sequence[str]) -> list[str]:
    return SWEEP_BASE_COLUMNS + [f"score_{t}" for t in terrains] + ["reward_auc", "metrics_ref"]


def _row(schedule: TransitionSchedule, seed: int, terrains, scores, reward_auc, metrics_ref) -> dict:
    row = {
        "schedule_id": schedule.id,
        "form": schedule.form,
        "lambda": schedule.lam if schedule.lam is not None else (schedule.w if schedule.form == "constant" else ""),
        "i_hold": schedule.i_hold if schedule.i_hold is not None else "",
        "seed": seed,
        "transition_step": transition_step(schedule),
        "union_score": float(sum(scores[t] for t in terrains)),
        "reward_auc": reward_auc,
        "metrics_ref": metrics_ref,
    }
    row.update({f"score_{t}": float(scores[t]) for t in terrains})
    return row


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def run_sweep(spec: SweepSpec, out_dir: str | Path, jobs: int = 1, via_scheduler: str | None = None,
              store: CheckpointStore | None = None) -> list[dict]:
    """Train every (schedule, seed) child and write ``sweep.csv``; returns the rows."""
    out_dir = Path(out_dir)
    terrains = spec.terrains
    trainer = {**spec.trainer, "iterations": spec.iterations}
    experts = expert_paths(spec.parents)
    tasks = []
    for schedule in spec.all_schedules:
        for seed in spec.seeds:
            run_dir = out_dir / "runs" / f"{schedule.id}__s{seed}"
            tasks.append((schedule, seed, terrains, experts, trainer, spec.env, str(run_dir)))
    if via_scheduler:
        outputs = _sweep_via_scheduler(tasks, via_scheduler, store or CheckpointStore())
    elif jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_one, tasks))
    else:
        outputs = [_run_one(t) for t in tasks]
    rows = []
    for (schedule, seed, *_rest, run_dir), out in zip(tasks, outputs):
        ref = str(Path(run_dir).relative_to(out_dir) / "metrics.csv")
        rows.append(_row(schedule, seed, terrains, out["scores"], out["reward_auc"], ref))
    write_csv(out_dir / "sweep.csv", sweep_columns(terrains), rows)
    return rows


def _sweep_via_scheduler(tasks, address: str, store: CheckpointStore, poll: float = 2.0) -> list[dict]:
    from .orchestrator.worker import SchedulerClient

    client = SchedulerClient(address)
    uploaded: dict[str, str] = {}
    job_ids = []
    for schedule, seed, terrains, experts, trainer, env, run_dir in tasks:
        refs = {}
        for t, path in experts.items():
            if path not in uploaded:
                blob = Path(path).read_bytes()
                uploaded[path] = store.write_bytes(f"sweep-parents/{hashlib.sha256(blob).hexdigest()[:16]}.pgck", blob)
            refs[t] = uploaded[path]
        plan = ReproductionPlan(tuple(sorted(refs.values())), frozenset(terrains), schedule, seed,
                                trainer["iterations"])
        job_ids.append(client.submit({"plan": plan.to_dict(), "expert_refs": refs, "env_config": env,
                                      "trainer_config": trainer}))
    outputs = []
    for job_id, task in zip(job_ids, tasks):
        while True:
            doc = client.job(job_id)
            if doc["state"] in ("done", "failed"):
                break
            time.sleep(poll)
        if doc["state"] == "failed":
            raise ExperimentError(f"sweep job {job_id} failed")
        res = doc["result"]
        run_dir = Path(task[-1])
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics = store.read_text(res["metrics_ref"])
        (run_dir / "metrics.csv").write_text(metrics)
        (run_dir / "child.pgck").write_bytes(store.read_bytes(res["child_checkpoint_ref"]))
        reward = [float(r["reward_mean"]) for r in csv.DictReader(io.StringIO(metrics))]
        outputs.append({"scores": res["scores"], "reward_auc": float(np.sum(reward))})
    return outputs


# -- ranking -----------------------------------------------------------------------

def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def rank_sweep(rows: Sequence[dict]) -> list[dict]:
    """Order schedules by mean union score (desc), then earlier transition, then id."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["schedule_id"], []).append(r)
    ranked = []
    for sid, rs in groups.items():
        scores = np.array([float(r["union_score"]) for r in rs])
        ts = int(rs[0]["transition_step"])
        ranked.append({
            "schedule_id": sid,
            "lambda": rs[0].get("lambda", ""),
            "i_hold": rs[0].get("i_hold", ""),
            "transition_step": ts,
            "mean_union": float(scores.mean()),
            "std_union": float(scores.std()),
            "n_seeds": len(rs),
        })
    ranked.sort(key=lambda r: (-r["mean_union"], math.inf if r["transition_step"] == NEVER else r["transition_step"],
                               r["schedule_id"]))
    for k, r in enumerate(ranked, 1):
        r["rank"] = k
    return ranked


RANK_COLUMNS = ["rank", "schedule_id", "lambda", "i_hold", "transition_step", "mean_union", "std_union", "n_seeds"]


def cmd_rank(sweep_csv: str | Path, out_dir: str | Path | None = None) -> list[dict]:
    rows = read_csv(sweep_csv)
    ranked = rank_sweep(rows)
    out_dir = Path(out_dir) if out_dir else Path(sweep_csv).parent
    write_csv(out_dir / "rank.csv", RANK_COLUMNS, ranked)
    scatter = [{"schedule_id": r["schedule_id"], "seed": r["seed"], "transition_step": r["transition_step"],
                "union_score": float(r["union_score"])} for r in rows]
    write_csv(out_dir / "scatter.csv", ["schedule_id", "seed", "transition_step", "union_score"], scatter)
    return ranked


# -- family comparison -------------------------------------------------------------

@dataclass
class FamilyReport:
    terrains: list[str]
    scores: dict[str, dict[str, float]]   # member -> terrain -> score

    def union(self, member: str) -> float:
        return float(sum(self.scores[member][t] for t in self.terrains))

    @property
    def passed(self) -> bool:
        return self.union("child") > max(self.union("parent_a"), self.union("parent_b"))

    def table(self) -> str:
        head = f"{'member':<10}" + "".join(f"{t:>10}" for t in self.terrains) + f"{'union':>10}"
        lines = [head]
        for m in ("parent_a", "parent_b", "child"):
            lines.append(f"{m:<10}" + "".join(f"{self.scores[m][t]:>10.2f}" for t in self.terrains)
                         + f"{self.union(m):>10.2f}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: child union {self.union('child'):.2f} vs best parent union "
                     f"{max(self.union('parent_a'), self.union('parent_b')):.2f}")
        return "\n".join(lines)


def compare_family(parent_a: PolicyParams, parent_b: PolicyParams, child: PolicyParams, terrains: Sequence[str],
                   env_config: EnvConfig | None = None, seeds: Sequence[int] = (0,)) -> FamilyReport:
    terrains = sorted(terrains)
    members = {"parent_a": parent_a, "parent_b": parent_b, "child": child}
    return FamilyReport(terrains, {m: evaluate(p, terrains, env_config, seeds) for m, p in members.items()})


# -- curves --------------------------------------------------------------------------

def _num(s: str) -> float:
    return float(s) if s not in ("", None) else math.nan


def cmd_curves(metrics_paths: Sequence[str | Path], out_dir: str | Path, labels: Sequence[str] | None = None) -> Path:
    """Align runs on the iteration index and emit curves.csv, curves.gp and curves_summary.csv."""
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in metrics_paths]
    if len(labels) != len(metrics_paths):
        raise ExperimentError("need one label per metrics file")
    runs = {lab: read_csv(p) for lab, p in zip(labels, metrics_paths)}
    n_iter = max(len(r) for r in runs.values())
    columns = ["iter"]
    for lab in labels:
        columns += [f"{lab}:w_bc", f"{lab}:loss_bc", f"{lab}:reward", f"{lab}:score"]
    rows = []
    for i in range(n_iter):
        row: dict = {"iter": i}
        for lab, recs in runs.items():
            if i >= len(recs):
                continue
            r = recs[i]
            row[f"{lab}:w_bc"] = _num(r["w_bc"])
            bc = _num(r["loss_bc_mu"]) + _num(r["loss_bc_sigma"])
            row[f"{lab}:loss_bc"] = "" if math.isnan(bc) else bc
            row[f"{lab}:reward"] = _num(r["reward_mean"])
            score_cols = [k for k in r if k.startswith("score_")]
            vals = [r[k] for k in score_cols]
            row[f"{lab}:score"] = sum(float(v) for v in vals) if vals and all(vals) else ""
        rows.append(row)
    out_dir = Path(out_dir)
    write_csv(out_dir / "curves.csv", columns, rows)

    gp = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 'iteration'"]
    for metric, title in [("score", "terrain score"), ("loss_bc", "BC loss"), ("reward", "reward")]:
        cols = [columns.index(f"{lab}:{metric}") + 1 for lab in labels]
        plots = ", ".join(f"'curves.csv' using 1:{c} with lines" for c in cols)
        gp += ["set term pngcairo size 900,600", f"set output 'curves_{metric}.png'",
               f"set title '{title}'", f"plot {plots}"]
    (out_dir / "curves.gp").write_text("\n".join(gp) + "\n")

    summary = []
    for lab, recs in runs.items():
        tail = recs[len(recs) * 3 // 4:]
        bc = [_num(r["loss_bc_mu"]) + _num(r["loss_bc_sigma"]) for r in tail]
        bc = [b for b in bc if not math.isnan(b)]
        summary.append({"run": lab, "iterations": len(recs),
                        "final_quarter_loss_bc": float(np.mean(bc)) if bc else "",
                        "reward_auc": float(sum(_num(r["reward_mean"]) for r in recs))})
    write_csv(out_dir / "curves_summary.csv", ["run", "iterations", "final_quarter_loss_bc", "reward_auc"], summary)
    return out_dir / "curves.csv"
