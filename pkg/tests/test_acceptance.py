"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Budgets are desk-scale and fixed up front (see the constants below). Training runs are
shared between criteria through module-scoped fixtures: the specialists of criterion 4
are the parents of criteria 5 to 7.
"""

import json
import random
import shutil
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from orchestrator_sim import FakeClock, SimulatedCrash, Simulation, crash_after
from pgevo.environment import (
    EnvConfig,
    VecEnv,
    make_terrain,
    next_episode,
    reset,
    step,
    terrain_score,
    update_curriculum,
    zero_policy,
)
from pgevo.experiments import SweepSpec, default_schedules, rank_sweep, read_csv
from pgevo.orchestrator import JobResult, JobState, Scheduler, SchedulerConfig
from pgevo.phylogeny import NodeStatus
from pgevo.policy import Architecture, finite_diff_check, init_params, save_checkpoint
from pgevo.schedules import PURE_BC, PURE_RL, TransitionSchedule, transition_step
from pgevo.trainer import (
    TrainerConfig,
    bc_loss,
    collect_rollouts,
    combined_head_loss,
    combined_loss,
    compute_advantages,
    evaluate,
    rl_loss,
    split_terrains,
    train_child,
)

TERRAINS = ("flat", "ice", "mud")
FAMILY = ("flat", "ice")
SEEDS = range(5)
EVAL_SEEDS = (0, 1, 2)
SPECIALIST_ITERS = 400
CHILD_ITERS = 200
SWEEP_ITERS = 200
SWEEP_SEEDS = (0, 1, 2)
SWEEP_JOBS = 8
ENV = EnvConfig()


# -- shared training runs -----------------------------------------------------------

@pytest.fixture(scope="module")
def specialists(tmp_path_factory):
    """Pure-RL specialists: (seed, terrain) -> (params, own-terrain score, all scores, seconds, checkpoint)."""
    root = tmp_path_factory.mktemp("specialists")
    out = {}
    for seed in SEEDS:
        for terrain in TERRAINS:
            t0 = time.monotonic()
            rep = train_child([terrain], PURE_RL, seed, config=TrainerConfig(iterations=SPECIALIST_ITERS))
            seconds = time.monotonic() - t0
            scores = evaluate(rep.params, TERRAINS, ENV, EVAL_SEEDS)
            path = root / f"{terrain}_s{seed}.pgck"
            save_checkpoint(rep.params, path)
            out[(seed, terrain)] = (rep.params, scores[terrain], scores, seconds, path)
    return out


@pytest.fixture(scope="module")
def children(specialists):
    """Lazily trained flat+ice children keyed by (schedule id, seed); parents are that seed's specialists."""
    cache = {}

    def get(schedule: TransitionSchedule, seed: int):
        key = (schedule.id, seed)
        if key not in cache:
            experts = {t: specialists[(seed, t)][0] for t in FAMILY}
            rep = train_child(FAMILY, schedule, seed, experts, TrainerConfig(iterations=CHILD_ITERS))
            cache[key] = (rep, evaluate(rep.params, FAMILY, ENV, EVAL_SEEDS))
        return cache[key]

    return get


def _parent_unions(specialists, seed):
    return [sum(specialists[(seed, p)][2][t] for t in FAMILY) for p in FAMILY]


# -- criterion 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(acceptance_report):
    t0 = time.monotonic()
    worst = {}
    arch = Architecture(ENV.obs_dim, 2, TrainerConfig().hidden)
    for seed in SEEDS:
        student = init_params(arch, seed)
        experts = {t: init_params(arch, 100 + seed + k) for k, t in enumerate(FAMILY)}
        envs = VecEnv(split_terrains(FAMILY, 8), seed, ENV)
        batch = compute_advantages(collect_rollouts(student, experts, envs, 16, np.random.default_rng(seed)))
        fb = batch.flat()
        # move away from the rollout policy so ratio, clip and KL terms are all active
        moved = student.with_flat(student.flat + np.random.default_rng(seed).normal(0, 0.05, arch.size))
        for name, w in (("bc_loss", 1.0), ("rl_loss", 0.0), ("combined w=0", 0.0), ("combined w=0.3", 0.3),
                        ("combined w=1", 1.0)):
            err = finite_diff_check(moved, fb.obs, combined_head_loss(fb, w), probes=40, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.monotonic() - t0
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 60.0
    acceptance_report(1, ok, f"max relative error {top:.2e} (<1e-4) over 5 seeds x 5 losses x 40 probes; "
                             f"{elapsed:.1f}s (<60s)")
    assert ok, worst


# -- criterion 2 -------------------------------------------------------------------------

def test_criterion_2_loss_algebra(acceptance_report):
    arch = Architecture(ENV.obs_dim, 2, TrainerConfig().hidden)
    worst_lin = 0.0
    endpoints_exact = True
    for seed in SEEDS:
        student = init_params(arch, seed)
        experts = {t: init_params(arch, 50 + seed + k) for k, t in enumerate(FAMILY)}
        envs = VecEnv(split_terrains(FAMILY, 4), seed, ENV)
        batch = compute_advantages(collect_rollouts(student, experts, envs, 32, np.random.default_rng(seed)))
        moved = student.with_flat(student.flat + np.random.default_rng(seed).normal(0, 0.03, arch.size))
        l_bc, l_rl = bc_loss(batch, moved)[0], rl_loss(batch, moved)[0]
        endpoints_exact &= combined_loss(batch, moved, PURE_BC, 0) == l_bc
        endpoints_exact &= combined_loss(batch, moved, PURE_RL, 0) == l_rl
        for w in np.linspace(0.0, 1.0, 21):
            got = combined_loss(batch, moved, TransitionSchedule.constant(float(w)), 0)
            worst_lin = max(worst_lin, abs(got - (w * l_bc + (1 - w) * l_rl)))
        lam = 0.97
        for i in (0, 1, 17, 150):
            got = combined_loss(batch, moved, TransitionSchedule.geometric(lam), i)
            worst_lin = max(worst_lin, abs(got - (lam ** i * l_bc + (1 - lam ** i) * l_rl)))
    ok = endpoints_exact and worst_lin <= 1e-12
    acceptance_report(2, ok, f"endpoints bit-exact={endpoints_exact}; max linearity deviation {worst_lin:.1e} (<=1e-12)")
    assert ok


# -- criterion 3 -------------------------------------------------------------------------

def _curriculum_oracle(r, fetches, delta, r_min):
    # per fetch the radius grows by delta; at the episode boundary it moves by +-delta with a floor
    r = r + fetches * delta
    return max(r_min, r + delta) if fetches else max(r_min, r - delta)


def test_criterion_3_curriculum(acceptance_report):
    cfg = EnvConfig(episode_steps=20)
    # scripted agent in the real environment: teleports onto the treat on chosen steps
    plan = [[3], [], [], [0, 5, 9], [], [], [], [], [2]]
    state, _ = reset(make_terrain("flat"), cfg.r0, 3, cfg)
    r_expected = cfg.r0
    scripted_ok = True
    for fetch_steps in plan:
        assert state.spawn_radius == pytest.approx(r_expected, abs=1e-12)
        n = 0
        for k in range(cfg.episode_steps):
            if k in fetch_steps:
                state.agent_pos = state.treat_pos.copy()
                state.agent_vel = np.zeros(2)
            state, res = step(state, [0.0, 0.0])
            n += int(res.fetched)
        scripted_ok &= n == len(fetch_steps)
        state, _ = next_episode(state)
        r_expected = _curriculum_oracle(r_expected, n, cfg.delta, cfg.r_min)
        scripted_ok &= state.spawn_radius == pytest.approx(r_expected, abs=1e-12)
    unit_ok = [update_curriculum(r, f, 0.5, 0.5) for r, f in ((1.0, True), (1.0, False), (0.5, False), (0.7, False))] \
        == [1.5, 0.5, 0.5, 0.5]
    # property: 1e5 random outcome sequences never push the radius below r_min
    rng = random.Random(0)
    violations = 0
    for _ in range(100_000):
        r_min = rng.choice((0.1, 0.5, 1.0))
        delta = rng.uniform(0.01, 1.0)
        r = r_min + rng.uniform(0.0, 3.0)
        for _ in range(rng.randint(1, 40)):
            r = update_curriculum(r, rng.random() < rng.random(), delta, r_min)
            violations += r < r_min
    ok = scripted_ok and unit_ok and violations == 0
    acceptance_report(3, ok, f"scripted env agent matches update rule={scripted_ok}; unit examples={unit_ok}; "
                             f"r<r_min violations over 1e5 random sequences: {violations}")
    assert ok


# -- criterion 4 -------------------------------------------------------------------------

def test_criterion_4_specialists(specialists, acceptance_report):
    detail, ok = [], True
    slowest = max(v[3] for v in specialists.values())
    for terrain in TERRAINS:
        baseline = float(np.mean([terrain_score(zero_policy, terrain, ENV, seed=s) for s in EVAL_SEEDS]))
        scores = [specialists[(s, terrain)][1] for s in SEEDS]
        passed = sum(sc >= 3 * baseline for sc in scores)
        ok &= passed >= 4
        detail.append(f"{terrain}: {passed}/5 seeds >= 3x{baseline:g} (scores {', '.join(f'{x:.1f}' for x in scores)})")
    ok &= slowest <= 30 * 60 and SPECIALIST_ITERS <= 1000
    acceptance_report(4, ok, "; ".join(detail) + f"; {SPECIALIST_ITERS} iterations, slowest run {slowest:.0f}s")
    assert ok


# -- criterion 5 -------------------------------------------------------------------------

def _smoothed(series, i, half=2):
    lo, hi = max(0, i - half), min(len(series), i + half + 1)
    return float(np.mean(series[lo:hi]))


def test_criterion_5_distillation(specialists, children, acceptance_report):
    rows, passed = [], 0
    for seed in SEEDS:
        rep, scores = children(PURE_BC, seed)
        bc = rep.series("loss_bc_mu") + rep.series("loss_bc_sigma")
        ratio_loss = _smoothed(bc, len(bc) - 1) / _smoothed(bc, 10)
        keep = {t: scores[t] / specialists[(seed, t)][1] for t in FAMILY}
        seed_ok = ratio_loss < 0.2 and all(k >= 0.8 for k in keep.values())
        passed += seed_ok
        rows.append(f"s{seed}: bc N/10={ratio_loss:.3f} keep " + "/".join(f"{keep[t]:.2f}" for t in FAMILY)
                    + ("" if seed_ok else " x"))
    ok = passed >= 4
    acceptance_report(5, ok, f"{passed}/5 seeds with smoothed BC loss ratio <0.2 and >=80% of each parent "
                             f"on its own terrain ({'; '.join(rows)})")
    assert ok


# -- criterion 6 -------------------------------------------------------------------------

def test_criterion_6_bc_to_rl_superiority(specialists, children, acceptance_report):
    early = [s for s in default_schedules() if 0 <= transition_step(s) < 200]
    unions = {}
    for sched in early + [PURE_BC, PURE_RL]:
        unions[sched.id] = [sum(children(sched, seed)[1].values()) for seed in SEEDS]
    best = min(early, key=lambda s: (-np.mean(unions[s.id]), transition_step(s), s.id))
    wins = sum(unions[best.id][k] > max(_parent_unions(specialists, seed)) for k, seed in enumerate(SEEDS))
    mean_best = float(np.mean(unions[best.id]))
    mean_bc, mean_rl = float(np.mean(unions[PURE_BC.id])), float(np.mean(unions[PURE_RL.id]))
    ok = wins >= 3 and mean_best > mean_bc and mean_best > mean_rl
    acceptance_report(6, ok, f"best early schedule {best.id} (transition {transition_step(best)}): beats both "
                             f"parents on {wins}/5 seeds; mean union {mean_best:.2f} vs pure_bc {mean_bc:.2f}, "
                             f"pure_rl {mean_rl:.2f}; {len(early)} early schedules, {CHILD_ITERS} iterations")
    assert ok


# -- criterion 7 -------------------------------------------------------------------------

def test_criterion_7_sweep(specialists, tmp_path, acceptance_report):
    from pgevo.cli import main

    spec_doc = {
        "parents": [{"name": t, "checkpoint": str(specialists[(0, t)][4]), "terrains": [t]} for t in FAMILY],
        "seeds": list(SWEEP_SEEDS),
        "iterations": SWEEP_ITERS,
    }
    (tmp_path / "sweep.json").write_text(json.dumps(spec_doc))
    ids = [s.id for s in SweepSpec.from_dict(spec_doc).all_schedules]
    t0 = time.monotonic()
    code = main(["sweep", "--config", str(tmp_path / "sweep.json"), "--out", str(tmp_path / "out"),
                 "--jobs", str(SWEEP_JOBS)])
    hours = (time.monotonic() - t0) / 3600
    rows = read_csv(tmp_path / "out" / "sweep.csv")
    ranked = rank_sweep(rows)
    n_expected = len(ids) * len(SWEEP_SEEDS)
    ok = (code == 0 and len(ids) == 82 and len(set(ids)) == 82 and ids.count("pure_bc") == ids.count("pure_rl") == 1
          and len(rows) == n_expected and sorted(r["schedule_id"] for r in ranked) == sorted(ids) and hours < 4.0)
    top = ranked[0]
    acceptance_report(7, ok, f"{len(ids) - 2} schedules + 2 baselines; {len(rows)}/{n_expected} rows; "
                             f"{SWEEP_ITERS} iterations x {len(SWEEP_SEEDS)} seeds on {SWEEP_JOBS} jobs in "
                             f"{hours:.2f} h (<4 h); top {top['schedule_id']} mean union {top['mean_union']:.2f}")
    assert ok


# -- criterion 8 -------------------------------------------------------------------------

def _replay_with_crash(state_dir, write: int) -> tuple[bool, list[str]]:
    """Drive one worker through a full evolution; the scheduler dies at its ``write``-th persistence
    write and is restarted from disk. Returns (crash happened, problems)."""
    cfg = SchedulerConfig(root_terrains=("flat", "ice", "mud"), max_children=2, lease_duration=10.0)
    clock = FakeClock()
    sched = Scheduler(cfg, state_dir, clock)
    problems, acked, seen = [], {}, set()
    crashed, result, ops = False, None, 0
    with crash_after(write):
        while not sched.finished and ops < 200:
            ops += 1
            try:
                if result is None:
                    job = sched.next_job("w")
                    if job is None:
                        problems.append("no work offered before the budget was met")
                        break
                    seen.add(job.job_id)
                    result = JobResult(job.job_id, job.attempt, "w", f"ck/{job.job_id}",
                                       {t: float(ops) for t in job.plan.target_terrains})
                else:
                    sched.complete_job(result.job_id, result)  # "ok" or, after a crash, "already-done"
                    acked[result.job_id] = result.scores
                    result = None
            except SimulatedCrash:
                crashed = True
                sched = Scheduler(cfg, state_dir, clock)
                for job_id in seen:
                    if job_id not in sched.jobs:
                        problems.append(f"job {job_id} lost")
                for job_id, scores in acked.items():
                    j = sched.jobs.get(job_id)
                    if j is None or j.state is not JobState.DONE or sched.tree.nodes[j.child_id].scores != scores:
                        problems.append(f"done node of {job_id} lost")
    if not sched.finished:
        problems.append("evolution did not finish")
    done_children = [n for n in sched.tree.nodes.values() if n.parent_ids and n.status is NodeStatus.DONE]
    if len(done_children) != cfg.max_children or len({n.terrain_set for n in done_children}) != cfg.max_children:
        problems.append(f"{len(done_children)} done children, expected {cfg.max_children} distinct")
    if any(n.status is not NodeStatus.DONE for n in sched.tree.nodes.values()):
        problems.append("unfinished node left behind")
    return crashed, [f"write {write}: {p}" for p in problems]


def _replay_every_write(tmp_path) -> tuple[int, list[str]]:
    problems, write = [], 1
    while True:
        crashed, found = _replay_with_crash(tmp_path / f"replay{write}", write)
        problems += found
        if not crashed:
            return write - 1, problems  # every write point of the run has been covered
        write += 1


def test_criterion_8_orchestrator_safety(tmp_path, acceptance_report):
    # concurrent next_job from 32 threads never hands one job to two workers
    sched = Scheduler(SchedulerConfig(root_terrains=("flat", "ice", "mud") * 4, lease_duration=60.0), None)
    barrier = threading.Barrier(32)
    got = []
    lock = threading.Lock()

    def pull(i):
        barrier.wait()
        job = sched.next_job(f"t{i}")
        with lock:
            got.append(None if job is None else job.job_id)

    threads = [threading.Thread(target=pull, args=(i,)) for i in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    leased = [g for g in got if g is not None]
    thread_ok = len(leased) == len(set(leased)) == 12

    totals = {"violations": 0, "crashes": 0, "restarts": 0, "stale": 0, "dups": 0, "unfinished": 0}
    for seed in range(100):
        sim = Simulation(tmp_path / f"sim{seed}", seed, n_workers=32)
        stats = sim.run()
        totals["violations"] += len(stats.violations) + (not sim.unique_unions())
        totals["unfinished"] += not sim.sched.finished
        totals["crashes"] += stats.crashes
        totals["restarts"] += stats.restarts
        totals["stale"] += stats.stale
        totals["dups"] += stats.already_done
    n_points, replay_problems = _replay_every_write(tmp_path)
    ok = thread_ok and totals["violations"] == 0 and totals["unfinished"] == 0 and not replay_problems
    acceptance_report(8, ok, f"32-thread lease race unique={thread_ok}; 100 randomized 32-worker runs: "
                             f"{totals['violations']} invariant violations, {totals['unfinished']} unfinished, "
                             f"{totals['crashes']} mid-write crashes, {totals['restarts']} restarts, "
                             f"{totals['stale']} stale results rejected, {totals['dups']} duplicate acks; "
                             f"kill/restart replay at each of {n_points} write points: {len(replay_problems)} problems")
    assert ok, replay_problems[:5]


# -- criterion 9 -------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, acceptance_report):
    cfg = {"seed": 11, "terrains": ["flat", "ice"], "schedule": {"form": "constant", "w": 0.0},
           "trainer": {"iterations": 20, "eval_every": 10}}
    (tmp_path / "job.json").write_text(json.dumps(cfg))
    exe = shutil.which("pg")
    cmd = [exe] if exe else [sys.executable, "-m", "pgevo.cli"]
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        proc = subprocess.run(cmd + ["train", "--config", str(tmp_path / "job.json"), "--out", str(out),
                                     "--deterministic"], capture_output=True, text=True, timeout=1800)
        assert proc.returncode == 0, proc.stderr
        blobs.append((out / "metrics.csv").read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0].splitlines()) == 21
    acceptance_report(9, ok, f"two `pg train --deterministic` runs: metrics.csv {len(blobs[0])} bytes, "
                             f"bitwise identical={blobs[0] == blobs[1]}")
    assert ok
