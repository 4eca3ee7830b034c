"""``pg`` command line: train, sweep, rank, compare-family, curves, evolve, scheduler, worker."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import multiprocessing as mp
import sys
import time
from pathlib import Path

from .environment import EnvConfig
from .experiments import SweepSpec, cmd_curves, cmd_rank, compare_family, run_sweep
from .orchestrator.scheduler import Scheduler, SchedulerConfig
from .orchestrator.server import make_server, serve
from .orchestrator.worker import WorkerConfig, run_worker
from .phylogeny import frontier_scores
from .policy import load_checkpoint
from .schedules import TransitionSchedule
from .store import CheckpointStore
from .trainer import TrainerConfig, train_child

log = logging.getLogger("pg")


def _read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with the scientific stack
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _store(args) -> CheckpointStore:
    return CheckpointStore(getattr(args, "store", None))


def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    base = Path(args.config).parent
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = Path(args.out or cfg.get("out", "train_out"))
    if "plan" in cfg:  # a TrainJob document
        terrains = cfg["plan"]["target_terrains"]
        schedule = TransitionSchedule.from_dict(cfg["plan"]["schedule"])
        store = _store(args)
        experts = {t: store.load_params(ref) for t, ref in cfg.get("expert_refs", {}).items()}
        trainer = {**cfg.get("trainer_config", {}), "iterations": cfg["plan"]["iteration_budget"]}
        env = cfg.get("env_config", {})
    else:
        terrains = cfg["terrains"]
        schedule = TransitionSchedule.from_dict(cfg.get("schedule", {"form": "constant", "w": 0.0}))
        experts = {t: load_checkpoint(base / p)[0] for t, p in cfg.get("experts", {}).items()}
        trainer, env = cfg.get("trainer", {}), cfg.get("env", {})

    def progress(rec):
        if rec["iter"] % 50 == 0:
            log.info("iter %d w_bc=%.4f reward=%.5f", rec["iter"], rec["w_bc"], rec["reward_mean"])

    ctx = _single_thread() if args.deterministic else contextlib.nullcontext()
    with ctx:
        report = train_child(terrains, schedule, seed, experts, TrainerConfig.from_dict(trainer),
                             EnvConfig.from_dict(env), progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.metrics_csv())
    from .policy import save_checkpoint

    save_checkpoint(report.params, out / "child.pgck")
    (out / "scores.json").write_text(json.dumps(report.scores, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"scores": report.scores, "out": str(out)}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(_read_json(args.config), Path(args.config).parent)
    if args.seed is not None:
        spec.seeds = [args.seed]
    ctx = _single_thread() if args.deterministic or args.jobs > 1 else contextlib.nullcontext()
    with ctx:
        rows = run_sweep(spec, args.out, jobs=args.jobs, via_scheduler=args.via_scheduler, store=_store(args))
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'sweep.csv'}")
    return 0


def cmd_rank_(args) -> int:
    ranked = cmd_rank(args.sweep_csv, args.out)
    print(f"{'rank':>4} {'schedule':<24} {'transition':>10} {'mean union':>11} {'std':>8}")
    for r in ranked:
        ts = "never" if r["transition_step"] < 0 else str(r["transition_step"])
        print(f"{r['rank']:>4} {r['schedule_id']:<24} {ts:>10} {r['mean_union']:>11.2f} {r['std_union']:>8.2f}")
    return 0


def cmd_compare_family(args) -> int:
    terrains = args.terrains.split(",")
    seeds = [int(s) for s in args.eval_seeds.split(",")]
    report = compare_family(load_checkpoint(args.parent_a)[0], load_checkpoint(args.parent_b)[0],
                            load_checkpoint(args.child)[0], terrains, seeds=seeds)
    print(report.table())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "family.json").write_text(json.dumps(
            {"terrains": report.terrains, "scores": report.scores, "passed": report.passed}, indent=1))
    return 0


def cmd_curves_(args) -> int:
    labels = args.labels.split(",") if args.labels else None
    path = cmd_curves(args.metrics, args.out, labels)
    print(f"wrote {path}")
    return 0


def _worker_entry(address: str, store_root: str, idle_timeout: float, worker_id: str) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    run_worker(address, CheckpointStore(store_root), WorkerConfig(idle_timeout=idle_timeout, worker_id=worker_id,
                                                                  poll_interval=0.5))


def cmd_evolve(args) -> int:
    cfg = SchedulerConfig.from_dict(_read_json(args.config) if args.config else {})
    out = Path(args.out)
    store_root = str(_store(args).root) if args.store else str(out / "store")
    scheduler = Scheduler(cfg, out / "state")
    server = make_server(scheduler, "127.0.0.1", 0)
    import threading

    threading.Thread(target=server.serve_forever, daemon=True).start()
    address = f"http://127.0.0.1:{server.server_address[1]}"
    ctx = mp.get_context("fork")
    procs = [ctx.Process(target=_worker_entry, args=(address, store_root, 5.0, f"local-{k}"))
             for k in range(args.jobs)]
    for p in procs:
        p.start()
    try:
        while not scheduler.finished:
            time.sleep(0.5)
            scheduler.requeue_expired()
            if not any(p.is_alive() for p in procs):
                log.error("all workers exited before the budget was met")
                return 1
    finally:
        for p in procs:
            p.join(timeout=30)
            if p.is_alive():
                p.terminate()
        server.shutdown()
        server.server_close()
    for terrain, (score, node) in sorted(frontier_scores(scheduler.tree).items()):
        print(f"{terrain:<8} {score:8.2f}  {node}")
    return 0


def cmd_serve(args) -> int:
    cfg = SchedulerConfig.from_dict(_read_json(args.config) if args.config else {})
    scheduler = Scheduler(cfg, args.state)
    serve(scheduler, args.host, args.port, keep_alive=args.keep_alive,
          on_ready=lambda addr: print(f"scheduler listening on {addr}", flush=True))
    return 0


def cmd_worker(args) -> int:
    n = run_worker(args.scheduler, _store(args),
                   WorkerConfig(idle_timeout=args.idle_timeout, worker_id=args.worker_id))
    print(f"completed {n} job(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pg", description="Evolutionary BC->RL training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON configuration document")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--store", default=None, help="checkpoint store root (default: $PG_STORE or ./pg_store)")
        sp.add_argument("--deterministic", action="store_true", help="pin numeric kernels to one thread")

    sp = sub.add_parser("train", help="train one child locally")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run a BC->RL schedule sweep")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--via-scheduler", default=None, metavar="URL")
    sp.set_defaults(func=cmd_sweep, out="sweep_out")

    sp = sub.add_parser("rank", help="rank schedules from sweep.csv")
    sp.add_argument("sweep_csv")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_rank_)

    sp = sub.add_parser("compare-family", help="score two parents and a child on the union of terrains")
    sp.add_argument("--parent-a", required=True)
    sp.add_argument("--parent-b", required=True)
    sp.add_argument("--child", required=True)
    sp.add_argument("--terrains", required=True, help="comma-separated terrain ids")
    sp.add_argument("--eval-seeds", default="0")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_compare_family)

    sp = sub.add_parser("curves", help="align metrics.csv files into curves.csv")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--labels", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_curves_)

    sp = sub.add_parser("evolve", help="run scheduler plus local workers for the generation budget")
    common(sp, config_required=False)
    sp.add_argument("--jobs", type=int, default=2, help="number of local worker processes")
    sp.set_defaults(func=cmd_evolve, out="evolve_out")

    sp = sub.add_parser("scheduler", help="scheduler service")
    ssub = sp.add_subparsers(dest="action", required=True)
    s2 = ssub.add_parser("serve")
    s2.add_argument("--config", default=None)
    s2.add_argument("--state", default="scheduler_state")
    s2.add_argument("--host", default="127.0.0.1")
    s2.add_argument("--port", type=int, default=8765)
    s2.add_argument("--keep-alive", action="store_true")
    s2.set_defaults(func=cmd_serve)

    sp = sub.add_parser("worker", help="worker process")
    wsub = sp.add_subparsers(dest="action", required=True)
    w2 = wsub.add_parser("run")
    w2.add_argument("--scheduler", required=True, metavar="URL")
    w2.add_argument("--store", default=None)
    w2.add_argument("--idle-timeout", type=float, default=60.0)
    w2.add_argument("--worker-id", default=None)
    w2.set_defaults(func=cmd_worker)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
