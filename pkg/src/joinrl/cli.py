"""Command-line entry point: ``joinrl <subcommand> [--seed S] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .agent import Agent, AgentConfig, with_decay
from .catalog import Catalog, generate_catalog
from .environment import dp_optimal, exhaustive_optimal, estimate_cost, make_latency_model
from .metrics import EvalRecord, kfold_splits, mrc, report_csv, report_json
from .query import dump_workload, generate_workload, load_workload, parse_spj, split_workload
from .trainer import (
    CostSource, CurriculumConfig, LatencySource, RunConfig, evaluate, random_policy_records, train_cost_phase,
    tune_latency_phase, write_log,
)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3, 4


class ValidationError(Exception):
    """Bad input files or arguments that parsed but make no sense."""


# -- manifest ------------------------------------------------------------------------------

def run_id(configs: dict) -> str:
    """Content hash of the configs, so identical runs land in identical paths."""
    blob = json.dumps(configs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_manifest(out: Path, command: str, configs: dict, argv: Sequence[str]) -> str:
    rid = run_id({"command": command, **configs})
    manifest = {
        "run_id": rid,
        "command": command,
        "argv": list(argv),
        "configs": configs,
        "tool_version": __version__,
        "started": datetime.now(timezone.utc).isoformat(),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    return rid


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# -- input helpers -------------------------------------------------------------------------

def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def _load_catalog(path: str) -> Catalog:
    try:
        return Catalog.from_json(_read(path))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"bad catalog file {path}: {exc}") from exc


def _load_agent(path: str) -> tuple[Agent, dict]:
    if not Path(path).is_file():
        raise ValidationError(f"no such checkpoint: {path}")
    try:
        return Agent.load(path)
    except (json.JSONDecodeError, KeyError, FileNotFoundError) as exc:
        raise ValidationError(f"bad checkpoint {path}: {exc}") from exc


# -- subcommands ----------------------------------------------------------------------------

def cmd_gen_catalog(args, argv) -> None:
    cat = generate_catalog(args.seed, args.tables, args.max_cols, args.fk_density)
    out = Path(args.out)
    write_manifest(out, "gen-catalog", {"catalog": {"seed": args.seed, "tables": args.tables,
                                                    "max_cols": args.max_cols, "fk_density": args.fk_density}}, argv)
    (out / "catalog.json").write_text(cat.to_json(), encoding="utf-8")
    print(out / "catalog.json")


def cmd_gen_workload(args, argv) -> None:
    text = _read(args.catalog)
    cat = _load_catalog(args.catalog)
    queries = generate_workload(cat, args.seed, args.queries, args.min_joins, args.max_joins)
    out = Path(args.out)
    write_manifest(out, "gen-workload", {"catalog_sha256": _sha(text), "workload": {
        "seed": args.seed, "queries": args.queries, "min_joins": args.min_joins, "max_joins": args.max_joins}}, argv)
    (out / "workload.sql").write_text(dump_workload(queries), encoding="utf-8")
    print(out / "workload.sql")


def cmd_plan(args, argv) -> None:
    cat = _load_catalog(args.catalog)
    query = parse_spj(args.query, cat)
    if args.method == "dp":
        plan, fb = dp_optimal(query, cat)
    elif args.method == "exhaustive":
        plan, fb = exhaustive_optimal(query, cat)
    else:
        if not args.ckpt:
            raise ValidationError("--method agent needs --ckpt")
        agent, _ = _load_agent(args.ckpt)
        plan = agent.greedy_plan(query)
        fb = estimate_cost(plan, query, cat)
    print(plan.to_text())
    print(f"cost {fb.value!r}")
    if args.out:
        out = Path(args.out)
        write_manifest(out, "plan", {"query": args.query, "method": args.method, "ckpt": args.ckpt}, argv)
        doc = {"plan": plan.to_dict(), "text": plan.to_text(), "cost": fb.value}
        (out / "plan.json").write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def _split(queries, n_test: int, seed: int):
    if n_test >= len(queries):
        raise ValidationError(f"--n-test {n_test} leaves no training queries out of {len(queries)}")
    return split_workload(queries, n_test, seed)


def cmd_train(args, argv) -> None:
    cat_text, wl_text = _read(args.catalog), _read(args.workload)
    cat = _load_catalog(args.catalog)
    queries = load_workload(wl_text, cat)
    train, test = _split(queries, args.n_test, args.seed)
    cfg = with_decay(AgentConfig(seed=args.seed, dueling=not args.no_dueling), max(args.episodes, 1))
    run = RunConfig(seed=args.seed, episodes_cost=args.episodes, eval_every=args.eval_every, n_test=args.n_test)
    curriculum = CurriculumConfig(k=args.k, enabled=not args.no_curriculum)
    agent = Agent(cat, cfg)
    configs = {
        "catalog_sha256": _sha(cat_text), "workload_sha256": _sha(wl_text),
        "encoder": agent.encoder.cfg.to_dict(), "agent": cfg.to_dict(),
        "curriculum": {"k": curriculum.k, "interval": curriculum.resolve_interval(args.episodes),
                       "enabled": curriculum.enabled},
        "run": {"seed": run.seed, "episodes_cost": run.episodes_cost, "eval_every": run.eval_every,
                "n_test": run.n_test},
    }
    out = Path(args.out)
    rid = write_manifest(out, "train", configs, argv)
    ckpt_dir = out / "ckpt" / rid
    extra = {"workload": wl_text, "n_test": args.n_test, "split_seed": args.seed}
    agent.save(ckpt_dir / "0.json", extra)
    rows = train_cost_phase(train, test, agent, run, curriculum, ckpt_dir, CostSource(cat), extra)
    write_log(rows, out / "train_log.csv")
    print(ckpt_dir / f"{agent.episode}.json")


def _workload_of(meta: dict, agent: Agent, override: str | None):
    if override:
        text = _read(override)
    elif "workload" in meta:
        text = meta["workload"]
    else:
        raise ValidationError("checkpoint carries no workload; pass --workload")
    queries = load_workload(text, agent.catalog)
    n_test = int(meta.get("n_test", 20))
    seed = int(meta.get("split_seed", 0))
    train, test = _split(queries, n_test, seed)
    return text, train, test, {"workload": text, "n_test": n_test, "split_seed": seed}


def cmd_tune(args, argv) -> None:
    agent, meta = _load_agent(args.ckpt)
    text, train, test, extra = _workload_of(meta, agent, args.workload)
    lm = make_latency_model(agent.catalog, args.latency_seed, neutral=args.neutral)
    run = RunConfig(seed=args.seed, episodes_latency=args.episodes, eval_every=args.eval_every)
    configs = {
        "ckpt_sha256": _sha(Path(args.ckpt).read_text(encoding="utf-8")), "workload_sha256": _sha(text),
        "latency": lm.to_dict(), "agent": agent.cfg.to_dict(), "encoder": agent.encoder.cfg.to_dict(),
        "run": {"seed": run.seed, "episodes_latency": run.episodes_latency, "eval_every": run.eval_every,
                "tune_eps_start": run.tune_eps_start, "tune_eps_end": run.tune_eps_end},
    }
    out = Path(args.out)
    rid = write_manifest(out, "tune", configs, argv)
    ckpt_dir = out / "ckpt" / rid
    extra["latency_model"] = lm.to_dict()
    rows = tune_latency_phase(train, test, agent, lm, run, ckpt_dir, LatencySource(agent.catalog, lm), extra)
    if not args.episodes:
        agent.save(ckpt_dir / f"{agent.episode}.json", extra)
    write_log(rows, out / "tune_log.csv")
    print(ckpt_dir / f"{agent.episode}.json")


def _records(args, agent: Agent | None, cat: Catalog, queries) -> list[EvalRecord]:
    costs = CostSource(cat)
    latency = None
    if args.latency_seed is not None:
        latency = LatencySource(cat, make_latency_model(cat, args.latency_seed), costs)
    if args.method == "agent":
        return evaluate(agent, queries, costs, latency)
    records = []
    for q in queries:
        plan, fb = costs.dp_plan(q)
        lat = latency.dp(q).value if latency else None
        records.append(EvalRecord(q.qid, q.template, fb.value, fb.value, lat, lat))
    return records


def _write_report(out: Path, records: list[EvalRecord]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(records), encoding="utf-8")
    (out / "report.json").write_text(report_json(records), encoding="utf-8")


def cmd_eval(args, argv) -> None:
    if args.method == "agent":
        if not args.ckpt:
            raise ValidationError("--method agent needs --ckpt")
        agent, _ = _load_agent(args.ckpt)
        cat = agent.catalog
    else:
        if not args.catalog:
            raise ValidationError("--method dp needs --catalog")
        agent, cat = None, _load_catalog(args.catalog)
    text = _read(args.workload)
    queries = load_workload(text, cat)
    if not queries:
        raise ValidationError("empty workload")
    out = Path(args.out)
    write_manifest(out, "eval", {"ckpt": args.ckpt, "method": args.method, "workload_sha256": _sha(text),
                                 "kfold": args.kfold, "latency_seed": args.latency_seed}, argv)
    records = _records(args, agent, cat, queries)
    _write_report(out, records)
    if args.kfold:
        by_qid = {r.qid: r for r in records}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "n_queries", "mrc"])
        for k, (_, test) in enumerate(kfold_splits(queries, args.kfold, args.seed)):
            fold = [by_qid[q.qid] for q in test]
            _write_report(out / "folds" / str(k), fold)
            w.writerow([k, len(fold), repr(mrc(fold))])
        (out / "folds.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"mrc {mrc(records)!r}")


def cmd_ablate(args, argv) -> None:
    cat_text, wl_text = _read(args.catalog), _read(args.workload)
    cat = _load_catalog(args.catalog)
    queries = load_workload(wl_text, cat)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    write_manifest(out, "ablate", {"catalog_sha256": _sha(cat_text), "workload_sha256": _sha(wl_text),
                                   "episodes": args.episodes, "seeds": seeds, "n_test": args.n_test,
                                   "eval_every": args.eval_every}, argv)
    costs = CostSource(cat)
    rows = []
    for seed in seeds:
        train, test = _split(queries, args.n_test, seed)
        for variant, dueling in (("GTDD", True), ("GTD", False)):
            cfg = with_decay(AgentConfig(seed=seed, dueling=dueling), max(args.episodes, 1))
            agent = Agent(cat, cfg)
            log = train_cost_phase(train, test, agent, RunConfig(seed=seed, episodes_cost=args.episodes,
                                                                 eval_every=args.eval_every), costs=costs)
            write_log(log, out / "curves" / f"{variant}-{seed}.csv")
            rows.append((seed, variant, mrc(evaluate(agent, test, costs))))
        baseline = Agent(cat, AgentConfig(seed=seed))
        rows.append((seed, "random", mrc(random_policy_records(baseline, test, costs, seed))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "variant", "mrc"])
    for seed, variant, value in rows:
        w.writerow([seed, variant, repr(value)])
    (out / "ablate.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="joinrl", description="Learned join ordering over a synthetic catalog.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str, out_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("gen-catalog", cmd_gen_catalog, "generate a synthetic catalog")
    p.add_argument("--tables", type=int, required=True)
    p.add_argument("--fk-density", type=float, default=0.3)
    p.add_argument("--max-cols", type=int, default=6)

    p = add("gen-workload", cmd_gen_workload, "generate an SPJ workload")
    p.add_argument("--catalog", required=True)
    p.add_argument("--queries", type=int, required=True)
    p.add_argument("--min-joins", type=int, default=2)
    p.add_argument("--max-joins", type=int, default=6)

    p = add("plan", cmd_plan, "plan one query", out_required=False)
    p.add_argument("--catalog", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--method", choices=("dp", "exhaustive", "agent"), default="dp")
    p.add_argument("--ckpt")

    p = add("train", cmd_train, "cost-phase training")
    p.add_argument("--catalog", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--no-dueling", action="store_true")
    p.add_argument("--no-curriculum", action="store_true")
    p.add_argument("--k", type=int, default=3, help="curriculum partitions")
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=500)

    p = add("tune", cmd_tune, "latency-phase tuning from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--latency-seed", type=int, required=True)
    p.add_argument("--neutral", action="store_true", help="all correlation factors 1")
    p.add_argument("--workload")
    p.add_argument("--eval-every", type=int, default=500)

    p = add("eval", cmd_eval, "metric report for a checkpoint or for DP plans")
    p.add_argument("--ckpt")
    p.add_argument("--workload", required=True)
    p.add_argument("--catalog", help="needed with --method dp")
    p.add_argument("--method", choices=("agent", "dp"), default="agent")
    p.add_argument("--kfold", type=int)
    p.add_argument("--latency-seed", type=int)

    p = add("ablate", cmd_ablate, "GTDD vs GTD vs random policy on matched seeds")
    p.add_argument("--catalog", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=500)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    for name in ("episodes", "queries", "tables"):
        if getattr(args, name, 0) is not None and getattr(args, name, 0) < 0:
            print(f"error: --{name} must be non-negative", file=sys.stderr)
            return EXIT_USAGE
    try:
        args.func(args, argv)
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for anything else
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
