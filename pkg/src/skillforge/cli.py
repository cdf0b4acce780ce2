"""Command-line entry point: ``skillforge train|eval|inspect|meta-export|deskworld``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .deskworld import generate, load_tasks
from .errors import SkillforgeError
from .harness import EvalReport, evaluate_frozen, export_meta, meta_test_init, parse_meta_file, run_training
from .model import MetaRuleSet
from .oracle import CallLog, CallRecord, OracleClient, RemoteBackend
from .scripted import deskworld_backend
from .store import Repository, RunConfig, checksum, persist, restore

log = logging.getLogger("skillforge")

CALLS_LOG = "calls.log"


def _backend(name: str, retry_budget: int):
    if name == "scripted":
        return deskworld_backend()
    return RemoteBackend.from_env(retry_budget)


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **json.loads(Path(path).read_text())})
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _open_repo(path: Path, cfg: RunConfig) -> Repository:
    if (path / "MANIFEST").exists():
        return restore(path)
    return Repository(config=cfg)


def _append_calls(path: Path, calls: CallLog) -> None:
    with open(path / CALLS_LOG, "a", encoding="utf-8") as fh:
        for r in calls.records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_calls(path: str | Path) -> CallLog:
    p = Path(path)
    if p.is_dir():
        p = p / CALLS_LOG
    out = CallLog()
    if p.exists():
        for line in p.read_text("utf-8").splitlines():
            if line.strip():
                out.append(CallRecord.from_dict(json.loads(line)))
    return out


def cmd_train(args) -> int:
    repo_dir = Path(args.repo)
    cfg = _load_config(args.config, args.seed)
    repo = _open_repo(repo_dir, cfg)
    if args.init_meta:
        if args.freeze_meta:
            meta_test_init(repo, args.init_meta)
        else:
            for role, rs in parse_meta_file(Path(args.init_meta).read_text("utf-8")).items():
                repo.meta[role] = MetaRuleSet(role, rs.rules, repo.tasks_seen)
    elif args.freeze_meta:
        repo.freeze_meta = True
    tasks = load_tasks(args.tasks, "train")
    oracle = OracleClient(_backend(args.backend, repo.config.retry_budget))
    repo, _, stats = run_training(tasks, repo.config, oracle, repo=repo, static=args.static,
                                  parallel=not args.serial)
    digest = persist(repo, repo_dir)
    _append_calls(repo_dir, oracle.log)
    summary = {
        "checksum": digest,
        "macro_passes": stats.macro_passes,
        "mean_training_utility": sum(stats.utilities) / len(stats.utilities) if stats.utilities else 0.0,
        "meta_attempts": stats.meta_attempts,
        "meta_rules": {r.value: list(m.rules) for r, m in repo.meta.items()},
        "oracle_calls": len(oracle.log),
        "published": stats.published,
        "tasks": stats.tasks,
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    repo = restore(args.repo)
    tasks = load_tasks(args.tasks, "heldout")
    cfg = repo.config
    baseline_path = Path(args.baseline)
    if baseline_path.exists():
        baseline = EvalReport.from_dict(json.loads(baseline_path.read_text()))
    else:
        baseline = evaluate_frozen(tasks, [], OracleClient(_backend(args.backend, cfg.retry_budget)), cfg.K,
                                   cfg.weights, cfg.max_rounds)
        baseline_path.write_text(json.dumps(baseline.to_dict(), indent=1, sort_keys=True) + "\n")
        log.info("wrote no-skill baseline to %s", baseline_path)
    before = checksum(repo)
    report = evaluate_frozen(tasks, repo, OracleClient(_backend(args.backend, cfg.retry_budget)), cfg.K,
                             cfg.weights, cfg.max_rounds, baseline)
    assert checksum(repo) == before, "evaluation must not mutate the store"
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(json.dumps({"baseline_mean": report.baseline_mean, "delta": report.delta,
                      "mean_utility": report.mean_utility, "tasks": len(report.rows)}, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    repo = restore(args.repo)
    if args.skill:
        hist = repo.versions(args.skill)
        for rec in hist:
            c = repo.table.get(rec.skill.id, rec.skill.version)
            doc = {"counts": c.to_dict(), "gate": rec.gate.to_dict(), "history": list(rec.history),
                   "bundle": rec.bundle.to_dict(), "skill": rec.skill.to_dict(), "state": rec.state.value}
            print(json.dumps(doc, indent=1, sort_keys=True))
        return 0
    print(f"tasks_seen={repo.tasks_seen} skills={len(repo.skills)} ledger={len(repo.ledger)} "
          f"freeze_meta={repo.freeze_meta} checksum={checksum(repo)}")
    for sid in sorted(repo.skills):
        rec = repo.skills[sid][-1]
        live = repo.current(sid) or rec
        c = repo.table.get(sid, live.skill.version)
        print(f"{sid} v{live.skill.version} {live.state.value:<8} h={c.helpful} harm={c.harmful} "
              f"exp={c.exposed} {live.skill.name}")
    for role, rs in repo.meta.items():
        print(f"[{role.value}] " + (" | ".join(rs.rules) or "(no rules)"))
    return 0


def cmd_meta_export(args) -> int:
    repo = restore(args.repo)
    Path(args.output).write_text(export_meta(repo), "utf-8")
    return 0


def cmd_generate(args) -> int:
    suite = generate(args.families, args.seed, args.train_tasks, args.heldout_tasks,
                     args.transfer_train_tasks, args.transfer_heldout_tasks)
    for p in suite.write(args.output):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="online skill and meta-rule training")
    t.add_argument("tasks", help="task file or deskworld suite directory (uses train.json)")
    t.add_argument("--repo", required=True)
    t.add_argument("--static", action="store_true", help="disable meta-rule updates")
    t.add_argument("--init-meta", help="exported meta rules used as initialization")
    t.add_argument("--freeze-meta", action="store_true", help="keep meta rules fixed")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="JSON file with run configuration fields")
    t.add_argument("--serial", action="store_true", help="run each window's tasks one by one")
    t.add_argument("--backend", choices=("scripted", "remote"), default="scripted")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out evaluation with a frozen repository")
    e.add_argument("tasks", help="task file or suite directory (uses heldout.json)")
    e.add_argument("--repo", required=True)
    e.add_argument("--baseline", required=True, help="no-skill report; created when missing")
    e.add_argument("-o", "--output")
    e.add_argument("--backend", choices=("scripted", "remote"), default="scripted")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarise a repository or one skill")
    i.add_argument("--repo", required=True)
    i.add_argument("--skill")
    i.set_defaults(func=cmd_inspect)

    m = sub.add_parser("meta-export", help="write the current meta rules")
    m.add_argument("--repo", required=True)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_meta_export)

    d = sub.add_parser("deskworld", help="deskworld utilities")
    dsub = d.add_subparsers(dest="deskworld_command", required=True)
    g = dsub.add_parser("generate", help="generate a task suite")
    g.add_argument("--families", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--train-tasks", type=int, default=50)
    g.add_argument("--heldout-tasks", type=int, default=20)
    g.add_argument("--transfer-train-tasks", type=int, default=25)
    g.add_argument("--transfer-heldout-tasks", type=int, default=10)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SkillforgeError, OSError, ValueError) as exc:
        print(f"skillforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
