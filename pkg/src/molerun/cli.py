"""Command line entry points: run a workflow file, or just validate it.

Exit codes: 0 on success, 1 when a run aborts or validation finds defects,
2 when the file cannot be loaded or the invocation is misconfigured.
"""

from __future__ import annotations

import argparse
import dataclasses
import fnmatch
import os
import sys
from pathlib import Path

from molerun.core import (
    Context,
    Kind,
    Prototype,
    fire_hook,
    render_value,
    validate_workflow,
)
from molerun.engine import (
    ConfigurationError,
    EnvironmentAssignment,
    RunReport,
    run_workflow,
    write_run_outputs,
)
from molerun.evolution import generation_context, run_generational, run_islands
from molerun.workflow_file import (
    EvolutionPlan,
    IslandsPlan,
    LoadedFile,
    LoadError,
    TaskGraphPlan,
    build_environment,
    build_evaluator,
    load_workflow_file,
)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="molerun",
        description="Run or validate typed dataflow workflows over stochastic models.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    run_parser = commands.add_parser("run", help="execute a workflow file")
    run_parser.add_argument("file", help="workflow file to run")
    run_parser.add_argument("--env", default=None, help="environment to run on by default")
    run_parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    run_parser.add_argument(
        "--out", default=None,
        help="output directory (default $MOLERUN_OUT or ./molerun-out)",
    )
    validate_parser = commands.add_parser("validate", help="check a workflow file and exit")
    validate_parser.add_argument("file", help="workflow file to check")
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            return _validate(args)
        return _run(args)
    except LoadError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


def _planned_workflow(loaded: LoadedFile):
    plan = loaded.plan
    if isinstance(plan, TaskGraphPlan):
        return plan.workflow, plan.lines
    if isinstance(plan, IslandsPlan):
        return plan.evolution.validation_workflow, plan.lines
    return plan.validation_workflow, plan.lines


def _print_defects(loaded: LoadedFile, defects) -> None:
    _, lines = _planned_workflow(loaded)
    for defect in defects:
        line = lines.get(defect.capsule_id) if defect.capsule_id else None
        where = f"{loaded.path}:{line}" if line else str(loaded.path)
        print(f"{where}: {defect}", file=sys.stderr)


def _validate(args) -> int:
    loaded = load_workflow_file(args.file)
    workflow, _ = _planned_workflow(loaded)
    defects = validate_workflow(workflow)
    if not defects:
        print(f"{loaded.path}: ok")
        return 0
    _print_defects(loaded, defects)
    return 1


def _run(args) -> int:
    loaded = load_workflow_file(args.file)
    out_dir = Path(args.out or os.environ.get("MOLERUN_OUT") or "molerun-out")
    if args.env is not None and args.env not in loaded.environments:
        declared = ", ".join(loaded.environments) or "none"
        raise ConfigurationError(f"unknown environment {args.env!r} (declared: {declared})")
    workflow, _ = _planned_workflow(loaded)
    defects = validate_workflow(workflow)
    if defects:
        _print_defects(loaded, defects)
        return 2
    plan = loaded.plan
    if isinstance(plan, TaskGraphPlan):
        return _run_task_graph(loaded, plan, args, out_dir)
    if isinstance(plan, EvolutionPlan):
        return _run_evolution(plan, args, out_dir)
    return _run_islands(loaded, plan, args, out_dir)


def _run_task_graph(loaded: LoadedFile, plan: TaskGraphPlan, args, out_dir: Path) -> int:
    capsule_ids = [capsule.id for capsule in plan.workflow.capsules]
    for pattern, _ in loaded.assignments:
        if not any(fnmatch.fnmatchcase(cid, pattern) for cid in capsule_ids):
            raise ConfigurationError(f"assignment pattern {pattern!r} matches no capsule")
    environments = {
        name: build_environment(name, spec) for name, spec in loaded.environments.items()
    }
    assignment = EnvironmentAssignment(rules=loaded.assignments, default=args.env)
    report = run_workflow(
        plan.workflow,
        environments=environments,
        assignment=assignment,
        master_seed=args.seed,
        run_root=out_dir,
    )
    for effect in report.hook_effects:
        if effect.action in ("to-string", "display"):
            print(effect.text)
    jobs = report.totals.get("jobs", 0)
    print(f"{report.status}: {jobs} jobs, outputs in {out_dir}", file=sys.stderr)
    return 0 if report.status == "completed" else 1


def _run_evolution(plan: EvolutionPlan, args, out_dir: Path) -> int:
    evaluate = build_evaluator(plan)
    gene_arrays = tuple(Prototype(p.name, Kind.REAL_ARRAY) for p in plan.genes)
    objective_arrays = tuple(Prototype(p.name, Kind.REAL_ARRAY) for p in plan.objectives)
    effects = []

    def observer(generation, population) -> None:
        snapshot = generation_context(generation, population, gene_arrays, objective_arrays)
        for hook in plan.population_hooks:
            effects.append(fire_hook(hook, snapshot))

    result = run_generational(
        evaluate,
        plan.spec,
        plan.params,
        master_seed=args.seed,
        observer=observer if plan.population_hooks else None,
    )
    front = result.front()
    front_contexts = [
        Context(
            {**dict(zip(plan.genes, ind.genome)), **dict(zip(plan.objectives, ind.objectives))}
        )
        for ind in front
    ]
    report = RunReport(
        status="completed",
        jobs=[],
        results={"front": front_contexts},
        hook_effects=effects,
        errors=[],
        totals={
            "generations": result.generations,
            "evaluations": result.evaluations,
            "reevaluations": result.reevaluations,
            "log": [dataclasses.asdict(record) for record in result.log],
        },
    )
    write_run_outputs(report, out_dir)
    print(f"completed: {result.generations} generations, front of {len(front)}, "
          f"outputs in {out_dir}", file=sys.stderr)
    return 0


def _run_islands(loaded: LoadedFile, plan: IslandsPlan, args, out_dir: Path) -> int:
    targets = {plan.name, plan.evolution.name, "island"}
    chosen = None
    for pattern, env_name in loaded.assignments:
        if not any(fnmatch.fnmatchcase(t, pattern) for t in targets):
            raise ConfigurationError(f"assignment pattern {pattern!r} matches no island target")
        chosen = env_name
    env_name = args.env or chosen or next(iter(loaded.environments))
    environment = build_environment(env_name, loaded.environments[env_name])
    evolution = plan.evolution
    evaluate = build_evaluator(evolution)
    gene_arrays = tuple(Prototype(p.name, Kind.REAL_ARRAY) for p in evolution.genes)
    objective_arrays = tuple(Prototype(p.name, Kind.REAL_ARRAY) for p in evolution.objectives)
    effects = []

    def observer(merges, archive) -> None:
        # Island runs snapshot the archive after each merge.
        snapshot = generation_context(merges, archive.members, gene_arrays, objective_arrays)
        for hook in evolution.population_hooks:
            effects.append(fire_hook(hook, snapshot))

    result = run_islands(
        evaluate,
        evolution.spec,
        plan.params,
        dimensions=len(evolution.objectives),
        environments=environment,
        master_seed=args.seed,
        observer=observer if evolution.population_hooks else None,
    )
    archive_contexts = [
        Context(
            {
                **dict(zip(evolution.genes, ind.genome)),
                **dict(zip(evolution.objectives, ind.objectives)),
            }
        )
        for ind in result.archive.members
    ]
    report = RunReport(
        status=result.status,
        jobs=result.jobs,
        results={"archive": archive_contexts},
        hook_effects=effects,
        errors=[],
        totals=result.totals,
    )
    write_run_outputs(report, out_dir)
    _write_archive_csv(result.archive.members, evolution, out_dir / "archive.csv")
    print(
        f"{result.status}: {result.merges} merges, archive of {len(result.archive)}, "
        f"outputs in {out_dir}",
        file=sys.stderr,
    )
    return 0 if result.status == "completed" else 1


def _write_archive_csv(members, evolution: EvolutionPlan, path: Path) -> None:
    names = [p.name for p in (*evolution.genes, *evolution.objectives)]
    lines = [",".join([*names, "evaluations"])]
    for ind in members:
        values = [render_value(Kind.REAL, v) for v in (*ind.genome, *ind.objectives)]
        lines.append(",".join([*values, str(ind.evaluations)]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
