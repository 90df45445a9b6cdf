"""Loading workflow definitions from YAML files.

A file declares prototypes, tasks, transitions, explorations, environments,
hooks, and assignments; loading turns it into exactly one runnable plan:

* a task graph (plain flow, possibly with a seed-replication exploration),
* a generational evolution over a model or a replication, or
* an island evolution wrapped around a generational one.

Errors carry file:line positions; every name is checked at load time.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from molerun.core import (
    Capsule,
    Context,
    DisplayHook,
    ExternalCommand,
    Hook,
    Kind,
    Prototype,
    SavePopulationHook,
    Task,
    ToStringHook,
    Transition,
    TransitionMode,
    Workflow,
    run_task,
)
from molerun.engine import BatchConfig, SimulatedDistributedConfig
from molerun.evolution import EvolutionParams, GenomeSpec, IslandParams, Timed
from molerun.schedulers import Flavor
from molerun.stochastic import (
    Descriptor,
    SeedFactor,
    StatisticSpec,
    WiringError,
    make_statistic_task,
    replicate,
    sample_seeds,
)
from molerun.surrogate import make_surrogate_task


class LoadError(Exception):
    """A workflow file cannot be turned into a plan."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.message = message


class _DuplicateKey(Exception):
    def __init__(self, key: str, line: int):
        self.key = key
        self.line = line


class _LineDict(dict):
    """A mapping that remembers where it and each of its keys were written."""

    line: int = 0
    key_lines: dict

    def line_of(self, key: str) -> int:
        return self.key_lines.get(key, self.line)


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _LineDict:
    mapping = _LineDict()
    mapping.line = node.start_mark.line + 1
    mapping.key_lines = {}
    for (key_node, _), (key, value) in zip(node.value, loader.construct_pairs(node, deep=True)):
        if key in mapping:
            raise _DuplicateKey(str(key), key_node.start_mark.line + 1)
        mapping[key] = value
        mapping.key_lines[key] = key_node.start_mark.line + 1
    return mapping


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


@dataclass(frozen=True)
class LocalSpec:
    """A thread- or process-pool environment declaration."""

    capacity: int = 4
    processes: bool = False


@dataclass
class TaskGraphPlan:
    workflow: Workflow
    lines: dict[str, int]


@dataclass
class EvolutionPlan:
    name: str
    model: Capsule
    seed_proto: Prototype
    genes: tuple[Prototype, ...]
    spec: GenomeSpec
    objectives: tuple[Prototype, ...]
    params: EvolutionParams
    validation_workflow: Workflow
    lines: dict[str, int]
    base: dict[Prototype, object] = field(default_factory=dict)
    replicate_count: int | None = None
    statistic: StatisticSpec | None = None
    statistic_task: Task | None = None
    population_hooks: list[SavePopulationHook] = field(default_factory=list)


@dataclass
class IslandsPlan:
    name: str
    evolution: EvolutionPlan
    params: IslandParams
    lines: dict[str, int]


@dataclass
class LoadedFile:
    path: Path
    name: str
    plan: TaskGraphPlan | EvolutionPlan | IslandsPlan
    environments: dict[str, object]
    assignments: tuple[tuple[str, str], ...]


_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smh])\s*$")


def parse_duration(value: object, *, path=None, line: int | None = None) -> float:
    """Seconds from a bare number or a '10s' / '30m' / '4h' string."""
    if isinstance(value, bool):
        raise LoadError(path, line, f"not a duration: {value!r}")
    if isinstance(value, (int, float)):
        if value < 0:
            raise LoadError(path, line, "a duration cannot be negative")
        return float(value)
    if isinstance(value, str):
        match = _DURATION_RE.match(value)
        if match:
            scale = {"s": 1.0, "m": 60.0, "h": 3600.0}[match.group(2)]
            return float(match.group(1)) * scale
    raise LoadError(path, line, f"not a duration: {value!r} (use seconds or '10s', '30m', '4h')")


class _Reader:
    """Checked access into the parsed document, with positions for errors."""

    def __init__(self, path: Path):
        self.path = path

    def fail(self, line: int | None, message: str):
        raise LoadError(self.path, line, message)

    def mapping(self, value, line, what) -> _LineDict:
        if not isinstance(value, dict):
            self.fail(line, f"{what} must be a mapping")
        if not isinstance(value, _LineDict):
            wrapped = _LineDict(value)
            wrapped.line = line or 0
            wrapped.key_lines = {}
            return wrapped
        return value

    def require(self, section: _LineDict, key: str, what: str):
        if key not in section:
            self.fail(section.line, f"{what} needs a {key!r} entry")
        return section[key]

    def text(self, value, line, what) -> str:
        if not isinstance(value, str) or not value:
            self.fail(line, f"{what} must be a non-empty string")
        return value

    def integer(self, value, line, what) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(line, f"{what} must be an integer")
        return value

    def number(self, value, line, what) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(line, f"{what} must be a number")
        return float(value)

    def boolean(self, value, line, what) -> bool:
        if not isinstance(value, bool):
            self.fail(line, f"{what} must be a boolean")
        return value

    def sequence(self, value, line, what) -> list:
        if not isinstance(value, list):
            self.fail(line, f"{what} must be a list")
        return value

    def check_keys(self, section: _LineDict, allowed: set[str], what: str) -> None:
        for key in section:
            if key not in allowed:
                self.fail(section.line_of(key), f"unknown {what} entry {key!r}")


_TOP_KEYS = {
    "name",
    "prototypes",
    "tasks",
    "flow",
    "explorations",
    "environments",
    "hooks",
    "assignments",
    "sources",
}


def load_workflow_file(path) -> LoadedFile:
    """Parse and cross-check one workflow file; LoadError on any problem."""
    path = Path(path)
    reader = _Reader(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(path, None, f"cannot read file: {exc}") from exc
    try:
        doc = yaml.load(text, Loader=_Loader)
    except _DuplicateKey as exc:
        raise LoadError(path, exc.line, f"duplicate key {exc.key!r}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise LoadError(
            path, mark.line + 1 if mark else None, f"invalid YAML: {getattr(exc, 'problem', exc)}"
        ) from exc
    if doc is None:
        reader.fail(1, "the file is empty")
    doc = reader.mapping(doc, 1, "the top level")
    reader.check_keys(doc, _TOP_KEYS, "top-level")
    name = reader.text(reader.require(doc, "name", "a workflow file"), doc.line_of("name"), "name")

    registry: dict[str, Prototype] = {}

    def declare(proto_name: str, kind: Kind, line: int) -> Prototype:
        existing = registry.get(proto_name)
        if existing is not None:
            if existing.kind is not kind:
                reader.fail(
                    line,
                    f"prototype {proto_name!r} already declared as {existing.kind}, now {kind}",
                )
            return existing
        proto = Prototype(proto_name, kind)
        registry[proto_name] = proto
        return proto

    def lookup(proto_name, line, what) -> Prototype:
        proto_name = reader.text(proto_name, line, what)
        proto = registry.get(proto_name)
        if proto is None:
            reader.fail(line, f"unknown prototype {proto_name!r}")
        return proto

    if "prototypes" in doc:
        section = reader.mapping(doc["prototypes"], doc.line_of("prototypes"), "prototypes")
        for proto_name, kind_text in section.items():
            line = section.line_of(proto_name)
            kind_text = reader.text(kind_text, line, f"the kind of {proto_name!r}")
            try:
                kind = Kind(kind_text)
            except ValueError:
                choices = ", ".join(k.value for k in Kind)
                reader.fail(line, f"unknown kind {kind_text!r} (one of: {choices})")
            declare(str(proto_name), kind, line)

    capsules: dict[str, Capsule] = {}
    capsule_lines: dict[str, int] = {}
    statistic_specs: dict[str, StatisticSpec] = {}

    def build_task(task_name: str, section: _LineDict) -> Task:
        kind = reader.text(reader.require(section, "kind", f"task {task_name!r}"),
                           section.line_of("kind"), "task kind")
        if kind == "surrogate":
            reader.check_keys(
                section, {"kind", "noise", "defaults", "duration", "memory"}, f"task {task_name!r}"
            )
            noise = True
            if "noise" in section:
                noise = reader.boolean(section["noise"], section.line_of("noise"), "noise")
            task = make_surrogate_task(noise=noise, name=task_name)
            for proto in (*task.inputs, *task.outputs):
                declare(proto.name, proto.kind, section.line)
            if "defaults" in section:
                given = reader.mapping(section["defaults"], section.line_of("defaults"), "defaults")
                defaults = dict(task.defaults)
                for key, value in given.items():
                    proto = lookup(key, given.line_of(key), "a default")
                    if proto not in task.inputs:
                        reader.fail(given.line_of(key), f"{key!r} is not an input of {task_name!r}")
                    defaults[proto] = value
                task = dataclasses.replace(task, defaults=defaults)
        elif kind == "command":
            reader.check_keys(
                section,
                {"kind", "command", "inputs", "outputs", "defaults", "output-file",
                 "duration", "memory"},
                f"task {task_name!r}",
            )
            template = reader.text(reader.require(section, "command", f"task {task_name!r}"),
                                   section.line_of("command"), "command")
            inputs = tuple(
                lookup(n, section.line_of("inputs"), "an input")
                for n in reader.sequence(section.get("inputs", []), section.line_of("inputs"), "inputs")
            )
            outputs = tuple(
                lookup(n, section.line_of("outputs"), "an output")
                for n in reader.sequence(
                    reader.require(section, "outputs", f"task {task_name!r}"),
                    section.line_of("outputs"), "outputs",
                )
            )
            defaults = {}
            if "defaults" in section:
                given = reader.mapping(section["defaults"], section.line_of("defaults"), "defaults")
                for key, value in given.items():
                    proto = lookup(key, given.line_of(key), "a default")
                    if proto not in inputs:
                        reader.fail(given.line_of(key), f"{key!r} is not an input of {task_name!r}")
                    defaults[proto] = value
            output_file = None
            if "output-file" in section:
                output_file = reader.text(section["output-file"], section.line_of("output-file"),
                                          "output-file")
            task = Task(
                name=task_name,
                inputs=inputs,
                outputs=outputs,
                defaults=defaults,
                command=ExternalCommand(template, output_file=output_file),
            )
        elif kind == "statistic":
            reader.check_keys(section, {"kind", "statistics"}, f"task {task_name!r}")
            rows = reader.sequence(
                reader.require(section, "statistics", f"task {task_name!r}"),
                section.line_of("statistics"), "statistics",
            )
            line = section.line_of("statistics")
            triples = []
            for row in rows:
                row = reader.sequence(row, line, "a statistic")
                if len(row) != 3:
                    reader.fail(line, "a statistic is a [source, descriptor, target] triple")
                source = lookup(row[0], line, "a statistic source")
                descriptor_text = reader.text(row[1], line, "a descriptor")
                try:
                    descriptor = Descriptor(descriptor_text)
                except ValueError:
                    choices = ", ".join(d.value for d in Descriptor)
                    reader.fail(line, f"unknown descriptor {descriptor_text!r} (one of: {choices})")
                target = declare(reader.text(row[2], line, "a statistic target"), Kind.REAL, line)
                triples.append((source, target, descriptor))
            try:
                spec = StatisticSpec(tuple(triples))
            except ValueError as exc:
                reader.fail(line, str(exc))
            statistic_specs[task_name] = spec
            task = make_statistic_task(spec, name=task_name)
            for proto in task.inputs:
                declare(proto.name, proto.kind, line)
        else:
            reader.fail(section.line_of("kind"),
                        f"unknown task kind {kind!r} (one of: surrogate, command, statistic)")
        if "duration" in section:
            seconds = parse_duration(section["duration"], path=path, line=section.line_of("duration"))
            task = dataclasses.replace(task, virtual_duration_s=seconds)
        if "memory" in section:
            memory = reader.integer(section["memory"], section.line_of("memory"), "memory")
            task = dataclasses.replace(task, memory_mb=memory)
        return task

    if "tasks" in doc:
        tasks_section = reader.mapping(doc["tasks"], doc.line_of("tasks"), "tasks")
        for task_name in tasks_section:
            line = tasks_section.line_of(task_name)
            section = reader.mapping(tasks_section[task_name], line, f"task {task_name!r}")
            task = build_task(str(task_name), section)
            capsules[str(task_name)] = Capsule(str(task_name), task)
            capsule_lines[str(task_name)] = line

    def capsule_of(value, line, what) -> Capsule:
        capsule_name = reader.text(value, line, what)
        capsule = capsules.get(capsule_name)
        if capsule is None:
            reader.fail(line, f"unknown task {capsule_name!r}")
        return capsule

    transitions: list[Transition] = []
    if "flow" in doc:
        for entry in reader.sequence(doc["flow"], doc.line_of("flow"), "flow"):
            entry = reader.mapping(entry, doc.line_of("flow"), "a flow edge")
            reader.check_keys(entry, {"from", "to"}, "flow edge")
            origin = capsule_of(reader.require(entry, "from", "a flow edge"), entry.line, "from")
            target = capsule_of(reader.require(entry, "to", "a flow edge"), entry.line, "to")
            transitions.append(Transition(origin, target, TransitionMode.DIRECT))

    explorations: dict[str, _LineDict] = {}
    if "explorations" in doc:
        section = reader.mapping(doc["explorations"], doc.line_of("explorations"), "explorations")
        for exploration_name in section:
            entry = reader.mapping(
                section[exploration_name], section.line_of(exploration_name),
                f"exploration {exploration_name!r}",
            )
            entry.line = section.line_of(exploration_name)
            explorations[str(exploration_name)] = entry

    def of_kind(kind: str) -> list[str]:
        found = [
            exploration_name
            for exploration_name, entry in explorations.items()
            if reader.text(reader.require(entry, "kind", f"exploration {exploration_name!r}"),
                           entry.line_of("kind"), "exploration kind") == kind
        ]
        if len(found) > 1:
            reader.fail(explorations[found[1]].line, f"only one {kind!r} exploration is allowed")
        return found

    replicate_names = of_kind("replicate")
    nsga2_names = of_kind("nsga2")
    islands_names = of_kind("islands")
    known_kinds = {"replicate", "nsga2", "islands"}
    for exploration_name, entry in explorations.items():
        kind = entry["kind"]
        if kind not in known_kinds:
            reader.fail(entry.line_of("kind"),
                        f"unknown exploration kind {kind!r} (one of: replicate, nsga2, islands)")

    def build_replicate(entry: _LineDict, exploration_name: str):
        reader.check_keys(entry, {"kind", "model", "seed", "count", "statistic"},
                          f"exploration {exploration_name!r}")
        model = capsule_of(reader.require(entry, "model", "a replicate exploration"),
                           entry.line_of("model"), "model")
        seed_proto = lookup(reader.require(entry, "seed", "a replicate exploration"),
                            entry.line_of("seed"), "the seed prototype")
        count = reader.integer(reader.require(entry, "count", "a replicate exploration"),
                               entry.line_of("count"), "count")
        statistic_name = reader.text(reader.require(entry, "statistic", "a replicate exploration"),
                                     entry.line_of("statistic"), "statistic")
        if statistic_name not in statistic_specs:
            reader.fail(entry.line_of("statistic"), f"{statistic_name!r} is not a statistic task")
        spec = statistic_specs[statistic_name]
        try:
            factor = SeedFactor(seed_proto, count)
            fragment = replicate(model, factor, spec, statistic_id=statistic_name)
        except (ValueError, WiringError) as exc:
            reader.fail(entry.line, str(exc))
        return model, seed_proto, count, spec, fragment

    def build_evolution(entry: _LineDict, exploration_name: str) -> EvolutionPlan:
        reader.check_keys(
            entry,
            {"kind", "model", "seed", "genome", "objectives", "mu", "lambda",
             "termination", "reevaluate"},
            f"exploration {exploration_name!r}",
        )
        model_name = reader.text(reader.require(entry, "model", "an nsga2 exploration"),
                                 entry.line_of("model"), "model")
        replicate_count = None
        statistic_spec = None
        statistic_task = None
        if model_name in replicate_names:
            rep_entry = explorations[model_name]
            model, seed_proto, replicate_count, statistic_spec, fragment = build_replicate(
                rep_entry, model_name
            )
            statistic_task = fragment.statistic.task
            validation_capsules = (model, fragment.statistic)
            validation_transitions = fragment.transitions
        elif model_name in capsules:
            model = capsules[model_name]
            seed_name = entry.get("seed", "seed")
            seed_proto = lookup(seed_name, entry.line_of("seed") if "seed" in entry else entry.line,
                                "the evaluation seed prototype")
            if seed_proto not in model.task.inputs:
                reader.fail(entry.line, f"model {model_name!r} does not take {seed_proto.name!r}")
            validation_capsules = (model,)
            validation_transitions = ()
        else:
            reader.fail(entry.line_of("model"),
                        f"{model_name!r} is neither a task nor a replicate exploration")

        genome_section = reader.mapping(reader.require(entry, "genome", "an nsga2 exploration"),
                                        entry.line_of("genome"), "genome")
        genes = []
        lower = []
        upper = []
        for gene_name in genome_section:
            line = genome_section.line_of(gene_name)
            proto = lookup(gene_name, line, "a gene")
            if proto.kind is not Kind.REAL:
                reader.fail(line, f"gene {proto.name!r} must be a real prototype")
            if proto not in model.task.inputs:
                reader.fail(line, f"gene {proto.name!r} is not an input of {model.id!r}")
            bounds = reader.sequence(genome_section[gene_name], line, "gene bounds")
            if len(bounds) != 2:
                reader.fail(line, "gene bounds are a [lower, upper] pair")
            genes.append(proto)
            lower.append(reader.number(bounds[0], line, "a bound"))
            upper.append(reader.number(bounds[1], line, "a bound"))
        if not genes:
            reader.fail(entry.line_of("genome"), "the genome needs at least one gene")
        try:
            spec = GenomeSpec(tuple(p.name for p in genes), tuple(lower), tuple(upper))
        except ValueError as exc:
            reader.fail(entry.line_of("genome"), str(exc))

        objective_names = reader.sequence(
            reader.require(entry, "objectives", "an nsga2 exploration"),
            entry.line_of("objectives"), "objectives",
        )
        if len(objective_names) < 2:
            reader.fail(entry.line_of("objectives"), "nsga2 needs at least two objectives")
        if statistic_spec is not None:
            produced = {target.name: target for _, target, _ in statistic_spec.triples}
        else:
            produced = {p.name: p for p in model.task.outputs if p.kind is Kind.REAL}
        objectives = []
        for objective_name in objective_names:
            objective_name = reader.text(objective_name, entry.line_of("objectives"), "an objective")
            if objective_name not in produced:
                reader.fail(entry.line_of("objectives"),
                            f"objective {objective_name!r} is not produced by the model")
            objectives.append(produced[objective_name])

        mu = reader.integer(entry.get("mu", 10), entry.line_of("mu") if "mu" in entry else entry.line, "mu")
        offspring = reader.integer(entry.get("lambda", 10),
                                   entry.line_of("lambda") if "lambda" in entry else entry.line,
                                   "lambda")
        termination: int | Timed = 20
        if "termination" in entry:
            raw = entry["termination"]
            line = entry.line_of("termination")
            if isinstance(raw, bool):
                reader.fail(line, "termination is a generation count or a duration")
            elif isinstance(raw, int):
                termination = raw
            else:
                termination = Timed(parse_duration(raw, path=path, line=line))
        reevaluate = 0.0
        if "reevaluate" in entry:
            reevaluate = reader.number(entry["reevaluate"], entry.line_of("reevaluate"), "reevaluate")
        try:
            params = EvolutionParams(mu=mu, offspring=offspring, termination=termination,
                                     reevaluate=reevaluate)
        except ValueError as exc:
            reader.fail(entry.line, str(exc))

        # Validation sees the bindings the optimizer will supply at runtime.
        supplied = {proto: lo for proto, lo in zip(genes, lower)}
        supplied[seed_proto] = 0
        validation_workflow = Workflow(
            capsules=validation_capsules,
            transitions=validation_transitions,
            sources=Context(supplied),
        )
        return EvolutionPlan(
            name=exploration_name,
            model=model,
            seed_proto=seed_proto,
            genes=tuple(genes),
            spec=spec,
            objectives=tuple(objectives),
            params=params,
            validation_workflow=validation_workflow,
            lines={exploration_name: entry.line, model.id: capsule_lines.get(model.id, entry.line)},
            replicate_count=replicate_count,
            statistic=statistic_spec,
            statistic_task=statistic_task,
        )

    plan: TaskGraphPlan | EvolutionPlan | IslandsPlan
    if islands_names:
        islands_name = islands_names[0]
        entry = explorations[islands_name]
        reader.check_keys(
            entry,
            {"kind", "evolution", "islands", "total", "sample", "generations",
             "duration", "memory", "archive"},
            f"exploration {islands_name!r}",
        )
        evolution_name = reader.text(reader.require(entry, "evolution", "an islands exploration"),
                                     entry.line_of("evolution"), "evolution")
        if evolution_name not in nsga2_names:
            reader.fail(entry.line_of("evolution"),
                        f"{evolution_name!r} is not an nsga2 exploration")
        evolution = build_evolution(explorations[evolution_name], evolution_name)
        kwargs: dict[str, object] = {}
        for key, target in (("islands", "islands"), ("total", "total_merges"),
                            ("sample", "sample_size"), ("generations", "generations"),
                            ("memory", "memory_mb"), ("archive", "archive_capacity")):
            if key in entry:
                kwargs[target] = reader.integer(entry[key], entry.line_of(key), key)
        if "duration" in entry:
            kwargs["virtual_duration_s"] = parse_duration(
                entry["duration"], path=path, line=entry.line_of("duration")
            )
        kwargs["offspring"] = evolution.params.offspring
        kwargs["reevaluate"] = evolution.params.reevaluate
        try:
            params = IslandParams(**kwargs)
        except (TypeError, ValueError) as exc:
            reader.fail(entry.line, str(exc))
        plan = IslandsPlan(
            name=islands_name,
            evolution=evolution,
            params=params,
            lines={islands_name: entry.line, **evolution.lines},
        )
    elif nsga2_names:
        plan = build_evolution(explorations[nsga2_names[0]], nsga2_names[0])
    elif replicate_names:
        rep_name = replicate_names[0]
        model, seed_proto, count, spec, fragment = build_replicate(explorations[rep_name], rep_name)
        # The wired statistic capsule replaces the plain task declaration so
        # that transitions and hooks reference one and the same object.
        capsules[fragment.statistic.id] = fragment.statistic
        workflow_capsules = tuple(capsules.values())
        transitions.extend(fragment.transitions)
        plan = TaskGraphPlan(
            workflow=Workflow(capsules=workflow_capsules, transitions=tuple(transitions)),
            lines=dict(capsule_lines),
        )
    else:
        if not capsules:
            reader.fail(doc.line, "the file declares no tasks")
        plan = TaskGraphPlan(
            workflow=Workflow(capsules=tuple(capsules.values()), transitions=tuple(transitions)),
            lines=dict(capsule_lines),
        )
    if not isinstance(plan, TaskGraphPlan) and transitions:
        reader.fail(doc.line_of("flow"), "flow edges only apply to task-graph runs")

    if "sources" in doc:
        section = reader.mapping(doc["sources"], doc.line_of("sources"), "sources")
        bindings = {}
        for proto_name, value in section.items():
            proto = lookup(proto_name, section.line_of(proto_name), "a source")
            try:
                bindings[proto] = value
            except Exception as exc:  # coercion happens inside Context below
                reader.fail(section.line_of(proto_name), str(exc))
        try:
            source_context = Context(bindings)
        except Exception as exc:
            reader.fail(section.line, f"bad source value: {exc}")
        if isinstance(plan, TaskGraphPlan):
            plan.workflow = dataclasses.replace(plan.workflow, sources=source_context)
        else:
            target = plan.evolution if isinstance(plan, IslandsPlan) else plan
            target.base.update(bindings)

    hooks: list[Hook] = []
    if "hooks" in doc:
        for entry in reader.sequence(doc["hooks"], doc.line_of("hooks"), "hooks"):
            entry = reader.mapping(entry, doc.line_of("hooks"), "a hook")
            kind = reader.text(reader.require(entry, "kind", "a hook"), entry.line_of("kind"),
                               "hook kind")
            if kind == "to-string":
                reader.check_keys(entry, {"kind", "capsule", "prototypes"}, "to-string hook")
                capsule = capsule_of(reader.require(entry, "capsule", "a to-string hook"),
                                     entry.line_of("capsule"), "capsule")
                protos = tuple(
                    lookup(n, entry.line_of("prototypes"), "a hook prototype")
                    for n in reader.sequence(
                        reader.require(entry, "prototypes", "a to-string hook"),
                        entry.line_of("prototypes"), "prototypes",
                    )
                )
                hooks.append(ToStringHook(capsule, protos))
            elif kind == "display":
                reader.check_keys(entry, {"kind", "capsule", "template"}, "display hook")
                capsule = capsule_of(reader.require(entry, "capsule", "a display hook"),
                                     entry.line_of("capsule"), "capsule")
                template = reader.text(reader.require(entry, "template", "a display hook"),
                                       entry.line_of("template"), "template")
                hooks.append(DisplayHook(capsule, template))
            elif kind == "save-population":
                reader.check_keys(entry, {"kind", "capsule", "directory"}, "save-population hook")
                owner = reader.text(reader.require(entry, "capsule", "a save-population hook"),
                                    entry.line_of("capsule"), "capsule")
                evolution = None
                if isinstance(plan, EvolutionPlan) and owner == plan.name:
                    evolution = plan
                elif isinstance(plan, IslandsPlan) and owner in (plan.name, plan.evolution.name):
                    evolution = plan.evolution
                if evolution is None:
                    reader.fail(entry.line_of("capsule"),
                                "save-population hooks attach to an nsga2 or islands exploration")
                directory = ""
                if "directory" in entry:
                    directory = reader.text(entry["directory"], entry.line_of("directory"),
                                            "directory")
                gene_arrays = tuple(Prototype(p.name, Kind.REAL_ARRAY) for p in evolution.genes)
                objective_arrays = tuple(
                    Prototype(p.name, Kind.REAL_ARRAY) for p in evolution.objectives
                )
                evolution.population_hooks.append(
                    SavePopulationHook(
                        Capsule(owner, evolution.model.task), directory,
                        gene_arrays, objective_arrays,
                    )
                )
            else:
                reader.fail(entry.line_of("kind"),
                            f"unknown hook kind {kind!r} (one of: to-string, display, save-population)")
    if hooks:
        if not isinstance(plan, TaskGraphPlan):
            reader.fail(doc.line_of("hooks"),
                        "to-string and display hooks attach to tasks in a task-graph run")
        plan.workflow = dataclasses.replace(plan.workflow, hooks=tuple(hooks))

    environments: dict[str, object] = {}
    if "environments" in doc:
        section = reader.mapping(doc["environments"], doc.line_of("environments"), "environments")
        for env_name in section:
            line = section.line_of(env_name)
            entry = reader.mapping(section[env_name], line, f"environment {env_name!r}")
            entry.line = line
            environments[str(env_name)] = _build_environment_spec(reader, entry, str(env_name))
    if not environments:
        environments["local"] = LocalSpec()

    assignments: list[tuple[str, str]] = []
    if "assignments" in doc:
        section = reader.mapping(doc["assignments"], doc.line_of("assignments"), "assignments")
        for pattern, env_name in section.items():
            line = section.line_of(pattern)
            env_name = reader.text(env_name, line, "an environment name")
            if env_name not in environments:
                reader.fail(line, f"unknown environment {env_name!r}")
            assignments.append((str(pattern), env_name))

    return LoadedFile(
        path=path,
        name=name,
        plan=plan,
        environments=environments,
        assignments=tuple(assignments),
    )


def _build_environment_spec(reader: _Reader, entry: _LineDict, env_name: str):
    kind = reader.text(reader.require(entry, "kind", f"environment {env_name!r}"),
                       entry.line_of("kind"), "environment kind")
    path = reader.path
    if kind in ("threads", "processes"):
        reader.check_keys(entry, {"kind", "capacity"}, f"environment {env_name!r}")
        capacity = 4
        if "capacity" in entry:
            capacity = reader.integer(entry["capacity"], entry.line_of("capacity"), "capacity")
        try:
            return LocalSpec(capacity=capacity, processes=kind == "processes")
        except ValueError as exc:
            reader.fail(entry.line, str(exc))
    if kind == "simulated":
        reader.check_keys(entry, {"kind", "nodes", "speed", "latency", "failure",
                                  "memory", "walltime"}, f"environment {env_name!r}")
        kwargs: dict[str, object] = {}
        if "nodes" in entry:
            kwargs["nodes"] = reader.integer(entry["nodes"], entry.line_of("nodes"), "nodes")
        if "speed" in entry:
            kwargs["speed_factor"] = reader.number(entry["speed"], entry.line_of("speed"), "speed")
        if "latency" in entry:
            pair = reader.sequence(entry["latency"], entry.line_of("latency"), "latency")
            if len(pair) != 2:
                reader.fail(entry.line_of("latency"), "latency is a [low, high] pair (milliseconds)")
            lo = reader.number(pair[0], entry.line_of("latency"), "a latency bound")
            hi = reader.number(pair[1], entry.line_of("latency"), "a latency bound")
            kwargs["latency_s"] = (lo / 1000.0, hi / 1000.0)
        if "failure" in entry:
            kwargs["failure_probability"] = reader.number(entry["failure"],
                                                          entry.line_of("failure"), "failure")
        if "memory" in entry:
            kwargs["memory_limit_mb"] = reader.integer(entry["memory"], entry.line_of("memory"),
                                                       "memory")
        if "walltime" in entry:
            kwargs["walltime_s"] = parse_duration(entry["walltime"], path=path,
                                                  line=entry.line_of("walltime"))
        try:
            return SimulatedDistributedConfig(**kwargs)
        except ValueError as exc:
            reader.fail(entry.line, str(exc))
    if kind == "batch":
        reader.check_keys(entry, {"kind", "flavor", "nodes", "walltime", "memory", "queue"},
                          f"environment {env_name!r}")
        flavor_text = reader.text(reader.require(entry, "flavor", f"environment {env_name!r}"),
                                  entry.line_of("flavor"), "flavor")
        try:
            flavor = Flavor(flavor_text)
        except ValueError:
            choices = ", ".join(f.value for f in Flavor)
            reader.fail(entry.line_of("flavor"), f"unknown flavor {flavor_text!r} (one of: {choices})")
        kwargs = {"flavor": flavor}
        if "nodes" in entry:
            kwargs["nodes"] = reader.integer(entry["nodes"], entry.line_of("nodes"), "nodes")
        if "walltime" in entry:
            kwargs["walltime_s"] = int(parse_duration(entry["walltime"], path=path,
                                                      line=entry.line_of("walltime")))
        if "memory" in entry:
            kwargs["memory_mb"] = reader.integer(entry["memory"], entry.line_of("memory"), "memory")
        if "queue" in entry:
            kwargs["queue"] = reader.text(entry["queue"], entry.line_of("queue"), "queue")
        try:
            return BatchConfig(**kwargs)
        except ValueError as exc:
            reader.fail(entry.line, str(exc))
    reader.fail(entry.line_of("kind"),
                f"unknown environment kind {kind!r} (one of: threads, processes, simulated, batch)")


def build_environment(env_name: str, spec):
    """An executable environment from its declaration."""
    from molerun.engine import BatchEnvironment, LocalEnvironment, SimulatedEnvironment

    if isinstance(spec, LocalSpec):
        return LocalEnvironment(env_name, spec.capacity, processes=spec.processes)
    if isinstance(spec, SimulatedDistributedConfig):
        return SimulatedEnvironment(env_name, spec)
    if isinstance(spec, BatchConfig):
        return BatchEnvironment(env_name, spec)
    raise TypeError(f"not an environment declaration: {spec!r}")


def build_evaluator(plan: EvolutionPlan):
    """The (genome, seed) -> objectives function a plan's optimizer calls.

    Replication-backed plans fan the evaluation seed into per-replicate
    seeds, run the model once per replicate, and reduce through the plan's
    statistic task; direct plans run the model once.
    """
    base = dict(plan.base)

    def run_model(genome, seed: int) -> Context:
        bindings = dict(base)
        bindings.update(zip(plan.genes, genome))
        bindings[plan.seed_proto] = seed
        return run_task(plan.model.task, Context(bindings))

    if plan.replicate_count is None:

        def evaluate(genome, seed: int):
            out = run_model(genome, seed)
            return tuple(out[p] for p in plan.objectives)

    else:
        statistic = plan.statistic
        statistic_task = plan.statistic_task

        def evaluate(genome, seed: int):
            sources = [source for source, _, _ in statistic.triples]
            gathered = {source: [] for source in sources}
            for replicate_seed in sample_seeds(seed, plan.replicate_count):
                out = run_model(genome, replicate_seed)
                for source in sources:
                    gathered[source].append(out[source])
            arrays = Context(
                {statistic.collected(s): tuple(vals) for s, vals in gathered.items()}
            )
            stats = run_task(statistic_task, arrays)
            return tuple(stats[p] for p in plan.objectives)

    return evaluate
