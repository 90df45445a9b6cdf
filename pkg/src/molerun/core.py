"""Typed dataflow primitives: prototypes, contexts, tasks, and workflow graphs.

A workflow is a tree of capsules (task wrappers) connected by transitions.
Direct transitions pass one context along, exploration transitions fan a
context out into branches, and aggregation transitions fire once after all
branches complete, collecting designated branch outputs into arrays. Hooks
observe completed executions without touching the dataflow.
"""

from __future__ import annotations

import enum
import string
import subprocess
import tempfile
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar


class DataflowError(Exception):
    """Base for dataflow contract violations."""


class KindError(DataflowError):
    """A value does not match its prototype's kind."""


class MissingInputError(DataflowError):
    """A task input is neither bound in the context nor defaulted."""


class KernelContractError(DataflowError):
    """A kernel did not bind exactly its task's declared outputs."""


class CommandError(DataflowError):
    """An external command exited with a nonzero status."""

    def __init__(self, returncode: int, stderr: str):
        super().__init__(f"command exited with status {returncode}: {stderr.strip()}")
        self.returncode = returncode
        self.stderr = stderr


class OutputFormatError(DataflowError):
    """External command output could not be parsed into the declared outputs."""


class HookError(DataflowError):
    """A hook could not render; the observed task itself is unaffected."""


class _NameTemplate(string.Template):
    # Statistic targets carry dots (food1.median), which the stock
    # identifier pattern rejects; placeholders here are whole prototype names.
    idpattern = r"(?a:[_a-z][._a-z0-9]*)"


class Kind(enum.Enum):
    """The closed set of value kinds a prototype can carry."""

    INTEGER = "integer"
    REAL = "real"
    TEXT = "text"
    BOOLEAN = "boolean"
    REAL_ARRAY = "array-of-real"
    INTEGER_ARRAY = "array-of-integer"

    def __str__(self) -> str:
        return self.value


_ARRAY_OF = {Kind.REAL: Kind.REAL_ARRAY, Kind.INTEGER: Kind.INTEGER_ARRAY}
_ELEMENT_OF = {Kind.REAL_ARRAY: Kind.REAL, Kind.INTEGER_ARRAY: Kind.INTEGER}


def coerce_value(kind: Kind, value: object) -> object:
    """Return `value` in canonical form for `kind`, or raise KindError.

    Integers widen to reals; arrays are stored as tuples so contexts stay
    immutable and hashable. bool is not accepted where a number is expected.
    """
    if kind is Kind.INTEGER:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is Kind.REAL:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is Kind.TEXT:
        if isinstance(value, str):
            return value
    elif kind is Kind.BOOLEAN:
        if isinstance(value, bool):
            return value
    elif kind in _ELEMENT_OF:
        if isinstance(value, (list, tuple)):
            element = _ELEMENT_OF[kind]
            return tuple(coerce_value(element, item) for item in value)
    raise KindError(f"expected {kind.value}, got {value!r}")


def render_value(kind: Kind, value: object) -> str:
    """Render a value for hooks and command lines.

    Reals use the shortest round-trip decimal form, booleans render as
    true/false, arrays as [a,b] without spaces.
    """
    if kind is Kind.REAL:
        return repr(value)
    if kind is Kind.BOOLEAN:
        return "true" if value else "false"
    if kind in _ELEMENT_OF:
        element = _ELEMENT_OF[kind]
        return "[" + ",".join(render_value(element, item) for item in value) + "]"
    return str(value)


def parse_value(kind: Kind, text: str) -> object:
    """Parse the textual form produced by render_value back into a value."""
    text = text.strip()
    try:
        if kind is Kind.INTEGER:
            return int(text)
        if kind is Kind.REAL:
            return float(text)
        if kind is Kind.TEXT:
            return text
        if kind is Kind.BOOLEAN:
            if text in ("true", "false"):
                return text == "true"
            raise ValueError(text)
        if not (text.startswith("[") and text.endswith("]")):
            raise ValueError(text)
        body = text[1:-1].strip()
        element = _ELEMENT_OF[kind]
        return tuple(parse_value(element, item) for item in body.split(",")) if body else ()
    except ValueError as exc:
        raise KindError(f"cannot parse {text!r} as {kind.value}") from exc


@dataclass(frozen=True)
class Prototype:
    """A typed, named variable slot; the unit of dataflow."""

    name: str
    kind: Kind

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("prototype name must be non-empty")

    def __repr__(self) -> str:
        return f"Prototype({self.name!r}, {self.kind.value})"


class Context:
    """An immutable binding of prototypes to values of matching kind."""

    __slots__ = ("_bindings",)

    def __init__(self, bindings: Mapping[Prototype, object] | None = None):
        coerced: dict[Prototype, object] = {}
        if bindings:
            for proto, value in bindings.items():
                coerced[proto] = coerce_value(proto.kind, value)
        self._bindings: dict[Prototype, object] = coerced

    def bind(self, proto: Prototype, value: object) -> "Context":
        out = Context()
        out._bindings.update(self._bindings)
        out._bindings[proto] = coerce_value(proto.kind, value)
        return out

    def merge(self, other: "Context") -> "Context":
        """A new context with `other`'s bindings shadowing this one's."""
        out = Context()
        out._bindings.update(self._bindings)
        out._bindings.update(other._bindings)
        return out

    def restrict(self, protos: Iterator[Prototype] | tuple[Prototype, ...]) -> "Context":
        out = Context()
        out._bindings = {p: self._bindings[p] for p in protos if p in self._bindings}
        return out

    def get(self, proto: Prototype, default: object = None) -> object:
        return self._bindings.get(proto, default)

    def __getitem__(self, proto: Prototype) -> object:
        try:
            return self._bindings[proto]
        except KeyError:
            raise KeyError(f"unbound prototype {proto.name!r}") from None

    def __contains__(self, proto: Prototype) -> bool:
        return proto in self._bindings

    def __iter__(self) -> Iterator[Prototype]:
        return iter(self._bindings)

    def items(self):
        return self._bindings.items()

    def __len__(self) -> int:
        return len(self._bindings)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Context):
            return NotImplemented
        return self._bindings == other._bindings

    def __hash__(self) -> int:
        return hash(frozenset(self._bindings.items()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{p.name}={v!r}" for p, v in self._bindings.items())
        return f"Context({inner})"


Kernel = Callable[[Context], Context]


@dataclass(frozen=True)
class ExternalCommand:
    """A command-line kernel: a shell template plus an output parsing rule.

    ${name} placeholders are substituted with rendered input values. Outputs
    are read as key=value lines from standard output, or from `output_file`
    (relative to the scratch directory) when that is set.
    """

    template: str
    output_file: str | None = None


@dataclass(frozen=True, eq=False)
class Task:
    """A unit of computation with declared inputs, outputs, and defaults.

    Exactly one of `kernel` (a pure Context -> Context function) and
    `command` must be given. `memory_mb` and `virtual_duration_s` carry the
    declared resource demand used by simulated and batch environments; they
    have no effect on local execution.
    """

    name: str
    inputs: tuple[Prototype, ...]
    outputs: tuple[Prototype, ...]
    defaults: Mapping[Prototype, object] = field(default_factory=dict)
    kernel: Kernel | None = None
    command: ExternalCommand | None = None
    memory_mb: int = 0
    virtual_duration_s: float = 0.0

    def __post_init__(self) -> None:
        if (self.kernel is None) == (self.command is None):
            raise ValueError(f"task {self.name!r} needs exactly one of kernel and command")
        if self.memory_mb < 0 or self.virtual_duration_s < 0:
            raise ValueError(f"task {self.name!r} has a negative resource demand")
        inputs = set(self.inputs)
        coerced = {}
        for proto, value in self.defaults.items():
            if proto not in inputs:
                raise ValueError(f"task {self.name!r}: default for {proto.name!r} is not an input")
            coerced[proto] = coerce_value(proto.kind, value)
        object.__setattr__(self, "defaults", coerced)


def run_task(task: Task, context: Context, *, workdir: Path | None = None) -> Context:
    """Run a task's kernel over the context and return exactly its outputs.

    The kernel sees only the declared inputs, with context bindings shadowing
    defaults. A result that does not bind exactly the declared outputs is a
    contract violation.
    """
    bindings: dict[Prototype, object] = {}
    for proto in task.inputs:
        if proto in context:
            bindings[proto] = context[proto]
        elif proto in task.defaults:
            bindings[proto] = task.defaults[proto]
        else:
            raise MissingInputError(f"task {task.name!r} is missing input {proto.name!r}")
    kernel_input = Context(bindings)
    if task.command is not None:
        result = run_external_command(task.command, task.outputs, kernel_input, workdir=workdir)
    else:
        result = task.kernel(kernel_input)
    produced = set(result)
    declared = set(task.outputs)
    if produced != declared:
        extra = sorted(p.name for p in produced - declared)
        missing = sorted(p.name for p in declared - produced)
        raise KernelContractError(
            f"task {task.name!r} kernel output mismatch:"
            f" extra {extra or 'none'}, missing {missing or 'none'}"
        )
    return result


def run_external_command(
    command: ExternalCommand,
    outputs: tuple[Prototype, ...],
    context: Context,
    *,
    workdir: Path | None = None,
) -> Context:
    """Substitute, run, and parse an external command in a scratch directory.

    Captured stdout/stderr are persisted as stdout.txt and stderr.txt in the
    scratch directory. A nonzero exit status raises CommandError carrying the
    captured stderr.
    """
    values = {proto.name: render_value(proto.kind, value) for proto, value in context.items()}
    try:
        line = _NameTemplate(command.template).substitute(values)
    except (KeyError, ValueError) as exc:
        raise MissingInputError(f"command placeholder references unbound {exc.args[0]!r}") from exc
    if workdir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return _execute_command(line, command, outputs, Path(tmp))
    workdir.mkdir(parents=True, exist_ok=True)
    return _execute_command(line, command, outputs, workdir)


def _execute_command(
    line: str, command: ExternalCommand, outputs: tuple[Prototype, ...], workdir: Path
) -> Context:
    proc = subprocess.run(line, shell=True, cwd=workdir, capture_output=True, text=True)
    (workdir / "stdout.txt").write_text(proc.stdout)
    (workdir / "stderr.txt").write_text(proc.stderr)
    if proc.returncode != 0:
        raise CommandError(proc.returncode, proc.stderr)
    if command.output_file is not None:
        try:
            source = (workdir / command.output_file).read_text()
        except FileNotFoundError:
            raise OutputFormatError(f"output file {command.output_file!r} was not produced") from None
    else:
        source = proc.stdout
    parsed: dict[str, str] = {}
    for raw in source.splitlines():
        key, sep, rest = raw.partition("=")
        if sep:
            parsed[key.strip()] = rest.strip()
    bindings: dict[Prototype, object] = {}
    for proto in outputs:
        if proto.name not in parsed:
            raise OutputFormatError(f"output {proto.name!r} missing from command output")
        try:
            bindings[proto] = parse_value(proto.kind, parsed[proto.name])
        except KindError as exc:
            raise OutputFormatError(f"output {proto.name!r}: {exc}") from exc
    return Context(bindings)


@dataclass(frozen=True, eq=False)
class Capsule:
    """An identity wrapper around a task; transitions and hooks anchor here.

    The same task may be wrapped by several capsules; each wrapping is a
    distinct node in the workflow.
    """

    id: str
    task: Task


class Sampling(ABC):
    """Expands one context into the branch contexts of an exploration."""

    @abstractmethod
    def binds(self) -> tuple[Prototype, ...]:
        """The prototypes every branch context adds to its parent."""

    @abstractmethod
    def branches(self, context: Context, master_seed: int) -> list[Context]:
        """The fan-out contexts, each derived from `context`."""


class TransitionMode(enum.Enum):
    DIRECT = "direct"
    EXPLORATION = "exploration"
    AGGREGATION = "aggregation"


@dataclass(frozen=True, eq=False)
class Transition:
    """An edge moving contexts from `source` to `target`.

    Exploration transitions carry a sampling; a source of None fans out the
    workflow's initial context. Aggregation transitions carry a collect map
    from branch-scalar prototypes to the array prototypes that gather them.
    """

    source: Capsule | None
    target: Capsule
    mode: TransitionMode = TransitionMode.DIRECT
    sampling: Sampling | None = None
    collect: Mapping[Prototype, Prototype] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.mode is TransitionMode.EXPLORATION) != (self.sampling is not None):
            raise ValueError("sampling is required on exploration transitions and only there")
        if self.source is None and self.mode is not TransitionMode.EXPLORATION:
            raise ValueError("only exploration transitions may start from the initial context")
        if self.mode is TransitionMode.AGGREGATION:
            if not self.collect:
                raise ValueError("aggregation transitions need a non-empty collect map")
            for scalar, array in self.collect.items():
                if _ARRAY_OF.get(scalar.kind) is not array.kind:
                    raise ValueError(
                        f"cannot collect {scalar.name!r} ({scalar.kind}) into"
                        f" {array.name!r} ({array.kind})"
                    )
        elif self.collect:
            raise ValueError("collect maps are only allowed on aggregation transitions")


@dataclass(frozen=True)
class HookEffect:
    """The observable outcome of one hook firing."""

    action: str
    capsule_id: str
    text: str
    path: str | None = None


# Conventional prototypes used by per-generation population snapshots.
GENERATION = Prototype("generation", Kind.INTEGER)
EVALUATIONS = Prototype("evaluations", Kind.INTEGER_ARRAY)


class Hook(ABC):
    """A side-effecting observer fired once per completed capsule execution."""

    capsule: Capsule
    action: ClassVar[str]

    @abstractmethod
    def render(self, context: Context) -> HookEffect:
        """Render the hook's effect from the observed context."""


@dataclass(frozen=True, eq=False)
class ToStringHook(Hook):
    """Renders name=value pairs, comma-separated, in declaration order."""

    capsule: Capsule
    prototypes: tuple[Prototype, ...]
    action: ClassVar[str] = "to-string"

    def render(self, context: Context) -> HookEffect:
        parts = []
        for proto in self.prototypes:
            if proto not in context:
                raise HookError(f"to-string on {self.capsule.id!r}: unbound prototype {proto.name!r}")
            parts.append(f"{proto.name}={render_value(proto.kind, context[proto])}")
        return HookEffect(self.action, self.capsule.id, ",".join(parts))


@dataclass(frozen=True, eq=False)
class DisplayHook(Hook):
    """Writes a ${proto}-substituted template line to the run log."""

    capsule: Capsule
    template: str
    action: ClassVar[str] = "display"

    def render(self, context: Context) -> HookEffect:
        values = {proto.name: render_value(proto.kind, value) for proto, value in context.items()}
        try:
            text = _NameTemplate(self.template).substitute(values)
        except (KeyError, ValueError) as exc:
            raise HookError(
                f"display on {self.capsule.id!r}: unbound prototype {exc.args[0]!r}"
            ) from exc
        return HookEffect(self.action, self.capsule.id, text, path="run.log")


@dataclass(frozen=True, eq=False)
class SavePopulationHook(Hook):
    """Writes one population<generation>.csv per observed population snapshot.

    The observed context must bind `generation`, one array per gene and
    objective (one entry per individual), and `evaluations`.
    """

    capsule: Capsule
    directory: str
    genes: tuple[Prototype, ...]
    objectives: tuple[Prototype, ...]
    action: ClassVar[str] = "save-population"

    def render(self, context: Context) -> HookEffect:
        columns = (*self.genes, *self.objectives, EVALUATIONS)
        for proto in (GENERATION, *columns):
            if proto not in context:
                raise HookError(
                    f"save-population on {self.capsule.id!r}: unbound prototype {proto.name!r}"
                )
        generation = context[GENERATION]
        arrays = [context[proto] for proto in columns]
        sizes = {len(array) for array in arrays}
        if len(sizes) > 1:
            raise HookError(f"save-population on {self.capsule.id!r}: ragged population arrays")
        header = "generation," + ",".join(p.name for p in (*self.genes, *self.objectives)) + ",evaluations"
        lines = [header]
        for row in zip(*arrays):
            rendered = ",".join(
                render_value(_ELEMENT_OF[proto.kind], value) for proto, value in zip(columns, row)
            )
            lines.append(f"{generation},{rendered}")
        path = f"{self.directory}/population{generation}.csv" if self.directory else f"population{generation}.csv"
        return HookEffect(self.action, self.capsule.id, "\n".join(lines) + "\n", path=path)


def fire_hook(hook: Hook, context: Context) -> HookEffect:
    """Render a hook's effect; raises HookError when its inputs are unbound.

    Hooks only observe: the context is never modified.
    """
    return hook.render(context)


@dataclass(frozen=True, eq=False)
class Workflow:
    """An executable graph of capsules, transitions, hooks, and sources.

    `sources` are bindings injected into the initial context before the
    first capsule runs.
    """

    capsules: tuple[Capsule, ...]
    transitions: tuple[Transition, ...] = ()
    hooks: tuple[Hook, ...] = ()
    sources: Context = field(default_factory=Context)


@dataclass(frozen=True)
class Defect:
    """One validation finding; defects are data, not failures."""

    capsule_id: str | None
    message: str

    def __str__(self) -> str:
        if self.capsule_id is None:
            return self.message
        return f"capsule {self.capsule_id!r}: {self.message}"


def validate_workflow(workflow: Workflow) -> list[Defect]:
    """Statically check a workflow; an empty report means it can execute.

    Reports unbound inputs (neither produced upstream, bound by a source,
    nor defaulted), cycles, aggregations without a matching exploration
    ancestor, and structural problems such as duplicate capsule ids.
    """
    defects: list[Defect] = []
    if not workflow.capsules:
        return [Defect(None, "workflow has no capsules")]

    ids = [capsule.id for capsule in workflow.capsules]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        defects.append(Defect(dup, "duplicate capsule id"))
    known = set(workflow.capsules)
    for transition in workflow.transitions:
        for end in (transition.source, transition.target):
            if end is not None and end not in known:
                defects.append(Defect(end.id, "transition references a capsule outside the workflow"))
    for hook in workflow.hooks:
        if hook.capsule not in known:
            defects.append(Defect(hook.capsule.id, "hook references a capsule outside the workflow"))

    registry: dict[str, Kind] = {}

    def note(proto: Prototype) -> None:
        prev = registry.setdefault(proto.name, proto.kind)
        if prev is not proto.kind:
            defects.append(
                Defect(None, f"prototype {proto.name!r} used with kinds {prev} and {proto.kind}")
            )
            registry[proto.name] = proto.kind

    for proto in workflow.sources:
        note(proto)
    for capsule in workflow.capsules:
        for proto in (*capsule.task.inputs, *capsule.task.outputs):
            note(proto)
    for transition in workflow.transitions:
        if transition.sampling is not None:
            for proto in transition.sampling.binds():
                note(proto)
        for scalar, array in transition.collect.items():
            note(scalar)
            note(array)

    incoming: dict[Capsule, Transition] = {}
    for transition in workflow.transitions:
        if transition.target in incoming:
            defects.append(Defect(transition.target.id, "multiple incoming transitions"))
        else:
            incoming[transition.target] = transition

    # Cycle check: follow unique parents; a repeated capsule is a cycle.
    cyclic = False
    for capsule in workflow.capsules:
        seen = [capsule]
        cursor = capsule
        while cursor in incoming and incoming[cursor].source is not None:
            cursor = incoming[cursor].source
            if cursor in seen:
                trail = " -> ".join(c.id for c in reversed(seen))
                defects.append(Defect(cursor.id, f"cycle: {cursor.id} -> {trail}"))
                cyclic = True
                break
            seen.append(cursor)
        if cyclic:
            break
    if defects:
        # Structural defects make the availability walk unreliable; report
        # them alone rather than piling on phantom unbound-input findings.
        return defects

    outgoing: dict[Capsule | None, list[Transition]] = {}
    for transition in workflow.transitions:
        outgoing.setdefault(transition.source, []).append(transition)

    source_protos = set(workflow.sources)
    avail: dict[Capsule, set[Prototype]] = {}
    order: list[Capsule] = []
    for capsule in workflow.capsules:
        if capsule not in incoming:
            avail[capsule] = set(source_protos)
            order.append(capsule)
    for transition in outgoing.get(None, ()):
        avail[transition.target] = source_protos | set(transition.sampling.binds())
        order.append(transition.target)

    def enclosing_exploration(capsule: Capsule) -> Transition | None:
        """The exploration that opened the branch `capsule` sits on, if any."""
        cursor = capsule
        while True:
            edge = incoming.get(cursor)
            if edge is None:
                return None
            if edge.mode is TransitionMode.EXPLORATION:
                return edge
            if edge.mode is TransitionMode.AGGREGATION:
                return None
            cursor = edge.source

    cursor = 0
    while cursor < len(order):
        capsule = order[cursor]
        cursor += 1
        seen = avail[capsule]
        for proto in capsule.task.inputs:
            if proto not in seen and proto not in capsule.task.defaults:
                defects.append(Defect(capsule.id, f"unbound input {proto.name!r}"))
        flow = seen | set(capsule.task.outputs)
        edges = outgoing.get(capsule, ())
        if len(edges) > 1 and enclosing_exploration(capsule) is not None:
            defects.append(Defect(capsule.id, "splits inside an exploration"))
        for edge in edges:
            if edge.mode is TransitionMode.DIRECT:
                avail[edge.target] = set(flow)
            elif edge.mode is TransitionMode.EXPLORATION:
                if enclosing_exploration(capsule) is not None:
                    # Branches fan out one level at a time; close the outer
                    # exploration with an aggregation before opening another.
                    defects.append(Defect(capsule.id, "exploration nested inside an exploration"))
                avail[edge.target] = flow | set(edge.sampling.binds())
            else:
                opening = enclosing_exploration(capsule)
                for scalar in edge.collect:
                    if scalar not in flow:
                        defects.append(
                            Defect(edge.target.id, f"aggregation collects {scalar.name!r} which the branch does not produce")
                        )
                if opening is None:
                    defects.append(Defect(edge.target.id, "aggregation has no matching exploration ancestor"))
                    base = set(flow)
                elif opening.source is None:
                    base = set(source_protos)
                else:
                    base = avail[opening.source] | set(opening.source.task.outputs)
                avail[edge.target] = base | set(edge.collect.values())
            order.append(edge.target)
    return defects
