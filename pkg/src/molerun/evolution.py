"""Multi-objective evolution: generational NSGA-II and an island scheme.

All objectives are minimized. The generational loop runs in-process and
calls out to a user-supplied evaluator; the island scheme packs whole
populations into contexts and runs them as jobs through a Session, merging
results into a bounded non-dominated archive as islands come back.
"""

from __future__ import annotations

import random
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from molerun.core import (
    EVALUATIONS,
    GENERATION,
    Context,
    Kind,
    Prototype,
    Task,
)
from molerun.engine import (
    EngineError,
    Environment,
    Job,
    JobState,
    LocalEnvironment,
    RetryPolicy,
    Session,
)
from molerun.rng import stream
from molerun.stochastic import SEED_MAX, SEED_MIN

Genome = tuple[float, ...]
Objectives = tuple[float, ...]
# An evaluator maps (genome, seed) to one objective vector.
Evaluator = Callable[[Genome, int], Objectives]


class EvolutionError(Exception):
    pass


@dataclass(frozen=True)
class GenomeSpec:
    """Names and box bounds for the real-valued genes."""

    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError("a genome needs at least one gene")
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValueError("gene names and bounds must have equal lengths")
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"gene {name!r}: bounds must satisfy lower < upper")

    @property
    def size(self) -> int:
        return len(self.names)

    def clamp(self, genome: Sequence[float]) -> Genome:
        return tuple(
            min(max(value, lo), hi) for value, lo, hi in zip(genome, self.lower, self.upper)
        )

    def random(self, rng: random.Random) -> Genome:
        return tuple(rng.uniform(lo, hi) for lo, hi in zip(self.lower, self.upper))


@dataclass
class Individual:
    """A genome with its (possibly averaged) objective estimates."""

    genome: Genome
    objectives: Objectives
    evaluations: int = 1


@dataclass(frozen=True)
class Timed:
    """Stop after roughly this much wall time instead of a generation count."""

    seconds: float

    def __post_init__(self) -> None:
        if self.seconds <= 0:
            raise ValueError("a time budget must be positive")


@dataclass(frozen=True)
class EvolutionParams:
    mu: int = 10
    offspring: int = 10
    termination: int | Timed = 20
    reevaluate: float = 0.0
    crossover_eta: float = 20.0
    mutation_eta: float = 20.0

    def __post_init__(self) -> None:
        if self.mu < 2:
            raise ValueError("population size must be at least 2")
        if self.offspring < 1:
            raise ValueError("offspring count must be at least 1")
        if isinstance(self.termination, int) and self.termination < 0:
            raise ValueError("generation budget cannot be negative")
        if not 0.0 <= self.reevaluate <= 1.0:
            raise ValueError("reevaluation probability must be in [0, 1]")


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """Pareto dominance for minimization: no worse everywhere, better somewhere."""
    if len(a) != len(b):
        raise ValueError("objective vectors differ in dimension")
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(objectives: Sequence[Sequence[float]]) -> list[list[int]]:
    """Indices grouped into fronts; front 0 is the non-dominated set."""
    n = len(objectives)
    if n == 0:
        return []
    dominated: list[list[int]] = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(objectives[i], objectives[j]):
                dominated[i].append(j)
                counts[j] += 1
            elif dominates(objectives[j], objectives[i]):
                dominated[j].append(i)
                counts[i] += 1
    fronts = [[i for i in range(n) if counts[i] == 0]]
    current = fronts[0]
    while current:
        nxt = []
        for i in current:
            for j in dominated[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        if nxt:
            fronts.append(nxt)
        current = nxt
    return fronts


def crowding_distance(
    objectives: Sequence[Sequence[float]], front: Sequence[int] | None = None
) -> dict[int, float]:
    """Per-index crowding within one front; boundary points get infinity."""
    indices = list(range(len(objectives))) if front is None else list(front)
    distance = {i: 0.0 for i in indices}
    if not indices:
        return distance
    for k in range(len(objectives[indices[0]])):
        ordered = sorted(indices, key=lambda i: objectives[i][k])
        lo = objectives[ordered[0]][k]
        hi = objectives[ordered[-1]][k]
        distance[ordered[0]] = distance[ordered[-1]] = float("inf")
        if hi == lo:
            continue
        for prev, cur, nxt in zip(ordered, ordered[1:], ordered[2:]):
            distance[cur] += (objectives[nxt][k] - objectives[prev][k]) / (hi - lo)
    return distance


def rank_and_crowding(objectives: Sequence[Sequence[float]]) -> tuple[list[int], list[float]]:
    ranks = [0] * len(objectives)
    crowding = [0.0] * len(objectives)
    for r, front in enumerate(fast_nondominated_sort(objectives)):
        for i in front:
            ranks[i] = r
        for i, d in crowding_distance(objectives, front).items():
            crowding[i] = d
    return ranks, crowding


def tournament_select(ranks: Sequence[int], crowding: Sequence[float], rng: random.Random) -> int:
    """Binary tournament: lower rank wins, then larger crowding, then a coin."""
    a = rng.randrange(len(ranks))
    b = rng.randrange(len(ranks))
    if ranks[a] != ranks[b]:
        return a if ranks[a] < ranks[b] else b
    if crowding[a] != crowding[b]:
        return a if crowding[a] > crowding[b] else b
    return a if rng.random() < 0.5 else b


def _sbx_gene(p1: float, p2: float, eta: float, rng: random.Random) -> float:
    u = rng.random()
    if p1 == p2:
        # The blend is exact here algebraically; skipping it keeps it exact
        # in floating point too. The draw still happens so the stream shape
        # does not depend on gene values.
        return p1
    if u <= 0.5:
        beta = (2.0 * u) ** (1.0 / (eta + 1.0))
    else:
        beta = (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))
    return 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)


def _polynomial_delta(eta: float, rng: random.Random) -> float:
    u = rng.random()
    if u < 0.5:
        return (2.0 * u) ** (1.0 / (eta + 1.0)) - 1.0
    return 1.0 - (2.0 * (1.0 - u)) ** (1.0 / (eta + 1.0))


def vary(
    parent1: Genome,
    parent2: Genome,
    spec: GenomeSpec,
    rng: random.Random,
    *,
    crossover_eta: float = 20.0,
    mutation_eta: float = 20.0,
    mutation_probability: float | None = None,
) -> Genome:
    """One child: per-gene simulated binary crossover, then polynomial mutation.

    Mutation hits each gene with probability 1/size unless overridden; the
    child is clamped into the genome's box. Identical parents and zero
    mutation probability reproduce the parent exactly.
    """
    probability = 1.0 / spec.size if mutation_probability is None else mutation_probability
    child = [_sbx_gene(g1, g2, crossover_eta, rng) for g1, g2 in zip(parent1, parent2)]
    for k in range(spec.size):
        if probability > 0.0 and rng.random() < probability:
            child[k] += _polynomial_delta(mutation_eta, rng) * (spec.upper[k] - spec.lower[k])
    return spec.clamp(child)


def _draw_seed(rng: random.Random) -> int:
    return rng.randrange(SEED_MIN, SEED_MAX + 1)


def generational_step(
    population: list[Individual],
    evaluate: Evaluator,
    spec: GenomeSpec,
    params: EvolutionParams,
    rng: random.Random,
) -> tuple[list[Individual], int]:
    """One generation: breed offspring, refresh survivors, truncate to mu.

    Each surviving parent is independently re-evaluated with probability
    `reevaluate`; fresh objective values fold into a running mean. Returns
    the new population and the number of refreshes performed.
    """
    objectives = [ind.objectives for ind in population]
    ranks, crowding = rank_and_crowding(objectives)
    children: list[Individual] = []
    for _ in range(params.offspring):
        first = tournament_select(ranks, crowding, rng)
        second = tournament_select(ranks, crowding, rng)
        genome = vary(
            population[first].genome,
            population[second].genome,
            spec,
            rng,
            crossover_eta=params.crossover_eta,
            mutation_eta=params.mutation_eta,
        )
        children.append(Individual(genome, tuple(evaluate(genome, _draw_seed(rng)))))
    refreshed = 0
    for ind in population:
        if params.reevaluate > 0.0 and rng.random() < params.reevaluate:
            fresh = evaluate(ind.genome, _draw_seed(rng))
            count = ind.evaluations
            ind.objectives = tuple(
                (mean * count + new) / (count + 1) for mean, new in zip(ind.objectives, fresh)
            )
            ind.evaluations = count + 1
            refreshed += 1
    combined = population + children
    ranks, crowding = rank_and_crowding([ind.objectives for ind in combined])
    order = sorted(range(len(combined)), key=lambda i: (ranks[i], -crowding[i]))
    return [combined[i] for i in order[: params.mu]], refreshed


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    evaluations: int
    reevaluations: int
    front_size: int


@dataclass
class EvolutionResult:
    population: list[Individual]
    log: list[GenerationRecord]
    generations: int
    evaluations: int
    reevaluations: int

    def front(self) -> list[Individual]:
        fronts = fast_nondominated_sort([ind.objectives for ind in self.population])
        return [self.population[i] for i in fronts[0]] if fronts else []


Observer = Callable[[int, list[Individual]], None]


def run_generational(
    evaluate: Evaluator,
    spec: GenomeSpec,
    params: EvolutionParams,
    *,
    master_seed: int = 0,
    observer: Observer | None = None,
) -> EvolutionResult:
    """Uniform initialization, then generations until the budget runs out.

    The observer, when given, sees every population including the initial
    one; evaluation seeds are drawn from the run's dedicated RNG stream so
    equal master seeds replay exactly.
    """
    rng = stream(master_seed, "ga")
    population = []
    for _ in range(params.mu):
        genome = spec.random(rng)
        population.append(Individual(genome, tuple(evaluate(genome, _draw_seed(rng)))))
    evaluations = params.mu
    reevaluations = 0

    def front_size() -> int:
        return len(fast_nondominated_sort([ind.objectives for ind in population])[0])

    log = [GenerationRecord(0, evaluations, 0, front_size())]
    if observer is not None:
        observer(0, population)
    started = time.monotonic()
    generation = 0
    while True:
        if isinstance(params.termination, Timed):
            if time.monotonic() - started >= params.termination.seconds:
                break
        elif generation >= params.termination:
            break
        generation += 1
        population, refreshed = generational_step(population, evaluate, spec, params, rng)
        evaluations += params.offspring + refreshed
        reevaluations += refreshed
        log.append(GenerationRecord(generation, evaluations, reevaluations, front_size()))
        if observer is not None:
            observer(generation, population)
    return EvolutionResult(population, log, generation, evaluations, reevaluations)


def generation_context(
    generation: int,
    individuals: Sequence[Individual],
    genes: tuple[Prototype, ...],
    objectives: tuple[Prototype, ...],
) -> Context:
    """A population snapshot as a context, shaped for population hooks."""
    bindings: dict[Prototype, object] = {GENERATION: generation}
    for k, proto in enumerate(genes):
        bindings[proto] = tuple(ind.genome[k] for ind in individuals)
    for k, proto in enumerate(objectives):
        bindings[proto] = tuple(ind.objectives[k] for ind in individuals)
    bindings[EVALUATIONS] = tuple(ind.evaluations for ind in individuals)
    return Context(bindings)


class Archive:
    """A bounded store of mutually non-dominated individuals.

    Merging keeps only the non-dominated front of old members plus arrivals
    (exact duplicates collapse) and, over capacity, prefers spread by
    truncating on descending crowding distance.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("archive capacity must be at least 1")
        self.capacity = capacity
        self.members: list[Individual] = []
        self._genome_size: int | None = None
        self._dimensions: int | None = None

    def __len__(self) -> int:
        return len(self.members)

    def merge(self, incoming: Iterable[Individual]) -> None:
        arrivals = list(incoming)
        for ind in arrivals:
            if self._genome_size is None:
                self._genome_size = len(ind.genome)
                self._dimensions = len(ind.objectives)
            elif len(ind.genome) != self._genome_size or len(ind.objectives) != self._dimensions:
                raise EvolutionError(
                    "archive merge: genome or objective dimensions do not match"
                )
        pool: list[Individual] = []
        seen: set[tuple] = set()
        for ind in self.members + arrivals:
            key = (ind.genome, ind.objectives, ind.evaluations)
            if key not in seen:
                seen.add(key)
                pool.append(ind)
        if not pool:
            return
        fronts = fast_nondominated_sort([ind.objectives for ind in pool])
        front = [pool[i] for i in fronts[0]]
        if len(front) > self.capacity:
            crowding = crowding_distance([ind.objectives for ind in front])
            order = sorted(range(len(front)), key=lambda i: -crowding[i])
            front = [front[i] for i in order[: self.capacity]]
        self.members = front


def hypervolume_2d(points: Iterable[tuple[float, float]], reference: tuple[float, float]) -> float:
    """Dominated area between a two-objective front and a reference point.

    Points at or beyond the reference contribute nothing; dominated points
    are absorbed by the sweep.
    """
    rx, ry = reference
    inside = sorted({(x, y) for x, y in points if x < rx and y < ry})
    volume = 0.0
    prev_y = ry
    for x, y in inside:
        if y >= prev_y:
            continue
        volume += (rx - x) * (prev_y - y)
        prev_y = y
    return volume


ISLAND_GENOMES = Prototype("island.genomes", Kind.REAL_ARRAY)
ISLAND_OBJECTIVES = Prototype("island.objectives", Kind.REAL_ARRAY)
ISLAND_EVALUATIONS = Prototype("island.evaluations", Kind.INTEGER_ARRAY)
ISLAND_SEED = Prototype("island.seed", Kind.INTEGER)


@dataclass(frozen=True)
class IslandParams:
    """Shape of an island run; evolution inside islands uses these numbers."""

    islands: int = 8
    total_merges: int = 40
    sample_size: int = 10
    generations: int = 6
    offspring: int = 10
    reevaluate: float = 0.0
    archive_capacity: int = 100
    virtual_duration_s: float = 60.0
    memory_mb: int = 0

    def __post_init__(self) -> None:
        for name in ("islands", "total_merges", "sample_size", "generations", "offspring"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.sample_size < 2:
            raise ValueError("sample_size must be at least 2")


def _encode_island(individuals: Sequence[Individual], seed: int) -> Context:
    return Context(
        {
            ISLAND_GENOMES: tuple(g for ind in individuals for g in ind.genome),
            ISLAND_OBJECTIVES: tuple(o for ind in individuals for o in ind.objectives),
            ISLAND_EVALUATIONS: tuple(ind.evaluations for ind in individuals),
            ISLAND_SEED: seed,
        }
    )


def _decode_island(context: Context, count: int, genome_size: int, dimensions: int) -> list[Individual]:
    genomes = context[ISLAND_GENOMES]
    objectives = context[ISLAND_OBJECTIVES]
    evaluations = context[ISLAND_EVALUATIONS]
    if len(genomes) != count * genome_size or len(objectives) != count * dimensions:
        raise EvolutionError("island payload does not match the declared population shape")
    out = []
    for i in range(count):
        out.append(
            Individual(
                genomes[i * genome_size : (i + 1) * genome_size],
                objectives[i * dimensions : (i + 1) * dimensions],
                evaluations[i],
            )
        )
    return out


def make_island_task(
    evaluate: Evaluator,
    spec: GenomeSpec,
    params: IslandParams,
    dimensions: int,
    *,
    name: str = "island",
) -> Task:
    """A task that evolves one packed population for a fixed budget.

    The kernel is pure in its context: unevaluated arrivals are scored
    first, then the island runs its generations with an RNG seeded solely
    from the packed seed, so retries reproduce the same result.
    """

    def kernel(context: Context) -> Context:
        individuals = _decode_island(context, params.sample_size, spec.size, dimensions)
        rng = random.Random(context[ISLAND_SEED])
        for ind in individuals:
            if ind.evaluations == 0:
                ind.objectives = tuple(evaluate(ind.genome, _draw_seed(rng)))
                ind.evaluations = 1
        inner = EvolutionParams(
            mu=params.sample_size,
            offspring=params.offspring,
            termination=params.generations,
            reevaluate=params.reevaluate,
        )
        population = individuals
        for _ in range(params.generations):
            population, _ = generational_step(population, evaluate, spec, inner, rng)
        return _encode_island(population, context[ISLAND_SEED]).restrict(
            (ISLAND_GENOMES, ISLAND_OBJECTIVES, ISLAND_EVALUATIONS)
        )

    return Task(
        name=name,
        inputs=(ISLAND_GENOMES, ISLAND_OBJECTIVES, ISLAND_EVALUATIONS, ISLAND_SEED),
        outputs=(ISLAND_GENOMES, ISLAND_OBJECTIVES, ISLAND_EVALUATIONS),
        kernel=kernel,
        virtual_duration_s=params.virtual_duration_s,
        memory_mb=params.memory_mb,
    )


@dataclass
class IslandsResult:
    status: str
    archive: Archive
    merges: int
    discarded: int
    jobs: list[Job]
    clocks: dict[str, float | int]
    totals: dict[str, object] = field(default_factory=dict)


def run_islands(
    evaluate: Evaluator,
    spec: GenomeSpec,
    params: IslandParams,
    dimensions: int,
    *,
    environments: Environment | Mapping[str, Environment] | None = None,
    retry: RetryPolicy | None = None,
    master_seed: int = 0,
    run_root: Path | None = None,
    observer: Callable[[int, Archive], None] | None = None,
) -> IslandsResult:
    """Steady-state island evolution over a session.

    Up to `islands` jobs fly at once; every successful return merges into
    the archive (one merge each) until `total_merges` is reached. New
    islands sample the archive without replacement, topping up with fresh
    random genomes while it is small. Terminally failed islands are
    discarded and replaced; only successes count toward the total.
    """
    rng = stream(master_seed, "islands")
    archive = Archive(params.archive_capacity)
    if environments is None:
        environments = LocalEnvironment("local", 4)
    session = Session(environments, retry=retry, master_seed=master_seed, run_root=run_root)
    task = make_island_task(evaluate, spec, params, dimensions)
    launched = 0
    merges = 0
    discarded = 0

    def launch() -> None:
        nonlocal launched
        members = archive.members
        take = min(params.sample_size, len(members))
        picked = rng.sample(range(len(members)), take) if take else []
        individuals = [
            Individual(members[i].genome, members[i].objectives, members[i].evaluations)
            for i in picked
        ]
        while len(individuals) < params.sample_size:
            individuals.append(Individual(spec.random(rng), (0.0,) * dimensions, 0))
        seed = _draw_seed(rng)
        session.submit(task, _encode_island(individuals, seed), capsule_id="island", branch=launched)
        launched += 1

    status = "completed"
    try:
        in_flight = 0
        while in_flight < params.islands and merges + in_flight < params.total_merges:
            launch()
            in_flight += 1
        while merges < params.total_merges:
            try:
                completed = session.wait_any()
            except EngineError:
                status = "internal-error"
                session.kill_in_flight()
                break
            if not completed:
                status = "internal-error"
                break
            for job in completed:
                in_flight -= 1
                if job.state is JobState.FAILED:
                    discarded += 1
                else:
                    islanders = _decode_island(
                        job.result, params.sample_size, spec.size, dimensions
                    )
                    archive.merge(islanders)
                    merges += 1
                    if observer is not None:
                        observer(merges, archive)
                if merges >= params.total_merges:
                    break
                while in_flight < params.islands and merges + in_flight < params.total_merges:
                    launch()
                    in_flight += 1
        session.kill_in_flight()
    finally:
        session.close()
    clocks = session.clocks()
    totals = {
        "jobs": len(session.jobs),
        "attempts": sum(job.attempts for job in session.jobs),
        "merges": merges,
        "discarded": discarded,
        "clocks": clocks,
        "duration": max(clocks.values(), default=0),
    }
    return IslandsResult(status, archive, merges, discarded, session.jobs, clocks, totals)
