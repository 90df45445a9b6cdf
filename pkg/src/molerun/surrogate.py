"""A closed-form stand-in for an agent-based ant foraging model.

Three food sources sit at distances 10, 20, and 30 from the nest; the model
reports how long each takes to empty as a function of ant population,
pheromone diffusion, and evaporation. The formula is frozen so tests have
exact targets, and it is built to give a genuine three-objective trade-off:
food1 grows with evaporation, food3 shrinks with it, and food2 is uniquely
minimized at diffusion 40, evaporation 50.
"""

from __future__ import annotations

from dataclasses import dataclass

from molerun.core import Context, Kind, Prototype, Task
from molerun.rng import stream

POPULATION = Prototype("gPopulation", Kind.REAL)
DIFFUSION = Prototype("gDiffusionRate", Kind.REAL)
EVAPORATION = Prototype("gEvaporationRate", Kind.REAL)
SEED = Prototype("seed", Kind.INTEGER)
FOOD1 = Prototype("food1", Kind.REAL)
FOOD2 = Prototype("food2", Kind.REAL)
FOOD3 = Prototype("food3", Kind.REAL)

_DISTANCES = (10.0, 20.0, 30.0)


@dataclass(frozen=True)
class SurrogateParams:
    """Model parameters with the stock default configuration."""

    population: float = 125.0
    diffusion: float = 50.0
    evaporation: float = 50.0
    seed: int = 42

    def __post_init__(self) -> None:
        if not 1.0 <= self.population <= 1000.0:
            raise ValueError(f"population {self.population} outside [1, 1000]")
        if not 0.0 <= self.diffusion <= 99.0:
            raise ValueError(f"diffusion rate {self.diffusion} outside [0, 99]")
        if not 0.0 <= self.evaporation <= 99.0:
            raise ValueError(f"evaporation rate {self.evaporation} outside [0, 99]")


def evaluate_surrogate(params: SurrogateParams, *, noise: bool = True) -> tuple[float, float, float]:
    """Ticks to empty each food source; strictly positive.

    With noise enabled each output picks up an independent factor uniform in
    [0.9, 1.1] from an RNG keyed on the seed, so equal seeds give equal
    triples and distinct seeds stay within a +-10% envelope.
    """
    p, d, e = params.population, params.diffusion, params.evaporation
    crowd = 1.0 + 50.0 / p
    shapes = (
        1.0 + (e / 99.0) ** 2,
        1.0 + ((d - 40.0) / 99.0) ** 2 + ((e - 50.0) / 99.0) ** 2,
        1.0 + ((99.0 - e) / 99.0) ** 2,
    )
    if noise:
        rng = stream(params.seed, "ants")
        factors = tuple(rng.uniform(0.9, 1.1) for _ in _DISTANCES)
    else:
        factors = (1.0, 1.0, 1.0)
    return tuple(
        base * shape * crowd * factor
        for base, shape, factor in zip(_DISTANCES, shapes, factors)
    )


def make_surrogate_task(*, noise: bool = True, defaults=None, name: str = "ants") -> Task:
    """The surrogate as a dataflow task with the stock prototype names.

    Without explicit defaults the task binds the stock configuration, so it
    runs from an empty context.
    """
    if defaults is None:
        stock = SurrogateParams()
        defaults = {
            POPULATION: stock.population,
            DIFFUSION: stock.diffusion,
            EVAPORATION: stock.evaporation,
            SEED: stock.seed,
        }

    def kernel(context: Context) -> Context:
        params = SurrogateParams(
            population=context[POPULATION],
            diffusion=context[DIFFUSION],
            evaporation=context[EVAPORATION],
            seed=context[SEED],
        )
        food1, food2, food3 = evaluate_surrogate(params, noise=noise)
        return Context({FOOD1: food1, FOOD2: food2, FOOD3: food3})

    return Task(
        name=name,
        inputs=(POPULATION, DIFFUSION, EVAPORATION, SEED),
        outputs=(FOOD1, FOOD2, FOOD3),
        defaults=defaults,
        kernel=kernel,
    )
