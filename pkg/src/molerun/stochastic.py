"""Replication over random seeds and statistics over replicated outputs.

A stochastic model is run N times with distinct seeds, its per-replicate
outputs are collected into arrays, and a statistic task reduces each array
to one number (median by default convention). The replicate fragment wires
this as an exploration transition followed by an aggregation.
"""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass

from molerun.core import (
    Capsule,
    Context,
    Kind,
    Prototype,
    Sampling,
    Task,
    Transition,
    TransitionMode,
)
from molerun.rng import stream

SEED_MIN = -(2**31)
SEED_MAX = 2**31 - 1


class WiringError(Exception):
    """A replication fragment references prototypes its model does not carry."""


def sample_seeds(master_seed: int, count: int) -> list[int]:
    """`count` distinct seeds, uniform over the signed 32-bit range.

    Pure in (master_seed, count): collisions are resampled, so a shorter
    sample is always a prefix of a longer one from the same master seed.
    """
    if count < 1:
        raise ValueError("seed count must be at least 1")
    rng = stream(master_seed, "seeds")
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < count:
        candidate = rng.randint(SEED_MIN, SEED_MAX)
        if candidate not in seen:
            seen.add(candidate)
            seeds.append(candidate)
    return seeds


@dataclass(frozen=True)
class SeedFactor(Sampling):
    """Fans a context out into `count` branches, each with a distinct seed.

    When `master_seed` is None the run's master seed is used, so the same
    workflow file reseeds from the command line.
    """

    prototype: Prototype
    count: int
    master_seed: int | None = None

    def __post_init__(self) -> None:
        if self.prototype.kind is not Kind.INTEGER:
            raise ValueError(f"seed prototype {self.prototype.name!r} must be integer-kinded")
        if self.count < 1:
            raise ValueError("replication count must be at least 1")

    def binds(self) -> tuple[Prototype, ...]:
        return (self.prototype,)

    def branches(self, context: Context, master_seed: int) -> list[Context]:
        effective = self.master_seed if self.master_seed is not None else master_seed
        return [context.bind(self.prototype, seed) for seed in sample_seeds(effective, self.count)]


class Descriptor(enum.Enum):
    """The supported reductions over a replicated output."""

    MEDIAN = "median"
    MEAN = "mean"
    MIN = "min"
    MAX = "max"
    STANDARD_DEVIATION = "standard-deviation"

    def __str__(self) -> str:
        return self.value


def compute_statistic(descriptor: Descriptor, values) -> float:
    """Reduce a non-empty array of reals to one number.

    The median of an even-length array is the mean of the two middle
    elements; standard deviation is the population form.
    """
    values = list(values)
    if not values:
        raise ValueError(f"cannot take the {descriptor} of an empty array")
    if descriptor is Descriptor.MEDIAN:
        return float(statistics.median(values))
    if descriptor is Descriptor.MEAN:
        return statistics.fmean(values)
    if descriptor is Descriptor.MIN:
        return float(min(values))
    if descriptor is Descriptor.MAX:
        return float(max(values))
    return statistics.pstdev(values)


@dataclass(frozen=True)
class StatisticSpec:
    """Triples of (replicated source, reduced target, descriptor)."""

    triples: tuple[tuple[Prototype, Prototype, Descriptor], ...]

    def __post_init__(self) -> None:
        sources = [source.name for source, _, _ in self.triples]
        if len(sources) != len(set(sources)):
            raise ValueError("statistic sources must be pairwise distinct")
        for source, target, _ in self.triples:
            if source.kind is not Kind.REAL or target.kind is not Kind.REAL:
                raise ValueError(
                    f"statistics reduce real prototypes; got {source.name!r} -> {target.name!r}"
                )

    def collected(self, source: Prototype) -> Prototype:
        """The array prototype that gathers one source across branches."""
        return Prototype(f"{source.name}.all", Kind.REAL_ARRAY)


def make_statistic_task(spec: StatisticSpec, name: str = "statistic") -> Task:
    """A task reducing the collected arrays to the statistic's target prototypes."""
    inputs = tuple(spec.collected(source) for source, _, _ in spec.triples)
    outputs = tuple(target for _, target, _ in spec.triples)

    def kernel(context: Context) -> Context:
        bindings = {}
        for (source, target, descriptor), array in zip(spec.triples, inputs):
            bindings[target] = compute_statistic(descriptor, context[array])
        return Context(bindings)

    return Task(name=name, inputs=inputs, outputs=outputs, kernel=kernel)


@dataclass(frozen=True)
class ReplicationFragment:
    """The transitions and statistic capsule produced by replicate()."""

    exploration: Transition
    aggregation: Transition
    statistic: Capsule

    @property
    def transitions(self) -> tuple[Transition, Transition]:
        return (self.exploration, self.aggregation)


def replicate(
    model: Capsule,
    factor: SeedFactor,
    spec: StatisticSpec,
    *,
    source: Capsule | None = None,
    statistic_id: str = "statistic",
) -> ReplicationFragment:
    """Wire N seeded model runs into one statistic over their outputs.

    The model must declare the seed prototype among its inputs and every
    statistic source among its outputs. `source` is the capsule feeding the
    fan-out; None fans out the workflow's initial context.
    """
    if factor.prototype not in model.task.inputs:
        raise WiringError(
            f"model {model.id!r} does not take the seed prototype {factor.prototype.name!r}"
        )
    for source_proto, _, _ in spec.triples:
        if source_proto not in model.task.outputs:
            raise WiringError(
                f"model {model.id!r} does not produce statistic source {source_proto.name!r}"
            )
    statistic = Capsule(statistic_id, make_statistic_task(spec, name=statistic_id))
    exploration = Transition(source, model, TransitionMode.EXPLORATION, sampling=factor)
    aggregation = Transition(
        model,
        statistic,
        TransitionMode.AGGREGATION,
        collect={source_proto: spec.collected(source_proto) for source_proto, _, _ in spec.triples},
    )
    return ReplicationFragment(exploration, aggregation, statistic)
