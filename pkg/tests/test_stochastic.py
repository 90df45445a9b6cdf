"""Seed sampling, statistic reductions, and replication wiring."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from molerun.core import (
    Capsule,
    Context,
    Kind,
    Prototype,
    Task,
    TransitionMode,
    Workflow,
    run_task,
    validate_workflow,
)
from molerun.stochastic import (
    SEED_MAX,
    SEED_MIN,
    Descriptor,
    SeedFactor,
    StatisticSpec,
    WiringError,
    compute_statistic,
    make_statistic_task,
    replicate,
    sample_seeds,
)

from oracles import median_by_sorting

SEED = Prototype("seed", Kind.INTEGER)
OUT = Prototype("out", Kind.REAL)
OUT_ALL = Prototype("out.all", Kind.REAL_ARRAY)
OUT_MEDIAN = Prototype("out.median", Kind.REAL)

reals = st.floats(allow_nan=False, allow_infinity=False, width=32)


class TestSampleSeeds:
    def test_deterministic_in_master_seed(self):
        assert sample_seeds(42, 10) == sample_seeds(42, 10)
        assert sample_seeds(42, 10) != sample_seeds(43, 10)

    def test_prefix_property(self):
        assert sample_seeds(7, 20)[:5] == sample_seeds(7, 5)

    @given(st.integers(), st.integers(1, 100))
    def test_distinct_and_in_range(self, master, count):
        seeds = sample_seeds(master, count)
        assert len(seeds) == len(set(seeds)) == count
        assert all(SEED_MIN <= s <= SEED_MAX for s in seeds)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_seeds(0, 0)


class TestSeedFactor:
    def test_branches_bind_distinct_seeds(self):
        factor = SeedFactor(SEED, 5)
        branches = factor.branches(Context(), master_seed=3)
        seeds = [b[SEED] for b in branches]
        assert seeds == sample_seeds(3, 5)

    def test_pinned_master_seed_ignores_run_seed(self):
        factor = SeedFactor(SEED, 3, master_seed=11)
        a = factor.branches(Context(), master_seed=1)
        b = factor.branches(Context(), master_seed=2)
        assert [c[SEED] for c in a] == [c[SEED] for c in b] == sample_seeds(11, 3)

    def test_seed_prototype_must_be_integer(self):
        with pytest.raises(ValueError):
            SeedFactor(OUT, 3)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            SeedFactor(SEED, 0)


class TestComputeStatistic:
    def test_median_matches_sorting_oracle(self):
        for values in ([3.0, 1.0, 2.0], [4.0, 1.0, 3.0, 2.0], [5.0]):
            assert compute_statistic(Descriptor.MEDIAN, values) == median_by_sorting(values)

    @given(st.lists(reals, min_size=1, max_size=50))
    def test_median_oracle_property(self, values):
        assert compute_statistic(Descriptor.MEDIAN, values) == pytest.approx(
            median_by_sorting(values)
        )

    @given(st.lists(reals, min_size=1, max_size=50), st.randoms())
    def test_reductions_are_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        for descriptor in Descriptor:
            a = compute_statistic(descriptor, values)
            b = compute_statistic(descriptor, shuffled)
            assert a == pytest.approx(b, abs=1e-9, rel=1e-9)

    def test_known_values(self):
        values = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]
        assert compute_statistic(Descriptor.MEAN, values) == 5.0
        assert compute_statistic(Descriptor.STANDARD_DEVIATION, values) == 2.0
        assert compute_statistic(Descriptor.MIN, values) == 2.0
        assert compute_statistic(Descriptor.MAX, values) == 9.0
        assert compute_statistic(Descriptor.MEDIAN, values) == 4.5

    def test_empty_array_is_an_error(self):
        for descriptor in Descriptor:
            with pytest.raises(ValueError):
                compute_statistic(descriptor, [])


class TestStatisticSpec:
    def test_duplicate_sources_rejected(self):
        with pytest.raises(ValueError, match="pairwise distinct"):
            StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),
                           (OUT, Prototype("other", Kind.REAL), Descriptor.MEAN)))

    def test_only_reals_reduce(self):
        with pytest.raises(ValueError):
            StatisticSpec(((SEED, OUT_MEDIAN, Descriptor.MEDIAN),))

    def test_collected_prototype_naming(self):
        spec = StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),))
        assert spec.collected(OUT) == OUT_ALL

    def test_statistic_task_reduces_arrays(self):
        spec = StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),))
        task = make_statistic_task(spec)
        result = run_task(task, Context({OUT_ALL: (3.0, 1.0, 2.0)}))
        assert result[OUT_MEDIAN] == 2.0


def make_model():
    def kernel(ctx):
        return Context({OUT: float(ctx[SEED] % 100)})

    return Capsule("model", Task("model", (SEED,), (OUT,), kernel=kernel))


class TestReplicate:
    def test_fragment_wires_exploration_then_aggregation(self):
        model = make_model()
        spec = StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),))
        fragment = replicate(model, SeedFactor(SEED, 5), spec)
        exploration, aggregation = fragment.transitions
        assert exploration.mode is TransitionMode.EXPLORATION
        assert exploration.source is None and exploration.target is model
        assert aggregation.mode is TransitionMode.AGGREGATION
        assert aggregation.source is model and aggregation.target is fragment.statistic
        assert aggregation.collect == {OUT: OUT_ALL}

    def test_fragment_validates_clean(self):
        model = make_model()
        spec = StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),))
        fragment = replicate(model, SeedFactor(SEED, 5), spec)
        flow = Workflow((model, fragment.statistic), fragment.transitions)
        assert validate_workflow(flow) == []

    def test_model_must_take_the_seed(self):
        deaf = Capsule("deaf", Task("deaf", (), (OUT,), kernel=lambda c: Context({OUT: 0.0})))
        spec = StatisticSpec(((OUT, OUT_MEDIAN, Descriptor.MEDIAN),))
        with pytest.raises(WiringError, match="seed prototype"):
            replicate(deaf, SeedFactor(SEED, 2), spec)

    def test_model_must_produce_the_sources(self):
        model = make_model()
        other = Prototype("other", Kind.REAL)
        spec = StatisticSpec(((other, OUT_MEDIAN, Descriptor.MEDIAN),))
        with pytest.raises(WiringError, match="statistic source"):
            replicate(model, SeedFactor(SEED, 2), spec)
