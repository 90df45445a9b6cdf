"""The ant foraging surrogate: frozen values, shape, and noise envelope."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from molerun.core import Context
from molerun.surrogate import (
    DIFFUSION,
    EVAPORATION,
    FOOD1,
    FOOD2,
    FOOD3,
    POPULATION,
    SEED,
    SurrogateParams,
    evaluate_surrogate,
    make_surrogate_task,
)
from molerun.core import run_task

populations = st.floats(1.0, 1000.0)
rates = st.floats(0.0, 99.0)
seeds = st.integers(-(2**31), 2**31 - 1)


def params(p=125.0, d=50.0, e=50.0, seed=42):
    return SurrogateParams(p, d, e, seed)


class TestFormula:
    def test_stock_defaults_noiseless(self):
        # crowd = 1 + 50/125 = 1.4; e = d = 50.
        food1, food2, food3 = evaluate_surrogate(params(), noise=False)
        assert food1 == pytest.approx(10.0 * (1.0 + (50.0 / 99.0) ** 2) * 1.4)
        assert food2 == pytest.approx(20.0 * (1.0 + (10.0 / 99.0) ** 2) * 1.4)
        assert food3 == pytest.approx(30.0 * (1.0 + (49.0 / 99.0) ** 2) * 1.4)

    def test_stock_defaults_frozen_values(self):
        assert evaluate_surrogate(params(), noise=False) == pytest.approx(
            (17.571064177124782, 28.285685134169984, 52.288950107131924)
        )
        assert evaluate_surrogate(params(), noise=True) == pytest.approx(
            (16.411042948461517, 27.712265841775082, 53.629340572740865)
        )

    def test_food2_minimum_sits_at_diffusion_40_evaporation_50(self):
        best = evaluate_surrogate(params(d=40.0, e=50.0), noise=False)[1]
        for d in (0.0, 20.0, 39.0, 41.0, 70.0, 99.0):
            for e in (0.0, 30.0, 49.0, 51.0, 80.0, 99.0):
                if (d, e) == (40.0, 50.0):
                    continue
                assert evaluate_surrogate(params(d=d, e=e), noise=False)[1] > best

    def test_evaporation_trade_off(self):
        # food1 grows with evaporation while food3 shrinks: the axis the
        # optimizer must spread along.
        low = evaluate_surrogate(params(e=0.0), noise=False)
        high = evaluate_surrogate(params(e=99.0), noise=False)
        assert low[0] < high[0]
        assert low[2] > high[2]

    def test_more_ants_is_always_faster(self):
        few = evaluate_surrogate(params(p=10.0), noise=False)
        many = evaluate_surrogate(params(p=1000.0), noise=False)
        assert all(m < f for m, f in zip(many, few))

    @given(populations, rates, rates)
    def test_outputs_are_positive_and_ordered_by_distance_shape(self, p, d, e):
        food1, food2, food3 = evaluate_surrogate(SurrogateParams(p, d, e, 0), noise=False)
        assert 0.0 < food1 and 0.0 < food2 and 0.0 < food3


class TestNoise:
    def test_same_seed_same_triple(self):
        assert evaluate_surrogate(params(seed=7)) == evaluate_surrogate(params(seed=7))

    def test_distinct_seeds_distinct_triples(self):
        assert evaluate_surrogate(params(seed=7)) != evaluate_surrogate(params(seed=8))

    @given(populations, rates, rates, seeds)
    def test_noise_stays_within_ten_percent(self, p, d, e, seed):
        clean = evaluate_surrogate(SurrogateParams(p, d, e, seed), noise=False)
        noisy = evaluate_surrogate(SurrogateParams(p, d, e, seed), noise=True)
        for pure, jittered in zip(clean, noisy):
            assert 0.9 * pure <= jittered <= 1.1 * pure


class TestBounds:
    def test_population_bounds(self):
        with pytest.raises(ValueError, match="population"):
            SurrogateParams(population=0.5)
        with pytest.raises(ValueError, match="population"):
            SurrogateParams(population=1001.0)

    def test_rate_bounds(self):
        with pytest.raises(ValueError, match="diffusion"):
            SurrogateParams(diffusion=-1.0)
        with pytest.raises(ValueError, match="evaporation"):
            SurrogateParams(evaporation=99.5)


class TestTask:
    def test_runs_from_an_empty_context(self):
        task = make_surrogate_task()
        result = run_task(task, Context())
        expected = evaluate_surrogate(SurrogateParams())
        assert (result[FOOD1], result[FOOD2], result[FOOD3]) == expected

    def test_context_overrides_defaults(self):
        task = make_surrogate_task(noise=False)
        result = run_task(task, Context({POPULATION: 1000.0, SEED: 1}))
        expected = evaluate_surrogate(params(p=1000.0, seed=1), noise=False)
        assert (result[FOOD1], result[FOOD2], result[FOOD3]) == expected

    def test_declares_the_stock_prototypes(self):
        task = make_surrogate_task()
        assert task.inputs == (POPULATION, DIFFUSION, EVAPORATION, SEED)
        assert task.outputs == (FOOD1, FOOD2, FOOD3)
