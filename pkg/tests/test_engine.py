"""The execution engine: state machine, retries, environments, reports."""

import json

import pytest

from molerun.core import (
    Capsule,
    Context,
    DisplayHook,
    Kind,
    Prototype,
    Task,
    ToStringHook,
    Transition,
    TransitionMode,
    Workflow,
)
from molerun.engine import (
    LEGAL_TRANSITIONS,
    BatchConfig,
    BatchEnvironment,
    ConfigurationError,
    EngineError,
    EnvironmentAssignment,
    IllegalTransitionError,
    InvalidWorkflowError,
    Job,
    JobState,
    LocalEnvironment,
    RetryPolicy,
    RunReport,
    Session,
    SimulatedDistributedConfig,
    SimulatedEnvironment,
    report_json,
    run_workflow,
    write_run_outputs,
)
from molerun.schedulers import Flavor
from molerun.stochastic import SeedFactor

X = Prototype("x", Kind.REAL)
Y = Prototype("y", Kind.REAL)
XS = Prototype("xs", Kind.REAL_ARRAY)
SEED = Prototype("seed", Kind.INTEGER)


def _double(ctx):
    return Context({Y: ctx[X] * 2.0})


def _emit(ctx):
    return Context({X: 21.0})


def _seed_to_x(ctx):
    return Context({X: float(ctx[SEED] % 7)})


def _gather_sum(ctx):
    return Context({Y: sum(ctx[XS])})


def make_job(task=None, job_id="t[0]"):
    task = task or Task("t", (), (X,), kernel=_emit)
    return Job(id=job_id, capsule_id="t", task=task, context=Context(), branch=0, index=0)


class TestStateMachine:
    def test_the_legal_transitions_are_exactly_these(self):
        names = {(a.value, b.value) for a, b in LEGAL_TRANSITIONS}
        expected = {
            ("ready", "submitted"),
            ("submitted", "running"),
            ("running", "done"),
            ("running", "failed"),
            ("failed", "submitted"),
        } | {
            (state.value, "killed")
            for state in JobState
            if state is not JobState.KILLED
        }
        assert names == expected

    def test_marking_follows_the_machine(self):
        job = make_job()
        job.mark(JobState.SUBMITTED)
        job.mark(JobState.RUNNING)
        job.mark(JobState.FAILED)
        job.mark(JobState.SUBMITTED)
        job.mark(JobState.RUNNING)
        job.mark(JobState.DONE)
        assert [state for state, _ in job.history] == [
            "submitted", "running", "failed", "submitted", "running", "done",
        ]

    @pytest.mark.parametrize(
        "bad", [JobState.DONE, JobState.FAILED, JobState.RUNNING, JobState.READY]
    )
    def test_illegal_marks_raise(self, bad):
        job = make_job()
        if bad is JobState.READY:
            job.mark(JobState.SUBMITTED)
        with pytest.raises(IllegalTransitionError):
            job.mark(bad)

    def test_done_is_terminal(self):
        job = make_job()
        for state in (JobState.SUBMITTED, JobState.RUNNING, JobState.DONE):
            job.mark(state)
        with pytest.raises(IllegalTransitionError):
            job.mark(JobState.RUNNING)

    def test_kill_is_always_possible_but_not_from_killed(self):
        for prefix in ([], [JobState.SUBMITTED], [JobState.SUBMITTED, JobState.RUNNING]):
            job = make_job()
            for state in prefix:
                job.mark(state)
            job.mark(JobState.KILLED)
            with pytest.raises(IllegalTransitionError):
                job.mark(JobState.KILLED)

    def test_retry_policy_requires_at_least_one_attempt(self):
        with pytest.raises(ValueError):
            RetryPolicy(max_attempts=0)


class TestSession:
    def test_submit_and_wait(self):
        session = Session(LocalEnvironment("local", 2))
        try:
            job = session.submit(Task("t", (), (X,), kernel=_emit), Context())
            done = session.wait_any()
            assert done == [job]
            assert job.state is JobState.DONE
            assert job.result[X] == 21.0
            assert job.id == "task[0]"
        finally:
            session.close()

    def test_wait_with_nothing_in_flight_returns_empty(self):
        session = Session(LocalEnvironment("local", 1))
        try:
            assert session.wait_any() == []
        finally:
            session.close()

    def test_duplicate_job_id_is_rejected(self):
        session = Session(LocalEnvironment("local", 1))
        try:
            task = Task("t", (), (X,), kernel=_emit)
            session.submit(task, Context(), capsule_id="c", branch=1)
            with pytest.raises(EngineError, match="duplicate job id"):
                session.submit(task, Context(), capsule_id="c", branch=1)
        finally:
            session.close()

    def test_unknown_environment_is_a_configuration_error(self):
        session = Session(LocalEnvironment("local", 1))
        try:
            with pytest.raises(ConfigurationError):
                session.submit(Task("t", (), (X,), kernel=_emit), Context(),
                               environment="cloud")
        finally:
            session.close()

    def test_needs_an_environment(self):
        with pytest.raises(ConfigurationError):
            Session({})

    def test_flaky_kernel_retries_to_success(self):
        calls = {"n": 0}

        def flaky(ctx):
            calls["n"] += 1
            if calls["n"] < 3:
                raise RuntimeError("transient")
            return Context({X: 1.0})

        session = Session(LocalEnvironment("local", 1), retry=RetryPolicy(max_attempts=3))
        try:
            job = session.submit(Task("t", (), (X,), kernel=flaky), Context())
            session.wait_any()
            assert job.state is JobState.DONE
            assert job.attempts == 3
            states = [state for state, _ in job.history]
            assert states.count("failed") == 2
            assert states[-1] == "done"
        finally:
            session.close()

    def test_retries_exhausted_reports_failed(self):
        def hopeless(ctx):
            raise RuntimeError("permanent")

        session = Session(LocalEnvironment("local", 1), retry=RetryPolicy(max_attempts=2))
        try:
            job = session.submit(Task("t", (), (X,), kernel=hopeless), Context())
            done = session.wait_any()
            assert done == [job]
            assert job.state is JobState.FAILED
            assert job.attempts == 2
            assert "permanent" in job.failure
        finally:
            session.close()

    def test_kill_in_flight(self):
        import threading

        gate = threading.Event()

        def blocked(ctx):
            gate.wait(5.0)
            return Context({X: 0.0})

        session = Session(LocalEnvironment("local", 1))
        try:
            job = session.submit(Task("t", (), (X,), kernel=blocked), Context())
            session.kill_in_flight()
            gate.set()
            assert job.state is JobState.KILLED
            assert session.wait_any() == []
            assert session.poll(job.id) is JobState.KILLED
        finally:
            session.close()

    def test_every_history_is_a_legal_walk(self):
        session = Session(LocalEnvironment("local", 2), retry=RetryPolicy(max_attempts=2))
        try:
            def sometimes(ctx):
                if ctx[SEED] % 2:
                    raise RuntimeError("odd seed")
                return Context({X: 1.0})

            task = Task("t", (SEED,), (X,), kernel=sometimes)
            for i in range(6):
                session.submit(task, Context({SEED: i}), capsule_id="t", branch=i)
            while session.wait_any():
                pass
            for job in session.jobs:
                walk = ["ready"] + [state for state, _ in job.history[1:]]
                for prev, cur in zip(walk, walk[1:]):
                    pair = (JobState(prev), JobState(cur))
                    assert pair in LEGAL_TRANSITIONS
        finally:
            session.close()


def chain_workflow():
    emit = Capsule("emit", Task("emit", (), (X,), kernel=_emit))
    double = Capsule("double", Task("double", (X,), (Y,), kernel=_double))
    hooks = (
        ToStringHook(double, (Y,)),
        DisplayHook(emit, "x is ${x}"),
    )
    return Workflow((emit, double), (Transition(emit, double),), hooks)


def fanout_workflow(count=4):
    # Module-level kernels: the same workflow must run on a process pool.
    model = Capsule("model", Task("model", (SEED,), (X,), kernel=_seed_to_x))
    gather = Capsule("gather", Task("gather", (XS,), (Y,), kernel=_gather_sum))
    transitions = (
        Transition(None, model, TransitionMode.EXPLORATION, sampling=SeedFactor(SEED, count)),
        Transition(model, gather, TransitionMode.AGGREGATION, collect={X: XS}),
    )
    return Workflow((model, gather), transitions)


class TestRunWorkflow:
    def test_direct_chain(self):
        report = run_workflow(chain_workflow())
        assert report.status == "completed"
        assert [job.id for job in report.jobs] == ["emit[0]", "double[0]"]
        assert report.results["double"][0][Y] == 42.0
        texts = {(e.action, e.text) for e in report.hook_effects}
        assert ("to-string", "y=42.0") in texts
        assert ("display", "x is 21.0") in texts

    def test_exploration_fans_out_and_aggregates_in_branch_order(self):
        count = 5
        report = run_workflow(fanout_workflow(count))
        assert report.status == "completed"
        model_jobs = [job for job in report.jobs if job.capsule_id == "model"]
        assert [job.branch for job in model_jobs] == list(range(count))
        collected = report.results["gather"][0]
        branch_values = [job.result[X] for job in model_jobs]
        assert report.jobs[-1].context[XS] == tuple(branch_values)
        assert collected[Y] == sum(branch_values)

    def test_defective_workflow_is_rejected(self):
        needy = Capsule("needy", Task("needy", (X,), (), kernel=lambda c: Context()))
        with pytest.raises(InvalidWorkflowError, match="unbound input"):
            run_workflow(Workflow((needy,)))

    def test_terminal_failure_aborts_and_kills_siblings(self):
        def picky(ctx):
            if ctx[SEED] == sample_first():
                raise RuntimeError("bad branch")
            import time

            time.sleep(0.05)
            return Context({X: 0.0})

        def sample_first():
            from molerun.stochastic import sample_seeds

            return sample_seeds(0, 3)[0]

        model = Capsule("model", Task("model", (SEED,), (X,), kernel=picky))
        gather = Capsule("gather", Task("gather", (XS,), (Y,),
                                        kernel=lambda c: Context({Y: 0.0})))
        flow = Workflow((model, gather), (
            Transition(None, model, TransitionMode.EXPLORATION, sampling=SeedFactor(SEED, 3)),
            Transition(model, gather, TransitionMode.AGGREGATION, collect={X: XS}),
        ))
        report = run_workflow(flow, retry=RetryPolicy(max_attempts=1),
                              environments=LocalEnvironment("local", 3))
        assert report.status == "aborted"
        states = {job.id: job.state for job in report.jobs}
        assert JobState.FAILED in states.values()
        assert all(state in (JobState.DONE, JobState.FAILED, JobState.KILLED)
                   for state in states.values())
        assert report.errors

    def test_totals_add_up(self):
        report = run_workflow(fanout_workflow(3))
        totals = report.totals
        assert totals["jobs"] == 4
        assert totals["attempts"] == 4
        assert totals["retries"] == 0
        assert totals["failures"] == 0
        assert totals["duration"] == max(totals["clocks"].values())

    def test_thread_runs_are_deterministic(self):
        a = report_json(run_workflow(fanout_workflow(4), master_seed=9))
        b = report_json(run_workflow(fanout_workflow(4), master_seed=9))
        assert a == b

    def test_reseeding_changes_the_branches(self):
        a = report_json(run_workflow(fanout_workflow(4), master_seed=1))
        b = report_json(run_workflow(fanout_workflow(4), master_seed=2))
        assert a != b

    def test_process_pool_runs_module_level_kernels(self):
        report = run_workflow(
            fanout_workflow(3),
            environments=LocalEnvironment("local", 2, processes=True),
        )
        assert report.status == "completed"

    def test_environment_assignment_routes_by_pattern(self):
        assignment = EnvironmentAssignment(rules=(("model", "fast"),), default="slow")
        report = run_workflow(
            fanout_workflow(2),
            environments={
                "slow": LocalEnvironment("slow", 1),
                "fast": LocalEnvironment("fast", 2),
            },
            assignment=assignment,
        )
        envs = {job.capsule_id: job.environment for job in report.jobs}
        assert envs == {"model": "fast", "gather": "slow"}

    def test_assignment_glob_patterns(self):
        assignment = EnvironmentAssignment(rules=(("island*", "grid"),), default="local")
        assert assignment.resolve("island") == "grid"
        assert assignment.resolve("island[3]") == "grid"
        assert assignment.resolve("model") == "local"


class TestSimulatedEnvironment:
    def grid(self, **overrides):
        defaults = dict(nodes=2, latency_s=(0.05, 0.1))
        defaults.update(overrides)
        return SimulatedEnvironment("grid", SimulatedDistributedConfig(**defaults))

    def test_virtual_clock_in_histories(self):
        flow = fanout_workflow(3)
        report = run_workflow(flow, environments=self.grid())
        for job in report.jobs:
            times = [at for _, at in job.history]
            assert times == sorted(times)
            assert all(isinstance(at, float) for at in times)
        # Latency is strictly positive, so nothing starts at time zero.
        for job in report.jobs:
            started = next(at for state, at in job.history if state == "running")
            assert started > 0.0

    def test_node_contention_serializes_work(self):
        task = Task("model", (SEED,), (X,), kernel=_seed_to_x, virtual_duration_s=10.0)
        model = Capsule("model", task)
        flow = Workflow((model,), (
            Transition(None, model, TransitionMode.EXPLORATION, sampling=SeedFactor(SEED, 4)),
        ))
        env = self.grid(nodes=2)
        report = run_workflow(flow, environments=env)
        assert report.status == "completed"
        assert env.max_running <= 2
        # Two waves of two: the virtual clock shows the second wave waited.
        finishes = sorted(job.history[-1][1] for job in report.jobs)
        assert finishes[2] >= finishes[0] + 10.0

    def test_injected_failures_carry_the_cause_and_retry(self):
        env = self.grid(failure_probability=0.4)
        report = run_workflow(fanout_workflow(6), environments=env,
                              retry=RetryPolicy(max_attempts=50))
        assert report.status == "completed"
        failed_marks = [job for job in report.jobs if job.attempts > 1]
        assert failed_marks, "with p=0.4 over six branches a failure is expected"

    def test_memory_over_limit_fails_with_cause(self):
        task = Task("fat", (), (X,), kernel=_emit, memory_mb=4096)
        flow = Workflow((Capsule("fat", task),))
        report = run_workflow(flow, environments=self.grid(memory_limit_mb=1024),
                              retry=RetryPolicy(max_attempts=1))
        assert report.status == "aborted"
        assert report.jobs[0].failure == "memory"

    def test_walltime_overrun_fails_with_cause(self):
        task = Task("slow", (), (X,), kernel=_emit, virtual_duration_s=100.0)
        flow = Workflow((Capsule("slow", task),))
        report = run_workflow(flow, environments=self.grid(walltime_s=10.0),
                              retry=RetryPolicy(max_attempts=1))
        assert report.status == "aborted"
        job = report.jobs[0]
        assert job.failure == "walltime"
        # The kill lands exactly one walltime after the start.
        started = next(at for state, at in job.history if state == "running")
        failed = next(at for state, at in job.history if state == "failed")
        assert failed == pytest.approx(started + 10.0)

    def test_simulated_runs_are_deterministic(self):
        a = report_json(run_workflow(fanout_workflow(4), environments=self.grid(failure_probability=0.2),
                                     retry=RetryPolicy(max_attempts=10), master_seed=5))
        b = report_json(run_workflow(fanout_workflow(4), environments=self.grid(failure_probability=0.2),
                                     retry=RetryPolicy(max_attempts=10), master_seed=5))
        assert a == b

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimulatedDistributedConfig(nodes=0)
        with pytest.raises(ValueError):
            SimulatedDistributedConfig(latency_s=(0.5, 0.1))
        with pytest.raises(ValueError):
            SimulatedDistributedConfig(failure_probability=1.0)
        with pytest.raises(ValueError):
            SimulatedDistributedConfig(speed_factor=0.0)


class TestBatchEnvironment:
    def test_jobs_complete_through_the_mock(self):
        task = Task("model", (SEED,), (X,), kernel=_seed_to_x, virtual_duration_s=25.0)
        model = Capsule("model", task)
        flow = Workflow((model,), (
            Transition(None, model, TransitionMode.EXPLORATION, sampling=SeedFactor(SEED, 3)),
        ))
        env = BatchEnvironment("cluster", BatchConfig(flavor=Flavor.SLURM, nodes=2))
        report = run_workflow(flow, environments=env)
        assert report.status == "completed"
        for job in report.jobs:
            states = [state for state, _ in job.history]
            assert states == ["ready", "submitted", "running", "done"]
            # Progress is observed on the mock clock's poll cadence.
            assert all(at % 10.0 == 0.0 for _, at in job.history)

    def test_walltime_overrun_comes_back_failed(self):
        task = Task("slow", (), (X,), kernel=_emit, virtual_duration_s=120.0)
        flow = Workflow((Capsule("slow", task),))
        env = BatchEnvironment("cluster", BatchConfig(flavor=Flavor.PBS, walltime_s=60))
        report = run_workflow(flow, environments=env, retry=RetryPolicy(max_attempts=1))
        assert report.status == "aborted"
        assert report.jobs[0].failure == "walltime"

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_every_flavor_round_trips(self, flavor):
        task = Task("t", (), (X,), kernel=_emit, virtual_duration_s=5.0)
        flow = Workflow((Capsule("t", task),))
        env = BatchEnvironment("cluster", BatchConfig(flavor=flavor))
        report = run_workflow(flow, environments=env)
        assert report.status == "completed"
        assert report.jobs[0].result[X] == 21.0


class TestRunOutputs:
    def test_report_and_log_files(self, tmp_path):
        report = run_workflow(chain_workflow())
        write_run_outputs(report, tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["status"] == "completed"
        assert data["jobs"][0]["history"][0][0] == "ready"
        assert (tmp_path / "run.log").read_text() == "x is 21.0\n"

    def test_escaping_hook_paths_are_refused(self, tmp_path):
        report = RunReport(
            status="completed",
            jobs=[],
            results={},
            hook_effects=[
                __import__("molerun.core", fromlist=["HookEffect"]).HookEffect(
                    "save-population", "ga", "text", path="../outside.csv"
                )
            ],
            errors=[],
            totals={},
        )
        with pytest.raises(EngineError, match="escapes"):
            write_run_outputs(report, tmp_path / "out")
        assert not (tmp_path / "outside.csv").exists()
