"""Job scheduling: environments, the state machine, retries, and workflow runs.

A single coordinator (Session) owns every job's state. Environments execute
kernels on worker threads/processes or inside a discrete-event simulation and
message completions back; job state is never mutated outside the coordinator.

Timestamps in job histories and the run report are logical: virtual seconds
on simulated and batch environments, per-job step counts on local ones. Real
elapsed time never lands in report files, so equal seeds give equal bytes.
"""

from __future__ import annotations

import concurrent.futures
import enum
import fnmatch
import json
import multiprocessing
import queue
import threading
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from heapq import heappop, heappush
from pathlib import Path
from typing import ClassVar

from molerun import schedulers
from molerun.core import (
    Capsule,
    Context,
    Hook,
    HookEffect,
    HookError,
    Task,
    Transition,
    TransitionMode,
    Workflow,
    fire_hook,
    run_task,
    validate_workflow,
)
from molerun.rng import stream


class EngineError(Exception):
    """Base for execution failures that are bugs or misconfigurations."""


class IllegalTransitionError(EngineError):
    """A job was asked to make a transition outside the legal relation."""


class SubmissionError(EngineError):
    """An environment refused a job at submission time."""


class ConfigurationError(EngineError):
    """An environment assignment or setup is unusable."""


class InvalidWorkflowError(EngineError):
    """run_workflow was handed a workflow with validation defects."""

    def __init__(self, defects):
        super().__init__("; ".join(str(d) for d in defects))
        self.defects = list(defects)


class JobState(enum.Enum):
    READY = "ready"
    SUBMITTED = "submitted"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    KILLED = "killed"

    def __str__(self) -> str:
        return self.value


LEGAL_TRANSITIONS = frozenset(
    {
        (JobState.READY, JobState.SUBMITTED),
        (JobState.SUBMITTED, JobState.RUNNING),
        (JobState.RUNNING, JobState.DONE),
        (JobState.RUNNING, JobState.FAILED),
        (JobState.FAILED, JobState.SUBMITTED),
    }
    | {(state, JobState.KILLED) for state in JobState if state is not JobState.KILLED}
)


@dataclass
class Job:
    """One (capsule, context) execution and its full state history."""

    id: str
    capsule_id: str
    task: Task
    context: Context
    branch: int
    index: int
    environment: str = ""
    state: JobState = JobState.READY
    attempts: int = 0
    result: Context | None = None
    failure: str | None = None
    history: list[tuple[str, float | int]] = field(default_factory=list)

    def mark(self, state: JobState, at: float | int | None = None) -> None:
        if (self.state, state) not in LEGAL_TRANSITIONS:
            raise IllegalTransitionError(f"job {self.id}: {self.state} -> {state}")
        self.state = state
        self.history.append((state.value, len(self.history) if at is None else at))


@dataclass(frozen=True)
class RetryPolicy:
    """Automatic resubmission of failed jobs."""

    max_attempts: int = 3
    backoff_s: float = 0.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max attempts must be at least 1")


# Messages environments send the coordinator: (kind, job id, payload, at).
Message = tuple[str, str, object, "float | None"]


class Environment:
    """Executes kernels and messages job progress back to the coordinator.

    Subclasses deliver ("running", id, None, at), then exactly one of
    ("done", id, result, at) or ("failed", id, cause, at) per submission.
    """

    kind: ClassVar[str] = "abstract"
    presorted: ClassVar[bool] = False

    def __init__(self, name: str, capacity: int):
        if capacity < 1:
            raise ValueError("environment capacity must be at least 1")
        self.name = name
        self.capacity = capacity
        self.max_running = 0
        self._run_root: Path | None = None

    def prepare(self, master_seed: int, run_root: Path | None) -> None:
        self._run_root = run_root

    def workdir_for(self, job_id: str) -> Path | None:
        if self._run_root is None:
            return None
        return self._run_root / "jobs" / job_id

    def submit(self, job: Job, delay_s: float = 0.0) -> None:
        raise NotImplementedError

    def collect(self, block: bool) -> list[Message]:
        raise NotImplementedError

    def pending(self) -> bool:
        """Whether another collect() call can make progress on its own."""
        return False

    def clock(self) -> float | None:
        """The environment's logical clock, when it has one."""
        return None

    def cancel(self, job_id: str) -> None:
        pass

    def shutdown(self) -> None:
        pass


def _deliver(inbox, job_id: str, task: Task, context: Context, workdir: Path | None,
             delay_s: float, gauge) -> None:
    """Worker-side kernel run; all outcomes leave as messages, never raises."""
    if delay_s > 0:
        import time

        time.sleep(delay_s)
    inbox.put(("running", job_id, None, None))
    if gauge is not None:
        gauge.enter()
    try:
        result = run_task(task, context, workdir=workdir)
    except Exception as exc:
        inbox.put(("failed", job_id, f"{type(exc).__name__}: {exc}", None))
    else:
        inbox.put(("done", job_id, result, None))
    finally:
        if gauge is not None:
            gauge.leave()


class _Gauge:
    """A high-water mark over concurrent kernel executions."""

    def __init__(self):
        self._lock = threading.Lock()
        self.now = 0
        self.peak = 0

    def enter(self) -> None:
        with self._lock:
            self.now += 1
            self.peak = max(self.peak, self.now)

    def leave(self) -> None:
        with self._lock:
            self.now -= 1


_PROCESS_INBOX = None


def _process_init(inbox) -> None:
    global _PROCESS_INBOX
    _PROCESS_INBOX = inbox


def _process_deliver(job_id: str, task: Task, context: Context, workdir: Path | None,
                     delay_s: float) -> None:
    _deliver(_PROCESS_INBOX, job_id, task, context, workdir, delay_s, None)


class LocalEnvironment(Environment):
    """Kernel execution on a local thread or process pool.

    Process pools require picklable tasks (module-level kernels); thread
    pools take any kernel. Capacity is enforced by the pool size.
    """

    def __init__(self, name: str = "local", capacity: int = 4, processes: bool = False):
        super().__init__(name, capacity)
        self.kind = "local-processes" if processes else "local-threads"
        self._processes = processes
        self._pool = None
        self._inbox = None
        self._gauge = _Gauge()

    def _ensure_pool(self) -> None:
        if self._pool is not None:
            return
        if self._processes:
            self._inbox = multiprocessing.get_context("fork").Queue()
            self._pool = concurrent.futures.ProcessPoolExecutor(
                max_workers=self.capacity,
                mp_context=multiprocessing.get_context("fork"),
                initializer=_process_init,
                initargs=(self._inbox,),
            )
        else:
            self._inbox = queue.SimpleQueue()
            self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=self.capacity)

    def submit(self, job: Job, delay_s: float = 0.0) -> None:
        self._ensure_pool()
        workdir = self.workdir_for(job.id) if job.task.command is not None else None
        if self._processes:
            try:
                future = self._pool.submit(
                    _process_deliver, job.id, job.task, job.context, workdir, delay_s
                )
            except Exception as exc:
                raise SubmissionError(f"process pool rejected job {job.id}: {exc}") from exc
            future.add_done_callback(self._watch_future(job.id))
        else:
            self._pool.submit(
                _deliver, self._inbox, job.id, job.task, job.context, workdir, delay_s, self._gauge
            )

    def _watch_future(self, job_id: str):
        def callback(future) -> None:
            exc = future.exception()
            if exc is not None:
                # The worker never ran (unpicklable payload, dead pool);
                # surface it as an infrastructure failure.
                self._inbox.put(("running", job_id, None, None))
                self._inbox.put(("failed", job_id, f"{type(exc).__name__}: {exc}", None))

        return callback

    def collect(self, block: bool) -> list[Message]:
        if self._inbox is None:
            return []
        batch: list[Message] = []
        while True:
            try:
                batch.append(self._inbox.get_nowait())
            except queue.Empty:
                break
        if batch or not block:
            self.max_running = max(self.max_running, self._gauge.peak)
            return batch
        try:
            batch.append(self._inbox.get(timeout=0.05))
        except queue.Empty:
            return []
        while True:
            try:
                batch.append(self._inbox.get_nowait())
            except queue.Empty:
                break
        self.max_running = max(self.max_running, self._gauge.peak)
        return batch

    def shutdown(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True, cancel_futures=True)
            self._pool = None


@dataclass(frozen=True)
class SimulatedDistributedConfig:
    """Shape of a simulated grid: nodes, speed, latency, faults, limits."""

    nodes: int = 4
    speed_factor: float = 1.0
    latency_s: tuple[float, float] = (0.05, 0.1)
    failure_probability: float = 0.0
    memory_limit_mb: int | None = None
    walltime_s: float | None = None

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ValueError("node count must be at least 1")
        if self.speed_factor <= 0:
            raise ValueError("speed factor must be positive")
        lo, hi = self.latency_s
        if lo < 0 or hi < lo:
            raise ValueError("latency bounds must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.failure_probability < 1.0:
            raise ValueError("failure probability must be in [0, 1)")


class SimulatedEnvironment(Environment):
    """A discrete-event model of a remote cluster.

    Kernels really run (instantly, at completion processing); submission
    latency, node contention, injected failures, memory refusals, and
    walltime kills all happen on a virtual clock driven by a dedicated RNG
    stream, so runs are bitwise reproducible for a given master seed.
    """

    kind = "simulated-distributed"
    presorted = True

    def __init__(self, name: str, config: SimulatedDistributedConfig):
        super().__init__(name, config.nodes)
        self.config = config
        self._rng = None
        self._clock = 0.0
        self._events: list[tuple[float, int, str, Job, str | None]] = []
        self._seq = 0
        self._waiting: deque[Job] = deque()
        self._free_nodes = config.nodes
        self._running_now = 0
        self._cancelled: set[str] = set()

    def prepare(self, master_seed: int, run_root: Path | None) -> None:
        super().prepare(master_seed, run_root)
        self._rng = stream(master_seed, self.name)

    def clock(self) -> float:
        return self._clock

    def pending(self) -> bool:
        return bool(self._events) or bool(self._waiting)

    def _push(self, at: float, action: str, job: Job, cause: str | None = None) -> None:
        heappush(self._events, (at, self._seq, action, job, cause))
        self._seq += 1

    def submit(self, job: Job, delay_s: float = 0.0) -> None:
        if self._rng is None:
            raise SubmissionError(f"environment {self.name!r} was not prepared")
        lo, hi = self.config.latency_s
        latency = self._rng.uniform(lo, hi)
        self._push(self._clock + delay_s + latency, "eligible", job)

    def cancel(self, job_id: str) -> None:
        self._cancelled.add(job_id)

    def collect(self, block: bool) -> list[Message]:
        if not self._events and not self._waiting:
            return []
        messages: list[Message] = []
        if self._events:
            now = self._events[0][0]
            self._clock = now
            while self._events and self._events[0][0] == now:
                _, _, action, job, cause = heappop(self._events)
                if action == "eligible":
                    self._waiting.append(job)
                    continue
                # A finish event frees its node even for cancelled jobs.
                self._free_nodes += 1
                self._running_now -= 1
                if job.id in self._cancelled:
                    continue
                if action == "finish-failed":
                    messages.append(("failed", job.id, cause, now))
                    continue
                workdir = self.workdir_for(job.id) if job.task.command is not None else None
                try:
                    result = run_task(job.task, job.context, workdir=workdir)
                except Exception as exc:
                    messages.append(("failed", job.id, f"{type(exc).__name__}: {exc}", now))
                else:
                    messages.append(("done", job.id, result, now))
        now = self._clock
        while self._free_nodes > 0 and self._waiting:
            job = self._waiting.popleft()
            if job.id in self._cancelled:
                continue
            self._free_nodes -= 1
            self._running_now += 1
            self.max_running = max(self.max_running, self._running_now)
            messages.append(("running", job.id, None, now))
            cfg = self.config
            if cfg.memory_limit_mb is not None and job.task.memory_mb > cfg.memory_limit_mb:
                self._push(now, "finish-failed", job, "memory")
                continue
            doomed = self._rng.random() < cfg.failure_probability
            duration = job.task.virtual_duration_s / cfg.speed_factor
            if cfg.walltime_s is not None and duration > cfg.walltime_s:
                self._push(now + cfg.walltime_s, "finish-failed", job, "walltime")
            elif doomed:
                self._push(now + duration, "finish-failed", job, "failure injected")
            else:
                self._push(now + duration, "finish-done", job)
        return messages


@dataclass(frozen=True)
class BatchConfig:
    """A batch-scheduler environment bound to a mock batch system."""

    flavor: schedulers.Flavor = schedulers.Flavor.SLURM
    nodes: int = 2
    walltime_s: int = 4 * 3600
    memory_mb: int = 1200
    queue: str | None = None
    poll_interval_s: float = 10.0


class BatchEnvironment(Environment):
    """Delegation through rendered submission scripts to a mock scheduler.

    Each job becomes a `sleep <virtual duration>` script; the mock enforces
    node capacity and walltime on its own clock, the environment polls
    status text every poll interval and runs the kernel locally once the
    scheduler reports completion with a clean exit code.
    """

    kind = "batch-scheduler"
    presorted = True

    def __init__(self, name: str, config: BatchConfig, scheduler: schedulers.MockScheduler | None = None):
        super().__init__(name, config.nodes)
        self.config = config
        self.scheduler = scheduler if scheduler is not None else schedulers.MockScheduler(nodes=config.nodes)
        self._live: dict[str, tuple[Job, str, schedulers.Phase]] = {}

    def clock(self) -> float:
        return self.scheduler.clock

    def pending(self) -> bool:
        return bool(self._live)

    def submit(self, job: Job, delay_s: float = 0.0) -> None:
        description = schedulers.JobDescription(
            executable="sleep",
            arguments=(str(job.task.virtual_duration_s),),
            workdir=".",
            walltime_s=self.config.walltime_s,
            memory_mb=job.task.memory_mb or self.config.memory_mb,
            queue=self.config.queue,
        )
        try:
            script = schedulers.render_submission_script(self.config.flavor, description)
        except (schedulers.RenderError, ValueError) as exc:
            raise SubmissionError(f"cannot render submission for job {job.id}: {exc}") from exc
        scheduler_id = self.scheduler.submit(script)
        self._live[job.id] = (job, scheduler_id, schedulers.Phase.QUEUED)

    def cancel(self, job_id: str) -> None:
        self._live.pop(job_id, None)

    def collect(self, block: bool) -> list[Message]:
        if not self._live:
            return []
        self.scheduler.tick(self.config.poll_interval_s)
        now = self.scheduler.clock
        messages: list[Message] = []
        for job_id in list(self._live):
            job, scheduler_id, seen = self._live[job_id]
            text = self.scheduler.status_text(self.config.flavor)
            phase = schedulers.parse_status(self.config.flavor, text, scheduler_id)
            if phase is seen:
                continue
            if seen is schedulers.Phase.QUEUED and phase is not schedulers.Phase.QUEUED:
                messages.append(("running", job_id, None, now))
            if phase is schedulers.Phase.RUNNING:
                self._live[job_id] = (job, scheduler_id, phase)
                continue
            del self._live[job_id]
            exit_code = self.scheduler.exit_code(scheduler_id)
            if phase is schedulers.Phase.DONE and exit_code in (0, None):
                workdir = self.workdir_for(job_id) if job.task.command is not None else None
                try:
                    result = run_task(job.task, job.context, workdir=workdir)
                except Exception as exc:
                    messages.append(("failed", job_id, f"{type(exc).__name__}: {exc}", now))
                else:
                    messages.append(("done", job_id, result, now))
            else:
                messages.append(("failed", job_id, "walltime", now))
        running_now = sum(1 for _, _, phase in self._live.values() if phase is schedulers.Phase.RUNNING)
        self.max_running = max(self.max_running, running_now)
        return messages


@dataclass(frozen=True)
class EnvironmentAssignment:
    """Capsule-pattern to environment-name routing rules."""

    rules: tuple[tuple[str, str], ...] = ()
    default: str | None = None

    def resolve(self, capsule_id: str) -> str | None:
        for pattern, environment in self.rules:
            if fnmatch.fnmatchcase(capsule_id, pattern):
                return environment
        return self.default


def assign_environment(
    workflow: Workflow,
    pattern: str,
    environment: str,
    base: EnvironmentAssignment | None = None,
) -> EnvironmentAssignment:
    """Route capsules matching a glob pattern to a named environment."""
    if not any(fnmatch.fnmatchcase(c.id, pattern) for c in workflow.capsules):
        raise ConfigurationError(f"pattern {pattern!r} matches no capsule")
    base = base or EnvironmentAssignment()
    return EnvironmentAssignment(rules=(*base.rules, (pattern, environment)), default=base.default)


class Session:
    """The coordinator: owns job state, dispatches, retries, and collects.

    Completion processing is deterministic: event-driven environments hand
    over messages in virtual-time order, worker pools' batches are sorted by
    job creation order before processing.
    """

    def __init__(
        self,
        environments: Environment | Mapping[str, Environment],
        *,
        default: str | None = None,
        retry: RetryPolicy | None = None,
        master_seed: int = 0,
        run_root: Path | None = None,
    ):
        if isinstance(environments, Environment):
            environments = {environments.name: environments}
        if not environments:
            raise ConfigurationError("a session needs at least one environment")
        self.environments = dict(environments)
        self.default = default if default is not None else next(iter(self.environments))
        if self.default not in self.environments:
            raise ConfigurationError(f"default environment {self.default!r} is not attached")
        self.retry = retry if retry is not None else RetryPolicy()
        self.master_seed = master_seed
        self.run_root = run_root
        self.jobs: list[Job] = []
        self._by_id: dict[str, Job] = {}
        self._in_flight: set[str] = set()
        self.completions = 0
        for environment in self.environments.values():
            environment.prepare(master_seed, run_root)

    def submit(
        self,
        task: Task,
        context: Context,
        *,
        capsule_id: str = "task",
        branch: int = 0,
        environment: str | None = None,
    ) -> Job:
        name = environment if environment is not None else self.default
        env = self.environments.get(name)
        if env is None:
            raise ConfigurationError(f"unknown environment {name!r}")
        job_id = f"{capsule_id}[{branch}]"
        if job_id in self._by_id:
            raise EngineError(f"duplicate job id {job_id}")
        job = Job(
            id=job_id,
            capsule_id=capsule_id,
            task=task,
            context=context,
            branch=branch,
            index=len(self.jobs),
            environment=name,
        )
        job.history.append((JobState.READY.value, self._stamp(env)))
        self.jobs.append(job)
        self._by_id[job_id] = job
        self._dispatch(job, env)
        return job

    @staticmethod
    def _stamp(env: Environment) -> float | int:
        at = env.clock()
        return 0 if at is None else at

    def _dispatch(self, job: Job, env: Environment, delay_s: float = 0.0) -> None:
        job.mark(JobState.SUBMITTED, self._at(job, env))
        job.attempts += 1
        env.submit(job, delay_s)
        self._in_flight.add(job.id)

    @staticmethod
    def _at(job: Job, env: Environment, at: float | None = None) -> float | int:
        if at is not None:
            return at
        clocked = env.clock()
        return len(job.history) if clocked is None else clocked

    def wait_any(self) -> list[Job]:
        """Block until at least one job completes (done or out of retries).

        Returns completed jobs in processing order; empty means nothing was
        in flight.
        """
        completed: list[Job] = []
        while not completed:
            if not self._in_flight:
                return []
            for kind, job_id, payload, at in self._collect_batch():
                job = self._by_id.get(job_id)
                if job is None or job.state is JobState.KILLED:
                    continue
                env = self.environments[job.environment]
                if kind == "running":
                    if job.state is JobState.SUBMITTED:
                        job.mark(JobState.RUNNING, self._at(job, env, at))
                    continue
                if job.state is JobState.SUBMITTED:
                    # The running message was lost or merged with the outcome.
                    job.mark(JobState.RUNNING, self._at(job, env, at))
                if job.state is not JobState.RUNNING:
                    continue
                self.completions += 1
                if kind == "done":
                    job.mark(JobState.DONE, self._at(job, env, at))
                    job.result = payload
                    self._in_flight.discard(job.id)
                    completed.append(job)
                else:
                    job.mark(JobState.FAILED, self._at(job, env, at))
                    job.failure = payload
                    if job.attempts < self.retry.max_attempts:
                        self._dispatch(job, env, delay_s=self.retry.backoff_s)
                    else:
                        self._in_flight.discard(job.id)
                        completed.append(job)
        return completed

    def _collect_batch(self) -> list[Message]:
        names = sorted(self.environments)
        while True:
            tagged: list[tuple[Environment, list[Message]]] = []
            for name in names:
                env = self.environments[name]
                batch = env.collect(block=False)
                if batch:
                    tagged.append((env, batch))
            if tagged:
                return self._ordered(tagged)
            inflight_envs = {self._by_id[i].environment for i in self._in_flight}
            if not inflight_envs:
                return []
            progressing = [n for n in inflight_envs if self.environments[n].pending()]
            workers = sorted(n for n in inflight_envs if not self.environments[n].presorted)
            if not progressing and not workers:
                raise EngineError("stalled: jobs in flight but no environment can progress")
            for name in workers:
                batch = self.environments[name].collect(block=True)
                if batch:
                    tagged.append((self.environments[name], batch))
                    for other in names:
                        if other != name:
                            extra = self.environments[other].collect(block=False)
                            if extra:
                                tagged.append((self.environments[other], extra))
                    return self._ordered(tagged)

    def _ordered(self, tagged: list[tuple[Environment, list[Message]]]) -> list[Message]:
        ordered: list[Message] = []
        rank = {"running": 0, "done": 1, "failed": 1}
        for env, batch in sorted(tagged, key=lambda pair: pair[0].name):
            if env.presorted:
                ordered.extend(batch)
            else:
                ordered.extend(
                    sorted(batch, key=lambda m: (self._by_id[m[1]].index, rank[m[0]]))
                )
        return ordered

    def kill_in_flight(self) -> None:
        """Abort everything still moving; late results are discarded."""
        for job_id in sorted(self._in_flight, key=lambda i: self._by_id[i].index):
            job = self._by_id[job_id]
            env = self.environments[job.environment]
            env.cancel(job_id)
            job.mark(JobState.KILLED, self._at(job, env))
        self._in_flight.clear()

    def poll(self, job_id: str) -> JobState:
        """Current state of a job by id; side-effect free."""
        job = self._by_id.get(job_id)
        if job is None:
            raise EngineError(f"unknown job id {job_id!r}")
        return job.state

    def clocks(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {}
        for name, env in sorted(self.environments.items()):
            at = env.clock()
            out[name] = self.completions if at is None else at
        return out

    def close(self) -> None:
        for environment in self.environments.values():
            environment.shutdown()


@dataclass
class RunReport:
    """What a run produced: the ledger, results, hook effects, and totals."""

    status: str
    jobs: list[Job]
    results: dict[str, list[Context]]
    hook_effects: list[HookEffect]
    errors: list[str]
    totals: dict[str, object]


def _context_json(context: Context) -> dict[str, object]:
    out: dict[str, object] = {}
    for proto, value in context.items():
        out[proto.name] = list(value) if isinstance(value, tuple) else value
    return out


def report_json(report: RunReport) -> dict[str, object]:
    return {
        "status": report.status,
        "jobs": [
            {
                "id": job.id,
                "capsule": job.capsule_id,
                "branch": job.branch,
                "environment": job.environment,
                "attempts": job.attempts,
                "state": job.state.value,
                "failure": job.failure,
                "history": [[state, at] for state, at in job.history],
                "result": None if job.result is None else _context_json(job.result),
            }
            for job in report.jobs
        ],
        "results": {
            capsule: [_context_json(ctx) for ctx in contexts]
            for capsule, contexts in report.results.items()
        },
        "hooks": [
            {"action": e.action, "capsule": e.capsule_id, "text": e.text, "path": e.path}
            for e in report.hook_effects
        ],
        "errors": report.errors,
        "totals": report.totals,
    }


def write_run_outputs(report: RunReport, out_dir: Path) -> None:
    """Persist report.json plus every file-producing hook effect."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(report_json(report), indent=2, sort_keys=True) + "\n"
    (out_dir / "report.json").write_text(text)
    log_lines = [e.text for e in report.hook_effects if e.path == "run.log"]
    if log_lines:
        (out_dir / "run.log").write_text("\n".join(log_lines) + "\n")
    for effect in report.hook_effects:
        if effect.path is None or effect.path == "run.log":
            continue
        target = (out_dir / effect.path).resolve()
        if not target.is_relative_to(out_dir.resolve()):
            raise EngineError(f"hook path {effect.path!r} escapes the run directory")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(effect.text)


def _totals(session: Session, extra: dict[str, object] | None = None) -> dict[str, object]:
    failures = sum(sum(1 for state, _ in job.history if state == "failed") for job in session.jobs)
    attempts = sum(job.attempts for job in session.jobs)
    clocks = session.clocks()
    totals: dict[str, object] = {
        "jobs": len(session.jobs),
        "attempts": attempts,
        "retries": attempts - sum(1 for j in session.jobs if j.attempts > 0),
        "failures": failures,
        "clocks": clocks,
        "duration": max(clocks.values(), default=0),
    }
    if extra:
        totals.update(extra)
    return totals


@dataclass
class _FanOut:
    base: Context
    size: int
    collected: dict[int, dict] = field(default_factory=dict)


def run_workflow(
    workflow: Workflow,
    initial: Context | None = None,
    *,
    environments: Environment | Mapping[str, Environment] | None = None,
    assignment: EnvironmentAssignment | None = None,
    retry: RetryPolicy | None = None,
    master_seed: int = 0,
    run_root: Path | None = None,
) -> RunReport:
    """Execute a validated workflow to completion and assemble its report.

    Exploration fan-outs run as independent jobs; each aggregation fires
    once, after all of its branches; failed jobs are retried per policy.
    A terminal job failure aborts the run, killing whatever is in flight.
    """
    defects = validate_workflow(workflow)
    if defects:
        raise InvalidWorkflowError(defects)
    if environments is None:
        environments = LocalEnvironment("local", 4)
    assignment = assignment or EnvironmentAssignment()
    session = Session(
        environments, retry=retry, master_seed=master_seed, run_root=run_root,
        default=assignment.default,
    )
    try:
        return _drive(workflow, initial, session, assignment)
    finally:
        session.close()


def _drive(
    workflow: Workflow,
    initial: Context | None,
    session: Session,
    assignment: EnvironmentAssignment,
) -> RunReport:
    capsules = {capsule.id: capsule for capsule in workflow.capsules}
    outgoing: dict[Capsule | None, list[Transition]] = {}
    incoming: dict[Capsule, Transition] = {}
    for transition in workflow.transitions:
        outgoing.setdefault(transition.source, []).append(transition)
        incoming[transition.target] = transition
    hooks: dict[Capsule, list[Hook]] = {}
    for hook in workflow.hooks:
        hooks.setdefault(hook.capsule, []).append(hook)

    def opening_exploration(capsule: Capsule) -> Transition:
        cursor = capsule
        while True:
            edge = incoming[cursor]
            if edge.mode is TransitionMode.EXPLORATION:
                return edge
            cursor = edge.source

    start = workflow.sources if initial is None else workflow.sources.merge(initial)
    fanouts: dict[Transition, _FanOut] = {}
    effects: list[tuple[int, int, HookEffect]] = []
    errors: list[str] = []
    results: dict[str, dict[int, Context]] = {}

    def launch(capsule: Capsule, branch: int, flow: Context) -> None:
        session.submit(
            capsule.task,
            flow,
            capsule_id=capsule.id,
            branch=branch,
            environment=assignment.resolve(capsule.id),
        )

    def explode(edge: Transition, flow: Context) -> None:
        branches = edge.sampling.branches(flow, session.master_seed)
        fanouts[edge] = _FanOut(base=flow, size=len(branches))
        for branch, ctx in enumerate(branches):
            launch(edge.target, branch, ctx)

    for capsule in workflow.capsules:
        if capsule not in incoming:
            launch(capsule, 0, start)
    for edge in outgoing.get(None, ()):
        explode(edge, start)

    status = "completed"
    error: str | None = None
    while True:
        try:
            completed = session.wait_any()
        except EngineError as exc:
            status, error = "internal-error", str(exc)
            session.kill_in_flight()
            break
        if not completed:
            break
        aborted = False
        for job in completed:
            if job.state is JobState.FAILED:
                status = "aborted"
                error = f"job {job.id} failed terminally: {job.failure}"
                aborted = True
                break
            capsule = capsules[job.capsule_id]
            result = job.result
            # Hooks observe exactly what the kernel saw plus what it produced.
            view = (
                Context(capsule.task.defaults)
                .merge(job.context)
                .restrict(capsule.task.inputs)
                .merge(result)
            )
            for order, hook in enumerate(hooks.get(capsule, ())):
                try:
                    effects.append((job.index, order, fire_hook(hook, view)))
                except HookError as exc:
                    errors.append(str(exc))
            results.setdefault(capsule.id, {})[job.branch] = result
            flow_out = job.context.merge(result)
            for edge in outgoing.get(capsule, ()):
                if edge.mode is TransitionMode.DIRECT:
                    launch(edge.target, job.branch, flow_out)
                elif edge.mode is TransitionMode.EXPLORATION:
                    explode(edge, flow_out)
                else:
                    group = fanouts[opening_exploration(capsule)]
                    group.collected[job.branch] = {
                        scalar: flow_out[scalar] for scalar in edge.collect
                    }
                    if len(group.collected) == group.size:
                        arrays = {
                            array: tuple(group.collected[b][scalar] for b in range(group.size))
                            for scalar, array in edge.collect.items()
                        }
                        launch(edge.target, 0, group.base.merge(Context(arrays)))
        if aborted:
            session.kill_in_flight()
            break

    if status == "completed":
        unfinished = [job.id for job in session.jobs if job.state is not JobState.DONE]
        half_open = [
            edge.target.id
            for edge, group in fanouts.items()
            if len(group.collected) not in (0, group.size)
        ]
        if unfinished or half_open:
            status = "internal-error"
            error = f"no ready job but work remains: {unfinished or half_open}"

    effects.sort(key=lambda item: (item[0], item[1]))
    report = RunReport(
        status=status,
        jobs=session.jobs,
        results={cid: [by_branch[b] for b in sorted(by_branch)] for cid, by_branch in results.items()},
        hook_effects=[effect for _, _, effect in effects],
        errors=errors + ([error] if error else []),
        totals=_totals(session),
    )
    if session.run_root is not None:
        write_run_outputs(report, session.run_root)
    return report
