"""Batch scheduler adapters: script renderers, status parsers, and a mock.

Five flavors are supported (pbs, sge, slurm, oar, condor). Renderers emit
byte-stable submission scripts; parsers scrape the flavor's status-listing
text the way command-line polling would. Schedulers drop finished jobs from
their listings at different speeds, so a missing id parses as done and the
exit code file (here the mock's exit_code table) settles success vs failure.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

__all__ = [
    "FLAVORS",
    "Flavor",
    "JobDescription",
    "MockScheduler",
    "ParseError",
    "Phase",
    "RenderError",
    "SchedulerError",
    "parse_status",
    "query_phase",
    "render_submission_script",
]


class SchedulerError(Exception):
    """Base for scheduler adapter failures."""


class RenderError(SchedulerError):
    """A job description asks for a directive the flavor cannot express."""


class ParseError(SchedulerError):
    """Status text did not match the flavor's listing format."""


class Flavor(enum.Enum):
    PBS = "pbs"
    SGE = "sge"
    SLURM = "slurm"
    OAR = "oar"
    CONDOR = "condor"

    def __str__(self) -> str:
        return self.value


FLAVORS = tuple(Flavor)


class Phase(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class JobDescription:
    """What a submission script must request, independent of flavor."""

    executable: str
    arguments: tuple[str, ...] = ()
    workdir: str = "."
    walltime_s: int = 3600
    memory_mb: int = 1024
    queue: str | None = None
    stdout_file: str = "stdout.txt"
    stderr_file: str = "stderr.txt"

    def __post_init__(self) -> None:
        if self.walltime_s <= 0:
            raise ValueError("wall-time must be positive")
        if self.memory_mb <= 0:
            raise ValueError("memory must be positive")

    @property
    def command_line(self) -> str:
        return " ".join((self.executable, *self.arguments))


def format_hms(seconds: int) -> str:
    hours, rest = divmod(seconds, 3600)
    minutes, secs = divmod(rest, 60)
    return f"{hours:02d}:{minutes:02d}:{secs:02d}"


def parse_hms(text: str) -> int:
    hours, minutes, seconds = text.split(":")
    return int(hours) * 3600 + int(minutes) * 60 + int(seconds)


def render_submission_script(flavor: Flavor, description: JobDescription) -> str:
    """Flavor-correct submission text; byte-identical for equal descriptions."""
    if flavor is Flavor.CONDOR:
        if description.queue is not None:
            raise RenderError("condor does not support the queue field")
        lines = [
            f"executable = {description.executable}",
            f"arguments = {' '.join(description.arguments)}",
            f"initialdir = {description.workdir}",
            f"allowed_job_duration = {description.walltime_s}",
            f"request_memory = {description.memory_mb}",
            f"output = {description.stdout_file}",
            f"error = {description.stderr_file}",
            "queue",
        ]
        return "\n".join(lines) + "\n"

    hms = format_hms(description.walltime_s)
    mem = description.memory_mb
    if flavor is Flavor.SLURM:
        directives = [
            f"#SBATCH --time={hms}",
            f"#SBATCH --mem={mem}",
            *([f"#SBATCH --partition={description.queue}"] if description.queue else []),
            f"#SBATCH --output={description.stdout_file}",
            f"#SBATCH --error={description.stderr_file}",
        ]
    elif flavor is Flavor.PBS:
        directives = [
            f"#PBS -l walltime={hms}",
            f"#PBS -l mem={mem}mb",
            *([f"#PBS -q {description.queue}"] if description.queue else []),
            f"#PBS -o {description.stdout_file}",
            f"#PBS -e {description.stderr_file}",
        ]
    elif flavor is Flavor.SGE:
        directives = [
            f"#$ -l h_rt={hms}",
            f"#$ -l h_vmem={mem}M",
            *([f"#$ -q {description.queue}"] if description.queue else []),
            f"#$ -o {description.stdout_file}",
            f"#$ -e {description.stderr_file}",
        ]
    else:
        directives = [
            f"#OAR -l walltime={hms}",
            f"#OAR -p memnode>={mem}",
            *([f"#OAR -q {description.queue}"] if description.queue else []),
            f"#OAR -O {description.stdout_file}",
            f"#OAR -E {description.stderr_file}",
        ]
    lines = ["#!/bin/sh", *directives, f"cd {description.workdir}", description.command_line]
    return "\n".join(lines) + "\n"


_STATE_MAPS: dict[Flavor, dict[str, Phase]] = {
    Flavor.SLURM: {
        "PD": Phase.QUEUED,
        "R": Phase.RUNNING,
        "CG": Phase.RUNNING,
        "CD": Phase.DONE,
        "F": Phase.FAILED,
    },
    Flavor.PBS: {
        "Q": Phase.QUEUED,
        "H": Phase.QUEUED,
        "R": Phase.RUNNING,
        "E": Phase.RUNNING,
        "C": Phase.DONE,
    },
    Flavor.SGE: {
        "qw": Phase.QUEUED,
        "hqw": Phase.QUEUED,
        "r": Phase.RUNNING,
        "t": Phase.RUNNING,
        "Eqw": Phase.FAILED,
    },
    Flavor.OAR: {
        "W": Phase.QUEUED,
        "L": Phase.RUNNING,
        "R": Phase.RUNNING,
        "F": Phase.RUNNING,
        "T": Phase.DONE,
        "E": Phase.FAILED,
    },
    Flavor.CONDOR: {
        "I": Phase.QUEUED,
        "H": Phase.QUEUED,
        "R": Phase.RUNNING,
        "C": Phase.DONE,
        "X": Phase.FAILED,
    },
}

_HEADER_SIGNATURES = {
    Flavor.SLURM: "JOBID",
    Flavor.PBS: "Job id",
    Flavor.SGE: "job-ID",
    Flavor.OAR: "Job id",
    Flavor.CONDOR: "OWNER",
}

# Where the state code sits in a whitespace-split row. OAR rows embed a
# two-token submission date, so its state is counted from the end.
_STATE_FIELD = {
    Flavor.SLURM: 4,
    Flavor.PBS: 4,
    Flavor.SGE: 4,
    Flavor.OAR: -2,
    Flavor.CONDOR: 5,
}


def parse_status(flavor: Flavor, text: str, scheduler_id: str) -> Phase:
    """Extract one job's phase from a status listing.

    An id absent from the listing parses as done: schedulers drop finished
    jobs, and the exit-code check tells success from failure afterwards.
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or _HEADER_SIGNATURES[flavor] not in lines[0]:
        offending = lines[0] if lines else "<empty>"
        raise ParseError(f"not a {flavor} status listing: {offending!r}")
    for line in lines[1:]:
        if set(line.strip()) <= {"-", " "}:
            continue
        fields = line.split()
        row_id = fields[0].split(".")[0]
        if row_id != scheduler_id:
            continue
        try:
            code = fields[_STATE_FIELD[flavor]]
        except IndexError:
            raise ParseError(f"truncated {flavor} status row: {line!r}") from None
        phase = _STATE_MAPS[flavor].get(code)
        if phase is None:
            raise ParseError(f"unknown {flavor} state code {code!r} in row: {line!r}")
        return phase
    return Phase.DONE


_SLEEP_RE = re.compile(r"^sleep\s+([0-9.]+)\s*$")
_WALLTIME_RES = {
    Flavor.SLURM: re.compile(r"^#SBATCH --time=(\S+)$"),
    Flavor.PBS: re.compile(r"^#PBS -l walltime=(\S+)$"),
    Flavor.SGE: re.compile(r"^#\$ -l h_rt=(\S+)$"),
    Flavor.OAR: re.compile(r"^#OAR -l walltime=(\S+)$"),
}


@dataclass
class _MockJob:
    scheduler_id: str
    flavor: Flavor
    duration_s: float
    walltime_s: float | None
    phase: Phase = Phase.QUEUED
    started_at: float | None = None
    finish_at: float | None = None
    exit_code: int | None = None


@dataclass
class MockScheduler:
    """A batch system in miniature: a node pool, a clock, and a job table.

    Scripts asking to run `sleep N` take N seconds of mock time; any other
    command completes instantly. The wall-time directive is enforced by
    failing overruns with exit code 1.
    """

    nodes: int = 1
    clock: float = 0.0
    _jobs: dict[str, _MockJob] = field(default_factory=dict)
    _order: list[str] = field(default_factory=list)
    _counter: int = 0

    def submit(self, script: str) -> str:
        flavor = self._detect_flavor(script)
        duration = self._scripted_duration(flavor, script)
        walltime = self._declared_walltime(flavor, script)
        self._counter += 1
        scheduler_id = str(self._counter)
        self._jobs[scheduler_id] = _MockJob(scheduler_id, flavor, duration, walltime)
        self._order.append(scheduler_id)
        return scheduler_id

    @staticmethod
    def _detect_flavor(script: str) -> Flavor:
        if "#SBATCH" in script:
            return Flavor.SLURM
        if "#PBS" in script:
            return Flavor.PBS
        if "#$ " in script:
            return Flavor.SGE
        if "#OAR" in script:
            return Flavor.OAR
        if re.search(r"^executable\s*=", script, re.MULTILINE) and re.search(
            r"^queue\s*$", script, re.MULTILINE
        ):
            return Flavor.CONDOR
        raise SchedulerError("script matches no supported scheduler flavor")

    @staticmethod
    def _scripted_duration(flavor: Flavor, script: str) -> float:
        if flavor is Flavor.CONDOR:
            exe = re.search(r"^executable\s*=\s*(\S+)\s*$", script, re.MULTILINE)
            args = re.search(r"^arguments\s*=\s*(.*)$", script, re.MULTILINE)
            if exe and exe.group(1) == "sleep" and args:
                try:
                    return float(args.group(1).strip())
                except ValueError:
                    return 0.0
            return 0.0
        for line in script.splitlines():
            hit = _SLEEP_RE.match(line.strip())
            if hit:
                return float(hit.group(1))
        return 0.0

    @staticmethod
    def _declared_walltime(flavor: Flavor, script: str) -> float | None:
        if flavor is Flavor.CONDOR:
            hit = re.search(r"^allowed_job_duration\s*=\s*(\d+)\s*$", script, re.MULTILINE)
            return float(hit.group(1)) if hit else None
        pattern = _WALLTIME_RES[flavor]
        for line in script.splitlines():
            hit = pattern.match(line.strip())
            if hit:
                return float(parse_hms(hit.group(1)))
        return None

    def _running(self) -> list[_MockJob]:
        return [self._jobs[i] for i in self._order if self._jobs[i].phase is Phase.RUNNING]

    def _start_queued(self) -> None:
        for scheduler_id in self._order:
            if len(self._running()) >= self.nodes:
                return
            job = self._jobs[scheduler_id]
            if job.phase is Phase.QUEUED:
                job.phase = Phase.RUNNING
                job.started_at = self.clock
                runtime = job.duration_s
                if job.walltime_s is not None and job.walltime_s < runtime:
                    runtime = job.walltime_s
                job.finish_at = self.clock + runtime

    def tick(self, dt: float) -> None:
        """Advance the clock, starting and finishing jobs in time order."""
        if dt < 0:
            raise ValueError("cannot tick backwards")
        horizon = self.clock + dt
        while True:
            self._start_queued()
            pending = [job for job in self._running() if job.finish_at is not None]
            next_finish = min((job.finish_at for job in pending), default=None)
            if next_finish is None or next_finish > horizon:
                break
            self.clock = next_finish
            for job in pending:
                if job.finish_at == next_finish:
                    overran = job.walltime_s is not None and job.duration_s > job.walltime_s
                    job.phase = Phase.FAILED if overran else Phase.DONE
                    job.exit_code = 1 if overran else 0
        self.clock = horizon

    def exit_code(self, scheduler_id: str) -> int | None:
        """The job's exit code once it has finished, else None."""
        job = self._jobs.get(scheduler_id)
        return None if job is None else job.exit_code

    def phase(self, scheduler_id: str) -> Phase:
        """Ground-truth phase, bypassing the status-text round trip."""
        return self._jobs[scheduler_id].phase

    def status_text(self, flavor: Flavor) -> str:
        """The current job table as `flavor`'s status listing would print it.

        Like the real tools, slurm and sge listings drop completed jobs
        (failed ones stay visible briefly); the other flavors keep finished
        jobs in the table.
        """
        rows = []
        for scheduler_id in self._order:
            job = self._jobs[scheduler_id]
            code = self._state_code(flavor, job)
            if code is None:
                continue
            rows.append(self._format_row(flavor, scheduler_id, code))
        return self._header(flavor) + "".join(rows)

    @staticmethod
    def _state_code(flavor: Flavor, job: _MockJob) -> str | None:
        if flavor is Flavor.SLURM:
            return {Phase.QUEUED: "PD", Phase.RUNNING: "R", Phase.DONE: None, Phase.FAILED: "F"}[job.phase]
        if flavor is Flavor.PBS:
            # Failed pbs jobs still show C; the exit-code check tells them apart.
            return {Phase.QUEUED: "Q", Phase.RUNNING: "R", Phase.DONE: "C", Phase.FAILED: "C"}[job.phase]
        if flavor is Flavor.SGE:
            return {Phase.QUEUED: "qw", Phase.RUNNING: "r", Phase.DONE: None, Phase.FAILED: "Eqw"}[job.phase]
        if flavor is Flavor.OAR:
            return {Phase.QUEUED: "W", Phase.RUNNING: "R", Phase.DONE: "T", Phase.FAILED: "E"}[job.phase]
        return {Phase.QUEUED: "I", Phase.RUNNING: "R", Phase.DONE: "C", Phase.FAILED: "X"}[job.phase]

    @staticmethod
    def _header(flavor: Flavor) -> str:
        if flavor is Flavor.SLURM:
            return "             JOBID PARTITION     NAME     USER ST       TIME  NODES NODELIST(REASON)\n"
        if flavor is Flavor.PBS:
            return (
                "Job id            Name             User              Time Use S Queue\n"
                "----------------  ---------------- ----------------  -------- - -----\n"
            )
        if flavor is Flavor.SGE:
            return (
                "job-ID  prior   name       user         state submit/start at     queue    slots\n"
                "--------------------------------------------------------------------------------\n"
            )
        if flavor is Flavor.OAR:
            return (
                "Job id     Name           User           Submission Date     S Queue\n"
                "---------- -------------- -------------- ------------------- - --------\n"
            )
        return " ID      OWNER            SUBMITTED     RUN_TIME ST PRI SIZE CMD\n"

    @staticmethod
    def _format_row(flavor: Flavor, scheduler_id: str, code: str) -> str:
        name = f"mrun-{scheduler_id}"
        if flavor is Flavor.SLURM:
            return f"{scheduler_id:>18}     batch {name:>8}    moler {code:>2}       0:00      1 node1\n"
        if flavor is Flavor.PBS:
            return f"{scheduler_id + '.mock':<17} {name:<16} moler                    0 {code} batch\n"
        if flavor is Flavor.SGE:
            return f"{scheduler_id:>7} 0.55500 {name:<10} moler        {code:<5} 08/15/2026 10:00:00 all.q    1\n"
        if flavor is Flavor.OAR:
            return f"{scheduler_id:<10} {name:<14} moler          2026-08-15 10:00:00 {code} default\n"
        return f"{scheduler_id + '.0':>6}   moler           8/15 10:00   0+00:00:00 {code}  0    0.0 run.sh\n"


def query_phase(scheduler: MockScheduler, flavor: Flavor, scheduler_id: str) -> Phase:
    """Phase via the full command-line protocol: listing scrape + exit code.

    Flavors whose listings cannot express failure (pbs shows C either way)
    resolve done-vs-failed through the exit code, as scrapers must.
    """
    phase = parse_status(flavor, scheduler.status_text(flavor), scheduler_id)
    if phase is Phase.DONE:
        code = scheduler.exit_code(scheduler_id)
        if code not in (None, 0):
            return Phase.FAILED
    return phase
