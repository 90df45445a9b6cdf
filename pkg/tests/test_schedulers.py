"""Submission script rendering, status-listing parsing, and the mock."""

from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from molerun.schedulers import (
    Flavor,
    JobDescription,
    MockScheduler,
    ParseError,
    Phase,
    RenderError,
    format_hms,
    parse_hms,
    parse_status,
    query_phase,
    render_submission_script,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

GOLDEN = JobDescription(
    executable="./run.sh",
    arguments=("alpha", "1"),
    workdir="/work/job0",
    walltime_s=4 * 3600,
    memory_mb=1200,
    queue="biomed",
)

SCRIPT_FILES = {
    Flavor.SLURM: "slurm.sh",
    Flavor.PBS: "pbs.sh",
    Flavor.SGE: "sge.sh",
    Flavor.OAR: "oar.sh",
    Flavor.CONDOR: "condor.sub",
}


def golden_for(flavor: Flavor) -> JobDescription:
    if flavor is Flavor.CONDOR:
        # Condor has no named queues; the golden description drops it.
        return JobDescription(
            executable=GOLDEN.executable,
            arguments=GOLDEN.arguments,
            workdir=GOLDEN.workdir,
            walltime_s=GOLDEN.walltime_s,
            memory_mb=GOLDEN.memory_mb,
        )
    return GOLDEN


class TestRendering:
    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_scripts_match_the_golden_files(self, flavor):
        rendered = render_submission_script(flavor, golden_for(flavor))
        golden = (FIXTURES / "scripts" / SCRIPT_FILES[flavor]).read_text()
        assert rendered == golden

    def test_condor_rejects_a_named_queue(self):
        with pytest.raises(RenderError, match="queue"):
            render_submission_script(Flavor.CONDOR, GOLDEN)

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_rendering_is_pure(self, flavor):
        description = golden_for(flavor)
        first = render_submission_script(flavor, description)
        assert render_submission_script(flavor, description) == first

    @given(st.integers(0, 359999))
    def test_hms_round_trip(self, seconds):
        assert parse_hms(format_hms(seconds)) == seconds

    def test_hms_formatting(self):
        assert format_hms(4 * 3600) == "04:00:00"
        assert format_hms(0) == "00:00:00"
        assert format_hms(3661) == "01:01:01"


class TestParsing:
    PHASES = {
        "queued": Phase.QUEUED,
        "running": Phase.RUNNING,
        "done": Phase.DONE,
        "failed": Phase.FAILED,
    }

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    @pytest.mark.parametrize("stem", list(PHASES))
    def test_listings_parse_to_the_expected_phase(self, flavor, stem):
        text = (FIXTURES / "status" / flavor.value / f"{stem}.txt").read_text()
        expected = self.PHASES[stem]
        if flavor is Flavor.PBS and stem == "failed":
            # pbs marks both outcomes C; the listing alone reads as done and
            # the exit code settles it (see the mock round-trip tests).
            expected = Phase.DONE
        assert parse_status(flavor, text, "37") is expected

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    @pytest.mark.parametrize("stem", list(PHASES))
    def test_the_foreign_row_is_never_confused_for_the_target(self, flavor, stem):
        text = (FIXTURES / "status" / flavor.value / f"{stem}.txt").read_text()
        assert parse_status(flavor, text, "35") is Phase.RUNNING

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_empty_text_is_a_parse_error(self, flavor):
        with pytest.raises(ParseError):
            parse_status(flavor, "", "37")

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_foreign_header_is_a_parse_error(self, flavor):
        with pytest.raises(ParseError, match="not a"):
            parse_status(flavor, "totally unrelated output\n", "37")

    def test_unknown_state_code_is_a_parse_error(self):
        text = (
            "             JOBID PARTITION     NAME     USER ST       TIME  NODES NODELIST(REASON)\n"
            "                37     batch  mrun-37    moler ZZ       0:00      1 node1\n"
        )
        with pytest.raises(ParseError):
            parse_status(Flavor.SLURM, text, "37")

    def test_truncated_row_is_a_parse_error(self):
        text = (
            "             JOBID PARTITION     NAME     USER ST       TIME  NODES NODELIST(REASON)\n"
            "                37     batch\n"
        )
        with pytest.raises(ParseError):
            parse_status(Flavor.SLURM, text, "37")

    def test_absent_id_parses_as_done(self):
        text = (FIXTURES / "status" / "slurm" / "running.txt").read_text()
        assert parse_status(Flavor.SLURM, text, "99") is Phase.DONE


def submit_sleeper(flavor: Flavor, scheduler: MockScheduler, duration: int, walltime: int) -> str:
    description = JobDescription(
        executable="sleep",
        arguments=(str(duration),),
        walltime_s=walltime,
    )
    return scheduler.submit(render_submission_script(flavor, description))


class TestMockRoundTrip:
    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_queued_running_done_through_the_status_text(self, flavor):
        scheduler = MockScheduler(nodes=1)
        # A job ahead in the queue holds the single node, so ours queues.
        submit_sleeper(flavor, scheduler, duration=30, walltime=3600)
        target = submit_sleeper(flavor, scheduler, duration=30, walltime=3600)
        assert query_phase(scheduler, flavor, target) is Phase.QUEUED
        scheduler.tick(31)
        assert query_phase(scheduler, flavor, target) is Phase.RUNNING
        scheduler.tick(31)
        assert query_phase(scheduler, flavor, target) is Phase.DONE
        assert scheduler.exit_code(target) == 0

    @pytest.mark.parametrize("flavor", list(Flavor), ids=lambda f: f.value)
    def test_walltime_overrun_reads_as_failed(self, flavor):
        scheduler = MockScheduler(nodes=1)
        target = submit_sleeper(flavor, scheduler, duration=100, walltime=10)
        scheduler.tick(1)
        assert query_phase(scheduler, flavor, target) is Phase.RUNNING
        scheduler.tick(10)
        assert query_phase(scheduler, flavor, target) is Phase.FAILED
        assert scheduler.exit_code(target) == 1

    def test_fifo_node_pool(self):
        scheduler = MockScheduler(nodes=2)
        ids = [submit_sleeper(Flavor.SLURM, scheduler, 10, 3600) for _ in range(3)]
        scheduler.tick(1)
        phases = [scheduler.phase(i) for i in ids]
        assert phases == [Phase.RUNNING, Phase.RUNNING, Phase.QUEUED]
        scheduler.tick(10)
        assert scheduler.phase(ids[2]) is Phase.RUNNING

    def test_status_text_matches_its_own_parser(self):
        # The mock's listings must be readable by the scrapers they feed.
        for flavor in Flavor:
            scheduler = MockScheduler(nodes=1)
            target = submit_sleeper(flavor, scheduler, 5, 3600)
            for _ in range(3):
                parse_status(flavor, scheduler.status_text(flavor), target)
                scheduler.tick(3)

    def test_cannot_tick_backwards(self):
        with pytest.raises(ValueError):
            MockScheduler().tick(-1)
