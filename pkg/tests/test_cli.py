"""The molerun command line: exit codes, output routing, artifacts."""

import json
import textwrap
from pathlib import Path

import pytest

from molerun.cli import main

WORKFLOWS = Path(__file__).resolve().parent.parent / "workflows"

BROKEN = """
name: broken
prototypes:
  a: real
  b: real
tasks:
  model:
    kind: command
    command: "echo b=$a"
    inputs: [a]
    outputs: [b]
"""


@pytest.fixture()
def broken_file(tmp_path):
    path = tmp_path / "broken.wf"
    path.write_text(textwrap.dedent(BROKEN))
    return path


class TestValidate:
    def test_ok_file(self, capsys):
        code = main(["validate", str(WORKFLOWS / "ant-run.wf")])
        assert code == 0
        out = capsys.readouterr()
        assert out.out.strip().endswith("ant-run.wf: ok")

    @pytest.mark.parametrize(
        "name", ["ant-run.wf", "ant-replicates.wf", "ant-optimize.wf", "ant-islands.wf"]
    )
    def test_all_shipped_files_validate(self, name):
        assert main(["validate", str(WORKFLOWS / name)]) == 0

    def test_defective_file_exits_one_with_positions(self, broken_file, capsys):
        code = main(["validate", str(broken_file)])
        assert code == 1
        err = capsys.readouterr().err
        assert "unbound input 'a'" in err
        assert f"{broken_file}:" in err

    def test_unreadable_file_exits_two(self, tmp_path, capsys):
        code = main(["validate", str(tmp_path / "absent.wf")])
        assert code == 2
        assert "cannot read file" in capsys.readouterr().err


class TestRun:
    def test_single_run_prints_the_summary_hook(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = main(["run", str(WORKFLOWS / "ant-run.wf"), "--out", str(out_dir)])
        assert code == 0
        captured = capsys.readouterr()
        lines = [line for line in captured.out.splitlines() if line]
        assert len(lines) == 1
        assert lines[0].startswith("food1=")
        assert "food2=" in lines[0] and "food3=" in lines[0]
        assert "completed: 1 jobs" in captured.err
        report = json.loads((out_dir / "report.json").read_text())
        assert report["status"] == "completed"
        assert len(report["jobs"]) == 1

    def test_defective_file_exits_two(self, broken_file, tmp_path, capsys):
        code = main(["run", str(broken_file), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "unbound input" in capsys.readouterr().err

    def test_missing_file_exits_two(self, tmp_path, capsys):
        assert main(["run", str(tmp_path / "nope.wf")]) == 2

    def test_unknown_environment_exits_two(self, tmp_path, capsys):
        code = main([
            "run", str(WORKFLOWS / "ant-run.wf"),
            "--env", "cloud", "--out", str(tmp_path / "out"),
        ])
        assert code == 2
        err = capsys.readouterr().err
        assert "configuration error" in err and "cloud" in err

    def test_out_falls_back_to_the_environment_variable(self, tmp_path, monkeypatch, capsys):
        target = tmp_path / "from-env"
        monkeypatch.setenv("MOLERUN_OUT", str(target))
        assert main(["run", str(WORKFLOWS / "ant-run.wf")]) == 0
        assert (target / "report.json").exists()

    def test_out_flag_beats_the_environment_variable(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MOLERUN_OUT", str(tmp_path / "ignored"))
        chosen = tmp_path / "chosen"
        assert main(["run", str(WORKFLOWS / "ant-run.wf"), "--out", str(chosen)]) == 0
        assert (chosen / "report.json").exists()
        assert not (tmp_path / "ignored").exists()

    def test_seed_changes_replicate_outputs(self, tmp_path, capsys):
        def outputs_for(seed):
            out_dir = tmp_path / f"seed{seed}"
            assert main([
                "run", str(WORKFLOWS / "ant-replicates.wf"),
                "--seed", str(seed), "--out", str(out_dir),
            ]) == 0
            return capsys.readouterr().out

        assert outputs_for(1) != outputs_for(2)

    def test_replicated_run_emits_one_line_per_completion(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = main([
            "run", str(WORKFLOWS / "ant-replicates.wf"), "--out", str(out_dir),
        ])
        assert code == 0
        lines = [line for line in capsys.readouterr().out.splitlines() if line]
        model_lines = [line for line in lines if line.startswith("food1=")]
        median_lines = [line for line in lines if line.startswith("food1.median=")]
        assert len(model_lines) == 5
        assert len(median_lines) == 1

    def test_optimization_writes_population_snapshots(self, tmp_path):
        out_dir = tmp_path / "out"
        code = main([
            "run", str(WORKFLOWS / "ant-optimize.wf"), "--out", str(out_dir),
        ])
        assert code == 0
        populations = sorted((out_dir / "populations").glob("population*.csv"))
        # Termination 10 logs the initial population plus ten generations.
        assert len(populations) == 11
        header = populations[0].read_text().splitlines()[0]
        assert header == (
            "generation,gPopulation,gDiffusionRate,gEvaporationRate,"
            "food1.median,food2.median,food3.median,evaluations"
        )
        report = json.loads((out_dir / "report.json").read_text())
        assert report["totals"]["generations"] == 10
        assert report["results"]["front"]

    def test_islands_run_writes_the_archive(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = main([
            "run", str(WORKFLOWS / "ant-islands.wf"), "--out", str(out_dir),
        ])
        assert code == 0
        archive = (out_dir / "archive.csv").read_text().splitlines()
        assert archive[0] == (
            "gPopulation,gDiffusionRate,gEvaporationRate,food1,food2,food3,evaluations"
        )
        assert len(archive) > 1
        err = capsys.readouterr().err
        assert "40 merges" in err
