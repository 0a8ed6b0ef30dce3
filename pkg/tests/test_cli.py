import json
import os

import numpy as np
import pytest

from rplkg.cli import run
from rplkg.embedstore import read_cache


GRAPH = (
    "IsA\tforest\twoodland\t2.0\n"
    "HasA\tforest\ttrees\t1.5\n"
    "IsA\tcat\tpet\t1.0\n"
    "BADLINE\n"
)


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "world"
    assert run(["synth", "--seed", "7", "--classes", "5", "--dim", "32",
                "--prompts", "4", "--out", str(out)]) == 0
    return out


class TestBuildPrompts:
    def test_pipeline(self, tmp_path, capsys):
        graph = tmp_path / "g.tsv"
        graph.write_text(GRAPH)
        classes = tmp_path / "names.txt"
        classes.write_text("Forest\ncat\nunmatched thing\n")
        out = tmp_path / "p.jsonl"
        assert run(["build-prompts", "--graph", str(graph), "--classes", str(classes),
                    "--dataset", "dtd", "--out", str(out)]) == 0
        assert "mean M_c" in capsys.readouterr().out
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 4  # 2 forest + 1 cat + 1 fallback
        fallback = [l for l in lines if l["rule_level"] == 0]
        assert fallback[0]["text"] == "A photo of a unmatched thing."

    def test_missing_graph_is_io_error(self, tmp_path):
        classes = tmp_path / "names.txt"
        classes.write_text("a\n")
        code = run(["build-prompts", "--graph", str(tmp_path / "nope.tsv"),
                    "--classes", str(classes), "--dataset", "x",
                    "--out", str(tmp_path / "o")])
        assert code == 2

    def test_empty_graph_is_validation_error(self, tmp_path):
        graph = tmp_path / "g.tsv"
        graph.write_text("BAD\n")
        classes = tmp_path / "names.txt"
        classes.write_text("a\n")
        code = run(["build-prompts", "--graph", str(graph), "--classes", str(classes),
                    "--dataset", "x", "--out", str(tmp_path / "o")])
        assert code == 1


class TestUsageErrors:
    def test_unknown_flag_exits_one(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["bench", "--no-such-flag"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err


class TestSynthTrainEval:
    def test_outputs_exist(self, synth_dir):
        for name in ("images.rpkg", "prompts.rpkg", "templates.rpkg",
                     "world.json", "prompts.jsonl"):
            assert (synth_dir / name).exists()
        cache = read_cache(str(synth_dir / "images.rpkg"))
        assert cache.n_classes == 5

    def test_train_then_eval(self, synth_dir, tmp_path, capsys):
        rundir = tmp_path / "run"
        assert run(["train", "--images", str(synth_dir / "images.rpkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--k", "16", "--seed", "3", "--epochs", "20",
                    "--out", str(rundir)]) == 0
        log = (rundir / "train_log.csv").read_text()
        final_acc = float(log.strip().splitlines()[-2].split(",")[2])
        assert final_acc >= 0.95
        report = tmp_path / "report.csv"
        assert run(["eval", "--images", str(synth_dir / "images.rpkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--checkpoint", str(rundir / "checkpoint.rplkg"),
                    "--k", "16", "--seed", "3", "--dataset", "synth",
                    "--out", str(report)]) == 0
        rows = report.read_text().splitlines()
        assert rows[0].startswith("dataset,method,")
        assert float(rows[1].split(",")[4]) >= 0.9

    def test_baseline_eval(self, synth_dir, tmp_path):
        report = tmp_path / "zs.csv"
        assert run(["eval", "--images", str(synth_dir / "images.rpkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--templates", str(synth_dir / "templates.rpkg"),
                    "--method", "zeroshot", "--out", str(report)]) == 0
        assert float(report.read_text().splitlines()[1].split(",")[4]) > 0.2

    def test_base2new_and_domainshift(self, synth_dir, tmp_path):
        rundir = tmp_path / "run"
        assert run(["train", "--images", str(synth_dir / "images.rpkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--k", "4", "--seed", "1", "--epochs", "5",
                    "--out", str(rundir)]) == 0
        b2n = tmp_path / "b2n.csv"
        assert run(["base2new", "--images", str(synth_dir / "images.rpkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--k", "4", "--seed", "1", "--epochs", "5",
                    "--out", str(b2n)]) == 0
        row = b2n.read_text().splitlines()[1].split(",")
        assert row[5] and row[6] and row[7]  # base, new, h populated
        shift = tmp_path / "shift.csv"
        assert run(["domainshift", "--checkpoint", str(rundir / "checkpoint.rplkg"),
                    "--prompts", str(synth_dir / "prompts.rpkg"),
                    "--target", f"self={synth_dir / 'images.rpkg'}",
                    "--out", str(shift)]) == 0
        assert len(shift.read_text().splitlines()) == 2

    def test_import_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        vecs = rng.standard_normal((6, 8)).astype(np.float32)
        npz = tmp_path / "in.npz"
        np.savez(npz, vectors=vecs, labels=np.arange(6) % 2)
        out = tmp_path / "c.rpkg"
        assert run(["import-cache", "--npz", str(npz), "--kind", "image",
                    "--out", str(out), "--normalize"]) == 0
        cache = read_cache(str(out))
        assert cache.count == 6

    def test_bench_row(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert run(["bench", "--dim", "512", "--classes", "47", "--prompts", "8",
                    "--batch", "64", "--reps", "3", "--out", str(out)]) == 0
        row = out.read_text().splitlines()[1].split(",")
        assert row[-1] == "786432"
        assert float(row[-2]) > 0

    def test_report_renders_figures(self, synth_dir, tmp_path):
        rundir = tmp_path / "run"
        run(["train", "--images", str(synth_dir / "images.rpkg"),
             "--prompts", str(synth_dir / "prompts.rpkg"),
             "--k", "8", "--seed", "2", "--epochs", "3", "--out", str(rundir)])
        report = tmp_path / "report.csv"
        dump = tmp_path / "dump.jsonl"
        run(["eval", "--images", str(synth_dir / "images.rpkg"),
             "--prompts", str(synth_dir / "prompts.rpkg"),
             "--checkpoint", str(rundir / "checkpoint.rplkg"),
             "--k", "8", "--seed", "2", "--out", str(report),
             "--dump-prompts", str(dump),
             "--prompt-texts", str(synth_dir / "prompts.jsonl")])
        repdir = tmp_path / "rep"
        assert run(["report", "--in", str(report), "--format", "markdown",
                    "--out", str(repdir), "--prompt-dump", str(dump)]) == 0
        assert (repdir / "report.md").exists()
        assert (repdir / "accuracy.png").stat().st_size > 0
        assert (repdir / "selection.png").stat().st_size > 0


class TestDeterminism:
    def _pipeline(self, base):
        world = base / "world"
        rundir = base / "run"
        report = base / "report.csv"
        assert run(["synth", "--seed", "5", "--classes", "4", "--dim", "32",
                    "--prompts", "4", "--out", str(world)]) == 0
        assert run(["train", "--images", str(world / "images.rpkg"),
                    "--prompts", str(world / "prompts.rpkg"),
                    "--k", "8", "--seed", "9", "--epochs", "10",
                    "--out", str(rundir)]) == 0
        assert run(["eval", "--images", str(world / "images.rpkg"),
                    "--prompts", str(world / "prompts.rpkg"),
                    "--checkpoint", str(rundir / "checkpoint.rplkg"),
                    "--k", "8", "--seed", "9", "--dataset", "synth",
                    "--out", str(report)]) == 0
        return (world / "images.rpkg").read_bytes(), \
            (rundir / "checkpoint.rplkg").read_bytes(), report.read_bytes()

    def test_identical_seeds_identical_bytes(self, tmp_path):
        a = self._pipeline(tmp_path / "a")
        b = self._pipeline(tmp_path / "b")
        assert a == b
