import hashlib
import json

import numpy as np
import pytest

from repolab.analysis import read_summary
from repolab.cli import EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from repolab.datagen import load_dataset
from repolab.trainer import BatchStats, read_metrics, write_metrics

SMALL = ["--data.n", "120", "--eval.prompts", "40"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "4", "--out", str(out)] + SMALL) == EXIT_OK
    return out


def train_args(data_dir, out, *extra):
    return ["train", "--seed", "4", "--data", str(data_dir / "dataset.jsonl"),
            "--init-params", str(data_dir / "sampler.params"), "--out", str(out), "--train.batch_size", "16",
            *extra]


class TestGenData:
    def test_outputs(self, data_dir, capsys):
        meta, triples = load_dataset(data_dir / "dataset.jsonl")
        assert len(triples) == 120 and meta.seed == 4
        assert (data_dir / "sampler.params").exists()

    def test_record_count_printed(self, tmp_path, capsys):
        assert main(["gen-data", "--seed", "1", "--out", str(tmp_path), "--data.n", "7"]) == EXIT_OK
        assert "wrote 7 records" in capsys.readouterr().out

    def test_deterministic(self, data_dir, tmp_path):
        assert main(["gen-data", "--seed", "4", "--out", str(tmp_path)] + SMALL) == EXIT_OK
        for name in ("dataset.jsonl", "sampler.params", "config.txt"):
            assert digest(tmp_path / name) == digest(data_dir / name)

    def test_missing_seed(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path)]) == EXIT_USAGE
        assert not any(tmp_path.iterdir())

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 2\n[data]\nn = 5\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert len(load_dataset(tmp_path / "o" / "dataset.jsonl")[1]) == 5

    def test_invalid_value(self, tmp_path):
        assert main(["gen-data", "--seed", "1", "--out", str(tmp_path), "--data.labeling", "vote"]) == EXIT_VALIDATION

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == EXIT_USAGE


class TestTrain:
    def test_smoke_and_determinism(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(train_args(data_dir, a, "--sft")) == EXIT_OK
        assert main(train_args(data_dir, b, "--sft")) == EXIT_OK
        assert len(read_metrics(a / "metrics.jsonl")) == 120 // 16 + 1
        for name in ("metrics.jsonl", "final.params", "init.params"):
            assert digest(a / name) == digest(b / name)

    def test_dpo_needs_reference(self, data_dir, tmp_path, capsys):
        code = main(train_args(data_dir, tmp_path / "o", "--loss.kind", "DPO"))
        assert code == EXIT_VALIDATION
        assert "reference" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_dpo_with_init_reference(self, data_dir, tmp_path):
        assert main(train_args(data_dir, tmp_path, "--loss.kind", "DPO", "--loss.beta", "0.5",
                               "--ref-params", "init")) == EXIT_OK

    def test_dry_run_touches_nothing(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(train_args(data_dir, out, "--dry-run")) == EXIT_OK
        assert not out.exists()

    def test_missing_data_file(self, data_dir, tmp_path):
        args = train_args(data_dir, tmp_path)
        args[args.index("--data") + 1] = str(tmp_path / "missing.jsonl")
        assert main(args) == EXIT_VALIDATION

    def test_corrupt_data_file(self, data_dir, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text((data_dir / "dataset.jsonl").read_text()[:-5])
        args = train_args(data_dir, tmp_path / "o")
        args[args.index("--data") + 1] = str(bad)
        assert main(args) == EXIT_VALIDATION

    def test_unwritable_output(self, data_dir, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(train_args(data_dir, blocker / "sub")) == EXIT_IO


class TestSweep:
    def test_six_gammas(self, data_dir, tmp_path):
        args = ["sweep-gamma", "--seed", "4", "--data", str(data_dir / "dataset.jsonl"),
                "--init-params", str(data_dir / "sampler.params"), "--out", str(tmp_path),
                "--gammas", "0,0.2,0.4,0.6,0.8,1.0", "--jobs", "2", "--sft", "--train.batch_size", "32"] + SMALL[2:]
        assert main(args) == EXIT_OK
        rows = read_summary(tmp_path / "summary.csv")
        assert [r["gamma_start"] for r in rows] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        assert len(list(tmp_path.glob("series_*.jsonl"))) == 6
        assert main(["fit-scaling", str(tmp_path / "summary.csv")]) == EXIT_OK

    def test_duplicates_removed(self, data_dir, tmp_path, capsys):
        args = ["sweep-gamma", "--seed", "4", "--data", str(data_dir / "dataset.jsonl"),
                "--init-params", str(data_dir / "sampler.params"), "--out", str(tmp_path),
                "--gammas", "0.4,0.4"] + SMALL[2:]
        assert main(args) == EXIT_OK
        assert "duplicate" in capsys.readouterr().err
        assert len(read_summary(tmp_path / "summary.csv")) == 1


class TestVerify:
    def test_default_passes(self, tmp_path):
        assert main(["verify", "--cases", "3", "--out", str(tmp_path)]) == EXIT_OK
        records = json.loads((tmp_path / "verify.json").read_text())
        assert all(r["pass"] for r in records)
        assert {r["name"].split("(")[0] for r in records} == {
            "sigmoid_limit", "envelope", "argmin", "logistic_underestimation", "gradcheck"}

    def test_zero_tolerance_fails(self, capsys):
        assert main(["verify", "--check", "envelope", "--tolerance", "0"]) == EXIT_CHECK
        assert "0/9 checks passed" in capsys.readouterr().out

    def test_filter(self, tmp_path):
        assert main(["verify", "--check", "envelope", "--out", str(tmp_path)]) == EXIT_OK
        records = json.loads((tmp_path / "verify.json").read_text())
        assert len(records) == 9 and all(r["name"].startswith("envelope") for r in records)


def write_run(run_dir, d, wr, steps=10):
    run_dir.mkdir(parents=True)
    write_metrics(run_dir / "metrics.jsonl", [BatchStats(s, 0.0, d, 0.0, 0.4, 0.1) for s in range(steps)])
    (run_dir / "winrate.json").write_text(json.dumps({"win_rate": wr}))


class TestFitScaling:
    def test_recovers_synthetic_law(self, tmp_path, capsys):
        ds = np.linspace(0.05, 1.0, 8)
        dirs = []
        for i, d in enumerate(ds):
            write_run(tmp_path / f"run{i}", d, 0.5 + d * (2.0 - 0.5 * np.log(d)))
            dirs.append(str(tmp_path / f"run{i}"))
        assert main(["fit-scaling", *dirs]) == EXIT_OK
        fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
        assert abs(float(fields["alpha"]) - 2.0) <= 1e-8
        assert abs(float(fields["beta"]) - 0.5) <= 1e-8

    def test_identical_d_is_degenerate(self, tmp_path, capsys):
        write_run(tmp_path / "a", 0.3, 0.6)
        write_run(tmp_path / "b", 0.3, 0.7)
        assert main(["fit-scaling", str(tmp_path / "a"), str(tmp_path / "b")]) == EXIT_VALIDATION
        assert "unidentifiable" in capsys.readouterr().err

    def test_too_few_runs(self, tmp_path):
        write_run(tmp_path / "a", 0.3, 0.6)
        assert main(["fit-scaling", str(tmp_path / "a")]) == EXIT_VALIDATION

    def test_missing_path(self, tmp_path):
        assert main(["fit-scaling", str(tmp_path / "nope")]) == EXIT_IO


class TestEvalWinrate:
    def test_self_comparison(self, data_dir, capsys):
        p = str(data_dir / "sampler.params")
        assert main(["eval-winrate", "--seed", "0", "--data", str(data_dir / "dataset.jsonl"),
                     "--policy-a", p, "--policy-b", p, "--eval.prompts", "50"]) == EXIT_OK
        rec = json.loads(capsys.readouterr().out)
        assert rec["total"] == 200 and 0.3 < rec["win_rate"] < 0.7
