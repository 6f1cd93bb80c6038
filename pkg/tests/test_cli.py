"""End-to-end CLI contract: flags, exit codes, emitted artifacts."""

import csv
import hashlib
import os
from pathlib import Path

import pytest

from lesionseg.cli import main


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "set"
    assert main(["synth-data", "--out", str(out), "--n", "4",
                 "--size", "32x32", "--seed", "3"]) == 0
    return str(out)


class TestUsageErrors:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--bogus"])
        assert exc.value.code == 2

    def test_bad_size_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth-data", "--out", str(tmp_path / "x"),
                  "--size", "60x60"])
        assert exc.value.code == 2

    def test_bad_ablation_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", "d", "--out", str(tmp_path),
                  "--ablation", "1,2,3"])
        assert exc.value.code == 2

    def test_missing_dataset_path(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run")])
        assert code == 2
        assert "does not exist" in capsys.readouterr().err


class TestSynthData:
    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth-data", "--out", str(out), "--n", "4",
                         "--size", "32x32", "--seed", "5"]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth-data", "--out", str(a), "--n", "4",
                     "--size", "32x32", "--seed", "5"]) == 0
        assert main(["synth-data", "--out", str(b), "--n", "4",
                     "--size", "32x32", "--seed", "6"]) == 0
        assert tree_digest(a) != tree_digest(b)

    def test_prints_lesion_stats(self, tmp_path, capsys):
        main(["synth-data", "--out", str(tmp_path / "d"), "--n", "4",
              "--size", "32x32"])
        out = capsys.readouterr().out
        assert "lesion-bearing slices" in out


class TestTrain:
    def test_short_train_run(self, dataset, tmp_path, capsys):
        code = main(["train", "--data", dataset, "--out", str(tmp_path),
                     "--width-factor", "0.125", "--max-steps", "2",
                     "--epochs", "1", "--batch-size", "2",
                     "--eval-every", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "trainable parameters:" in out
        assert "final step=2" in out
        assert (tmp_path / "train_log.csv").is_file()
        assert (tmp_path / "last" / "manifest.txt").is_file()

    def test_baseline_has_fewer_parameters(self, dataset, tmp_path, capsys):
        def param_count(ablation, out):
            main(["train", "--data", dataset, "--out", out,
                  "--width-factor", "0.125", "--max-steps", "1",
                  "--epochs", "1", "--ablation", ablation])
            line = [l for l in capsys.readouterr().out.splitlines()
                    if l.startswith("trainable parameters:")][0]
            return int(line.split(":")[1])

        full = param_count("1,1,1", str(tmp_path / "full"))
        base = param_count("0,0,0", str(tmp_path / "base"))
        assert base < full


class TestEval:
    def test_truth_as_pred_perfect_scores(self, dataset, tmp_path, capsys):
        out_csv = tmp_path / "report.csv"
        code = main(["eval", "--data", dataset, "--truth-as-pred",
                     "--out-csv", str(out_csv)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "1.0000 1.0000 1.0000 0.00 0.00" in printed
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["subject", "slice", "dsc", "precision",
                           "recall", "voe", "rvd"]
        assert len(rows) == 4 + 2  # header + 4 samples + aggregate
        assert rows[-1][0] == "AGGREGATE"

    def test_eval_checkpoint_roundtrip(self, dataset, tmp_path):
        run = tmp_path / "run"
        main(["train", "--data", dataset, "--out", str(run),
              "--width-factor", "0.125", "--max-steps", "1", "--epochs", "1"])
        code = main(["eval", "--data", dataset,
                     "--checkpoint", str(run / "last"),
                     "--out-csv", str(tmp_path / "r.csv")])
        assert code == 0
        assert (tmp_path / "r.csv").is_file()

    def test_dsc_list_emitted(self, dataset, tmp_path):
        path = tmp_path / "dsc.txt"
        main(["eval", "--data", dataset, "--truth-as-pred",
              "--out-csv", str(tmp_path / "r.csv"), "--dsc-list", str(path)])
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 4
        assert all(float(l) == 1.0 for l in lines)

    def test_checkpoint_required_without_truth_mode(self, dataset, tmp_path):
        code = main(["eval", "--data", dataset,
                     "--out-csv", str(tmp_path / "r.csv")])
        assert code == 2


class TestGradcheck:
    def test_subset_passes(self, capsys):
        code = main(["gradcheck", "--ops", "elementwise"])
        assert code == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_fault_injection_fails(self, monkeypatch, capsys):
        monkeypatch.setenv("LESIONSEG_FAULT_INJECT", "relu")
        code = main(["gradcheck", "--ops", "elementwise"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_unknown_op_is_error(self, capsys):
        code = main(["gradcheck", "--ops", "quux"])
        assert code == 1


class TestHistogram:
    def test_emits_csv(self, dataset, tmp_path, capsys):
        out_csv = tmp_path / "hist.csv"
        code = main(["histogram", "--data", dataset, "--bins", "4",
                     "--out-csv", str(out_csv)])
        assert code == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:2] == ["bin_lo", "bin_hi"]
        assert len(rows) == 5  # header + 4 bins
