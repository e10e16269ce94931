import csv
import json

import pytest

from olora.cli import main
from olora.config import RunConfig
from olora.experiment import compare, load_summaries, strip_timing


@pytest.fixture
def config_file(tmp_path, tiny):
    path = tmp_path / "tiny.json"
    path.write_text(tiny().dumps())
    return path


def run_cli(config_file, out, *extra):
    return main(["run", "--config", str(config_file), "--out", str(out), *extra])


class TestRun:
    def test_summary_contract(self, config_file, tmp_path):
        out = tmp_path / "r"
        assert run_cli(config_file, out, "--method", "o_lora", "--tasks", "3", "--seed", "0") == 0
        summary = json.loads((out / "o_lora" / "seed0" / "summary.json").read_text())
        matrix = summary["eval_matrix"]
        assert len(matrix) == 3 and all(len(row) == 3 for row in matrix)
        assert json.loads((out / "status.json").read_text())["state"] == "complete"
        assert (out / "o_lora" / "seed0" / "checkpoint.npz").exists()
        with open(out / "o_lora" / "seed0" / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {"step", "stage", "task_loss", "orth_loss", "total"} <= set(rows[0])

    def test_config_echo_round_trip(self, config_file, tmp_path):
        out = tmp_path / "r"
        assert run_cli(config_file, out, "--method", "o_adalora", "--seeds", "2",
                       "--lambda1", "0.25", "--steps", "12,8", "--lr", "0.01,0.005") == 0
        summary = json.loads((out / "o_adalora" / "seed2" / "summary.json").read_text())
        echoed = RunConfig.from_dict({**summary["config"], "out": str(out)})
        assert echoed == RunConfig.load(out / "config.json")
        assert (echoed.lambda1, echoed.steps_first, echoed.steps_later) == (0.25, 12, 8)
        assert (echoed.lr_first, echoed.lr_later) == (0.01, 0.005)
        assert summary["ranks"]["final_total"] == summary["ranks"]["n_weights"] * echoed.rank_target

    def test_replay_is_byte_identical(self, config_file, tmp_path):
        texts, csvs = [], []
        for name in ("a", "b"):
            assert run_cli(config_file, tmp_path / name, "--method", "o_lora,lwf") == 0
            texts.append([strip_timing((tmp_path / name / m / "seed0" / "summary.json").read_text())
                          for m in ("o_lora", "lwf")])
            csvs.append((tmp_path / name / "lwf" / "seed0" / "metrics.csv").read_bytes())
        assert texts[0] == texts[1]
        assert csvs[0] == csvs[1]

    @pytest.mark.parametrize("args", [["--method", "ewc"], ["--lr", "fast"], ["--steps", "1,2,3"],
                                      ["--seeds", "a,b"], ["--rank", "0"], ["--tasks", "0"]])
    def test_config_errors(self, config_file, tmp_path, args):
        assert run_cli(config_file, tmp_path / "r", *args) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json")]) == 1

    def test_runtime_error(self, config_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run_cli(config_file, blocker / "sub") == 3

    def test_rank_above_width_fails_at_runtime(self, config_file, tmp_path):
        assert run_cli(config_file, tmp_path / "r", "--rank", "64") == 3
        assert json.loads((tmp_path / "r" / "status.json").read_text())["state"] == "failed"


class TestCompare:
    @pytest.fixture
    def runs(self, config_file, tmp_path):
        out = tmp_path / "runs"
        assert run_cli(config_file, out, "--method", "o_lora,seq_lora,o_adalora") == 0
        return out

    def test_self_comparison_has_zero_deltas(self, runs, tmp_path, capsys):
        path = runs / "o_lora" / "seed0" / "summary.json"
        assert main(["compare", str(path), str(path), "--out", str(tmp_path / "c.json")]) == 0
        result = json.loads((tmp_path / "c.json").read_text())
        for run in result["runs"]:
            assert all(v == 0 for v in run["delta"].values())

    def test_trainable_fraction_column(self, runs):
        result = compare(load_summaries([runs]))
        frac = {m: r["trainable_fraction"] for m, r in result["methods"].items()}
        assert frac["o_adalora"] < frac["o_lora"]
        assert result["orderings"]["fraction o_adalora < o_lora < seq_ft"] is None

    def test_different_suites_rejected(self, runs, config_file, tmp_path):
        assert run_cli(config_file, tmp_path / "two", "--method", "o_lora", "--tasks", "2") == 0
        assert main(["compare", str(runs / "o_lora"), str(tmp_path / "two")]) == 1

    def test_check_flag_fails_on_broken_ordering(self, runs, tmp_path):
        summaries = load_summaries([runs / "o_lora", runs / "seq_lora"])
        fake = tmp_path / "fake"
        fake.mkdir()
        for s in summaries:
            s["forgetting"]["average"] = 1.0 if s["method"] == "o_lora" else 0.0
            s["method"] = {"o_lora": "o_lora", "seq_lora": "seq_ft"}[s["method"]]
            (fake / f"{s['method']}.json").write_text(json.dumps(s))
        files = [str(p) for p in sorted(fake.iterdir())]
        assert main(["compare", *files]) == 0
        assert main(["compare", *files, "--check"]) == 2

    def test_needs_two(self, runs):
        assert main(["compare", str(runs / "o_lora" / "seed0" / "summary.json")]) == 1


class TestGradcheck:
    def test_lora_only_skips_adalora_checks(self, capsys):
        assert main(["gradcheck", "--mode", "lora"]) == 0
        out = capsys.readouterr().out
        assert "SKIP loss:adalora_reg" in out and "SKIP model:o_adalora" in out
        assert "PASS model:lora" in out

    def test_corrupted_backward_fails(self, capsys):
        assert main(["gradcheck", "--mode", "lora", "--inject-fault", "relu"]) == 2
        assert "FAIL op:relu" in capsys.readouterr().out
