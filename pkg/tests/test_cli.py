"""End-to-end command-line workflow on a small corpus.

Everything runs in-process through cli.main so exit codes and emitted
files can be asserted directly.
"""

import csv
import hashlib
import json

import pytest

from ttdsurv import cli
from ttdsurv import data as D
from ttdsurv import model as M


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_path(ws):
    out = ws / "corpus" / "data.jsonl"
    out.parent.mkdir()
    code = cli.main(["gen-data", "--out", str(out), "--users", "4", "--days", "9",
                     "--features", "6", "--signal-features", "3",
                     "--holiday-rate", "0.0", "--seed", "5"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def cfg_path(ws):
    path = ws / "config.json"
    path.write_text(json.dumps({
        "model": {"d_model": 8, "num_layers": 1, "n_head": 1},
        "train": {"max_epochs": 2, "patience": 2, "batch_size": 8},
    }))
    return path


@pytest.fixture(scope="module")
def run_dir(ws, data_path, cfg_path):
    out = ws / "run1"
    code = cli.main(["train", "--data", str(data_path), "--out", str(out),
                     "--config", str(cfg_path)])
    assert code == 0
    return out


class TestParser:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0

    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2


class TestGenData:
    def test_deterministic_output(self, ws):
        args = ["--users", "3", "--days", "2", "--features", "5",
                "--signal-features", "2", "--seed", "9"]
        out_a = ws / "gen_a" / "data.jsonl"
        out_b = ws / "gen_b" / "data.jsonl"
        out_a.parent.mkdir()
        out_b.parent.mkdir()
        assert cli.main(["gen-data", "--out", str(out_a)] + args) == 0
        assert cli.main(["gen-data", "--out", str(out_b)] + args) == 0
        assert out_a.read_bytes() == out_b.read_bytes()
        man_a = json.loads((out_a.parent / "manifest.json").read_text())
        man_b = json.loads((out_b.parent / "manifest.json").read_text())
        assert man_a["run_id"] == man_b["run_id"]
        assert man_a["outputs"][0]["sha256"] == _sha(out_a)
        assert man_a["command"] == "gen-data"

    def test_invalid_user_count(self, ws):
        out = ws / "bad.jsonl"
        assert cli.main(["gen-data", "--out", str(out), "--users", "0"]) == 2


class TestTrain:
    def test_run_dir_contents(self, run_dir, capsys):
        for name in ("checkpoint.json", "history.csv", "config.json",
                     "manifest.json"):
            assert (run_dir / name).exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert {o["path"] for o in manifest["outputs"]} == {
            str(run_dir / "checkpoint.json"), str(run_dir / "history.csv"),
            str(run_dir / "config.json")}
        snapshot = json.loads((run_dir / "config.json").read_text())
        assert snapshot["model"]["d_model"] == 8
        assert snapshot["train"]["max_epochs"] == 2

    def test_rerun_is_bit_identical(self, ws, data_path, cfg_path, run_dir):
        out = ws / "run2"
        code = cli.main(["train", "--data", str(data_path), "--out", str(out),
                         "--config", str(cfg_path)])
        assert code == 0
        assert _sha(out / "checkpoint.json") == _sha(run_dir / "checkpoint.json")

    def test_resume_continues_epoch_numbering(self, ws, data_path, cfg_path):
        cfg1 = ws / "cfg_1ep.json"
        cfg1.write_text(json.dumps({
            "model": {"d_model": 8, "num_layers": 1, "n_head": 1},
            "train": {"max_epochs": 1, "patience": 1, "batch_size": 8},
        }))
        stage1 = ws / "stage1"
        assert cli.main(["train", "--data", str(data_path), "--out", str(stage1),
                         "--config", str(cfg1)]) == 0
        stage2 = ws / "stage2"
        assert cli.main(["train", "--data", str(data_path), "--out", str(stage2),
                         "--config", str(cfg_path), "--resume",
                         str(stage1 / "checkpoint.json")]) == 0
        with open(stage2 / "history.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == [2]
        ckpt = M.load_checkpoint(stage2 / "checkpoint.json")
        assert ckpt.meta["epoch"] == 2

    def test_missing_data_file(self, ws, cfg_path):
        code = cli.main(["train", "--data", str(ws / "nope.jsonl"),
                         "--out", str(ws / "run_x"), "--config", str(cfg_path)])
        assert code == 4

    def test_malformed_config_json(self, ws, data_path):
        bad = ws / "bad_config.json"
        bad.write_text("{not json")
        code = cli.main(["train", "--data", str(data_path),
                         "--out", str(ws / "run_y"), "--config", str(bad)])
        assert code == 2

    def test_unknown_config_section(self, ws, data_path):
        bad = ws / "bad_section.json"
        bad.write_text(json.dumps({"model": {}, "bogus": {}}))
        code = cli.main(["train", "--data", str(data_path),
                         "--out", str(ws / "run_z"), "--config", str(bad)])
        assert code == 2


class TestEval:
    def test_report_files(self, ws, data_path, run_dir, capsys):
        out = ws / "eval1"
        code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report_p0.1.json").read_text())
        assert report["threshold"] == 0.1
        # the test split is one user with all nine days
        assert report["n"]["all"] == 9
        assert (out / "report_p0.1.csv").exists()
        assert (out / "manifest.json").exists()
        assert "p=0.1: MAE" in capsys.readouterr().out

    def test_multi_threshold_and_baseline(self, ws, data_path, run_dir):
        out = ws / "eval2"
        code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--out", str(out),
                         "--threshold", "0.1,0.2", "--baseline"])
        assert code == 0
        for tag in ("p0.1", "p0.2"):
            assert (out / f"report_{tag}.json").exists()
            assert (out / f"report_{tag}.csv").exists()
        baseline = json.loads((out / "baseline.json").read_text())
        assert baseline["predictor"] == "mlr"
        # nine days per user minus the seven-day warmup
        assert baseline["n"]["all"] == 2

    def test_min_history_drops_days(self, ws, data_path, run_dir):
        out = ws / "eval3"
        code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--out", str(out),
                         "--min-history", "7"])
        assert code == 0
        report = json.loads((out / "report_p0.1.json").read_text())
        assert report["n"]["all"] == 2

    def test_bad_threshold_string(self, ws, data_path, run_dir):
        code = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--out", str(ws / "eval4"),
                         "--threshold", "abc"])
        assert code == 2


class TestStream:
    def test_detection(self, data_path, run_dir, capsys):
        code = cli.main(["stream", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "0",
                         "--threshold", "0.999"])
        assert code == 0
        event = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert event["event"] == "detected"
        assert event["survival"] < 0.999
        assert 0 <= event["t"] <= D.T_MAX
        assert ":" in event["clock"]

    def test_exhaustion(self, data_path, run_dir, capsys):
        code = cli.main(["stream", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "0",
                         "--threshold", "1e-9"])
        assert code == 3
        event = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert event["event"] == "exhausted"

    def test_emit_curve(self, data_path, run_dir, capsys):
        code = cli.main(["stream", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "1",
                         "--threshold", "0.999", "--emit-curve"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) >= 2
        first = json.loads(lines[0])
        assert set(first) == {"t", "clock", "survival"}
        assert first["t"] == 0

    def test_bad_index(self, data_path, run_dir):
        code = cli.main(["stream", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "999"])
        assert code == 2


class TestAttribute:
    def test_report_file(self, ws, data_path, run_dir):
        out = ws / "attribution.json"
        code = cli.main(["attribute", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "0",
                         "--threshold", "0.999", "--top-k", "3", "--steps", "4",
                         "--out", str(out)])
        assert code == 0
        blob = json.loads(out.read_text())
        assert set(blob) == {"user_id", "date", "detected_t", "report"}
        features = blob["report"]["t"]["features"]
        assert 1 <= len(features) <= 3
        assert {"feature", "score"} == set(features[0])

    def test_exhaustion_exit(self, data_path, run_dir, capsys):
        code = cli.main(["attribute", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "0",
                         "--threshold", "1e-9"])
        assert code == 3
        event = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert event["event"] == "exhausted"

    def test_bad_index(self, data_path, run_dir):
        code = cli.main(["attribute", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--index", "999"])
        assert code == 2


class TestFinetune:
    def test_personalizes_head_only(self, ws, data_path, run_dir):
        user = D.load_jsonl(str(data_path)).sequences[0].user_id
        cfg = ws / "ft_config.json"
        cfg.write_text(json.dumps({"finetune": {"max_epochs": 3, "patience": 1}}))
        out = ws / "ft_run"
        code = cli.main(["finetune", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--user", user,
                         "--out", str(out), "--config", str(cfg)])
        assert code == 0
        assert (out / "history.csv").exists()
        base = M.load_checkpoint(run_dir / "checkpoint.json")
        pers = M.load_checkpoint(out / "checkpoint.json")
        assert pers.meta["finetuned_user"] == user
        assert (pers.params["out_w"].data != base.params["out_w"].data).any()
        assert (pers.params["ctx_proj_w"].data == base.params["ctx_proj_w"].data).all()

    def test_unknown_user(self, ws, data_path, run_dir):
        code = cli.main(["finetune", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--data", str(data_path), "--user", "nobody",
                         "--out", str(ws / "ft_bad")])
        assert code == 2


class TestSweep:
    def test_grid_csv(self, ws, data_path, cfg_path, capsys):
        out = ws / "sweep1"
        code = cli.main(["sweep", "--data", str(data_path), "--out", str(out),
                         "--config", str(cfg_path), "--omega-e", "1.0,1.5",
                         "--max-epochs", "1"])
        assert code == 0
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert [float(r["omega_e"]) for r in rows] == [1.0, 1.5]
        assert all("val_mae_all" in r for r in rows)
        assert "sweep grid:" in capsys.readouterr().out
