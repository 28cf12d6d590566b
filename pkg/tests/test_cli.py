import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from path24.cli import main
from path24.config import SCHEMA, load_config
from path24.errors import ConfigError
from path24.schemas import validate

from conftest import save_image


def write_config(path, **values):
    lines = [f"{k} = {v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def small_run_config(tmp_path, manifest, **extra):
    values = {
        "manifest_path": manifest,
        "backbone": "tiny",
        "pretrained": "false",
        "output_dir": tmp_path / "runs",
        "head.num_classes": 3,
        "head.hidden_width": 128,
        "preprocess.target_size": 32,
        "train.epochs": 15,
        "train.batch_size": 8,
        "split.val_fraction": 0.25,
    }
    values.update(extra)
    return write_config(tmp_path / "run.cfg", **values)


@pytest.fixture
def ingested(tree_factory, tmp_path):
    root = tree_factory([12, 12, 12], [3, 2, 4], noise=True)
    manifest = tmp_path / "manifest.csv"
    assert main(["ingest", str(root), "--out", str(manifest)]) == 0
    return manifest


@pytest.fixture
def trained_run(ingested, tmp_path):
    cfg = small_run_config(tmp_path, ingested)
    assert main(["train", "--config", str(cfg)]) == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    return run_dir


class TestIngest:
    def test_summary(self, tree_factory, tmp_path, capsys):
        root = tree_factory([4, 4, 4], [1, 1, 1])
        out = tmp_path / "m.csv"
        assert main(["ingest", str(root), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "training pool: 12  test: 3" in text
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 15

    def test_empty_dir_exit_2(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["ingest", str(tmp_path / "empty"), "--out", str(tmp_path / "m.csv")]) == 2
        assert "no patches" in capsys.readouterr().err

    def test_env_fallback(self, tree_factory, tmp_path, monkeypatch):
        root = tree_factory([2], [1])
        monkeypatch.setenv("PATH24_DATA_ROOT", str(root))
        assert main(["ingest", "--out", str(tmp_path / "m.csv")]) == 0

    def test_split_command(self, ingested, tmp_path, capsys):
        out = tmp_path / "split.csv"
        assert main(["split", str(ingested), "--val-fraction", "0.25", "--out", str(out)]) == 0
        splits = [r["split"] for r in csv.DictReader(out.open())]
        assert splits.count("val") == 9 and splits.count("train") == 27 and splits.count("test") == 9


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.train.learning_rate == 1e-3
        assert cfg.head.dropout_rates == (0.25, 0.5)
        assert cfg.head.bn_momentum == 0.1 and cfg.head.bn_epsilon == 1e-5
        assert cfg.preprocess.target_size == 224

    def test_every_problem_listed(self, tmp_path):
        path = write_config(tmp_path / "bad.cfg", **{"train.epochs": "many", "head.colour": "red",
                                                     "train.learning_rate": "-1"})
        with pytest.raises(ConfigError) as info:
            load_config(path)
        text = "\n".join(info.value.problems)
        assert "train.epochs" in text and "head.colour" in text and "learning_rate" in text

    def test_override_precedence(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", **{"train.epochs": 7})
        assert load_config(path).train.epochs == 7
        assert load_config(path, {"train.epochs": "9"}).train.epochs == 9

    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(None, {"color_mode": "grayscale", "train.seed": "5", "optimizer.alpha": "0.9"})
        path = tmp_path / "snap.cfg"
        path.write_text(cfg.dumps())
        back = load_config(path)
        assert back.values == cfg.values
        assert set(back.values) == set(SCHEMA)

    def test_usage_exit_64(self, tmp_path, capsys):
        path = write_config(tmp_path / "bad.cfg", **{"nonsense": 1})
        assert main(["train", "--config", str(path)]) == 64
        assert "nonsense" in capsys.readouterr().err
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 64


class TestTrain:
    def test_run_directory(self, trained_run):
        names = {p.name for p in trained_run.iterdir()}
        assert {"config.cfg", "manifest.csv", "best.pt", "final.pt", "train_report.json", "curves.png"} <= names
        assert "-tiny-rgb-seed0" in trained_run.name
        validate(json.loads((trained_run / "train_report.json").read_text()))
        snapshot = load_config(trained_run / "config.cfg")
        assert snapshot["train.learning_rate"] == 1e-3  # default echoed
        assert snapshot["manifest_path"].endswith("manifest.csv")

    def test_replay_is_identical(self, trained_run, tmp_path):
        out = tmp_path / "replay"
        assert main(["train", "--config", str(trained_run / "config.cfg"), "--output-dir", str(out)]) == 0
        (replay,) = out.iterdir()
        assert (replay / "final.pt").read_bytes() == (trained_run / "final.pt").read_bytes()
        a = json.loads((replay / "train_report.json").read_text())
        b = json.loads((trained_run / "train_report.json").read_text())
        assert a["epochs"] == b["epochs"] and a["best_epoch"] == b["best_epoch"]

    def test_never_overwrites(self, ingested, tmp_path):
        cfg = small_run_config(tmp_path, ingested, **{"train.epochs": 1})
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["train", "--config", str(cfg)]) == 0
        assert len(list((tmp_path / "runs").iterdir())) == 2

    def test_grayscale_flag(self, ingested, tmp_path):
        cfg = small_run_config(tmp_path, ingested, **{"train.epochs": 1})
        assert main(["train", "--config", str(cfg), "--color-mode", "grayscale"]) == 0
        (run,) = (tmp_path / "runs").iterdir()
        assert "-grayscale-" in run.name
        assert load_config(run / "config.cfg")["color_mode"] == "grayscale"

    def test_training_abort_exit_3(self, ingested, tmp_path, capsys):
        cfg = small_run_config(tmp_path, ingested, weights_path=tmp_path / "missing.pth", pretrained="true")
        assert main(["train", "--config", str(cfg)]) == 3
        assert "missing.pth" in capsys.readouterr().err


class TestEvaluate:
    def test_outputs(self, trained_run, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["evaluate", str(trained_run / "best.pt"), str(trained_run / "manifest.csv"),
                     "--out", str(out)]) == 0
        data = json.loads((out / "eval_result.json").read_text())
        validate(data)
        assert data["n_tot"] == 9
        # solid colours are separable, so the trained head is perfect
        assert (data["eta_p"], data["eta_w"], data["eta_total"]) == (1.0, 1.0, 1.0)
        assert data["misclassified_count"] == 0
        assert (out / "confusion.png").is_file() and (out / "report.txt").is_file()
        assert "total accuracy (%):         100.00" in capsys.readouterr().out

    def test_missing_class_exit_4(self, trained_run, tmp_path, capsys):
        rows = (trained_run / "manifest.csv").read_text().splitlines()
        kept = [r for r in rows if not (r.endswith(",test") and ",2," in r)]
        manifest = trained_run.parent / "no_scan2.csv"
        manifest.write_text("\n".join(kept) + "\n")
        assert main(["evaluate", str(trained_run / "best.pt"), str(manifest),
                     "--out", str(tmp_path / "e")]) == 4
        assert "[2]" in capsys.readouterr().err

    def test_bad_checkpoint_exit_4(self, ingested, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"nope")
        assert main(["evaluate", str(bad), str(ingested)]) == 4

    def test_report_command(self, trained_run, tmp_path, capsys):
        out = tmp_path / "eval"
        main(["evaluate", str(trained_run / "best.pt"), str(trained_run / "manifest.csv"), "--out", str(out)])
        capsys.readouterr()
        assert main(["report", str(out / "eval_result.json"), "--out", str(tmp_path / "r1")]) == 0
        assert "Precision" in capsys.readouterr().out
        assert main(["report", str(trained_run / "train_report.json"), "--out", str(tmp_path / "r2")]) == 0
        assert (tmp_path / "r2" / "curves.png").is_file()
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"format": "path24-eval-result/1", "eta_p": 2}))
        assert main(["report", str(bad)]) == 64


class TestPredict:
    def _rows(self, capsys):
        return list(csv.DictReader(io.StringIO(capsys.readouterr().out)))

    def test_single_patch(self, trained_run, tmp_path, capsys):
        img = save_image(tmp_path / "one.png", (30, 200, 30), size=40)
        assert main(["predict", str(trained_run / "best.pt"), str(img)]) == 0
        rows = self._rows(capsys)
        assert len(rows) == 1 and rows[0]["scan_id"] == "1"
        assert 0 < float(rows[0]["confidence"]) <= 1

    def test_tiled(self, trained_run, tmp_path, capsys):
        big = tmp_path / "big.png"
        Image.fromarray(np.full((200, 300, 3), 90, dtype=np.uint8)).save(big)
        assert main(["predict", str(trained_run / "best.pt"), str(big), "--tile", "100", "--stride", "100"]) == 0
        rows = self._rows(capsys)
        assert len(rows) == 6
        assert rows[0]["path"].endswith("@0_0") and rows[-1]["path"].endswith("@200_100")

    def test_directory_sorted(self, trained_run, tmp_path, capsys):
        for name in ["c.png", "a.png", "b.png"]:
            save_image(tmp_path / "imgs" / name, (200, 30, 30))
        out = tmp_path / "preds.csv"
        assert main(["predict", str(trained_run / "best.pt"), str(tmp_path / "imgs"), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["path"].rsplit("/", 1)[1] for r in rows] == ["a.png", "b.png", "c.png"]
        assert out.read_text().splitlines()[0] == "path,scan_id,confidence"

    def test_error_rows(self, trained_run, tmp_path, capsys):
        (tmp_path / "imgs").mkdir()
        (tmp_path / "imgs" / "a.png").write_bytes(b"junk")
        save_image(tmp_path / "imgs" / "b.png", (200, 30, 30))
        assert main(["predict", str(trained_run / "best.pt"), str(tmp_path / "imgs")]) == 0
        rows = self._rows(capsys)
        assert rows[0]["scan_id"] == "-1" and rows[1]["scan_id"] == "0"

    def test_all_fail(self, trained_run, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"junk")
        assert main(["predict", str(trained_run / "best.pt"), str(bad)]) == 4
