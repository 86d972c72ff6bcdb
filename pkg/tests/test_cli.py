import csv
import json
from pathlib import Path

import pytest

from fairage.cli import main
from fairage.core import RaceLabel

from conftest import make_kinface_tree, make_source_tree, write_png


@pytest.fixture(scope="module")
def mini_source(tmp_path_factory):
    """Small loadable source tree: 10 images per race."""
    return make_source_tree(tmp_path_factory.mktemp("source"),
                            {race: 10 for race in RaceLabel}, image_files=True)


@pytest.fixture(scope="module")
def mini_manifest(tmp_path_factory, mini_source):
    out = tmp_path_factory.mktemp("dataset")
    assert main(["build-dataset", "--source", str(mini_source), "--out", str(out),
                 "--seed", "3"]) == 0
    return out / "manifest.jsonl"


class TestBuildDataset:
    def test_outputs_and_manifest(self, mini_manifest):
        out = mini_manifest.parent
        assert mini_manifest.exists()
        assert (out / "manifest.summary.json").exists()
        assert (out / "age_histogram.png").exists()
        run = json.loads((out / "run_manifest.json").read_text())
        assert run["command"] == "build-dataset"

    def test_deterministic_across_runs(self, mini_source, tmp_path):
        blobs = []
        for run in range(2):
            out = tmp_path / f"d{run}"
            assert main(["build-dataset", "--source", str(mini_source),
                         "--out", str(out), "--seed", "5"]) == 0
            blobs.append((out / "manifest.jsonl").read_bytes())
        assert blobs[0] == blobs[1]

    def test_missing_source_fails_cleanly(self, tmp_path, capsys):
        assert main(["build-dataset", "--source", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out")]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"


class TestTrain:
    def test_train_writes_log_checkpoint_manifest(self, mini_manifest, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "2",
                     "--batch-size", "2", "--seed", "7", "--out", str(out)]) == 0
        log = (out / "training_log.jsonl").read_text().splitlines()
        assert len(log) == 2
        assert (out / "checkpoint_final.weights").exists()
        assert (out / "checkpoint_final.json").exists()
        assert (out / "run_manifest.json").exists()

    def test_same_seed_same_log(self, mini_manifest, tmp_path):
        logs = []
        for run in range(2):
            out = tmp_path / f"run{run}"
            assert main(["train", "--manifest", str(mini_manifest), "--steps", "2",
                         "--batch-size", "2", "--seed", "7", "--out", str(out)]) == 0
            logs.append((out / "training_log.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_missing_manifest_no_partial_outputs(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(tmp_path / "nope.jsonl"),
                     "--steps", "1", "--out", str(out)]) == 1
        assert not out.exists()

    def test_resume_matches_uninterrupted(self, mini_manifest, tmp_path):
        full = tmp_path / "full"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "4",
                     "--batch-size", "2", "--seed", "11", "--out", str(full),
                     "--checkpoint-every", "100"]) == 0

        half = tmp_path / "half"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "2",
                     "--batch-size", "2", "--seed", "11", "--out", str(half)]) == 0
        resumed = tmp_path / "resumed"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "4",
                     "--batch-size", "2", "--seed", "11", "--out", str(resumed),
                     "--resume", str(half / "checkpoint_final.weights")]) == 0

        full_log = [json.loads(l) for l in (full / "training_log.jsonl").read_text().splitlines()]
        tail_log = [json.loads(l) for l in (resumed / "training_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in tail_log] == [3, 4]
        assert full_log[2:] == tail_log


class TestTransform:
    def test_one_image_seven_ages(self, tmp_path):
        img = write_png(tmp_path / "face.png", seed=1, size=40)
        out = tmp_path / "aged"
        assert main(["transform", "--images", str(img), "--ages", "20-80:10",
                     "--out", str(out), "--seed", "3"]) == 0
        produced = sorted(p.name for p in out.glob("face_age*.png"))
        assert produced == [f"face_age{a}.png" for a in (20, 30, 40, 50, 60, 70, 80)]

    def test_deterministic_bytes(self, tmp_path):
        img = write_png(tmp_path / "face.png", seed=2, size=40)
        blobs = []
        for run in range(2):
            out = tmp_path / f"t{run}"
            assert main(["transform", "--images", str(img), "--ages", "40",
                         "--out", str(out), "--seed", "3"]) == 0
            blobs.append((out / "face_age40.png").read_bytes())
        assert blobs[0] == blobs[1]

    def test_grid_written(self, tmp_path):
        img = write_png(tmp_path / "face.png", seed=3, size=40)
        out = tmp_path / "grid"
        assert main(["transform", "--images", str(img), "--ages", "20,60",
                     "--grid", "--out", str(out)]) == 0
        assert (out / "face_grid.png").exists()

    def test_empty_age_list_is_usage_error(self, tmp_path, capsys):
        img = write_png(tmp_path / "face.png", seed=4, size=40)
        assert main(["transform", "--images", str(img), "--ages", ",",
                     "--out", str(tmp_path / "o")]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"

    def test_unreadable_input_partial_exit(self, tmp_path, capsys):
        good = write_png(tmp_path / "good.png", seed=5, size=40)
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"junk")
        out = tmp_path / "out"
        assert main(["transform", "--images", str(bad), str(good), "--ages", "30",
                     "--out", str(out)]) == 3
        assert (out / "good_age30.png").exists()
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["failed_inputs"][0]["input"].endswith("bad.png")

    def test_checkpoint_transform_roundtrip(self, mini_manifest, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "1",
                     "--batch-size", "2", "--seed", "13", "--out", str(run)]) == 0
        img = write_png(tmp_path / "face.png", seed=6, size=40)
        out = tmp_path / "aged"
        assert main(["transform", "--images", str(img), "--ages", "50",
                     "--checkpoint", str(run / "checkpoint_final.weights"),
                     "--out", str(out)]) == 0
        assert (out / "face_age50.png").exists()


class TestEvalCommands:
    def test_eval_race_outputs(self, mini_manifest, tmp_path):
        out = tmp_path / "race"
        assert main(["eval-race", "--manifest", str(mini_manifest), "--ages", "20,60",
                     "--limit", "6", "--out", str(out)]) == 0
        with open(out / "race_accuracy.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3
        assert (out / "race_accuracy.json").exists()
        assert (out / "race_accuracy.png").exists()

    def test_eval_identity_outputs(self, mini_manifest, tmp_path):
        out = tmp_path / "ident"
        assert main(["eval-identity", "--manifest", str(mini_manifest), "--ages", "30",
                     "--limit", "4", "--out", str(out)]) == 0
        assert (out / "identity_preservation.csv").exists()
        assert (out / "identity_preservation.png").exists()

    def test_eval_age_outputs(self, mini_manifest, tmp_path):
        out = tmp_path / "agemae"
        assert main(["eval-age", "--manifest", str(mini_manifest), "--ages", "20,40",
                     "--limit", "4", "--sample-size", "3", "--out", str(out)]) == 0
        payload = json.loads((out / "age_mae.json").read_text())
        assert payload[0]["note"] == "toy estimator, uncalibrated"
        assert payload[0]["count"] == 3


class TestKinshipRun:
    @pytest.fixture(scope="class")
    def kin_root(self, tmp_path_factory):
        return make_kinface_tree(tmp_path_factory.mktemp("kin"),
                                 pairs_per_relation={r: 5 for r in ("FS", "FD", "MS", "MD")},
                                 image_size=24)

    def test_oracle_verifier_hundred_percent(self, kin_root, tmp_path):
        out = tmp_path / "kin"
        assert main(["kinship-run", "--root", str(kin_root), "--dataset", "custom",
                     "--ages", "base,20", "--verifier", "oracle",
                     "--out", str(out)]) == 0
        payload = json.loads((out / "kinship_accuracy.json").read_text())
        assert len(payload) == 4
        for entry in payload:
            assert entry["base"] == 100.0
            assert entry["by_age"]["20"] == 100.0

    def test_base_only_run(self, kin_root, tmp_path):
        out = tmp_path / "base"
        assert main(["kinship-run", "--root", str(kin_root), "--dataset", "custom",
                     "--ages", "base", "--verifier", "oracle", "--out", str(out)]) == 0
        with open(out / "kinship_accuracy.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["relation", "base", "improvement"]
        assert len(rows) == 5

    def test_table_shaped_csv(self, kin_root, tmp_path):
        out = tmp_path / "table"
        assert main(["kinship-run", "--root", str(kin_root), "--dataset", "custom",
                     "--ages", "base,20,30,40,50,60", "--verifier", "oracle",
                     "--out", str(out)]) == 0
        with open(out / "kinship_accuracy.csv") as fh:
            rows = list(csv.reader(fh))
        # four relations, each carrying base + five age entries + improvement
        assert len(rows) == 1 + 4
        assert rows[0] == ["relation", "base", "age_20", "age_30", "age_40",
                           "age_50", "age_60", "improvement"]


class TestPrepKinface:
    def test_prep_writes_padded_images_and_pairs(self, tmp_path):
        root = make_kinface_tree(tmp_path / "bench",
                                 pairs_per_relation={r: 3 for r in ("FS", "FD", "MS", "MD")},
                                 image_size=20)
        out = tmp_path / "prepped"
        assert main(["prep-kinface", "--root", str(root), "--dataset", "custom",
                     "--out", str(out)]) == 0
        pairs = [json.loads(l) for l in (out / "pairs.jsonl").read_text().splitlines()]
        assert len(pairs) == 24  # 3 kin + 3 non-kin per relation
        first = Path(pairs[0]["parent"])
        assert first.exists() and first.suffix == ".png"
        from fairage.datakit import load_image_raw
        padded = load_image_raw(first)
        assert padded.shape == (3, 256, 256)


class TestConfigPlumbing:
    def test_config_file_drives_commands(self, mini_source, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 9\n")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["build-dataset", "--source", str(mini_source),
                     "--config", str(cfg), "--out", str(out_a)]) == 0
        assert main(["build-dataset", "--source", str(mini_source),
                     "--seed", "9", "--out", str(out_b)]) == 0
        assert (out_a / "manifest.jsonl").read_bytes() == (out_b / "manifest.jsonl").read_bytes()

    def test_env_override_reaches_training(self, mini_manifest, tmp_path, monkeypatch):
        monkeypatch.setenv("FAIRAGE_BATCH_SIZE", "2")
        out = tmp_path / "envrun"
        assert main(["train", "--manifest", str(mini_manifest), "--steps", "1",
                     "--seed", "3", "--out", str(out)]) == 0
        assert (out / "training_log.jsonl").exists()

    def test_bad_config_file_fails(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense_key = 1\n")
        assert main(["build-dataset", "--source", str(tmp_path), "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 1


class TestParsing:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_age_span_parsing(self):
        from fairage.cli import _parse_ages
        assert _parse_ages("20-80:10") == [20, 30, 40, 50, 60, 70, 80]
        assert _parse_ages("20,45") == [20, 45]
        include_base, ages = _parse_ages("base,20,30", allow_base=True)
        assert include_base and ages == [20, 30]

    def test_base_rejected_outside_kinship(self):
        from fairage.cli import _parse_ages
        from fairage.core import ConfigError
        with pytest.raises(ConfigError):
            _parse_ages("base,20")
