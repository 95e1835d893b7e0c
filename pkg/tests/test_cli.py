import csv
import json

import jsonschema
import numpy as np
import pytest

from gemfuse import dataeval as de
from gemfuse import preproc
from gemfuse.cli import main
from gemfuse.imageio import load_png
from gemfuse.model import Detector, ModelConfig, load_model


def run(*args):
    return main([*map(str, args), "-q"])


def small(tmp, n_train=8, n_test=4):
    return ["--data", tmp / "data", "--set", f"output_dir={tmp / 'runs'}", "--set", f"data.n_train={n_train}", "--set", f"data.n_test={n_test}"]


def read_losses(ckpt):
    with open(ckpt / "loss.csv") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        for name in ("x", "y"):
            assert run("generate", *small(tmp_path / name), "--seed", 5) == 0
        for split in ("train", "test"):
            a = (tmp_path / "x" / "data" / split / "annotations.json").read_bytes()
            b = (tmp_path / "y" / "data" / split / "annotations.json").read_bytes()
            assert a == b
        pa = (tmp_path / "x" / "data" / "train" / "images" / "a" / "0003.png").read_bytes()
        assert pa == (tmp_path / "y" / "data" / "train" / "images" / "a" / "0003.png").read_bytes()

    def test_seed_changes_data(self, tmp_path):
        run("generate", *small(tmp_path / "x"), "--seed", 1)
        run("generate", *small(tmp_path / "y"), "--seed", 2)
        a = (tmp_path / "x" / "data" / "test" / "annotations.json").read_bytes()
        assert a != (tmp_path / "y" / "data" / "test" / "annotations.json").read_bytes()

    def test_empty(self, tmp_path):
        assert run("generate", *small(tmp_path, 0, 0)) == 0
        doc = json.loads((tmp_path / "data" / "train" / "annotations.json").read_text())
        assert doc["annotations"] == [] and doc["images"] == []
        assert de.validate_dataset(tmp_path / "data" / "train") == []

    def test_round_trip(self, tmp_path):
        run("generate", *small(tmp_path))
        for split, n in (("train", 8), ("test", 4)):
            assert de.validate_dataset(tmp_path / "data" / split) == []
            samples, names = de.load_dataset(tmp_path / "data" / split)
            assert len(samples) == n and names == ["person", "bicycle", "car"]

    def test_refuses_non_empty(self, tmp_path):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "keep.txt").write_text("x")
        assert run("generate", *small(tmp_path)) == 3
        assert run("generate", *small(tmp_path), "--force") == 0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A 200-step run of the default fused model on a small pinned dataset."""
    tmp = tmp_path_factory.mktemp("pipeline")
    args = small(tmp, n_train=64, n_test=16)
    assert run("generate", *args, "--seed", 3) == 0
    assert run("train", *args, "--seed", 3, "--epochs", 50) == 0
    return tmp, args


class TestTrain:
    def test_loss_halves_within_200_steps(self, trained):
        tmp, _ = trained
        losses = read_losses(tmp / "runs" / "sa" / "checkpoint")
        assert len(losses) == 200
        assert np.mean(losses[-5:]) < 0.5 * losses[0]
        assert losses[-1] < 0.5 * losses[0]

    def test_checkpoint_manifest(self, trained):
        tmp, _ = trained
        manifest = json.loads((tmp / "runs" / "sa" / "checkpoint" / "manifest.json").read_text())
        assert manifest["format"] == "gemfuse-checkpoint/1"
        assert manifest["paper_hyperparameters"]["lr"] == 8e-6
        assert manifest["steps"] == 200 and manifest["model"]["mode"] == "sa"

    def test_zero_epochs_is_initialization(self, tmp_path):
        args = small(tmp_path)
        run("generate", *args)
        assert run("train", *args, "--mode", "mc", "--epochs", 0, "--seed", 4) == 0
        model, _ = load_model(tmp_path / "runs" / "mc" / "checkpoint")
        init = Detector.init(ModelConfig(mode="mc"), 4)
        assert set(model.params) == set(init.params)
        assert all(np.array_equal(model.params[k].data, v.data) for k, v in init.params.items())
        assert read_losses(tmp_path / "runs" / "mc" / "checkpoint") == []

    def test_same_seed_same_curve(self, tmp_path):
        args = small(tmp_path)
        run("generate", *args)
        curves = []
        for name in ("one", "two"):
            ckpt = tmp_path / name
            assert run("train", *args, "--mode", "sf", "--max-steps", 4, "--checkpoint", ckpt) == 0
            curves.append((ckpt / "loss.csv").read_bytes())
        assert curves[0] == curves[1]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path):
        args = small(tmp_path)
        run("generate", *args)
        code = run("train", *args, "--mode", "single-b", "--set", "train.optimizer=sgd", "--lr", 1e8, "--max-steps", 20)
        assert code == 4

    def test_missing_dataset(self, tmp_path):
        assert run("train", *small(tmp_path)) == 3

    def test_config_error(self, tmp_path):
        assert run("train", *small(tmp_path), "--set", "train.momentum=0.9") == 2
        assert run("train", *small(tmp_path), "--mode", "entropy") == 2


class TestEval:
    def test_report_schema_and_images(self, trained):
        tmp, args = trained
        out = tmp / "eval-clean"
        assert run("eval", *args, "--trials", 1, "--corruption", "none", "--out", out) == 0
        doc = json.loads((out / "report.json").read_text())
        jsonschema.validate(doc, de.REPORT_SCHEMA)
        assert doc["trials"] == 1 and doc["n_samples"] == 16
        assert sorted(p.name for p in out.glob("report_*.png")) == [f"report_{i:04d}.png" for i in range(4)]

    def test_single_pass_deterministic(self, trained):
        tmp, args = trained
        outs = [tmp / "det1", tmp / "det2"]
        for out in outs:
            assert run("eval", *args, "--trials", 1, "--corruption", "none", "--out", out) == 0
        assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
        assert (outs[0] / "report_0000.png").read_bytes() == (outs[1] / "report_0000.png").read_bytes()

    def test_clean_train_split_beats_corruption(self, trained):
        tmp, args = trained
        maps = {}
        for corruption in ("none", "noise"):
            out = tmp / f"mono-{corruption}"
            run("eval", *args, "--split", "train", "--corruption", corruption, "--target", "b", "--trials", 2, "--out", out)
            maps[corruption] = json.loads((out / "report.json").read_text())["map"]
        assert maps["none"] >= maps["noise"]

    def test_parallel_trials_match(self, trained):
        tmp, args = trained
        for jobs, name in ((1, "serial"), (2, "parallel")):
            run("eval", *args, "--corruption", "rsh", "--trials", 2, "--jobs", jobs, "--out", tmp / name)
        assert (tmp / "serial" / "report.json").read_bytes() == (tmp / "parallel" / "report.json").read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        args = small(tmp_path)
        run("generate", *args)
        assert run("eval", *args, "--checkpoint", tmp_path / "nowhere") == 3

    def test_report_table(self, trained, capsys):
        tmp, args = trained
        run("eval", *args, "--trials", 1, "--out", tmp / "t1")
        run("eval", *args, "--trials", 2, "--corruption", "blank", "--out", tmp / "t2")
        capsys.readouterr()
        assert main(["report", str(tmp / "t1" / "report.json"), str(tmp / "t2" / "report.json"), "--out", str(tmp / "table.md")]) == 0
        table = capsys.readouterr().out
        assert table == (tmp / "table.md").read_text()
        rows = table.strip().splitlines()
        assert len(rows) == 4 and "blank(a)" in rows[3]


class TestPreprocess:
    @pytest.fixture()
    def dataset(self, tmp_path):
        run("generate", *small(tmp_path, 2, 5))
        return tmp_path / "data" / "test"

    def test_identity_alignment_and_cardinality(self, tmp_path, dataset):
        corr = tmp_path / "corr.json"
        pts = [[0, 0], [63, 0], [0, 63], [63, 63], [20, 40]]
        corr.write_text(json.dumps([[x, y, x, y] for x, y in pts]))
        out = tmp_path / "pre"
        assert run("preprocess", "--input", dataset, "--correspondences", corr, "--out", out) == 0
        for kind in ("aligned", "blended", "corrupted"):
            assert len(list((out / kind).glob("*.png"))) == 5
        assert len(list(out.glob("*.json"))) == 1
        h = json.loads((out / "homography.json").read_text())
        np.testing.assert_allclose(h["H"], np.eye(3).ravel(), atol=1e-9)
        for name in ("0000.png", "0004.png"):
            a = load_png(dataset / "images" / "a" / name)
            aligned = load_png(out / "aligned" / name)
            assert np.array_equal(aligned[:, 1:-1, 1:-1], a[:, 1:-1, 1:-1])

    def test_blend_delegates(self, tmp_path, dataset):
        out = tmp_path / "pre"
        assert run("preprocess", "--input", dataset, "--alpha", 0.9, "--out", out) == 0
        a = load_png(dataset / "images" / "a" / "0001.png")
        b = load_png(dataset / "images" / "b" / "0001.png")
        expected = np.floor(preproc.r_blend(b, a, 0.9) * 255 + 0.5) / 255
        np.testing.assert_array_equal(load_png(out / "blended" / "0001.png"), expected)
        assert json.loads((out / "homography.json").read_text())["estimated"] is False

    def test_deterministic(self, tmp_path, dataset):
        for name in ("p1", "p2"):
            run("preprocess", "--input", dataset, "--out", tmp_path / name, "--seed", 9)
        assert (tmp_path / "p1" / "corrupted" / "0002.png").read_bytes() == (tmp_path / "p2" / "corrupted" / "0002.png").read_bytes()

    def test_degenerate_correspondences(self, tmp_path, dataset):
        corr = tmp_path / "corr.json"
        corr.write_text(json.dumps([[0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 2, 2], [3, 3, 3, 3]]))
        assert run("preprocess", "--input", dataset, "--correspondences", corr, "--out", tmp_path / "x") == 3

    def test_missing_input(self, tmp_path):
        assert run("preprocess", "--input", tmp_path / "none", "--out", tmp_path / "x") == 3
