import json

import numpy as np
import pytest
from PIL import Image

from cli_pipeline import artifact_hashes, run, run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    codes = run_pipeline(root)
    return root, codes


def test_every_command_exits_zero(pipeline):
    _, codes = pipeline
    assert codes == {k: 0 for k in ("synth-data", "train", "generate", "ssaa", "evaluate")}


def test_synth_data_layout(pipeline):
    root, _ = pipeline
    data = root / "data"
    lines = (data / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 1 + 16
    assert sum(line.endswith("\ttest") for line in lines) == 4
    for w in ("w000", "w001"):
        files = sorted((data / "styles" / w).glob("*.png"))
        assert len(files) == 5
        assert Image.open(files[0]).size == (224, 224)


def test_train_artifacts(pipeline):
    root, _ = pipeline
    train = root / "train"
    for name in ("config.json", "losses.tsv", "loss_curves.png", "critic_report.json", "run_manifest.json"):
        assert (train / name).is_file()
    assert list(train.glob("epoch_*.ckpt"))
    report = json.loads((train / "critic_report.json").read_text())
    assert report["iteration"] == 4 and report["g_updates"] == 2 and report["critic_updates"] == 4


def test_generate_one_raster_per_word(pipeline):
    root, _ = pipeline
    gen = root / "generate"
    rasters = sorted(gen.glob("word_*.png"))
    assert [p.name for p in rasters] == ["word_00_We.png", "word_01_love.png", "word_02_Nepal.png"]
    assert [np.asarray(Image.open(p)).shape for p in rasters] == [(32, 32), (32, 64), (32, 80)]
    assert (gen / "attention_00_We" / "manifest.json").is_file()
    manifest = json.loads((gen / "run_manifest.json").read_text())
    assert manifest["checkpoint_sha256"] and "word_00_We.png" in manifest["artifacts"]


def test_ssaa_outputs(pipeline):
    root, _ = pipeline
    out = root / "ssaa"
    grid = np.asarray(Image.open(out / "grid.png"))
    assert grid.shape[1] == 5 * 224 + 6 * 8
    meta = json.loads((out / "attention" / "manifest.json").read_text())
    assert meta["word"] == "scholar" and meta["byte_order"] == "little"
    shapes = {t["name"]: t["shape"] for t in meta["tensors"]}
    assert shapes["attention"] == [8, 7, 980] and shapes["maps"] == [5, 224, 224]
    assert (out / "attention_maps.png").is_file() and (out / "strokes.tsv").is_file()


def test_evaluate_report(pipeline):
    root, _ = pipeline
    report = json.loads((root / "eval" / "report.json").read_text())
    for key in ("fid", "kid", "delta_cer", "num_generated", "num_real", "extractor", "recognizer"):
        assert key in report
    assert report["num_generated"] == report["num_real"] == 4
    assert np.isfinite(report["fid"]) and np.isfinite(report["delta_cer"])
    assert (root / "eval" / "report_features.png").is_file()


def test_synth_data_deterministic(tmp_path):
    (tmp_path / "w.txt").write_text("the and of\n")
    for d in ("a", "b"):
        assert run(["synth-data", "--writers", 2, "--words", tmp_path / "w.txt", "--seed", 7,
                    "--out", tmp_path / d]) == 0
    assert artifact_hashes(tmp_path / "a") == artifact_hashes(tmp_path / "b")


@pytest.mark.parametrize(
    "argv",
    [
        ["synth-data", "--writers", 0, "--words", "{root}/w.txt", "--out", "{root}/x"],
        ["synth-data", "--writers", 2, "--words", "{root}/missing.txt", "--out", "{root}/x"],
        ["generate", "--text", "", "--style-dir", "{data}/styles/w000", "--ckpt", "{train}", "--out", "{root}/x"],
        ["generate", "--text", "naïve", "--style-dir", "{data}/styles/w000", "--ckpt", "{train}", "--out", "{root}/x"],
        ["generate", "--text", "ok", "--style-dir", "{root}/nowhere", "--ckpt", "{train}", "--out", "{root}/x"],
        ["generate", "--text", "ok", "--style-dir", "{data}/styles/w000", "--ckpt", "{root}/w.txt", "--out", "{root}/x"],
        ["ssaa", "--text", "two words", "--style-dir", "{data}/styles/w000", "--ckpt", "{train}", "--out", "{root}/x"],
        ["evaluate", "--checkpoint", "{train}", "--data", "{data}", "--extractor", "inception", "--out", "{root}/r.json"],
    ],
)
def test_bad_invocations_exit_nonzero(pipeline, tmp_path, capsys, argv):
    root, _ = pipeline
    (tmp_path / "w.txt").write_text("the\n")
    fmt = {"root": tmp_path, "data": root / "data", "train": root / "train"}
    argv = [str(a).format(**fmt) for a in argv]
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err
