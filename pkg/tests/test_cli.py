import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from lipsplat.benchmark import read_frames
from lipsplat.cli import main
from lipsplat.conditions import AudioFeatureSequence, save_features
from lipsplat.training import save_config

from helpers import tiny_config


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert "Traceback" not in out + err
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny dataset and static checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    save_config(root / "tiny.yaml", cfg)
    assert main(["gen-data", "--config", str(root / "tiny.yaml"), "--out", str(root / "data")]) == 0
    assert main(["train-static", "--config", str(root / "tiny.yaml"), "--data", str(root / "data"),
                 "--out", str(root / "static")]) == 0
    return root


def test_gen_data_is_deterministic(work, capsys):
    code, _, _ = _run(capsys, "gen-data", "--config", work / "tiny.yaml", "--out", work / "data2")
    assert code == 0
    a = (work / "data" / "manifest.json").read_bytes()
    assert a == (work / "data2" / "manifest.json").read_bytes()
    _run(capsys, "gen-data", "--config", work / "tiny.yaml", "--seed", 5, "--out", work / "data3")
    assert a != (work / "data3" / "manifest.json").read_bytes()


def test_train_static_is_byte_identical(work, capsys):
    code, out, _ = _run(capsys, "train-static", "--config", work / "tiny.yaml", "--data", work / "data",
                        "--out", work / "static2")
    assert code == 0 and "PSNR" in out
    for name in ("static.ckpt", "train_log.csv", "eval.csv", "config.yaml"):
        assert (work / "static" / name).read_bytes() == (work / "static2" / name).read_bytes(), name
    assert _rows(work / "static" / "train_log.csv")[0].keys() >= {"iteration", "loss", "l1", "dssim", "psnr"}
    assert _rows(work / "static" / "timing.csv")[0].keys() == {"step", "seconds", "threads"}


def test_metrics_of_dataset_against_itself(work, capsys):
    code, _, _ = _run(capsys, "metrics", "--data", work / "data", "--pred", work / "data", "--out", work / "m")
    assert code == 0
    mean = _rows(work / "m" / "metrics.csv")[-1]
    assert mean["frame"] == "mean" and math.isinf(float(mean["psnr"])) and float(mean["lmd"]) == 0.0


def test_identity_render_matches_static(work, capsys):
    cfg = tiny_config()
    save_config(work / "zero.yaml", replace(cfg, deform=replace(cfg.deform, iterations=0)))
    code, _, _ = _run(capsys, "train-deform", "--config", work / "zero.yaml", "--data", work / "data",
                      "--ckpt", work / "static" / "static.ckpt", "--out", work / "ident")
    assert code == 0
    for src, stage, out in ((work / "static" / "static.ckpt", "static", "r_static"),
                            (work / "ident" / "deform.ckpt", "deform", "r_ident")):
        code, _, _ = _run(capsys, "render", "--data", work / "data", "--ckpt", src, "--stage", stage,
                          "--out", work / out)
        assert code == 0
    np.testing.assert_array_equal(read_frames(work / "r_static" / "frames"), read_frames(work / "r_ident" / "frames"))
    assert (work / "r_static" / "landmarks.txt").read_bytes() == (work / "r_ident" / "landmarks.txt").read_bytes()
    code, out, _ = _run(capsys, "metrics", "--data", work / "data", "--pred", work / "r_ident", "--out", work / "m2")
    assert code == 0 and "LMD" in out


def test_train_deform_and_render_features(work, capsys, rng):
    code, out, _ = _run(capsys, "train-deform", "--data", work / "data", "--ckpt", work / "static" / "static.ckpt",
                        "--out", work / "deform")
    assert code == 0 and "held-out" in out
    assert _rows(work / "deform" / "train_log.csv")[0].keys() >= {"iteration", "loss", "l1", "dssim", "proxy", "cl"}
    save_features(work / "a.feat", AudioFeatureSequence(rng.normal(size=(7, 16)).astype(np.float32), 25.0))
    code, _, _ = _run(capsys, "render", "--data", work / "data", "--ckpt", work / "deform" / "deform.ckpt",
                      "--features", work / "a.feat", "--out", work / "r_feat")
    assert code == 0
    assert read_frames(work / "r_feat" / "frames").shape == (7, 24, 24, 3)
    assert len(list((work / "r_feat" / "frames").glob("*.png"))) == 7


def test_ablate_encoder(work, capsys):
    code, _, _ = _run(capsys, "ablate-encoder", "--data", work / "data", "--ckpt", work / "static" / "static.ckpt",
                      "--out", work / "abl")
    assert code == 0
    rows = _rows(work / "abl" / "ablation.csv")
    assert [r["encoder"] for r in rows] == ["hashgrid", "triplane"]
    assert all(np.isfinite(float(r["lmd"])) for r in rows)


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "gradcheck", "--out", tmp_path)
    assert code == 0
    rows = _rows(tmp_path / "gradcheck.csv")
    assert all(r["passed"] == "True" for r in rows)
    assert {"raster_chain", "hashgrid", "enhancement"} <= {r["module"] for r in rows}


def test_bad_inputs_exit_nonzero(work, tmp_path, capsys):
    (tmp_path / "v9.yaml").write_text("schema_version: 9\n")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    cases = [
        ("gen-data", "--config", tmp_path / "v9.yaml", "--out", tmp_path / "o"),
        ("gen-data", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "o"),
        ("train-static", "--data", tmp_path / "nowhere", "--out", tmp_path / "o"),
        ("train-deform", "--data", work / "data", "--ckpt", tmp_path / "junk.ckpt", "--out", tmp_path / "o"),
        ("render", "--data", work / "data", "--ckpt", work / "static" / "static.ckpt", "--stage", "deform",
         "--out", tmp_path / "o"),
        ("metrics", "--data", work / "data", "--pred", tmp_path, "--out", tmp_path / "o"),
        ("render", "--data", work / "data", "--ckpt", work / "static" / "static.ckpt"),
        ("gen-data", "--threads", 0, "--out", tmp_path / "o"),
    ]
    for argv in cases:
        code, _, err = _run(capsys, *argv)
        assert code != 0 and "error" in err, argv
    with pytest.raises(SystemExit) as e:
        main(["train-static", "--frobnicate"])
    assert e.value.code == 2
