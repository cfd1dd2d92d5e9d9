import json
import subprocess
import sys

import numpy as np
import pytest

from vidtwin.cli import main
from vidtwin.codec import decode_bundle, encode_bundle
from vidtwin.config import RunConfig, tiny_model_config
from vidtwin.video_io import read_raw, write_raw


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(model=tiny_model_config())
    cfg.train.steps, cfg.train.batch, cfg.train.dataset_size = 3, 2, 4
    cfg.train.use_gan, cfg.train.log_every = False, 0
    cfg.diffusion.layers, cfg.diffusion.heads, cfg.diffusion.hidden = 1, 2, 16
    cfg.diffusion.num_classes, cfg.diffusion.class_dim = 4, 8
    cfg.save(root / "cfg.json")
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "m.pt"),
                 "--history", str(root / "h.json")]) == 0
    assert main(["synth-data", "--out", str(root / "clips"), "--n", "2", "--frames", "4",
                 "--height", "8", "--width", "8"]) == 0
    for i in range(2):
        assert main(["encode", "--checkpoint", str(root / "m.pt"), "--input",
                     str(root / "clips" / f"clip_000{i}.vraw"), "--out", str(root / f"b{i}.vtwn")]) == 0
    return root


def test_train_deterministic(workspace, capsys):
    code, _ = run(capsys, "train", "--config", workspace / "cfg.json", "--out", workspace / "m2.pt",
                  "--history", workspace / "h2.json")
    assert code == 0
    assert (workspace / "h.json").read_text() == (workspace / "h2.json").read_text()


def test_encode_decode_matches_reconstruct(workspace, capsys):
    clip = workspace / "clips" / "clip_0000.vraw"
    assert run(capsys, "encode", "--checkpoint", workspace / "m.pt", "--input", clip,
               "--out", workspace / "a.vtwn")[0] == 0
    assert run(capsys, "decode", "--checkpoint", workspace / "m.pt", "--bundle", workspace / "a.vtwn",
               "--out", workspace / "dec.vraw")[0] == 0
    assert run(capsys, "reconstruct", "--checkpoint", workspace / "m.pt", "--input", clip,
               "--out", workspace / "rec.vraw")[0] == 0
    assert (workspace / "dec.vraw").read_bytes() == (workspace / "rec.vraw").read_bytes()


def test_metrics_identical(workspace, capsys):
    clip = workspace / "clips" / "clip_0001.vraw"
    code, out = run(capsys, "metrics", clip, clip, "--latent-dims", 10)
    rec = json.loads(out)
    assert code == 0 and rec["psnr_db"] == float("inf") and rec["ssim"] == 1.0


def test_cross_reenact_and_branches(workspace, capsys):
    m = workspace / "m.pt"
    code, _ = run(capsys, "cross-reenact", "--checkpoint", m, "--bundle-a", workspace / "b0.vtwn",
                  "--bundle-b", workspace / "b0.vtwn", "--out", workspace / "self.vraw")
    assert code == 0
    run(capsys, "reconstruct", "--checkpoint", m, "--input", workspace / "clips" / "clip_0000.vraw",
        "--out", workspace / "rec0.vraw")
    assert np.array_equal(read_raw(workspace / "self.vraw").data, read_raw(workspace / "rec0.vraw").data)
    code, _ = run(capsys, "cross-reenact", "--checkpoint", m, "--bundle-a", workspace / "b0.vtwn",
                  "--bundle-b", workspace / "b1.vtwn", "--out", workspace / "x.vraw")
    assert code == 0 and read_raw(workspace / "x.vraw").shape == (3, 4, 8, 8)
    for which in ("structure", "dynamics"):
        code, out = run(capsys, "decode-branch", "--checkpoint", m, "--bundle", workspace / "b1.vtwn",
                        "--which", which, "--out", workspace / f"{which}.vraw")
        assert code == 0 and json.loads(out)["which"] == which


def test_cross_reenact_fingerprint_mismatch(workspace, capsys):
    # same latents under another fingerprint, with a valid checksum
    b = decode_bundle((workspace / "b0.vtwn").read_bytes())
    b.config_fingerprint = bytes(range(32))
    (workspace / "other.vtwn").write_bytes(encode_bundle(b))
    code, _ = run(capsys, "cross-reenact", "--checkpoint", workspace / "m.pt", "--bundle-a",
                  workspace / "other.vtwn", "--bundle-b", workspace / "b0.vtwn", "--out", workspace / "y.vraw")
    assert code == 2
    code, _ = run(capsys, "decode", "--checkpoint", workspace / "m.pt", "--bundle", workspace / "other.vtwn",
                  "--out", workspace / "y.vraw")
    assert code == 3


def test_reports(capsys):
    code, out = run(capsys, "compress-report")
    rates = {r["name"]: r["compression_rate_pct"] for r in json.loads(out)}
    assert code == 0 and rates["vidtwin"] == pytest.approx(0.2046, abs=1e-4)
    code, out = run(capsys, "resource-report", "--paper")
    rep = json.loads(out)
    assert code == 0 and rep["report"]["token_count"] == 184
    assert rep["vs_magvit_v2"]["token_ratio"] >= 3.0


def test_resource_report_is_reproducible(capsys):
    assert run(capsys, "resource-report")[1] == run(capsys, "resource-report")[1]


def test_config_error_exit_code(capsys, tmp_path):
    code = main(["train", "--out", str(tmp_path / "m.pt"), "--set", "model.structure.n_q=99",
                 "--set", "model.backbone.hidden_c=30"])
    err = capsys.readouterr().err
    assert code == 2
    assert "n_q" in err and "hidden_c" in err


def test_io_error_exit_code(workspace, capsys, tmp_path):
    code = main(["decode", "--checkpoint", str(workspace / "m.pt"), "--bundle", str(tmp_path / "none.vtwn"),
                 "--out", str(tmp_path / "o.vraw")])
    assert code == 3
    code = main(["encode", "--checkpoint", str(tmp_path / "missing.pt"), "--input", "x", "--out", "y"])
    assert code == 3


def test_numeric_error_exit_code(workspace, capsys, tmp_path):
    clip = read_raw(workspace / "clips" / "clip_0000.vraw")
    clip.data[0, 0, 0, 0] = np.nan
    write_raw(clip, tmp_path / "nan.vraw")
    code = main(["reconstruct", "--checkpoint", str(workspace / "m.pt"), "--input", str(tmp_path / "nan.vraw"),
                 "--out", str(tmp_path / "o.vraw")])
    assert code == 4


def test_diffusion_commands(workspace, capsys):
    code, out = run(capsys, "diff-train", "--config", workspace / "cfg.json", "--checkpoint", workspace / "m.pt",
                    "--out", workspace / "dit.pt", "--n", 4, "--steps", 3, "--batch", 4,
                    "--stats", workspace / "stats.json")
    assert code == 0 and json.loads(out)["tokens"] > 0
    code, out = run(capsys, "diff-sample", "--config", workspace / "cfg.json", "--checkpoint", workspace / "m.pt",
                    "--dit", workspace / "dit.pt", "--out", workspace / "samples", "--n", 2, "--steps", 3,
                    "--class-id", 1)
    assert code == 0
    for path in json.loads(out)["samples"]:
        assert read_raw(path).shape == (3, 4, 8, 8)


def test_ablate_command(workspace, capsys):
    code, out = run(capsys, "ablate", "--config", workspace / "cfg.json", "--variant", "single_latent")
    rec = json.loads(out)
    assert code == 0 and rec["variant"] == "single_latent"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "vidtwin", "compress-report"], capture_output=True, text=True)
    assert res.returncode == 0
    assert len(json.loads(res.stdout)) == 4
