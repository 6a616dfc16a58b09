import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from faceaug.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from faceaug.synth_data import DatasetManifest, load_png, save_png

CONFIG = """\
batch_size = 4
total_iterations = 6
epochs = 2
lr_decay_start_epoch = 1
fem_iterations = 10
fem_batch_size = 8
fsr_iterations = 10
fsr_batch_size = 8
"""


def digest(directory):
    h = hashlib.sha256()
    for f in sorted(p for p in directory.rglob("*") if p.is_file()):
        h.update(f.relative_to(directory).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "desk.cfg"
    cfg.write_text(CONFIG)
    data, ckpt = root / "data", root / "ckpt"
    assert run("make-data", "--out", data, "--identities", 3, "--per-identity", 4, "--seed", 1) == EXIT_OK
    for cmd in ("pretrain-fem", "pretrain-fsr"):
        assert run(cmd, "--data", data, "--checkpoint-dir", ckpt, "--config", cfg) == EXIT_OK
    assert run("train", "--data", data, "--checkpoint-dir", ckpt, "--config", cfg) == EXIT_OK
    return {"root": root, "cfg": cfg, "data": data, "ckpt": ckpt}


def test_make_data_layout(work):
    rows = DatasetManifest.read(work["data"] / "manifest.csv").rows
    assert len(rows) == 12
    assert (work["data"] / "model.npz").exists()


def test_make_data_is_deterministic(work, tmp_path):
    assert run("make-data", "--out", tmp_path / "again", "--identities", 3, "--per-identity", 4, "--seed", 1) == 0
    assert digest(tmp_path / "again") == digest(work["data"])


def test_training_writes_checkpoints_and_log(work):
    for name in ("E", "G", "D", "FEM", "FSR"):
        assert (work["ckpt"] / f"{name}.npz").exists()
    lines = (work["ckpt"] / "loss_log.jsonl").read_text().splitlines()
    assert [json.loads(s)["step"] for s in lines] == list(range(6))


def test_train_resume_reproduces_uninterrupted_run(work, tmp_path):
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    for name in ("FEM", "FSR"):
        (ckpt / f"{name}.npz").write_bytes((work["ckpt"] / f"{name}.npz").read_bytes())
    args = ("--data", work["data"], "--checkpoint-dir", ckpt, "--config", work["cfg"])
    assert run("train", *args, "--max-steps", 3) == EXIT_OK
    assert not (ckpt / "G.npz").exists()
    assert run("train", *args) == EXIT_DATA
    assert run("train", *args, "--resume") == EXIT_OK
    for name in ("E", "G", "D"):
        assert (ckpt / f"{name}.npz").read_bytes() == (work["ckpt"] / f"{name}.npz").read_bytes()
    assert (ckpt / "loss_log.jsonl").read_bytes() == (work["ckpt"] / "loss_log.jsonl").read_bytes()


def test_frontalize_counts_and_determinism(work, tmp_path):
    args = (work["data"], "--checkpoint-dir", work["ckpt"])
    assert run("frontalize", *args, "--out", tmp_path / "a") == EXIT_OK
    assert run("frontalize", *args, "--out", tmp_path / "b") == EXIT_OK
    assert len(list((tmp_path / "a").glob("*.png"))) == 12
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    header = (tmp_path / "a" / "manifest.csv").read_text().splitlines()[0]
    assert header == "path,source,identity,illum,pose,theta_b64"


def test_rotate_and_relight_grid_gives_28_outputs(work, tmp_path):
    face = work["data"] / "0" / "0.png"
    assert run("rotate", face, "--checkpoint-dir", work["ckpt"], "--out", tmp_path / "rot",
               "--poses", "yaw-45,yaw-30,yaw-15,frontal,yaw+15,yaw+30,yaw+45") == EXIT_OK
    assert run("relight", face, "--checkpoint-dir", work["ckpt"], "--out", tmp_path / "light",
               "--labels", "0,4,8,12", "--poses", "yaw-45,yaw-30,yaw-15,frontal,yaw+15,yaw+30,yaw+45") == EXIT_OK
    assert len(list((tmp_path / "rot").glob("*.png"))) == 7
    assert len(list((tmp_path / "light").glob("*.png"))) == 28


def test_relight_defaults_to_source_pose(work, tmp_path):
    assert run("relight", work["data"] / "1", "--checkpoint-dir", work["ckpt"], "--out", tmp_path) == EXIT_OK
    lines = (tmp_path / "manifest.csv").read_text().splitlines()[1:]
    assert len(lines) == 16 and all(",source," in s for s in lines)


def test_unreadable_input_is_skipped(work, tmp_path):
    (tmp_path / "broken.png").write_bytes(b"nope")
    save_png(load_png(work["data"] / "0" / "0.png"), tmp_path / "ok.png")
    out = tmp_path / "out"
    assert run("frontalize", tmp_path / "broken.png", tmp_path / "ok.png",
               "--checkpoint-dir", work["ckpt"], "--out", out) == EXIT_OK
    assert len(list(out.glob("*.png"))) == 1
    assert run("frontalize", tmp_path / "broken.png", "--checkpoint-dir", work["ckpt"],
               "--out", tmp_path / "none") == EXIT_DATA


@pytest.mark.parametrize("multiplier,factor", [(1, 2), (3, 4)])
def test_augment_grows_manifest(work, tmp_path, multiplier, factor):
    out = tmp_path / f"x{multiplier}"
    assert run("augment", "--data", work["data"], "--checkpoint-dir", work["ckpt"],
               "--multiplier", multiplier, "--out", out) == EXIT_OK
    rows = DatasetManifest.read(out / "manifest.csv").rows
    assert len(rows) == factor * 12
    assert sum(r.origin == "raw" for r in rows) == 12
    assert all((out / r.path).exists() for r in rows)
    src = {r.path: r.identity for r in DatasetManifest.read(work["data"] / "manifest.csv").rows}
    for r in rows:
        if r.origin == "synth":
            stem = r.path.split("/")[-1].split("_", 1)[1]
            assert src[f"{r.path.split('/')[0]}/{stem}"] == r.identity


def test_augment_is_deterministic_and_guards_output(work, tmp_path):
    args = ("augment", "--data", work["data"], "--checkpoint-dir", work["ckpt"])
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert run(*args, "--out", tmp_path / "a") == EXIT_DATA
    assert run(*args, "--out", tmp_path / "a", "--overwrite") == EXIT_OK
    assert run(*args, "--multiplier", 2, "--out", tmp_path / "c") == EXIT_USAGE


def test_interpolation_endpoints_are_exact(work, tmp_path):
    from faceaug.cli import _synthesizer

    left, right = work["data"] / "0" / "0.png", work["data"] / "2" / "3.png"
    assert run("interpolate", left, right, "--checkpoint-dir", work["ckpt"], "--out", tmp_path,
               "--steps", 5) == EXIT_OK
    frames = sorted(tmp_path.glob("frame_*.png"))
    assert len(frames) == 5
    syn = _synthesizer(work["ckpt"])
    ends = syn.generate_codes(syn.source_codes(np.stack([load_png(left), load_png(right)]), 13))
    out = tmp_path / "ends"
    out.mkdir()
    save_png(ends[0], out / "l.png")
    save_png(ends[1], out / "r.png")
    assert frames[0].read_bytes() == (out / "l.png").read_bytes()
    assert frames[-1].read_bytes() == (out / "r.png").read_bytes()


def test_evaluate_writes_report(work, tmp_path):
    test_root = tmp_path / "test"
    assert run("make-data", "--out", test_root, "--identities", 3, "--per-identity", 3,
               "--identity-start", 100, "--seed", 1) == EXIT_OK
    assert run("evaluate", "--train", work["data"], "--test", test_root, "--config", work["cfg"],
               "--out", tmp_path / "rep") == EXIT_OK
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert 0 <= report["auc"] <= 1
    assert (tmp_path / "rep" / "roc.csv").read_text().startswith("threshold,far,tar")


def test_plot_is_byte_stable(work, tmp_path):
    log = work["ckpt"] / "loss_log.jsonl"
    assert run("plot", log, "--out", tmp_path / "a") == EXIT_OK
    assert run("plot", log, "--out", tmp_path / "b") == EXIT_OK
    a, b = (tmp_path / "a" / "loss_curves.png").read_bytes(), (tmp_path / "b" / "loss_curves.png").read_bytes()
    assert a == b


def test_plot_rejects_malformed_log(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"step": 0, "cycle": 1}\n{oops\n')
    assert run("plot", bad, "--out", tmp_path / "o") == EXIT_DATA


def test_error_exit_codes(work, tmp_path, capsys):
    assert run("frobnicate") == EXIT_USAGE
    assert run("relight", work["data"], "--checkpoint-dir", work["ckpt"], "--out", tmp_path / "l",
               "--labels", "3,99") == EXIT_USAGE
    assert run("rotate", work["data"], "--checkpoint-dir", work["ckpt"], "--out", tmp_path / "r",
               "--poses", "yaw+80") == EXIT_USAGE
    assert run("frontalize", work["data"], "--checkpoint-dir", tmp_path / "empty", "--out", tmp_path / "f") \
        == EXIT_CHECKPOINT
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("batch_size = 1\n")
    assert run("pretrain-fem", "--data", work["data"], "--checkpoint-dir", tmp_path / "c",
               "--config", bad_cfg) == EXIT_CHECKPOINT
    assert run("train", "--data", tmp_path / "nowhere", "--checkpoint-dir", work["ckpt"]) == EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "faceaug.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("make-data", "train", "augment", "interpolate", "evaluate"):
        assert name in proc.stdout
