import hashlib
import json
import subprocess
import sys

import pytest

from mgdn.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = "stages=1\nchannels=8\nheads=2\nhist_bins=8\nsize=16\ncheckpoint_every=2\n"


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def dataset(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["synth", "--config", str(cfg_file), "--count", "3", "--out", str(out)]) == EXIT_OK
    return out


def train_args(cfg_file, dataset, out, *extra):
    return ["train", "--config", str(cfg_file), "--data", str(dataset / "manifest.jsonl"),
            "--out", str(out), *extra]


def test_synth_is_deterministic(tmp_path, cfg_file, dataset):
    again = tmp_path / "again"
    main(["synth", "--config", str(cfg_file), "--count", "3", "--out", str(again)])
    names = sorted(p.name for p in dataset.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for name in names:
        if name == "config.txt":
            continue
        assert digest(dataset / name) == digest(again / name)
    assert (dataset / "config.txt").read_text().startswith("arity=2\n")


def test_synth_zero_count(tmp_path, cfg_file):
    out = tmp_path / "empty"
    assert main(["synth", "--config", str(cfg_file), "--count", "0", "--out", str(out)]) == EXIT_OK
    assert (out / "manifest.jsonl").read_text() == ""


def test_train_zero_steps_writes_only_init(tmp_path, cfg_file, dataset):
    assert main(train_args(cfg_file, dataset, tmp_path / "runs", "--steps", "0")) == EXIT_OK
    rdir = tmp_path / "runs" / "mff-full-s0"
    assert sorted(p.name for p in rdir.glob("*.ckpt")) == ["init.ckpt"]


def test_train_logs_and_resume_is_equivalent(tmp_path, cfg_file, dataset):
    straight = tmp_path / "a"
    assert main(train_args(cfg_file, dataset, straight, "--steps", "4")) == EXIT_OK
    rdir = straight / "mff-full-s0"
    log = (rdir / "loss_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["step", "total", "l1", "mi"]
    assert [r.split("\t")[0] for r in log[1:]] == ["1", "2", "3", "4"]
    assert {"init.ckpt", "step0000002.ckpt", "step0000004.ckpt", "final.ckpt"} <= {
        p.name for p in rdir.iterdir()}

    resumed = tmp_path / "b"
    main(train_args(cfg_file, dataset, resumed, "--steps", "2"))
    rdir_b = resumed / "mff-full-s0"
    assert main(train_args(cfg_file, dataset, resumed, "--steps", "4",
                           "--resume", str(rdir_b / "final.ckpt"))) == EXIT_OK
    assert (rdir_b / "loss_log.tsv").read_text() == (rdir / "loss_log.tsv").read_text()
    assert digest(rdir_b / "final.ckpt") == digest(rdir / "final.ckpt")


def test_ablation_gets_its_own_directory(tmp_path, cfg_file, dataset):
    out = tmp_path / "runs"
    main(train_args(cfg_file, dataset, out, "--steps", "0"))
    main(train_args(cfg_file, dataset, out, "--steps", "0", "--ablate", "mgca"))
    assert sorted(p.name for p in out.iterdir()) == ["mff-full-s0", "mff-no-mgca-s0"]
    assert "disable_mgca=true" in (out / "mff-no-mgca-s0" / "config.txt").read_text()


def test_fuse_outputs_and_dumps(tmp_path, cfg_file, dataset):
    main(train_args(cfg_file, dataset, tmp_path / "runs", "--steps", "1"))
    ckpt = tmp_path / "runs" / "mff-full-s0" / "final.ckpt"
    rec = json.loads((dataset / "manifest.jsonl").read_text().splitlines()[0])
    inputs = [str(dataset / p) for p in rec["inputs"]]
    outs = []
    for name in ("f1", "f2"):
        assert main(["fuse", str(ckpt), *inputs, "--out", str(tmp_path / name),
                     "--dump-kernels", "--dump-masks"]) == EXIT_OK
        outs.append(tmp_path / name)
    assert digest(outs[0] / "fused.png") == digest(outs[1] / "fused.png")
    assert [p.name for p in outs[0].glob("mask_stage*.png")] == ["mask_stage0.png"]
    assert len(list(outs[0].glob("kernels_stage0_stream*.png"))) == 2
    assert main(["fuse", str(ckpt), inputs[0], "--out", str(tmp_path / "bad")]) == EXIT_USAGE


def test_eval_table_and_empty_manifest(tmp_path, cfg_file, dataset):
    main(train_args(cfg_file, dataset, tmp_path / "runs", "--steps", "0"))
    ckpt = tmp_path / "runs" / "mff-full-s0" / "init.ckpt"
    assert main(["eval", str(ckpt), "--data", str(dataset / "manifest.jsonl"),
                 "--out", str(tmp_path / "ev")]) == EXIT_OK
    rows = (tmp_path / "ev" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 4 and json.loads(rows[-1])["id"] == "__aggregate__"
    empty = tmp_path / "none"
    main(["synth", "--config", str(cfg_file), "--count", "0", "--out", str(empty)])
    assert main(["eval", str(ckpt), "--data", str(empty / "manifest.jsonl"),
                 "--out", str(tmp_path / "ev2")]) == EXIT_OK
    assert (tmp_path / "ev2" / "metrics.jsonl").read_text() == ""


def test_exit_codes(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file)]) == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=red\n")
    assert main(["synth", "--config", str(bad)]) == EXIT_USAGE
    assert main(["fuse", str(tmp_path / "missing.ckpt"), "a.png", "b.png"]) == EXIT_RUNTIME
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all")
    assert main(["fuse", str(junk), "a.png", "b.png"]) == EXIT_RUNTIME
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    table = (tmp_path / "gradcheck.txt").read_text()
    assert "FAIL" not in table and "masked_mi" in table


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mgdn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
