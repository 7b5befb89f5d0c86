"""Command-line interface: subcommands, exit codes, and artifacts.

Everything runs in-process through cli.run(argv) so exit codes and
stdout/stderr can be asserted directly.
"""

import os

import numpy as np
import pytest

from vq360 import cli
from vq360 import engine as eng
from vq360 import gradcheck as gradcheck_mod
from vq360.engine import Parameter, Tensor


TRAIN_SETTINGS = (
    "channels=4\n"
    "blocks_per_stage=1,1,1\n"
    "reduction=2\n"
    "embed_channels=2\n"
    "batch_size=2\n"
    "clip_count=2\n"
    "frame_interval=3\n"
    "iterations=2\n"
    "seed=1\n"
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset plus one finished training run."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert cli.run([
        "synth", "--out", str(data_dir), "--seed", "3", "--contents", "3",
        "--frames", "14", "--height", "16", "--width", "32",
        "--levels", "2", "--holdout-contents", "1",
    ]) == 0
    manifest = data_dir / "manifest.txt"
    assert manifest.exists()

    run_dir = root / "run"
    config = root / "run.cfg"
    config.write_text(
        TRAIN_SETTINGS + f"manifest={manifest}\nout={run_dir}\n"
    )
    assert cli.run(["train", "--config", str(config)]) == 0
    return {
        "root": root,
        "manifest": str(manifest),
        "config": str(config),
        "run_dir": str(run_dir),
        "checkpoint": str(run_dir / "model.ckpt"),
    }


def test_train_writes_logs_and_checkpoint(workspace, capsys):
    run_dir = workspace["run_dir"]
    for name in ("train_log.txt", "timing_log.txt", "config_effective.txt", "model.ckpt"):
        assert os.path.exists(os.path.join(run_dir, name))
    log = open(os.path.join(run_dir, "train_log.txt")).read().splitlines()
    assert log[0].startswith("# config ")
    assert len(log) == 3


def test_train_stdout_reports_progress(workspace, tmp_path, capsys):
    out = tmp_path / "run2"
    assert cli.run([
        "train", "--config", workspace["config"],
        "--out", str(out), "--seed", "4",
    ]) == 0
    stdout = capsys.readouterr().out
    assert "finished 2 iterations, final loss " in stdout
    assert "seed=4" in stdout
    assert f"checkpoint {out / 'model.ckpt'}" in stdout


def test_train_same_seed_reruns_byte_identical(workspace, tmp_path):
    first = open(os.path.join(workspace["run_dir"], "train_log.txt"), "rb").read()
    out = tmp_path / "again"
    assert cli.run(["train", "--config", workspace["config"], "--out", str(out)]) == 0
    second = open(out / "train_log.txt", "rb").read()
    assert first == second


def test_train_rejects_unknown_config_key(workspace, tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text(f"manifest={workspace['manifest']}\ncolour=blue\n")
    assert cli.run(["train", "--config", str(config)]) == 2
    assert "unknown config key 'colour'" in capsys.readouterr().err


def test_train_rejects_malformed_value(workspace, tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text(f"manifest={workspace['manifest']}\niterations=three\n")
    assert cli.run(["train", "--config", str(config)]) == 2
    assert "'iterations'" in capsys.readouterr().err


def test_train_without_manifest_is_a_config_error(tmp_path, capsys):
    config = tmp_path / "bare.cfg"
    config.write_text("iterations=1\n")
    assert cli.run(["train", "--config", str(config)]) == 2
    assert "needs a manifest" in capsys.readouterr().err


def test_train_on_too_short_videos_exits_3(tmp_path, capsys):
    data_dir = tmp_path / "short"
    assert cli.run([
        "synth", "--out", str(data_dir), "--contents", "2",
        "--frames", "6", "--height", "16", "--width", "32", "--levels", "2",
    ]) == 0
    config = tmp_path / "run.cfg"
    config.write_text(
        TRAIN_SETTINGS + f"manifest={data_dir / 'manifest.txt'}\n"
    )
    assert cli.run(["train", "--config", str(config)]) == 3
    err = capsys.readouterr().err
    assert "'c00_l0'" in err and "needs at least" in err


def test_score_prints_one_line_per_video(workspace, tmp_path, capsys):
    out = tmp_path / "scores"
    assert cli.run([
        "score", "--checkpoint", workspace["checkpoint"],
        "--manifest", workspace["manifest"], "--split", "all",
        "--clip-count", "2", "--frame-interval", "3", "--out", str(out),
    ]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6
    for line in lines:
        vid, value = line.split()
        assert vid.startswith("c") and "_l" in vid
        whole, frac = value.lstrip("-").split(".")
        assert len(frac) == 6
    assert (out / "scores.txt").read_text().splitlines() == lines


def test_score_at_double_precision(workspace, capsys):
    assert cli.run([
        "score", "--checkpoint", workspace["checkpoint"],
        "--manifest", workspace["manifest"], "--split", "test",
        "--clip-count", "2", "--frame-interval", "3", "--precision", "64",
    ]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_score_missing_checkpoint_exits_2(workspace, capsys):
    assert cli.run([
        "score", "--checkpoint", "/nonexistent/model.ckpt",
        "--manifest", workspace["manifest"],
    ]) == 2
    assert "cannot read checkpoint" in capsys.readouterr().err


def test_evaluate_reports_metrics(workspace, tmp_path, capsys):
    out = tmp_path / "eval"
    assert cli.run([
        "evaluate", "--checkpoint", workspace["checkpoint"],
        "--manifest", workspace["manifest"], "--split", "all",
        "--clip-count", "2", "--frame-interval", "3", "--out", str(out),
    ]) == 0
    stdout = capsys.readouterr().out
    assert "videos: 6" in stdout
    for name in ("plcc:", "srocc:", "krocc:", "rmse:", "mae:"):
        assert name in stdout
    assert (out / "report.txt").exists()
    scatter = (out / "scatter.txt").read_text().splitlines()
    assert scatter[0] == "# predicted fitted subjective"
    assert len(scatter) == 7


def test_evaluate_single_video_notes_undefined_correlations(workspace, tmp_path, capsys):
    lines = open(workspace["manifest"]).read().splitlines()
    solo = tmp_path / "solo.txt"
    solo.write_text(lines[0].replace("path=", f"path={os.path.dirname(workspace['manifest'])}{os.sep}") + "\n")
    assert cli.run([
        "evaluate", "--checkpoint", workspace["checkpoint"],
        "--manifest", str(solo), "--split", "all",
        "--clip-count", "2", "--frame-interval", "3",
    ]) == 0
    stdout = capsys.readouterr().out
    assert "videos: 1" in stdout
    assert "plcc: undefined" in stdout
    assert "rmse: " in stdout


def test_split_without_entries_is_a_config_error(workspace, tmp_path, capsys):
    data_dir = tmp_path / "train_only"
    assert cli.run([
        "synth", "--out", str(data_dir), "--contents", "1",
        "--frames", "8", "--height", "16", "--width", "32", "--levels", "2",
    ]) == 0
    assert cli.run([
        "score", "--checkpoint", workspace["checkpoint"],
        "--manifest", str(data_dir / "manifest.txt"), "--split", "test",
    ]) == 2
    assert "no entries with split=test" in capsys.readouterr().err


def test_gradcheck_scope_passes(capsys):
    assert cli.run(["gradcheck", "--scope", "add"]) == 0
    assert "1/1 gradient checks passed" in capsys.readouterr().out


def test_gradcheck_flags_a_wrong_gradient(monkeypatch, capsys):
    """A forward pass that hides an op from the tape must fail the audit."""
    def sabotaged(rng):
        p = Parameter("w", rng.standard_normal(5))
        def forward():
            detached = Tensor(p.data.copy())
            return eng.mul(detached, detached)
        return forward, [p]

    monkeypatch.setitem(gradcheck_mod.CASES, "add", sabotaged)
    assert cli.run(["gradcheck", "--scope", "add"]) == 1
    assert "0/1 gradient checks passed" in capsys.readouterr().out


def test_gradcheck_unknown_scope(capsys):
    assert cli.run(["gradcheck", "--scope", "warp_drive"]) == 2
    assert "warp_drive" in capsys.readouterr().err


def test_synth_validates_extents(tmp_path, capsys):
    assert cli.run([
        "synth", "--out", str(tmp_path / "x"), "--contents", "1",
        "--frames", "4", "--height", "20", "--width", "32", "--levels", "2",
    ]) == 2
    assert "multiples of 8" in capsys.readouterr().err
