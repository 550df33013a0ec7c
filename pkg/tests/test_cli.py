"""End-to-end command-line behaviour: commands, artifacts, and exit codes.

A session-scoped fixture generates one small dataset and drives all three
training stages through ``main()`` exactly as a user would, so later tests
can exercise eval/render/attmaps against real artifacts.
"""

import numpy as np
import pytest

from poseforge import gradcheck
from poseforge.checkpoint import load_checkpoint
from poseforge.cli import build_parser, main
from poseforge.config import SCHEMA
from poseforge.data import load_dataset, write_pose_file
from poseforge.training import build_regressor, save_stage1_checkpoint

from conftest import small_run_config

SMALL_SET = [
    "--set", "d_model=16",
    "--set", "height=32",
    "--set", "width=32",
    "--set", "field_pe=2",
    "--set", "field_hidden=16",
    "--set", "field_layers=2",
    "--set", "n_samples=8",
    "--set", "ray_batch=32",
    "--set", "render_stride=8",
    "--set", "split_ratio=0.0",
    "--set", "early_stop=0",
]

GEN_ARGS = ["--seed", "7", "--classes", "3", "--views", "4", "--height", "32", "--width", "32"]


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """Dataset plus all three stages, driven through the CLI."""
    root = tmp_path_factory.mktemp("cli_run")
    data = root / "data"
    out = root / "out"
    assert main(["gen", *GEN_ARGS, "--out", str(data)]) == 0
    assert main([
        "train", "--stage", "1", "--out", str(out), "--data", str(data),
        *SMALL_SET, "--set", "stage1_epochs=2",
    ]) == 0
    assert main([
        "train", "--stage", "2", "--out", str(out), "--data", str(data),
        *SMALL_SET, "--set", "stage2_steps=2",
    ]) == 0
    assert main([
        "train", "--stage", "3", "--out", str(out), "--data", str(data),
        *SMALL_SET, "--set", "stage3_steps=1",
    ]) == 0
    return data, out


# -- usage errors (exit 1) -------------------------------------------------------


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert main(["train"]) == 1
    err = capsys.readouterr().err
    assert "error:" in err


def test_set_without_value(tmp_path, capsys):
    assert main(["train", "--stage", "1", "--out", str(tmp_path), "--set", "novalue"]) == 1
    assert "--set expects key=value" in capsys.readouterr().err


def test_set_unknown_key(tmp_path, capsys):
    assert main(["train", "--stage", "1", "--out", str(tmp_path), "--set", "bogus=1"]) == 1
    assert "unknown config key 'bogus'" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main([
        "train", "--stage", "1", "--out", str(tmp_path), "--config", str(tmp_path / "no.cfg"),
    ]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_train_without_data_dir(tmp_path, capsys):
    assert main(["train", "--stage", "1", "--out", str(tmp_path)]) == 1
    assert "pass --data or set data_dir" in capsys.readouterr().err


def test_gradcheck_unknown_module(capsys):
    assert main(["gradcheck", "--module", "bogus"]) == 1
    err = capsys.readouterr().err
    assert "unknown gradcheck module 'bogus'" in err
    assert "losses" in err  # the error lists what is available


def test_gen_invalid_resolution(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--height", "30", "--width", "32"]) == 1
    assert "divisible by 32" in capsys.readouterr().err


# -- data errors (exit 2) ---------------------------------------------------------


def test_eval_on_missing_dataset(tmp_path, capsys):
    assert main([
        "eval", "--model", str(tmp_path / "m.pfck"), "--data", str(tmp_path / "nodata"),
        "--report", str(tmp_path / "r.txt"),
    ]) == 2
    assert "no manifest.txt" in capsys.readouterr().err


# -- numeric errors (exit 3) -------------------------------------------------------


def test_gradcheck_failure_exit_code(capsys):
    """A deliberately wrong gradient registered into the suite trips exit 3."""

    @gradcheck.register("deliberately-wrong", "losses", 1e-4)
    def _bad() -> float:
        return 1.0  # relative error far above any tolerance

    try:
        assert main(["gradcheck", "--module", "losses"]) == 3
        out, err = capsys.readouterr()
        assert "deliberately-wrong" in out and "FAIL" in out
        assert "suite(s) failed" in err
    finally:
        gradcheck._REGISTRY[:] = [r for r in gradcheck._REGISTRY if r[0] != "deliberately-wrong"]


# -- state errors (exit 4) ----------------------------------------------------------


def test_stage3_without_prior_stages(cli_run, tmp_path, capsys):
    data, _ = cli_run
    empty_out = tmp_path / "fresh"
    assert main([
        "train", "--stage", "3", "--out", str(empty_out), "--data", str(data), *SMALL_SET,
    ]) == 4
    err = capsys.readouterr().err
    assert "no stage-1 checkpoint" in err
    assert f"run `poseforge train --stage 1 --out {empty_out}` first" in err


def test_stage3_without_field_checkpoint(cli_run, tmp_path, capsys):
    import shutil

    data, out = cli_run
    partial = tmp_path / "partial"
    partial.mkdir()
    shutil.copy(out / "stage1_best.pfck", partial / "stage1_best.pfck")
    assert main([
        "train", "--stage", "3", "--out", str(partial), "--data", str(data), *SMALL_SET,
    ]) == 4
    assert "no stage-2 field checkpoint" in capsys.readouterr().err


def test_eval_running_stats_before_any_training(cli_run, tmp_path, capsys):
    """A never-trained model has no running statistics to evaluate with."""
    data, _ = cli_run
    cfg = small_run_config()
    model, loss_state = build_regressor(cfg)
    ckpt = tmp_path / "untrained.pfck"
    save_stage1_checkpoint(ckpt, model, loss_state, epoch=0)
    assert main([
        "eval", "--model", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r.txt"),
        "--split", "all", "--bn", "running", *SMALL_SET,
    ]) == 4
    assert "statistics" in capsys.readouterr().err


# -- gen ---------------------------------------------------------------------------


def test_gen_writes_loadable_dataset(cli_run):
    data, _ = cli_run
    train, val = load_dataset(data, split_ratio=0.0)
    assert len(train) == 4
    assert train.n_classes == 3
    assert (data / "manifest.txt").exists()
    assert (data / "poses.txt").exists()


def test_gen_is_bit_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", *GEN_ARGS, "--out", str(a)]) == 0
    assert main(["gen", *GEN_ARGS, "--out", str(b)]) == 0
    for rel in ["manifest.txt", "poses.txt", "images/view_0000.ppm", "labels/view_0003.pgm"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# -- train artifacts ------------------------------------------------------------------


def test_cli_training_artifacts(cli_run):
    _, out = cli_run
    for name in [
        "stage1_best.pfck", "stage1_last.pfck", "stage1_metrics.csv",
        "stage2_field.pfck", "stage2_last.pfck", "stage2_metrics.csv",
        "stage3_model.pfck", "stage3_last.pfck", "stage3_metrics.csv",
    ]:
        assert (out / name).exists(), name
    blocks = load_checkpoint(out / "stage3_model.pfck")
    assert any(k.startswith("model.param.former.") for k in blocks)


# -- eval -----------------------------------------------------------------------------


def test_eval_writes_report_and_trajectory(cli_run, tmp_path, capsys):
    data, out = cli_run
    report = tmp_path / "report.txt"
    export = tmp_path / "traj"
    code = main([
        "eval", "--model", str(out / "stage1_best.pfck"), "--data", str(data),
        "--report", str(report), "--split", "all", "--bn", "batch",
        "--export-dir", str(export), *SMALL_SET,
    ])
    assert code == 0
    text = report.read_text()
    assert text.startswith("# per-scene medians")
    lines = text.strip().split("\n")
    assert lines[-1].startswith("average\t4\t")
    assert capsys.readouterr().out.strip().endswith(lines[-1])
    assert (export / "pred_poses.txt").exists()
    assert (export / "gt_poses.txt").exists()
    csv_lines = (export / "errors.csv").read_text().strip().split("\n")
    assert csv_lines[0] == "frame,translation_m,rotation_deg"
    assert len(csv_lines) == 5


def test_eval_rejects_unknown_split(cli_run, tmp_path, capsys):
    data, out = cli_run
    assert main([
        "eval", "--model", str(out / "stage1_best.pfck"), "--data", str(data),
        "--report", str(tmp_path / "r.txt"), "--split", "test",
    ]) == 1


# -- render ---------------------------------------------------------------------------


def test_render_from_field_checkpoint(cli_run, tmp_path, capsys):
    from poseforge.data import parse_pose_file, read_pgm, read_ppm

    data, out = cli_run
    poses = parse_pose_file(data / "poses.txt")[:1]
    pose_file = tmp_path / "one_pose.txt"
    write_pose_file(pose_file, poses)
    render_out = tmp_path / "renders"
    code = main([
        "render", "--field", str(out / "stage2_field.pfck"), "--pose-file", str(pose_file),
        "--data", str(data), "--out", str(render_out), "--stride", "8", *SMALL_SET,
    ])
    assert code == 0
    rgb = read_ppm(render_out / "render_0000_rgb.ppm")
    labels = read_pgm(render_out / "render_0000_labels.pgm")
    sem = read_ppm(render_out / "render_0000_sem.ppm")
    assert rgb.shape == (3, 4, 4)
    assert labels.shape == (4, 4)
    assert labels.max() < 3
    assert sem.shape == (3, 4, 4)
    assert "rendered 1 poses" in capsys.readouterr().out


# -- attention maps ----------------------------------------------------------------------


def test_attmaps_exports_per_scale_csv(cli_run, tmp_path, capsys):
    data, out = cli_run
    maps_out = tmp_path / "maps"
    code = main([
        "attmaps", "--model", str(out / "stage1_best.pfck"),
        "--image", str(data / "images" / "view_0000.ppm"),
        "--out", str(maps_out), *SMALL_SET,
    ])
    assert code == 0
    assert "wrote 3 attention map CSVs" in capsys.readouterr().out
    # Deepest scale of a 32x32 input is 1x1, so one attention logit row.
    deep = np.loadtxt(maps_out / "attn_scale3.csv", delimiter=",", ndmin=2)
    assert deep.shape == (1, 1)
    mid = np.loadtxt(maps_out / "attn_scale2.csv", delimiter=",", ndmin=2)
    assert mid.shape == (4, 4)  # 2x2 grid attends over itself
    fine = np.loadtxt(maps_out / "attn_scale1.csv", delimiter=",", ndmin=2)
    assert fine.shape == (16, 16)
    header = (maps_out / "attn_scale2.csv").read_text().split("\n")[0]
    assert "grid=2x2" in header


# -- gradcheck success / help -----------------------------------------------------------


def test_gradcheck_single_module_passes(capsys):
    assert main(["gradcheck", "--module", "losses"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert "suites passed" in out


def test_help_lists_every_config_key():
    text = build_parser().format_help()
    for key in SCHEMA:
        assert key.name in text, key.name
