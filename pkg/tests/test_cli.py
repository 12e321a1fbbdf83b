import re
import subprocess
import sys

import numpy as np
import pytest

from nlunet import data as dp
from nlunet.cli import DEFAULTS, build_parser, main
from nlunet.metrics import SegmentationReport
from nlunet.network import NetworkConfig, build_network, count_parameters, make_ablation

ERROR_LINE = re.compile(r"^error: code=\w+ exit=\d detail=.+$")


def _stderr_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0]), err
    return err[0]


def test_params_prints_one_integer(capsys):
    assert main(["params", "--model", "full", "--base-width", "32"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == str(count_parameters(build_network(make_ablation("full", NetworkConfig(base_width=32)), 0)))


def test_unknown_subcommand_and_flag_exit_2():
    assert main(["frobnicate"]) == 2
    assert main(["params", "--depth", "3"]) == 2


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmodel = 2\ncolour = blue\n")
    assert main(["params", "--config", str(cfg)]) == 2
    assert "colour" in _stderr_line(capsys)


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model = 1\nbase_width = 4\n")
    assert main(["params", "--config", str(cfg)]) == 0
    from_file = int(capsys.readouterr().out)
    assert from_file == count_parameters(build_network(make_ablation("1", NetworkConfig(base_width=4)), 0))
    assert main(["params", "--config", str(cfg), "--base-width", "8"]) == 0
    assert int(capsys.readouterr().out) == count_parameters(build_network(make_ablation("1", NetworkConfig(base_width=8)), 0))


def test_bad_config_value_exit_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("base_width = wide\n")
    assert main(["params", "--config", str(cfg)]) == 2
    _stderr_line(capsys)


@pytest.fixture
def volumes(tmp_path):
    assert main(["gen-data", "--run-dir", str(tmp_path / "a"), "--dims", "16,16,16", "--seed", "5"]) == 0
    assert main(["gen-data", "--run-dir", str(tmp_path / "b"), "--dims", "16,16,20"]) == 0
    return tmp_path


def test_gen_data_writes_volumes_and_config(volumes):
    a = volumes / "a"
    assert (a / "config.txt").read_text().splitlines()[:2] == ["command=gen-data", "seed=5"]
    vol = dp.read_volume(a / "phantom_image.hdr")
    ref, _ = dp.generate_phantom(5, (16, 16, 16))
    assert vol.data.tobytes() == ref.data.tobytes()


def test_eval_mismatched_dims_exit_3(volumes, capsys):
    code = main(
        ["eval", "--run-dir", str(volumes / "e"), "--pred", str(volumes / "a/phantom_labels.hdr"),
         "--truth", str(volumes / "b/phantom_labels.hdr")]
    )
    assert code == 3
    line = _stderr_line(capsys)
    assert "(16, 16, 16)" in line and "(16, 16, 20)" in line


def test_eval_missing_file_exit_3(tmp_path, capsys):
    assert main(["eval", "--run-dir", str(tmp_path), "--pred", str(tmp_path / "x.hdr"), "--truth", str(tmp_path / "y.hdr")]) == 3
    _stderr_line(capsys)


def test_train_infer_eval_pipeline(volumes, capsys):
    img, lab = str(volumes / "a/phantom_image.hdr"), str(volumes / "a/phantom_labels.hdr")
    run = volumes / "t"
    args = ["train", "--run-dir", str(run), "--image", img, "--labels", lab, "--steps", "3",
            "--base-width", "4", "--patch-size", "8", "--batch-size", "2"]
    assert main(args) == 0
    assert len((run / "loss.log").read_text().splitlines()) == 3
    assert (run / "model.json").exists() and (run / "model.bin").exists()
    assert "steps=3" in (run / "config.txt").read_text()

    assert main(["infer", "--run-dir", str(volumes / "i"), "--checkpoint", str(run / "model"), "--image", img,
                 "--patch-size", "8", "--overlap-step", "4"]) == 0
    probs = dp.read_volume(volumes / "i/probabilities.hdr")
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1, atol=1e-5)

    capsys.readouterr()
    assert main(["eval", "--run-dir", str(volumes / "e"), "--pred", str(volumes / "i/labels.hdr"), "--truth", lab]) == 0
    report = SegmentationReport.from_text(capsys.readouterr().out)
    assert [c.name for c in report.classes] == ["CSF", "GM", "WM"]
    assert (volumes / "e/report.txt").exists()


def test_train_without_inputs_exit_2(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path)]) == 2
    assert "--image" in _stderr_line(capsys)


def test_gradcheck_subset_passes(capsys, monkeypatch):
    from nlunet import gradcheck

    subset = {k: gradcheck.CHECKS[k] for k in ("matmul", "softmax", "relu6")}
    monkeypatch.setattr(gradcheck, "CHECKS", subset)
    assert main(["gradcheck", "--seed", "0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines] == list(subset)


def test_gradcheck_threshold_failure_exit_4(capsys, monkeypatch):
    from nlunet import gradcheck

    monkeypatch.setattr(gradcheck, "CHECKS", {"matmul": gradcheck.CHECKS["matmul"]})
    assert main(["gradcheck", "--threshold", "0"]) == 4
    assert "code=numeric" in _stderr_line(capsys)


def test_default_run_dir_is_timestamp_and_seed(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--dims", "8,8,8", "--seed", "9"]) == 0
    (run,) = list(tmp_path.iterdir())
    assert re.fullmatch(r"\d{8}-\d{6}_seed9", run.name)


def test_help_lists_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == set(DEFAULTS)
    for name, defaults in DEFAULTS.items():
        text = sub[name].format_help()
        for key in defaults:
            assert "--" + key.replace("_", "-") in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "nlunet.cli", "params", "--model", "1", "--base-width", "4"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip().isdigit()


def test_ablate_and_sweep_tables(volumes, capsys):
    img, lab = str(volumes / "a/phantom_image.hdr"), str(volumes / "a/phantom_labels.hdr")
    common = ["--image", img, "--labels", lab, "--eval-image", img, "--eval-labels", lab,
              "--steps", "2", "--base-width", "4", "--patch-size", "8", "--batch-size", "2"]
    assert main(["ablate", "--run-dir", str(volumes / "ab"), "--models", "1,full"] + common) == 0
    rows = (volumes / "ab/ablation.tsv").read_text().splitlines()
    assert rows[0].startswith("model\tparams\tdice_CSF")
    assert [r.split("\t")[0] for r in rows[1:]] == ["Model1", "full"]

    assert main(["sweep", "--run-dir", str(volumes / "sw"), "--axis", "overlap", "--values", "8,4"] + common) == 0
    table = (volumes / "sw/sweep.tsv").read_text().splitlines()
    assert [r.split("\t")[:2] for r in table[1:]] == [["8", "8"], ["4", "27"]]
    assert main(["sweep", "--run-dir", str(volumes / "sw2"), "--axis", "patch_size", "--values", "8,17"] + common) == 2
