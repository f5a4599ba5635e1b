import json

import numpy as np
import pytest

from pagmil_lab.checkpoint import save_model
from pagmil_lab.cl_harness import read_ppm
from pagmil_lab.cli import main
from pagmil_lab.mil_core import ModelState
from pagmil_lab.synth_data import SlideSpec, generate_bag, save_bag

SMALL = """\
epochs: 1
data:
  grid_size: 8
  feature_dim: 6
  blob_size_range: [3, 6]
  max_blobs: 2
  n_isolated_noise: 1
  thumb_size: 4
  n_train: 10
  n_test: 10
  class_counts: [2, 3, 2, 3]
  offset_norms: [4.0, 3.8, 3.6, 3.4]
selector:
  B: 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def files_of(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# --- generate --------------------------------------------------------------------

def test_generate_writes_bags_and_manifest(tmp_path, small_cfg, capsys):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(small_cfg), "--out", str(out)]) == 0
    bags = list(out.rglob("bag_*.txt"))
    assert len(bags) == 80 and (out / "manifest.json").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert [len(t["train"]) + len(t["test"]) for t in manifest["tasks"]] == [20] * 4
    assert "wrote 80 bag files" in capsys.readouterr().out


def test_generate_rerun_is_byte_identical(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(small_cfg), "--out", str(a), "--seed", "4"]) == 0
    assert main(["generate", "--config", str(small_cfg), "--out", str(b), "--seed", "4"]) == 0
    assert files_of(a) == files_of(b)


def test_generate_refuses_to_overwrite(tmp_path, small_cfg):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(small_cfg), "--out", str(out)]) == 0
    (out / "notes.txt").write_text("mine")
    assert main(["generate", "--config", str(small_cfg), "--out", str(out)]) == 1
    assert main(["generate", "--config", str(small_cfg), "--out", str(out), "--force"]) == 0
    assert (out / "notes.txt").read_text() == "mine"


def test_bad_grid_size_names_field(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("data:\n  grid_size: 2\n")
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "bad.yaml:2" in err and "data.grid_size" in err
    assert not (tmp_path / "o").exists()


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "nonsense", "--out", str(tmp_path)])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


# --- train -------------------------------------------------------------------------

def test_train_writes_run_directory_and_reproduces(tmp_path, small_cfg):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--out", str(run), "--seed", "1", "--quiet"]) == 0
    for name in ("config.yaml", "report.json", "report.txt", "log.txt", "checkpoint.ckpt"):
        assert (run / name).is_file(), name
    assert len(list((run / "heatmaps").glob("*.ppm"))) > 0
    assert "wall clock" in (run / "log.txt").read_text()

    again = tmp_path / "again"
    assert main(["train", "--config", str(small_cfg), "--out", str(again), "--seed", "1", "--quiet"]) == 0
    echo = tmp_path / "echo"
    assert main(["train", "--config", str(run / "config.yaml"), "--out", str(echo), "--quiet"]) == 0
    for other in (again, echo):
        assert (other / "report.json").read_bytes() == (run / "report.json").read_bytes()
        assert (other / "checkpoint.ckpt").read_bytes() == (run / "checkpoint.ckpt").read_bytes()

    assert main(["train", "--config", str(small_cfg), "--out", str(run), "--quiet"]) == 1


def test_flags_override_config(tmp_path, small_cfg):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--out", str(run), "--quiet", "--method", "separate-upper-bound",
                 "--seed", "7", "--inter-variant", "eq2-verbatim"]) == 0
    rep = json.loads((run / "report.json").read_text())
    assert rep["method"] == "separate-upper-bound" and rep["seed"] == 7
    assert rep["config"]["prompt"]["inter_variant"] == "eq2-verbatim" and rep["config"]["epochs"] == 1
    assert len(list(run.glob("checkpoint-task*.ckpt"))) == 4


def test_train_from_generated_data_matches_inline(tmp_path, small_cfg):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(small_cfg), "--out", str(data), "--seed", "2"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(small_cfg), "--seed", "2", "--out", str(a), "--quiet",
                 "--method", "naive-baseline"]) == 0
    assert main(["train", "--config", str(small_cfg), "--seed", "2", "--out", str(b), "--quiet",
                 "--method", "naive-baseline", "--data", str(data)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_train_rejects_mismatched_dataset(tmp_path, small_cfg):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(small_cfg), "--out", str(data)]) == 0
    other = tmp_path / "other.yaml"
    other.write_text(SMALL.replace("n_train: 10", "n_train: 12"))
    assert main(["train", "--config", str(other), "--out", str(tmp_path / "r"), "--data", str(data), "--quiet"]) == 1


# --- check ---------------------------------------------------------------------

def test_check_passes_and_writes_table(tmp_path, capsys):
    assert main(["check", "--points", "10", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "max_error" in out and "FAIL" not in out
    assert (tmp_path / "check.txt").read_text() == out


def test_check_negative_control_exits_three(capsys):
    assert main(["check", "--points", "5", "--perturb", "grad: smooth SVM loss"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_check_unknown_perturbation_is_usage_error():
    assert main(["check", "--points", "5", "--perturb", "no such check"]) == 1


# --- heatmap ---------------------------------------------------------------------

@pytest.fixture
def bag_and_model(tmp_path):
    bag = generate_bag(SlideSpec(grid_size=8, feature_dim=5, n_tumor_blobs=1, blob_size_range=(4, 6), label=1, seed=3))
    save_bag(bag, tmp_path / "bag.txt")
    m = ModelState.init(5, 8, hidden=4, seed=0)
    m.attn.w[:] = 0.0   # an untrained scorer with zero output weights
    save_model(m, tmp_path / "m.ckpt")
    return tmp_path / "bag.txt", tmp_path / "m.ckpt"


def test_heatmap_untrained_uniform(tmp_path, bag_and_model, capsys):
    bag, ck = bag_and_model
    out = tmp_path / "h.ppm"
    assert main(["heatmap", "--checkpoint", str(ck), "--bag", str(bag), "--out", str(out)]) == 0
    img = read_ppm(out)
    assert img.shape == (8, 8, 3) and np.all(img == img[0, 0])
    assert main(["heatmap", "--checkpoint", str(ck), "--bag", str(bag), "--out", str(out)]) == 1


def test_heatmap_dimension_mismatch(tmp_path, bag_and_model, capsys):
    bag, _ = bag_and_model
    save_model(ModelState.init(7, 8, seed=0), tmp_path / "m7.ckpt")
    assert main(["heatmap", "--checkpoint", str(tmp_path / "m7.ckpt"), "--bag", str(bag),
                 "--out", str(tmp_path / "x.ppm")]) == 2
    err = capsys.readouterr().err
    assert "7" in err and "5" in err


def test_heatmap_missing_files(tmp_path, bag_and_model):
    bag, ck = bag_and_model
    assert main(["heatmap", "--checkpoint", str(tmp_path / "none.ckpt"), "--bag", str(bag),
                 "--out", str(tmp_path / "x.ppm")]) == 2
    assert main(["heatmap", "--checkpoint", str(ck), "--bag", str(tmp_path / "none.txt"),
                 "--out", str(tmp_path / "x.ppm")]) == 2
