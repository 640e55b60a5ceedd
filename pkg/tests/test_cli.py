import csv
import json
import shutil

import numpy as np
import pytest

from layerdecomp.cli import main
from layerdecomp.model import ModelParams
from layerdecomp.stackio import load_stack, read_png

TINY_INI = """[model]
d_model = 32
n_heads = 2
n_blocks = 2
frame = 32
max_layers = 3

[train]
steps = 4
batch_size = 2
warmup = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "3", "--seed", "1", "--frame", "32"]) == 0
    (root / "tiny.ini").write_text(TINY_INI)
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.ini"),
                 "--out", str(root / "model.ckpt"), "--progress-every", "0"]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_data_writes_manifests_and_echoes_config(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 1, "--seed", 4)
    assert code == 0 and out.startswith("config ")
    assert json.loads(out.splitlines()[0][len("config "):])["seed"] == 4
    stack = load_stack(tmp_path / "d" / "stack_00000")
    assert (tmp_path / "d" / "stack_00000" / "composite.png").exists()
    assert (tmp_path / "d" / "stack_00000" / "background.png").exists()
    assert stack.frame == (64, 64)


def test_train_writes_loadable_checkpoint_and_log(workspace):
    params, meta, _ = ModelParams.load(workspace / "model.ckpt")
    assert params.config.d_model == 32 and meta["step"] == 4
    with open(workspace / "model.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert (workspace / "model.ckpt.config.json").exists()


def test_cli_resume_matches_single_run(workspace, tmp_path, capsys):
    data, ini = workspace / "data", workspace / "tiny.ini"
    assert run(capsys, "train", "--data", data, "--config", ini, "--out", tmp_path / "a.ckpt", "--steps", 2,
               "--log", tmp_path / "split.csv", "--progress-every", 0)[0] == 0
    assert run(capsys, "train", "--data", data, "--resume", tmp_path / "a.ckpt", "--out", tmp_path / "b.ckpt",
               "--steps", 2, "--log", tmp_path / "split.csv", "--progress-every", 0)[0] == 0
    strip = lambda p: [line.split(",")[:2] for line in p.read_text().splitlines()]
    assert strip(tmp_path / "split.csv") == strip(workspace / "model.csv")


def test_decompose_outputs_and_determinism(workspace, tmp_path, capsys):
    boxes = tmp_path / "boxes.json"
    boxes.write_text("[[4, 4, 20, 20]]")
    image = workspace / "data" / "stack_00000" / "composite.png"
    args = ["decompose", "--ckpt", workspace / "model.ckpt", "--image", image, "--boxes", boxes,
            "--prompt", "red circle", "--steps", 3, "--seed", 2]
    assert run(capsys, *args, "--out", tmp_path / "o1")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "o2")[0] == 0
    for name in ("background.png", "layer_0.png", "recomposite.png", "composite_pred.png", "manifest.json",
                 "result.json"):
        assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()
    assert read_png(tmp_path / "o1" / "layer_0.png", 4).shape == (32, 32, 4)


def test_decompose_with_no_boxes_gives_background_only(workspace, tmp_path, capsys):
    boxes = tmp_path / "boxes.json"
    boxes.write_text("[]")
    image = workspace / "data" / "stack_00000" / "composite.png"
    code, _, _ = run(capsys, "decompose", "--ckpt", workspace / "model.ckpt", "--image", image, "--boxes", boxes,
                     "--steps", 2, "--out", tmp_path / "o")
    assert code == 0
    assert load_stack(tmp_path / "o").foregrounds == []


def test_malformed_boxes_exit_1_naming_the_box(workspace, tmp_path, capsys):
    boxes = tmp_path / "boxes.json"
    boxes.write_text("[[0, 0, 8, 8], [9, 4, 3, 20]]")
    image = workspace / "data" / "stack_00000" / "composite.png"
    code, _, err = run(capsys, "decompose", "--ckpt", workspace / "model.ckpt", "--image", image,
                       "--boxes", boxes, "--out", tmp_path / "o")
    assert code == 1 and "box 1" in err and "[9, 4, 3, 20]" in err


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "composite", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "x.png")
    assert code == 2 and "io error" in err


def test_numeric_failure_exits_3(workspace, tmp_path, capsys):
    params, meta, extra = ModelParams.load(workspace / "model.ckpt")
    params["patch_out.b"].data[:] = np.nan
    params.save(tmp_path / "bad.ckpt", meta, extra)
    boxes = tmp_path / "boxes.json"
    boxes.write_text("[]")
    image = workspace / "data" / "stack_00000" / "composite.png"
    code, _, err = run(capsys, "decompose", "--ckpt", tmp_path / "bad.ckpt", "--image", image, "--boxes", boxes,
                       "--steps", 2, "--out", tmp_path / "o")
    assert code == 3 and "step 0" in err


def test_eval_self_check_is_perfect(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--gt", workspace / "data", "--self-check", "--out", tmp_path / "r")
    assert code == 0
    with open(tmp_path / "r" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(float(r["unified_score"]) == 0.0 for r in rows)
    aggregate = json.loads((tmp_path / "r" / "aggregate.json").read_text())
    assert aggregate["unified_score"] == 0.0 and abs(aggregate["frechet"]["value"]) < 1e-6


def test_eval_dtw_handles_mismatched_layer_counts(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    shutil.copytree(workspace / "data", pred)
    target = next(p for p in sorted(pred.glob("stack_*")) if (p / "layer_0.png").exists())
    manifest = json.loads((target / "manifest.json").read_text())
    manifest["layers"] = []
    (target / "manifest.json").write_text(json.dumps(manifest))
    code, _, err = run(capsys, "eval", "--pred", pred, "--gt", workspace / "data", "--out", tmp_path / "r1")
    assert code == 1 and "DTW" in err
    code, _, _ = run(capsys, "eval", "--pred", pred, "--gt", workspace / "data", "--dtw", "--out", tmp_path / "r2")
    assert code == 0
    report = json.loads((tmp_path / "r2" / f"{target.name}.json").read_text())
    assert report["alignment"] is not None


def test_eval_skips_missing_predictions(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    shutil.copytree(workspace / "data", pred)
    index = json.loads((pred / "index.json").read_text())
    index["stacks"] = index["stacks"][:1]
    (pred / "index.json").write_text(json.dumps(index))
    code, _, err = run(capsys, "eval", "--pred", pred, "--gt", workspace / "data", "--out", tmp_path / "r")
    assert code == 0 and err.count("skipped") == 2
    index["stacks"] = []
    (pred / "index.json").write_text(json.dumps(index))
    code, _, err = run(capsys, "eval", "--pred", pred, "--gt", workspace / "data", "--out", tmp_path / "r2")
    assert code == 2


def test_unified_command_reproduces_reported_value(capsys):
    code, out, _ = run(capsys, "unified", "--rgb-l1", 0.0474, "--soft-iou", 0.7771)
    assert code == 0 and abs(float(out) - 0.1352) <= 5e-5


def test_help_documents_boxes_schema(capsys):
    with pytest.raises(SystemExit):
        main(["decompose", "--help"])
    assert "x_l, y_l, x_r, y_r" in capsys.readouterr().out
