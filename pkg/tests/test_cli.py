import json
import subprocess
import sys

import numpy as np
import pytest

from occlang.cli import build_parser, main
from occlang.query import read_label_image, read_mesh_ply, read_ply, write_label_image

TINY = ["--iterations", "4", "--rays-per-batch", "64", "--samples-per-ray", "8", "--levels", "2",
        "--base-divisions", "6", "--hidden", "8", "--log-every", "1", "--checkpoint-every", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "synth"
    assert main(["synth-gen", "--out", str(root), "--frames", "3", "--size", "16", "--sem-dim", "6",
                 "--gt-density", "200"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY]) == 0
    return out


def test_synth_gen_layout(dataset):
    for sub in ("poses", "rgb", "depth", "feat"):
        assert len(list((dataset / sub).iterdir())) == 3
    for name in ("intrinsics.txt", "prompts.json", "bounds.txt", "gt/surface.ply"):
        assert (dataset / name).exists()
    verts, _ = read_ply(dataset / "gt" / "surface.ply")
    assert set(np.unique(verts["label"])) <= {0, 1, 2, 3}


def test_train_outputs(trained):
    assert (trained / "checkpoint.ooc").exists() and (trained / "checkpoint.state").exists()
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[-1])
    assert set(rec) == {"step", "rgb", "depth", "occ", "fs", "sg", "total"}
    man = json.loads((trained / "manifest.json").read_text())
    assert man["config"]["iterations"] == 4 and man["config"]["field"]["hidden"] == [8, 8]
    assert man["ablations"] == {"no_huber": False, "no_scp": False, "no_bce": False}
    assert len(man["artifacts"]["periodic_checkpoints"]) == 4
    for key in ("wall_clock_s", "peak_memory_mb", "seed", "loss_weights"):
        assert key in man


def test_config_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 3, "seed": 9, "loss": {"truncation": 0.03}, "field": {"n_levels": 3}}))
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--config", str(cfg), *TINY]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["iterations"] == 4  # flag beats file
    assert man["config"]["seed"] == 9  # file beats default
    assert man["config"]["field"]["n_levels"] == 2
    assert man["loss_weights"]["truncation"] == 0.03


def test_ablation_flags_recorded(dataset, tmp_path):
    out = tmp_path / "abl"
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY, "--no-huber", "--no-scp", "--no-bce"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["ablations"] == {"no_huber": True, "no_scp": True, "no_bce": True}
    assert man["loss_weights"]["robust"] is False
    assert man["loss_weights"]["occ"] == 0.0 and man["loss_weights"]["fs"] == 0.0
    assert man["config"]["scp_enabled"] is False and man["scp_active"] is False


def test_train_determinism(dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / name), *TINY, "--seed", "7"]) == 0
    for f in ("checkpoint.ooc", "checkpoint.state", "train_log.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_dataset(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 3
    assert "intrinsics" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 4


def test_extract(trained, tmp_path, capsys):
    out = tmp_path / "mesh.ply"
    assert main(["extract-mesh", "--checkpoint", str(trained / "checkpoint"), "--out", str(out), "--voxel-size", "0.2"]) == 0
    read_mesh_ply(out)
    assert main(["extract-mesh", "--checkpoint", str(trained / "checkpoint"), "--out", str(out), "--threshold", "1.5"]) == 2
    assert "(0, 1)" in capsys.readouterr().err
    assert main(["extract-mesh", "--checkpoint", str(tmp_path / "missing"), "--out", str(out)]) == 4


def test_extract_defaults():
    args = build_parser().parse_args(["extract-mesh", "--checkpoint", "c", "--out", "m.ply"])
    assert args.voxel_size == 0.01 and args.threshold == 0.5


def test_query_labels_and_similarity(trained, dataset, tmp_path, capsys):
    out = tmp_path / "labels.ply"
    rc = main(["query", "--checkpoint", str(trained / "checkpoint.ooc"), "--prompts", str(dataset / "prompts.json"),
               "--out", str(out), "--voxel-size", "0.2", "--threshold", "0.05"])
    assert rc == 0
    verts, _ = read_ply(out)
    assert set(np.unique(verts["label"])) <= {0, 1, 2, 3}
    prompts = json.loads((dataset / "prompts.json").read_text())
    emb = tmp_path / "e.json"
    emb.write_text(json.dumps(prompts[2]["embedding"]))
    sim = tmp_path / "sim.ply"
    assert main(["query", "--checkpoint", str(trained / "checkpoint"), "--embedding", str(emb), "--out", str(sim),
                 "--voxel-size", "0.2", "--threshold", "0.05"]) == 0
    v, _ = read_ply(sim)
    assert np.all(np.abs(v["value"]) <= 1)
    emb.write_text(json.dumps([1.0, 0.0, 0.0]))
    assert main(["query", "--checkpoint", str(trained / "checkpoint"), "--embedding", str(emb), "--out", str(sim)]) == 3
    err = capsys.readouterr().err
    assert "3" in err and "6" in err
    assert main(["query", "--checkpoint", str(tmp_path / "none"), "--embedding", str(emb), "--out", str(sim)]) == 4


def test_segment_view(trained, dataset, tmp_path):
    out = tmp_path / "seg.png"
    args = ["segment-view", "--checkpoint", str(trained / "checkpoint"), "--prompts", str(dataset / "prompts.json"),
            "--pose", str(dataset / "poses" / "0000.txt"), "--intrinsics", str(dataset / "intrinsics.txt"),
            "--height", "8", "--width", "8", "--samples", "16", "--out", str(out)]
    assert main(args) == 0
    first = out.read_bytes()
    img = read_label_image(out)
    assert img.shape == (8, 8)
    assert main(args) == 0
    assert out.read_bytes() == first


def test_eval(dataset, tmp_path, capsys):
    gt = dataset / "gt" / "surface.ply"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt)]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["fscore"] == 1.0 and m["chamfer_l1"] == 0.0
    verts, _ = read_ply(gt)
    from occlang.query import write_point_cloud_ply

    far = tmp_path / "far.ply"
    write_point_cloud_ply(far, np.stack([verts["x"], verts["y"], verts["z"]], 1) + [0, 0, 10.0])
    assert main(["eval", "--pred", str(far), "--gt", str(gt)]) == 0
    assert json.loads(capsys.readouterr().out)["fscore"] == 0.0
    lab = tmp_path / "l.png"
    write_label_image(lab, np.array([[0, 1], [2, 3]]))
    assert main(["eval", "--pred", str(lab), "--gt", str(lab)]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["miou"] == 1.0


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and "train" in a.choices)
    assert set(sub.choices) == {"synth-gen", "train", "extract-mesh", "query", "segment-view", "eval"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)
    for flag in ("--no-huber", "--no-scp", "--no-bce", "--workers"):
        assert flag in sub.choices["train"].format_help() + parser.format_help()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "occlang", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "segment-view" in r.stdout
