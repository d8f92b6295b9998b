import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from attnseg.cli import main
from attnseg.tensor_store import read_bundle, read_mask

SCENE_CFG = """
name = demo
grid = 16x16
beta = 0.9
jitter = 0.5
alpha = 0.5
layers = 4:16x16
region.cat = 1 : 1,1,7,7
region.dog = 2 : 9,2,15,8
"""

INSTANCE_CFG = """
name = mugs
grid = 16x16
beta = 1.0
jitter = 0.0
region.left = 1 : 1,4,7,12
region.right = 2 : 9,4,15,12
category = mug
instance.<new1> = left
instance.<new2> = left:0.55, right:0.45
gt.<new2> = right
"""


@pytest.fixture
def scene_cfg(tmp_path):
    p = tmp_path / "scene.cfg"
    p.write_text(SCENE_CFG)
    return p


@pytest.fixture
def instance_cfg(tmp_path):
    p = tmp_path / "inst.cfg"
    p.write_text(INSTANCE_CFG)
    return p


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_synth_fuse_eval_chain(tmp_path, scene_cfg, capsys):
    assert main(["synth", "--spec", str(scene_cfg), "--seed", "3", "--out", str(tmp_path / "fx")]) == 0
    bundle = read_bundle(tmp_path / "fx" / "bundle")
    assert bundle.image_id == "demo-s3"
    assert (
        main(
            [
                "fuse",
                "--bundle",
                str(tmp_path / "fx" / "bundle"),
                "--out",
                str(tmp_path / "fused"),
                "--order",
                "2",
                "--cross-layers",
                "4",
            ]
        )
        == 0
    )
    assert (tmp_path / "fused" / "mask.png").is_file()
    assert (tmp_path / "fused" / "sc.f32").is_file()
    (tmp_path / "pred").mkdir()
    (tmp_path / "gtd").mkdir()
    (tmp_path / "pred" / "demo.png").write_bytes((tmp_path / "fused" / "mask.png").read_bytes())
    (tmp_path / "gtd" / "demo.png").write_bytes((tmp_path / "fx" / "gt.png").read_bytes())
    assert (
        main(
            [
                "eval",
                "--pred",
                str(tmp_path / "pred"),
                "--gt",
                str(tmp_path / "gtd"),
                "--classes",
                "0,1,2",
                "--out",
                str(tmp_path / "report.json"),
            ]
        )
        == 0
    )
    out = capsys.readouterr().out
    assert "mIoU    1.0000" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["miou"] == 1.0


def test_eval_defaults_classes_to_ground_truth_ids(tmp_path, scene_cfg, capsys):
    main(["synth", "--spec", str(scene_cfg), "--seed", "4", "--out", str(tmp_path / "fx")])
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    for d in ("p", "g"):
        (tmp_path / d / "demo.png").write_bytes((tmp_path / "fx" / "gt.png").read_bytes())
    capsys.readouterr()
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g")]) == 0
    captured = capsys.readouterr()
    assert "mIoU    1.0000" in captured.out
    assert "# classes = 0,1,2" in captured.err


def test_invalid_order_flag_exits_1(tmp_path, scene_cfg, capsys):
    main(["synth", "--spec", str(scene_cfg), "--seed", "0", "--out", str(tmp_path / "fx")])
    code = main(
        ["fuse", "--bundle", str(tmp_path / "fx" / "bundle"), "--out", str(tmp_path / "o"), "--order", "-1"]
    )
    assert code == 1
    assert "order" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    assert main(["fuse", "--out", "x", "--nope"]) == 1
    assert "nope" in capsys.readouterr().err


def test_missing_spec_file_is_io_error(tmp_path):
    assert main(["synth", "--spec", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_missing_bundle_dir_is_validation_error(tmp_path, capsys):
    assert main(["fuse", "--bundle", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 1
    assert "manifest" in capsys.readouterr().err


def test_resolved_config_header_on_stderr(tmp_path, scene_cfg, capsys):
    main(["synth", "--spec", str(scene_cfg), "--seed", "1", "--out", str(tmp_path / "fx")])
    capsys.readouterr()
    main(["fuse", "--bundle", str(tmp_path / "fx" / "bundle"), "--out", str(tmp_path / "f"), "--order", "0"])
    err = capsys.readouterr().err
    assert "# order = 0" in err
    assert "# bg_thr = 1.0" in err


def test_plan_compose_and_validate(tmp_path, scene_cfg, capsys):
    assert main(["plan", "--classes", "bottle,chair,sofa", "--no-synonyms"]) == 0
    assert "a photo including bottle, chair, and sofa." in capsys.readouterr().out
    main(["synth", "--spec", str(scene_cfg), "--seed", "0", "--out", str(tmp_path / "fx")])
    capsys.readouterr()
    assert main(["plan", "--validate-bundle", str(tmp_path / "fx" / "bundle"), "--no-synonyms"]) == 0
    assert "matches" in capsys.readouterr().out
    assert (
        main(
            [
                "plan",
                "--classes",
                "cat,sofa",
                "--no-synonyms",
                "--validate-bundle",
                str(tmp_path / "fx" / "bundle"),
            ]
        )
        == 1
    )


def test_multi_sample_ensemble(tmp_path, scene_cfg):
    main(["synth", "--spec", str(scene_cfg), "--seed", "2", "--samples", "3", "--out", str(tmp_path / "fx")])
    samples = [str(tmp_path / "fx" / f"sample_{i}") for i in range(3)]
    assert read_bundle(samples[1]).sample_index == 1
    assert (
        main(["fuse", "--samples", *samples, "--out", str(tmp_path / "ens"), "--cross-layers", "4"]) == 0
    )
    mask = read_mask(tmp_path / "ens" / "mask.png")
    gt = read_mask(tmp_path / "fx" / "gt.png")
    assert np.array_equal(mask.labels, gt.labels)


def test_parallel_multi_bundle_fuse(tmp_path, scene_cfg):
    for seed in (1, 2):
        main(["synth", "--spec", str(scene_cfg), "--seed", str(seed), "--out", str(tmp_path / f"fx{seed}")])
    # Two distinct images fan out to per-image output dirs.
    code = main(
        [
            "fuse",
            "--bundle",
            str(tmp_path / "fx1" / "bundle"),
            "--bundle",
            str(tmp_path / "fx2" / "bundle"),
            "--out",
            str(tmp_path / "batch"),
            "--jobs",
            "2",
            "--cross-layers",
            "4",
        ]
    )
    assert code == 0
    assert (tmp_path / "batch" / "demo-s1" / "mask.png").is_file()
    assert (tmp_path / "batch" / "demo-s2" / "mask.png").is_file()


def test_crf_subcommand(tmp_path, scene_cfg):
    main(["synth", "--spec", str(scene_cfg), "--seed", "3", "--out", str(tmp_path / "fx")])
    main(["fuse", "--bundle", str(tmp_path / "fx" / "bundle"), "--out", str(tmp_path / "f"), "--cross-layers", "4"])
    img = np.zeros((16, 16, 3), np.uint8)
    img[:8, :8] = (200, 40, 40)
    img[8:, 8:] = (40, 200, 40)
    Image.fromarray(img).save(tmp_path / "img.png")
    code = main(
        [
            "crf",
            "--image",
            str(tmp_path / "img.png"),
            "--map",
            str(tmp_path / "f" / "sc"),
            "--out",
            str(tmp_path / "crf"),
            "--crf.iterations",
            "3",
        ]
    )
    assert code == 0
    assert (tmp_path / "crf" / "mask.png").is_file()
    assert (tmp_path / "crf" / "sc_refined.f32").is_file()


def test_assign_and_eval_assign(tmp_path, instance_cfg, capsys):
    main(["synth", "--spec", str(instance_cfg), "--seed", "5", "--out", str(tmp_path / "ifx")])
    code = main(
        [
            "assign",
            "--scene",
            str(tmp_path / "ifx" / "scene"),
            "--instance",
            str(tmp_path / "ifx" / "inst0"),
            "--instance",
            str(tmp_path / "ifx" / "inst1"),
            "--seed",
            "5",
            "--out",
            str(tmp_path / "as"),
        ]
    )
    assert code == 0
    payload = json.loads((tmp_path / "as" / "assignment.json").read_text())
    assert payload["k"] == 3
    greedy = {e["label"]: e["segments"] for e in payload["assignments"]["greedy"]}
    hungarian = {e["label"]: e["segments"] for e in payload["assignments"]["hungarian"]}
    assert greedy["<new1>"] == greedy["<new2>"]  # the designed collision
    assert hungarian["<new1>"] != hungarian["<new2>"]
    gt = {"<new1>": greedy["<new1>"][0], "<new2>": hungarian["<new2>"][0]}
    (tmp_path / "gt.json").write_text(json.dumps(gt))
    capsys.readouterr()
    code = main(
        [
            "eval",
            "--assign",
            str(tmp_path / "as" / "assignment.json"),
            "--gt-assign",
            str(tmp_path / "gt.json"),
        ]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"af_acc": 1.0, "bf_acc": 0.5}


def test_reruns_are_byte_identical(tmp_path, scene_cfg, instance_cfg):
    def run(root: Path):
        root.mkdir()
        main(["synth", "--spec", str(scene_cfg), "--seed", "7", "--samples", "2", "--out", str(root / "fx")])
        main(
            [
                "fuse",
                "--samples",
                str(root / "fx" / "sample_0"),
                str(root / "fx" / "sample_1"),
                "--out",
                str(root / "fused"),
                "--cross-layers",
                "4",
            ]
        )
        main(["synth", "--spec", str(instance_cfg), "--seed", "5", "--out", str(root / "ifx")])
        main(
            [
                "assign",
                "--scene",
                str(root / "ifx" / "scene"),
                "--instance",
                str(root / "ifx" / "inst0"),
                "--instance",
                str(root / "ifx" / "inst1"),
                "--seed",
                "5",
                "--out",
                str(root / "assign"),
            ]
        )

    run(tmp_path / "a")
    run(tmp_path / "b")
    a = tree_bytes(tmp_path / "a")
    b = tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between identical reruns"
