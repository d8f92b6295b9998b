"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line (visible with `pytest -s` or on failure). Tolerances are
pinned here and nowhere else."""

import time
from itertools import permutations
from pathlib import Path

import numpy as np

from attnseg.cli import main
from attnseg.densecrf import CrfParams, initial_distribution, mean_field, refine
from attnseg.fusion import FusionConfig, background_map, fuse, propagate, to_mask
from attnseg.instance_assign import (
    assign_greedy,
    assign_hungarian,
    dominant_segment,
    foreground_region,
    segment_scores,
    spectral_cluster,
)
from attnseg.metrics import instance_accuracy, miou
from attnseg.synth_fixtures import InstanceSpec, RegionSpec, SceneSpec, make_fixture, make_instance_fixture
from attnseg import densecrf

from conftest import random_stochastic
from test_densecrf import two_color_image, flipped_scores, as_map
from test_fusion import matpow_oracle
from test_instance_assign import adjusted_rand_index, block_affinity


def report(name: str, ok: bool, detail: str = ""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name} {detail}"


def test_row_stochastic_preservation():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        tokens = int(rng.integers(1, 9))
        s = random_stochastic(rng, n, n)
        c = random_stochastic(rng, n, tokens)
        for order in (0, 1, 2, 3):
            sums = propagate(s, c, order).sum(axis=1, dtype=np.float64)
            worst = max(worst, float(np.abs(sums - 1.0).max()))
    elapsed = time.perf_counter() - start
    report(
        "row-stochastic preservation (200 pairs, orders 0-3)",
        worst <= 1e-4 and elapsed < 10.0,
        f"worst |sum-1| {worst:.2e}, {elapsed:.1f}s",
    )


def test_propagation_oracle():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 33))
        tokens = int(rng.integers(1, 9))
        order = int(rng.integers(0, 4))
        s = random_stochastic(rng, n, n)
        c = random_stochastic(rng, n, tokens)
        diff = np.abs(propagate(s, c, order) - matpow_oracle(s, c, order)).max()
        worst = max(worst, float(diff))
    report("propagation matches triple-loop oracle (50 cases)", worst <= 1e-5, f"max abs {worst:.2e}")


def _quadrant_regions(grid: int, count: int) -> list[RegionSpec]:
    half = grid // 2
    quads = [(0, 0), (1, 0), (0, 1), (1, 1)]
    regions = []
    for idx in range(count):
        qx, qy = quads[idx]
        x0 = qx * half + 1
        y0 = qy * half + 1
        regions.append(RegionSpec(f"obj{idx}", idx + 1, x0, y0, x0 + half - 2, y0 + half - 2))
    return regions


def test_noiseless_fixture_recovery():
    ok = True
    detail = []
    for grid in (8, 16, 32):
        for count in (1, 2, 3, 4):
            spec = SceneSpec(
                name="exact",
                grid_width=grid,
                grid_height=grid,
                regions=_quadrant_regions(grid, count),
            )
            fx = make_fixture(spec, seed=0)
            mask = to_mask(fuse(fx.bundle, fx.plan), grid, grid)
            rep = miou([mask], [fx.gt_mask], class_ids=list(range(count + 1)))
            exact = all(v == 1.0 for v in rep.per_class_iou.values())
            ok &= exact
            if not exact:
                detail.append(f"grid {grid} classes {count}: {rep.per_class_iou}")
    report("noiseless fixtures recover IoU 1.0 (grids 8/16/32, 1-4 classes)", ok, "; ".join(detail))


def test_propagated_fusion_beats_raw_cross_direction():
    start = time.perf_counter()
    m0, m2 = [], []
    spec = SceneSpec(
        name="jit",
        grid_width=16,
        grid_height=16,
        regions=[
            RegionSpec("cat", 1, 1, 1, 7, 7, alpha=0.5),
            RegionSpec("dog", 2, 9, 2, 15, 8, alpha=0.5),
            RegionSpec("bus", 3, 3, 10, 12, 15, alpha=0.5),
        ],
        beta=0.9,
        jitter=0.5,
        layer_grids=[(4, 16, 16)],
    )
    for seed in range(20):
        fx = make_fixture(spec, seed=seed)
        for order, sink in ((0, m0), (2, m2)):
            cfg = FusionConfig(order=order, cross_layer_ids=(4,))
            mask = to_mask(fuse(fx.bundle, fx.plan, cfg), 16, 16)
            sink.append(miou([mask], [fx.gt_mask], class_ids=[0, 1, 2, 3]).miou)
    elapsed = time.perf_counter() - start
    gap = float(np.mean(m2) - np.mean(m0))
    report(
        "propagated fusion beats raw cross by >= 0.02 mIoU (20 seeds)",
        gap >= 0.02 and elapsed < 60.0,
        f"mean order0 {np.mean(m0):.4f}, order2 {np.mean(m2):.4f}, gap {gap:.4f}, {elapsed:.1f}s",
    )


def test_background_formula():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 5))
        stack = rng.uniform(size=(k, 6, 7)).astype(np.float32)
        thr = float(rng.uniform(0.25, 1.5))
        power = float(rng.uniform(0.5, 3.0))
        got = background_map(stack, thr, power)
        for y in range(6):
            for x in range(7):
                m = max(float(stack[c, y, x]) for c in range(k))
                worst = max(worst, abs(float(got[y, x]) - max(thr - m, 0.0) ** power))
    # thr=1, power=2 must reduce to the squared complement bitwise.
    stack = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    reduced = background_map(stack, 1.0, 2.0)
    direct = ((1.0 - stack.astype(np.float64).max(axis=0)) ** 2).astype(np.float32)
    exact = np.array_equal(reduced, direct)
    report(
        "background equals clamped (thr - max)^power; thr=1,power=2 exact",
        worst <= 1e-6 and exact,
        f"scalar-oracle max err {worst:.2e}, bitwise reduction {exact}",
    )


def test_crf_validity():
    img = two_color_image()
    flips = ((4, 3), (8, 5), (11, 2))
    data = flipped_scores(flips=flips)
    params = CrfParams()
    q0 = initial_distribution(data.reshape(2, -1), params.unary_epsilon)
    pos, rgb = densecrf._features(16, 16, img)
    sums = []
    _, _ = mean_field(q0, pos, rgb, params, on_iteration=lambda q: sums.append(float(np.abs(q.sum(axis=0) - 1.0).max())))
    normalized = len(sums) == 10 and max(sums) <= 1e-5

    zero = CrfParams(w_appearance=0.0, w_smoothness=0.0)
    refined0 = refine(img, as_map(data), zero)
    ident = float(np.abs(refined0.data.reshape(2, -1) - initial_distribution(data.reshape(2, -1), zero.unary_epsilon)).max())

    refined = refine(img, as_map(data), params)
    labels = refined.data.argmax(axis=0)
    want = np.zeros((16, 16), int)
    want[:, 8:] = 1
    corrected = bool(np.array_equal(labels, want))
    report(
        "CRF: Q normalized every iteration, zero-weight identity, 3 flips corrected",
        normalized and ident <= 1e-6 and corrected,
        f"max |sum-1| {max(sums):.1e}, identity err {ident:.1e}, corrected {corrected}",
    )


def test_hungarian_optimality():
    rng = np.random.default_rng(99)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 8))
        # Dyadic scores keep float sums exact, so "equals brute force" is literal.
        scores = rng.integers(0, 1024, size=(n, m)).astype(np.float64) / 1024.0
        total = sum(e.score for e in assign_hungarian(scores).entries)
        perms = np.array(list(permutations(range(m), n)))
        best = scores[np.arange(n)[None, :], perms].sum(axis=1).max()
        if total != best:
            ok = False
            break
    report("hungarian total equals brute-force permutation max (1000 cases, n<=7)", ok)


def test_spectral_recovery():
    ok = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        sizes = [int(rng.integers(3, 9)) for _ in range(k)]
        a, truth = block_affinity(rng, sizes, inter=0.01)
        part = spectral_cluster(a, width=sum(sizes), height=1, k=k, seed=seed)
        if adjusted_rand_index(part.segment_ids.ravel(), truth) != 1.0:
            ok = False
            break
    report("spectral clustering recovers blocks exactly (ARI 1.0, 50 seeds)", ok)


def _instance_accuracy_for(instances, jitter=0.0, seed=5):
    spec = SceneSpec(
        name="mugs",
        grid_width=16,
        grid_height=16,
        regions=[RegionSpec("left", 1, 1, 4, 7, 12), RegionSpec("right", 2, 9, 4, 15, 12)],
        beta=1.0 if jitter == 0 else 0.9,
        jitter=jitter,
    )
    ifx = make_instance_fixture(spec, "mug", instances, seed=seed)
    cfg = FusionConfig()
    scene_sc = fuse(ifx.scene.bundle, ifx.scene.plan, cfg)
    part = spectral_cluster(ifx.scene.bundle.self_map, 16, 16, k=3, seed=seed)
    part = part.with_foreground(foreground_region(scene_sc.data[1], scene_sc.data[0]))
    maps = [
        fuse(fx.bundle, fx.plan, cfg, channel_kinds=("identifier",)).data[1]
        for fx in ifx.instances
    ]
    scores = segment_scores(part, maps)
    gt = {
        label: dominant_segment(part, ifx.region_masks[ifx.gt_regions[label]])
        for label in ifx.instance_labels
    }
    return instance_accuracy(
        [assign_greedy(scores, ifx.instance_labels), assign_hungarian(scores, ifx.instance_labels)],
        [gt, gt],
    )


def test_instance_pipeline():
    clean = _instance_accuracy_for(
        [InstanceSpec("<new1>", {"left": 1.0}), InstanceSpec("<new2>", {"right": 1.0})]
    )
    collision = _instance_accuracy_for(
        [
            InstanceSpec("<new1>", {"left": 1.0}),
            InstanceSpec("<new2>", {"left": 0.55, "right": 0.45}, gt_region="right"),
        ]
    )
    report(
        "instance pipeline: clean -> (1.0, 1.0); greedy collision -> (0.5, 1.0)",
        clean == (1.0, 1.0) and collision == (0.5, 1.0),
        f"clean {clean}, collision {collision}",
    )


def test_miou_oracle():
    gt = np.zeros((4, 4), np.uint8)
    gt[:, 2:] = 1
    pred = gt.copy()
    pred[0, 2] = 0
    pred[1, 2] = 0
    from attnseg.tensor_store import LabelMask

    def mask_of(a):
        return LabelMask(labels=a, uncertain=np.zeros_like(a, dtype=bool))

    rep = miou([mask_of(pred)], [mask_of(gt)], class_ids=[0, 1])
    toy = rep.per_class_iou[0] == 8 / 10 and rep.per_class_iou[1] == 6 / 8
    rng = np.random.default_rng(3)
    identity = True
    for _ in range(10):
        m = mask_of(rng.integers(0, 5, size=(9, 7)).astype(np.uint8))
        identity &= miou([m], [m], class_ids=[0, 1, 2, 3, 4]).miou == 1.0
    report("mIoU matches hand-counted confusion; self-evaluation is 1.0", toy and identity)


def test_cli_determinism(tmp_path):
    cfg = tmp_path / "scene.cfg"
    cfg.write_text(
        "name = demo\ngrid = 16x16\nbeta = 0.9\njitter = 0.5\nalpha = 0.5\n"
        "layers = 4:16x16\nregion.cat = 1 : 1,1,7,7\nregion.dog = 2 : 9,2,15,8\n"
    )

    def run(root: Path):
        assert main(["synth", "--spec", str(cfg), "--seed", "11", "--samples", "2", "--out", str(root / "fx")]) == 0
        assert (
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
            == 0
        )

    run(tmp_path / "a")
    run(tmp_path / "b")
    files_a = {p.relative_to(tmp_path / "a"): p for p in sorted((tmp_path / "a").rglob("*")) if p.is_file()}
    files_b = {p.relative_to(tmp_path / "b"): p for p in sorted((tmp_path / "b").rglob("*")) if p.is_file()}
    same = files_a.keys() == files_b.keys() and all(
        files_a[k].read_bytes() == files_b[k].read_bytes() for k in files_a
    )
    report("identical CLI reruns produce byte-identical outputs", same)
