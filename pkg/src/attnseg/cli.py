"""Command-line pipeline: synth, plan, fuse, crf, assign, eval.

Subcommands map 1:1 onto the library operations. Every run prints its
resolved configuration to stderr as `key = value` lines so outputs are
reproducible from the log alone. Config files (--config, `key = value`
format) are overridden by flags. Exit codes: 0 success, 1 validation error,
2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import densecrf, fusion, instance_assign, metrics, synth_fixtures
from .configfile import read_kv
from .prompt_plan import (
    compose_query,
    load_backgrounds,
    load_synonyms,
    plan_from_manifest,
    validate_manifest,
)
from .tensor_store import BundleError, LabelMask, read_bundle, read_mask, write_bundle, write_mask


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad flags, not argparse's default 2
        raise _UsageError(message)


def _header(values: dict[str, str]) -> None:
    for key in sorted(values):
        print(f"# {key} = {values[key]}", file=sys.stderr)


def _load_kv(args) -> dict[str, str]:
    return read_kv(args.config) if getattr(args, "config", None) else {}


def _fusion_config(args) -> fusion.FusionConfig:
    cfg = fusion.FusionConfig.from_mapping(_load_kv(args))
    if args.order is not None:
        cfg.order = args.order
    if args.cross_layers is not None:
        cfg.cross_layer_ids = tuple(int(x) for x in args.cross_layers.replace(",", " ").split())
    if args.bg_thr is not None:
        cfg.bg_threshold = args.bg_thr
    if args.bg_power is not None:
        cfg.bg_power = args.bg_power
    if args.band is not None:
        cfg.uncertainty_band = args.band
    cfg.validate()
    return cfg


def _crf_params(args) -> densecrf.CrfParams:
    params = densecrf.CrfParams.from_mapping(_load_kv(args))
    for name in (
        "iterations",
        "w_appearance",
        "sxy_appearance",
        "srgb",
        "w_smoothness",
        "sxy_smoothness",
        "unary_epsilon",
        "pixel_cap",
    ):
        value = getattr(args, f"crf_{name}")
        if value is not None:
            setattr(params, name, value)
    params.validate()
    return params


def _plan_inputs(args):
    synonyms = {} if args.no_synonyms else load_synonyms(args.synonyms)
    return synonyms


# --- synth -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec, instance_section = synth_fixtures.load_scene_spec(args.spec)
    out = Path(args.out)
    _header({"spec": args.spec, "seed": str(args.seed), "samples": str(args.samples), "out": str(out)})
    if instance_section is not None:
        category, instances = instance_section
        ifx = synth_fixtures.make_instance_fixture(spec, category, instances, seed=args.seed)
        write_bundle(ifx.scene.bundle, out / "scene")
        write_mask(ifx.scene.gt_mask, out / "gt.png")
        for idx, fx in enumerate(ifx.instances):
            write_bundle(fx.bundle, out / f"inst{idx}")
        regions = np.zeros(
            (spec.grid_height, spec.grid_width), dtype=np.uint8
        )
        for i, r in enumerate(sorted(ifx.region_masks)):
            regions[ifx.region_masks[r]] = i + 1
        Image.fromarray(regions, mode="L").save(out / "regions.png", format="PNG")
        meta = {
            "category": category,
            "instance_labels": ifx.instance_labels,
            "instance_dirs": [f"inst{i}" for i in range(len(ifx.instances))],
            "gt_regions": ifx.gt_regions,
            "region_order": sorted(ifx.region_masks),
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return 0
    for sample in range(args.samples):
        fx = synth_fixtures.make_fixture(spec, seed=args.seed, sample_index=sample)
        dest = out / "bundle" if args.samples == 1 else out / f"sample_{sample}"
        write_bundle(fx.bundle, dest)
        if sample == 0:
            write_mask(fx.gt_mask, out / "gt.png")
    return 0


# --- plan ------------------------------------------------------------------


def cmd_plan(args) -> int:
    synonyms = _plan_inputs(args)
    backgrounds = load_backgrounds(args.backgrounds) if args.backgrounds else []
    identifiers = None
    if args.identifier:
        identifiers = {}
        for item in args.identifier:
            cls, _, word = item.partition("=")
            if not word:
                raise ValueError(f"--identifier expects class=word, got {item!r}")
            identifiers[cls] = word
    if args.validate_bundle:
        bundle = read_bundle(args.validate_bundle)
        if args.classes:
            plan = compose_query(
                args.classes.split(","), synonyms, backgrounds, identifiers
            )
        else:
            plan = plan_from_manifest(bundle.token_manifest, synonyms)
        _header({"sentence": plan.sentence, "bundle": args.validate_bundle})
        mismatches = validate_manifest(plan, bundle.token_manifest)
        if mismatches:
            for m in mismatches:
                print(str(m))
            return 1
        print("manifest matches plan")
        return 0
    if not args.classes:
        raise ValueError("--classes is required unless --validate-bundle is given")
    plan = compose_query(args.classes.split(","), synonyms, backgrounds, identifiers)
    _header({"classes": args.classes})
    print(plan.sentence)
    for part in plan.parts:
        print(f"{part.kind:>12}  {part.label}  -> {part.surface!r}")
    return 0


# --- fuse ------------------------------------------------------------------


def _fuse_one(bundle_dir: str, cfg: fusion.FusionConfig, synonyms, kinds) -> tuple[str, fusion.CorrelationMap, int, int]:
    bundle = read_bundle(bundle_dir)
    plan = plan_from_manifest(bundle.token_manifest, synonyms)
    sc = fusion.fuse(bundle, plan, cfg, channel_kinds=kinds)
    return bundle.image_id, sc, bundle.image_width, bundle.image_height


def _write_fused(out: Path, sc: fusion.CorrelationMap, iw: int, ih: int, band: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fusion.save_map(sc, out / "sc")
    write_mask(fusion.to_mask(sc, iw, ih, band), out / "mask.png")


def cmd_fuse(args) -> int:
    cfg = _fusion_config(args)
    synonyms = _plan_inputs(args)
    kinds = ("identifier",) if args.identifier_channels else ("category",)
    header = dict(cfg.as_kv())
    header["channel_kinds"] = ",".join(kinds)
    header["ensemble_bg"] = args.ensemble_bg
    _header(header)
    out = Path(args.out)
    if not args.samples and not args.bundle:
        raise ValueError("fuse needs --bundle or --samples")
    if args.samples and args.bundle:
        raise ValueError("--bundle and --samples are mutually exclusive")
    if args.samples:
        fused = [_fuse_one(d, cfg, synonyms, kinds) for d in args.samples]
        ids = {f[0] for f in fused}
        if len(ids) > 1:
            raise ValueError(f"--samples bundles belong to different images: {sorted(ids)}")
        sc = fusion.ensemble(
            [f[1] for f in fused],
            recompute_background=args.ensemble_bg == "recompute",
            bg_threshold=cfg.bg_threshold,
            bg_power=cfg.bg_power,
        )
        _write_fused(out, sc, fused[0][2], fused[0][3], cfg.uncertainty_band)
        return 0
    if len(args.bundle) == 1:
        image_id, sc, iw, ih = _fuse_one(args.bundle[0], cfg, synonyms, kinds)
        _write_fused(out, sc, iw, ih, cfg.uncertainty_band)
        return 0

    def job(d):
        image_id, sc, iw, ih = _fuse_one(d, cfg, synonyms, kinds)
        _write_fused(out / image_id, sc, iw, ih, cfg.uncertainty_band)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        list(pool.map(job, args.bundle))
    return 0


# --- crf -------------------------------------------------------------------


def cmd_crf(args) -> int:
    params = _crf_params(args)
    band = args.band if args.band is not None else 0.05
    _header({**params.as_kv(), "band": repr(band), "image": args.image, "map": args.map})
    with Image.open(args.image) as im:
        image = np.asarray(im.convert("RGB"))
    sc = fusion.load_map(args.map)
    if sc.resolution_stage == fusion.GRID:
        sc = fusion.upsample_to_image(sc, image.shape[1], image.shape[0])
    refined = densecrf.refine(image, sc, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fusion.save_map(refined, out / "sc_refined")
    write_mask(densecrf.argmax_mask(refined, band), out / "mask.png")
    return 0


# --- assign ----------------------------------------------------------------


def cmd_assign(args) -> int:
    scene = read_bundle(args.scene)
    synonyms = _plan_inputs(args)
    cfg = _fusion_config(args)
    k = args.k if args.k is not None else len(args.instance) + 1
    _header(
        {
            **cfg.as_kv(),
            "scene": args.scene,
            "instances": ",".join(args.instance),
            "k": "auto" if args.auto_k else str(k),
            "seed": str(args.seed),
            "mode": args.mode,
        }
    )
    scene_plan = plan_from_manifest(scene.token_manifest, synonyms)
    scene_sc = fusion.fuse(scene, scene_plan, cfg)
    if len(scene_sc.channels) != 2:
        raise ValueError("assign expects a single-category scene query")
    if args.auto_k:
        k = instance_assign.eigengap_k(scene.self_map)
    part = instance_assign.spectral_cluster(
        scene.self_map, scene.self_width, scene.self_height, k=k, seed=args.seed
    )
    fg = instance_assign.foreground_region(scene_sc.data[1], scene_sc.data[0])
    part = part.with_foreground(fg)
    labels: list[str] = []
    maps: list[np.ndarray] = []
    for d in args.instance:
        bundle = read_bundle(d)
        plan = plan_from_manifest(bundle.token_manifest, synonyms)
        sc = fusion.fuse(bundle, plan, cfg, channel_kinds=("identifier",))
        labels.append(sc.channels[1][0])
        maps.append(sc.data[1])
    scores = instance_assign.segment_scores(part, maps)
    results = {}
    if args.mode in ("greedy", "both"):
        results["greedy"] = instance_assign.assign_greedy(scores, labels)
    if args.mode in ("hungarian", "both"):
        results["hungarian"] = instance_assign.assign_hungarian(scores, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg_mask = LabelMask(
        labels=part.segment_ids.astype(np.uint8),
        uncertain=~part.foreground_mask,
    )
    write_mask(seg_mask, out / "segments.png")
    payload = {
        "k": k,
        "seed": args.seed,
        "instance_labels": labels,
        "scores": scores.tolist(),
        "assignments": {
            mode: [
                {"label": e.label, "segments": list(e.segments), "score": e.score}
                for e in result.entries
            ]
            for mode, result in results.items()
        },
    }
    (out / "assignment.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


# --- eval ------------------------------------------------------------------


def _collect_masks(directory: Path) -> dict[str, Path]:
    masks = {}
    for p in sorted(directory.glob("*.png")):
        if p.name.endswith(".uncertain.png"):
            continue
        masks[p.name] = p
    if not masks:
        raise ValueError(f"no mask PNGs under {directory}")
    return masks


def cmd_eval(args) -> int:
    if args.assign:
        if not args.gt_assign:
            raise ValueError("--gt-assign is required with --assign")
        truth = json.loads(Path(args.gt_assign).read_text())
        results = []
        gt_list = []
        for path in args.assign:
            payload = json.loads(Path(path).read_text())
            for mode, entries in sorted(payload["assignments"].items()):
                results.append(
                    instance_assign.AssignmentResult(
                        entries=[
                            instance_assign.InstanceChoice(
                                label=e["label"],
                                segments=tuple(e["segments"]),
                                score=e["score"],
                            )
                            for e in entries
                        ],
                        mode=mode,
                    )
                )
                gt_list.append({k: int(v) for k, v in truth.items()})
        bf, af = metrics.instance_accuracy(results, gt_list)
        print(json.dumps({"bf_acc": bf, "af_acc": af}, indent=2, sort_keys=True))
        return 0
    if not args.pred or not args.gt:
        raise ValueError("--pred and --gt are required for mask evaluation")
    preds_by_name = _collect_masks(Path(args.pred))
    gts_by_name = _collect_masks(Path(args.gt))
    names = sorted(preds_by_name)
    if set(names) != set(gts_by_name):
        raise ValueError("prediction and ground-truth mask filenames do not match")
    preds = [read_mask(preds_by_name[n]) for n in names]
    gts = [read_mask(gts_by_name[n]) for n in names]
    if args.classes:
        class_ids = [int(x) for x in args.classes.replace(",", " ").split()]
    else:
        present: set[int] = set()
        for gt in gts:
            present.update(int(v) for v in np.unique(gt.labels))
        class_ids = sorted(present - {args.ignore})
    _header(
        {
            "pred": args.pred,
            "gt": args.gt,
            "classes": ",".join(str(c) for c in class_ids),
            "ignore": str(args.ignore),
        }
    )
    report = metrics.miou(preds, gts, class_ids, ignore_id=args.ignore)
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


# --- parser ----------------------------------------------------------------


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--order", type=int, default=None, help="self-attention propagation order")
    p.add_argument("--cross-layers", default=None, help="comma-separated cross layer ids")
    p.add_argument("--bg-thr", type=float, default=None, help="background threshold")
    p.add_argument("--bg-power", type=float, default=None, help="background power exponent")
    p.add_argument("--band", type=float, default=None, help="uncertainty band on the top-2 gap")


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synonyms", default=None, help="synonym table file (class = surface text)")
    p.add_argument("--no-synonyms", action="store_true", help="use raw class names")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic fixture bundles")
    p.add_argument("--spec", required=True, help="scene spec config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1, help="number of noise samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", help="compose a query sentence / validate a bundle manifest")
    p.add_argument("--classes", default=None, help="comma-separated class labels")
    p.add_argument("--backgrounds", default=None, help="background prompt file (one per line)")
    p.add_argument("--identifier", action="append", default=None, metavar="CLASS=WORD")
    p.add_argument("--validate-bundle", default=None, help="bundle dir to check against the plan")
    _add_plan_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fuse", help="fuse a bundle (or ensemble of samples) into masks")
    p.add_argument("--bundle", action="append", default=[], help="bundle dir (repeatable)")
    p.add_argument("--samples", nargs="+", default=None, help="sibling sample dirs to ensemble")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for multiple bundles")
    p.add_argument(
        "--ensemble-bg",
        choices=("mean", "recompute"),
        default="mean",
        help="average the background channel or re-derive it from averaged foregrounds",
    )
    p.add_argument(
        "--identifier-channels",
        action="store_true",
        help="fuse identifier spans instead of category spans",
    )
    _add_fusion_flags(p)
    _add_plan_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("crf", help="dense-CRF refinement of a fused map")
    p.add_argument("--image", required=True, help="RGB image file")
    p.add_argument("--map", required=True, help="map prefix written by fuse (…/sc)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--band", type=float, default=None)
    for name, cast in (
        ("iterations", int),
        ("w_appearance", float),
        ("sxy_appearance", float),
        ("srgb", float),
        ("w_smoothness", float),
        ("sxy_smoothness", float),
        ("unary_epsilon", float),
        ("pixel_cap", int),
    ):
        p.add_argument(f"--crf.{name}", dest=f"crf_{name}", type=cast, default=None)
    p.set_defaults(func=cmd_crf)

    p = sub.add_parser("assign", help="assign personalized instances to self-attention segments")
    p.add_argument("--scene", required=True, help="scene bundle dir")
    p.add_argument("--instance", action="append", required=True, help="identifier bundle dir")
    p.add_argument("--k", type=int, default=None, help="segment count (default: instances + 1)")
    p.add_argument("--auto-k", action="store_true", help="pick k by the largest eigengap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("greedy", "hungarian", "both"), default="both")
    p.add_argument("--out", required=True)
    _add_fusion_flags(p)
    _add_plan_flags(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("eval", help="mIoU over mask dirs, or instance accuracy over assignments")
    p.add_argument("--pred", default=None, help="predicted mask dir")
    p.add_argument("--gt", default=None, help="ground-truth mask dir")
    p.add_argument(
        "--classes",
        default=None,
        help="comma-separated class ids to evaluate (default: ids present in the ground truth)",
    )
    p.add_argument("--ignore", type=int, default=255)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--assign", nargs="+", default=None, help="assignment.json files")
    p.add_argument("--gt-assign", default=None, help="JSON {instance label: segment id}")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (BundleError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
