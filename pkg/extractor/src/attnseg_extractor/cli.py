"""Extractor CLI: dump attention bundles for an image + label set."""

from __future__ import annotations

import argparse
import sys

from attnseg.prompt_plan import compose_query, load_backgrounds, load_synonyms

from .extract import DEFAULT_CROSS_LAYERS, DEFAULT_SELF_LAYER, DEFAULT_TIMESTEP, extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="attnseg-extract", description=__doc__)
    parser.add_argument("--image", required=True)
    parser.add_argument("--classes", required=True, help="comma-separated class labels")
    parser.add_argument("--identifier", action="append", default=[], metavar="CLASS=WORD")
    parser.add_argument("--backgrounds", default=None, help="background prompt file")
    parser.add_argument("--no-backgrounds", action="store_true")
    parser.add_argument("--synonyms", default=None, help="synonym table file")
    parser.add_argument("--no-synonyms", action="store_true")
    parser.add_argument("--t", type=int, default=DEFAULT_TIMESTEP)
    parser.add_argument("--samples", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cross-layers", default=",".join(map(str, DEFAULT_CROSS_LAYERS)))
    parser.add_argument("--self-layer", type=int, default=DEFAULT_SELF_LAYER)
    parser.add_argument("--backend", choices=("tiny", "sd"), default="sd")
    parser.add_argument("--model", default=None, help="checkpoint dir for the sd backend")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        if args.backend == "tiny":
            from .tiny_backend import TinyBackend

            backend = TinyBackend(model_seed=args.seed)
        else:
            if not args.model:
                raise ValueError("--model is required for the sd backend")
            from .sd_backend import StableDiffusionBackend

            backend = StableDiffusionBackend(args.model, device=args.device)
        synonyms = {} if args.no_synonyms else load_synonyms(args.synonyms)
        backgrounds = [] if args.no_backgrounds else (
            load_backgrounds(args.backgrounds) if args.backgrounds else []
        )
        identifiers = {}
        for item in args.identifier:
            cls, _, word = item.partition("=")
            if not word:
                raise ValueError(f"--identifier expects CLASS=WORD, got {item!r}")
            identifiers[cls] = word
        plan = compose_query(
            args.classes.split(","), synonyms, backgrounds, identifiers or None
        )
        print(f"# prompt = {plan.sentence}", file=sys.stderr)
        dirs = extract(
            args.image,
            plan,
            args.out,
            backend,
            t=args.t,
            samples=args.samples,
            seed=args.seed,
            cross_layers=tuple(int(x) for x in args.cross_layers.split(",")),
            self_layer=args.self_layer,
        )
    except (ValueError, KeyError, ImportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    for d in dirs:
        print(d)
    return 0


if __name__ == "__main__":
    sys.exit(main())
