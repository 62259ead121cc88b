"""Command-line surface.

Subcommands: groups (class-group table from mean areas), gen (run a
synthesis pass), refine (attention-guided refinement of one box), inspect
(dump tensors to an image grid), serve-mock (host the scripted backends
over the wire protocol), make-fixture (planted-scene corpora), and
conformance-transcript (write the golden request/response transcript).
Usage errors exit non-zero with a JSON message on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .dataset import (
    KNOWN_BOUNDARIES,
    build_class_groups,
    load_dataset,
    mean_area_per_class,
)
from .errors import XsynError
from .pipeline import PipelineConfig, make_backends, run_xsyn

log = logging.getLogger(__name__)


def _fail(message: str, code: int = 2) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 2 with a JSON message on stderr."""

    def error(self, message):
        print(json.dumps({"error": message, "usage": self.format_usage().strip()}),
              file=sys.stderr)
        raise SystemExit(2)


def _cmd_groups(args) -> int:
    ds = load_dataset(args.dataset)
    means = mean_area_per_class(ds)
    if args.preset:
        boundaries = KNOWN_BOUNDARIES[args.preset]
    else:
        boundaries = (args.boundaries[0], args.boundaries[1])
    table = build_class_groups(means, boundaries)
    table.save(args.out)
    print(json.dumps({"groups": [list(g) for g in table.groups],
                      "boundaries": list(table.boundaries),
                      "mean_areas": {k: round(v, 2) for k, v in sorted(means.items())}},
                     indent=2))
    return 0


def _cmd_gen(args) -> int:
    endpoint = args.endpoint or os.environ.get("XSYN_ENDPOINT")
    cfg = PipelineConfig(
        out_dir=args.out,
        mode=args.mode,
        alpha=args.alpha,
        divisions=args.divisions,
        iou_threshold=args.iou_threshold,
        min_box_ratio=args.min_box_ratio,
        steps=args.steps,
        guidance_scale=args.guidance,
        seed=args.seed,
        backend="remote" if endpoint else "mock",
        endpoint=endpoint,
        bom_period=args.period.replace("-", "_"),
        bom_space=args.space,
        point_strategy=args.points,
        topk=args.topk,
        groups_path=args.groups,
        boundaries=tuple(args.boundaries) if args.boundaries else None,
        workers=args.workers,
        debug_tensors=args.debug_tensors,
        mock_downscale=args.mock_downscale,
        mock_timesteps=args.mock_timesteps,
    )
    ds = load_dataset(args.dataset)
    backends = make_backends(cfg)
    out_ds, manifest = run_xsyn(ds, cfg, backends, Path(args.dataset).parent)
    print(json.dumps({
        "generated": manifest.stats["generated"],
        "skipped": manifest.stats["skipped"],
        "content_digest": manifest.content_digest,
        "out": args.out,
    }, indent=2))
    return 0


def _cmd_refine(args) -> int:
    from .backends.mock import ScriptedMockBackend
    from .pngio import load_png
    from .refine import (
        PromptSet,
        discriminative_region,
        mps_sample,
        refine_annotation,
        topk_sample,
    )

    image_path = Path(args.image)
    if image_path.suffix == ".xten":
        image = tensorio.read(image_path)
    else:
        image = load_png(image_path)
    attention = tensorio.read(args.attention)
    if attention.ndim != 2:
        return _fail(f"attention map must be rank 2, got {attention.shape}")
    box = tuple(args.box)
    segmenter = ScriptedMockBackend()
    region = discriminative_region(attention, box, segmenter)
    if args.points == "mps":
        points = mps_sample(region, attention, args.divisions)
    else:
        points = topk_sample(region, attention, args.topk)
    refined, fell_back = refine_annotation(
        image, PromptSet(tuple(points), box), segmenter
    )
    print(json.dumps({
        "refined_box": list(refined),
        "fallback": fell_back,
        "region_fallback": region.fallback,
        "points": len(points),
    }, indent=2))
    return 0


def _cmd_inspect(args) -> int:
    from .pngio import save_png

    arr = tensorio.read(args.input)
    if arr.ndim == 2:
        planes = [arr]
    elif arr.ndim == 3:
        planes = [arr[..., i] for i in range(arr.shape[2])]
    else:
        return _fail(f"cannot render rank-{arr.ndim} tensor")
    pad = 2
    h, w = planes[0].shape
    grid = np.zeros((h, (w + pad) * len(planes) - pad), dtype=np.float32)
    for i, plane in enumerate(planes):
        lo, hi = float(plane.min()), float(plane.max())
        normal = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
        grid[:, i * (w + pad) : i * (w + pad) + w] = normal
    save_png(args.out, grid)
    print(json.dumps({"out": args.out, "planes": len(planes), "dims": list(arr.shape)}))
    return 0


def _cmd_serve_mock(args) -> int:
    from .backends.mock import ScriptedMockBackend
    from .backends.server import serve

    backend = ScriptedMockBackend(args.downscale, args.timesteps)
    server = serve(backend, args.host, args.port)
    print(json.dumps({"serving": server.endpoint}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_make_fixture(args) -> int:
    from .fixtures import write_corpus

    ds = write_corpus(args.out, args.images, args.size, args.seed, args.items)
    print(json.dumps({
        "out": args.out,
        "images": len(ds.images),
        "annotations": len(ds.annotations),
    }))
    return 0


def _cmd_conformance_transcript(args) -> int:
    from .backends.conformance import record_transcript, write_transcript
    from .backends.mock import ScriptedMockBackend

    entries = record_transcript(ScriptedMockBackend())
    write_transcript(args.out, entries)
    print(json.dumps({"out": args.out, "entries": len(entries)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xsyn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("groups", help="compute mean areas and the class-group table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--boundaries", nargs=2, type=float, metavar=("A_LO", "A_HI"))
    p.add_argument("--preset", choices=sorted(KNOWN_BOUNDARIES))
    p.add_argument("--out", default="groups.json")
    p.set_defaults(func=_cmd_groups)

    p = sub.add_parser("gen", help="run a synthesis pass")
    p.add_argument("--dataset", required=True, help="annotations.json path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["mod", "add"], default="mod")
    p.add_argument("--alpha", type=float, default=0.3, help="occlusion blend weight")
    p.add_argument("--divisions", type=int, default=4, help="median sampling depth n")
    p.add_argument("--iou-threshold", type=float, default=0.2, dest="iou_threshold")
    p.add_argument("--min-box-ratio", type=float, default=0.001, dest="min_box_ratio")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--endpoint", help="remote backend host:port (or $XSYN_ENDPOINT)")
    p.add_argument("--period", choices=["final", "every-step"], default="final")
    p.add_argument("--space", choices=["latent", "pixel"], default="latent")
    p.add_argument("--points", choices=["mps", "topk"], default="mps")
    p.add_argument("--topk", type=int, default=15)
    p.add_argument("--groups", help="class-group table JSON (add mode)")
    p.add_argument("--boundaries", nargs=2, type=float, metavar=("A_LO", "A_HI"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--debug-tensors", action="store_true", dest="debug_tensors")
    p.add_argument("--mock-downscale", type=int, default=8, dest="mock_downscale")
    p.add_argument("--mock-timesteps", type=int, default=1000, dest="mock_timesteps")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("refine", help="refine one box from stored tensors")
    p.add_argument("--image", required=True, help="PNG or XTEN image")
    p.add_argument("--attention", required=True, help="XTEN attention map (H, W)")
    p.add_argument("--box", nargs=4, type=float, required=True,
                   metavar=("X1", "Y1", "X2", "Y2"))
    p.add_argument("--divisions", type=int, default=4)
    p.add_argument("--points", choices=["mps", "topk"], default="mps")
    p.add_argument("--topk", type=int, default=15)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("inspect", help="render an XTEN tensor as an image grid")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("serve-mock", help="host the scripted backends over TCP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8641)
    p.add_argument("--downscale", type=int, default=8)
    p.add_argument("--timesteps", type=int, default=1000)
    p.set_defaults(func=_cmd_serve_mock)

    p = sub.add_parser("make-fixture", help="write a planted-scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=3)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--items", type=int, default=2)
    p.set_defaults(func=_cmd_make_fixture)

    p = sub.add_parser("conformance-transcript",
                       help="record the golden wire-protocol transcript")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_conformance_transcript)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "groups" and not (args.boundaries or args.preset):
        return _fail("groups needs --boundaries or --preset")
    try:
        return args.func(args)
    except XsynError as exc:
        return _fail(f"{type(exc).__name__}: {exc}", code=1)


if __name__ == "__main__":
    sys.exit(main())
