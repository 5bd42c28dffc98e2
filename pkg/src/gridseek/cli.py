"""``gridseek`` command line: data generation, training, evaluation and search.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(non-finite loss or a collapsed embedding).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import DegenerateEmbeddingError, GridseekError, NumericError
from .data import TrainConfig, gen_synthetic, load_dataset, parse_config, preset, scan_images
from .imops import CropSpec, crop, read_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gridseek")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _ks(text: str) -> list[int]:
    try:
        ks = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _rect(text: str) -> tuple[int, int, int, int]:
    try:
        x0, y0, w, h = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x0,y0,w,h, got {text!r}") from None
    return x0, y0, w, h


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridseek", description="Crop localization and image search with a "
                     "contrastively trained two-pipeline encoder.")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: $GRIDSEEK_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a synthetic shapes dataset")
    p.add_argument("--n", type=_positive_int, required=True, help="number of images")
    p.add_argument("--size", type=_positive_int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train both encoders from scratch")
    p.add_argument("--config", help="key=value config file (default: M4 preset)")
    p.add_argument("--data", required=True, help="image folder")
    p.add_argument("--out-ckpt", required=True, help="checkpoint to write")
    p.add_argument("--metrics", help="per-epoch metrics.jsonl to write")

    p = sub.add_parser("eval-sga", help="similarity-grid accuracy per pyramid level")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--samples", type=_positive_int, default=256, help="number of eval crops")
    p.add_argument("--out", required=True, help="sga.json to write")

    p = sub.add_parser("eval-topk", help="top-k retrieval accuracy of crop queries")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=_ks, default=[1, 5, 10], help="comma-separated k values")
    p.add_argument("--queries", type=_positive_int, default=None,
                   help="number of crop queries (default: one per image)")
    p.add_argument("--out", required=True, help="topk.json to write")

    p = sub.add_parser("index", help="build a retrieval index over an image folder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out-index", required=True)

    p = sub.add_parser("search", help="rank indexed images for a crop and write an HTML report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--image", required=True, help="image containing the query crop")
    p.add_argument("--crop", type=_rect, required=True, help="x0,y0,w,h in pixels")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--config")
    p.add_argument("--report", required=True, help="HTML report to write")
    return parser


def _config(path: Optional[str]) -> TrainConfig:
    return parse_config(path) if path else preset("M4")


def _model(args):
    from .net import load
    return load(args.ckpt, config=_config(args.config) if args.config else None)


def _cmd_gen_synthetic(args) -> None:
    ds = gen_synthetic(args.n, args.size, args.seed, args.out)
    log.info("wrote %d images to %s", len(ds), args.out)


def _cmd_train(args) -> None:
    from .train import print_stats, train
    cfg = _config(args.config)
    train_set, _ = load_dataset(args.data, cfg.split_fraction, cfg.seed)
    images = [read_image(path) for _, path in train_set]
    train(cfg, images, metrics_path=args.metrics, out_ckpt=args.out_ckpt, threads=args.threads,
          on_epoch=print_stats)


def _eval_images(data: str, cfg: TrainConfig):
    """The eval split when it is non-empty, otherwise every image in the folder."""
    _, eval_set = load_dataset(data, cfg.split_fraction, cfg.seed)
    chosen = eval_set if len(eval_set) else scan_images(data)
    return [(image_id, read_image(path)) for image_id, path in chosen]


def _cmd_eval_sga(args) -> None:
    from .evalkit import make_eval_set, random_baseline, sga
    cfg = _config(args.config)
    model = _model(args)
    samples = make_eval_set(_eval_images(args.data, cfg), args.samples, cfg.eval_seed)
    result = sga(model, samples)
    means, _ = random_baseline(samples, model.spec.image_size)
    Path(args.out).write_text(json.dumps({"per_level": result.per_level, "n_samples": result.n_samples,
                                          "random_baseline": means}) + "\n")
    print(" ".join(f"L{i}={v:.4f}" for i, v in enumerate(result.per_level)), file=sys.stderr)


def _cmd_eval_topk(args) -> None:
    from .evalkit import make_eval_set, topk_accuracy, write_json
    from .index import build_index
    cfg = _config(args.config)
    model = _model(args)
    ds = scan_images(args.data)
    index = build_index(model, ds, threads=args.threads)
    kept = set(index.ids)
    images = [(image_id, read_image(path)) for image_id, path in ds if image_id in kept]
    queries = make_eval_set(images, args.queries or len(images), cfg.eval_seed)
    result = topk_accuracy(index, model, queries, args.k)
    write_json(args.out, result.to_json())
    print(" ".join(f"top{k}={v:.4f}" for k, v in result.accuracy.items()), file=sys.stderr)


def _cmd_index(args) -> None:
    from .index import build_index, save_index
    model = _model(args)
    index = build_index(model, scan_images(args.data), threads=args.threads)
    save_index(index, args.out_index)
    log.info("indexed %d images (%d cells)", len(index), index.cell_count)


def _cmd_search(args) -> None:
    from .index import emit_report, load_index, query
    from .net import encode_crop
    model = _model(args)
    index = load_index(args.index)
    img = read_image(args.image)
    x0, y0, w, h = args.crop
    spec = CropSpec(x0, y0, w, h)
    spec.validate_for(img.width, img.height)
    piece = crop(img, spec)
    _, z = encode_crop(model, piece)
    results = query(index, z, args.k)
    paths = {e.image_id: e.path for e in index.entries}
    thumbs = {r.image_id: read_image(paths[r.image_id]) for r in results}
    emit_report(piece, results, thumbs, args.report)
    for rank, r in enumerate(results, start=1):
        print(f"{rank:3d}  {r.score:+.4f}  {r.image_id}  L{r.best_cell[0]} ({r.best_cell[1]}, {r.best_cell[2]})",
              file=sys.stderr)


COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "eval-sga": _cmd_eval_sga,
    "eval-topk": _cmd_eval_topk,
    "index": _cmd_index,
    "search": _cmd_search,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is None:
        from .train import default_threads
        args.threads = default_threads()
    try:
        COMMANDS[args.command](args)
    except (NumericError, DegenerateEmbeddingError) as exc:
        print(f"gridseek: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GridseekError, OSError, KeyError, ValueError) as exc:
        print(f"gridseek: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
