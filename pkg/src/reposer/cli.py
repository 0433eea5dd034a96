"""Command-line entry point: datagen, match, train, infer, eval, ablate.

Exit codes: 0 ok, 1 usage, 2 data error, 3 training fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .correspondence import DEFAULT_K, find_correspondences, save_keypoints
from .datagen import CLASSES, generate_dataset, load_png, load_sample, read_manifest, save_png, write_manifest
from .descriptor import ToyBackend
from .evalmetrics import ALL_ROW, evaluate
from .train import Pipeline, TrainConfig, Trainer, TrainingFault, correspondence_cache, load_checkpoint
from .warp import write_flow

log = logging.getLogger("reposer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> TrainConfig:
    overrides = {"seed": args.seed, "res": getattr(args, "res", None), "k": getattr(args, "k", None),
                 "data": getattr(args, "data", None)}
    if getattr(args, "ablate_pose_input", False):
        overrides["zero_pose_image"] = True
    flat = json.loads(Path(args.config).read_text()) if args.config else {}
    flat.update({k: v for k, v in overrides.items() if v is not None})
    if not flat.get("data"):
        raise UsageError("no dataset given (use --data or set 'data' in the config)")
    if "res" not in flat:
        # follow the dataset unless the resolution is pinned
        flat["res"] = read_manifest(flat["data"]).resolution
    return TrainConfig.from_flat(flat)


def _to_pil(image) -> Image.Image:
    arr = np.round(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def draw_matches(I_a, I_p, Pa, Pp, path, scale: int = 4) -> None:
    """Side-by-side canvas with a line per matched pair."""
    a, p = _to_pil(I_a), _to_pil(I_p)
    W, H = a.size
    canvas = Image.new("RGB", (2 * W * scale, H * scale))
    canvas.paste(a.resize((W * scale, H * scale), Image.NEAREST), (0, 0))
    canvas.paste(p.resize((W * scale, H * scale), Image.NEAREST), (W * scale, 0))
    draw = ImageDraw.Draw(canvas)
    hues = np.linspace(0, 1, Pa.k, endpoint=False)
    for i, ((xa, ya), (xp, yp)) in enumerate(zip(Pa.points, Pp.points)):
        col = tuple(int(255 * c) for c in _hue(hues[i]))
        ua, va = (xa + 0.5) * scale, (ya + 0.5) * scale
        up, vp = (xp + 0.5 + W) * scale, (yp + 0.5) * scale
        draw.line([(ua, va), (up, vp)], fill=col, width=1)
        for u, v in ((ua, va), (up, vp)):
            draw.ellipse([u - 2, v - 2, u + 2, v + 2], outline=col)
    canvas.save(path)


def _hue(h: float):
    i, f = int(h * 6) % 6, h * 6 - int(h * 6)
    return [(1, f, 0), (1 - f, 1, 0), (0, 1, f), (0, 1 - f, 1), (f, 0, 1), (1, 0, 1 - f)][i]


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args) -> int:
    classes = args.classes or list(CLASSES)
    samples = generate_dataset(classes, args.pairs, res=args.res or 64, seed=args.seed or 0,
                               models_per_class=args.models_per_class)
    path = write_manifest(samples, args.out)
    n_test = sum(s.split == "test" for s in samples)
    print(f"wrote {len(samples)} pairs ({n_test} test) to {path}")
    return EXIT_OK


def cmd_match(args) -> int:
    backend = ToyBackend(seed=args.descriptor_seed)
    k = args.k or DEFAULT_K
    if args.appearance or args.pose:
        if not (args.appearance and args.pose):
            raise UsageError("--appearance and --pose must be given together")
        I_a, I_p = load_png(args.appearance), load_png(args.pose)
        M_a = M_p = None
    else:
        if args.data is None:
            raise UsageError("give --data with --sample, or --appearance and --pose")
        manifest = read_manifest(args.data)
        recs = [r for r in manifest.records if int(r["id"]) == args.sample]
        if not recs:
            raise ValueError(f"sample {args.sample} not in {args.data}")
        s = load_sample(manifest, recs[0])
        I_a, I_p, M_a, M_p = s.appearance, s.pose, s.masks["appearance"], s.masks["pose"]
    if I_a.shape != I_p.shape:
        raise ValueError(f"image sizes differ: {I_a.shape} vs {I_p.shape}")
    Pa, Pp = find_correspondences(backend, I_a, I_p, M_a, M_p, k=k, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_keypoints(out / "keypoints.json", Pa, Pp, I_a.shape[1:])
    draw_matches(I_a, I_p, Pa, Pp, out / "matches.png")
    print(f"{Pa.k} point pairs{' (padded)' if Pa.padded else ''} -> {out / 'keypoints.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.epochs:
        config.epochs_warp, config.epochs_gen, config.epochs_e2e = args.epochs
    manifest = read_manifest(config.data)
    trainer = Trainer(config, manifest, args.out)
    trainer.run(skip_e2e=args.skip_e2e)
    print(f"training finished; final checkpoint {trainer.last_checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    pipe = Pipeline.from_checkpoint(load_checkpoint(args.checkpoint))
    I_a, I_p = load_png(args.appearance), load_png(args.pose)
    if I_a.shape != I_p.shape:
        raise ValueError(f"image sizes differ: {I_a.shape} vs {I_p.shape}")
    if I_a.shape[1:] != (pipe.config.res, pipe.config.res):
        raise ValueError(f"images are {I_a.shape[1]}x{I_a.shape[2]}, checkpoint expects {pipe.config.res}")
    backend = ToyBackend(seed=pipe.config.descriptor_seed)
    Pa, Pp = find_correspondences(backend, I_a, I_p, k=pipe.config.k, seed=pipe.config.descriptor_seed)
    res = pipe.infer(I_a, I_p, Pa, Pp, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "generated.png", res["generated"])
    save_png(out / "warped.png", res["warped"])
    save_png(out / "tps.png", res["tps"])
    save_keypoints(out / "keypoints.json", Pa, Pp, I_a.shape[1:])
    if args.dump_flow:
        write_flow(out / "flow.flo", res["flow"])
    print(f"wrote {out / 'generated.png'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not args.data:
        raise UsageError("--data is required")
    report = evaluate(read_manifest(args.data), args.checkpoint, args.out, split=args.split,
                      seed=args.seed or 0, grids=not args.no_grids)
    _print_rows(report["methods"])
    return EXIT_OK


def _print_rows(methods: dict) -> None:
    for name, rows in methods.items():
        for row, m in rows.items():
            print(f"{name:>6} {row:<14} ssim {m['ssim']:.4f}  lpips {m['lpips']:.4f}  fid {m['fid']:.4f}")


def cmd_ablate_keypoints(args) -> int:
    """Train and evaluate one pipeline per k; optional pose-image and
    end-to-end ablations use the config's own k."""
    base = _load_config(args)
    base.zero_pose_image = False
    if args.epochs:
        base.epochs_warp, base.epochs_gen, base.epochs_e2e = args.epochs
    manifest = read_manifest(base.data)
    out = Path(args.out)
    k_list = args.k_list or [15, 25, 35, 45]
    ref_k = base.k if base.k in k_list else k_list[-1]

    variants = [(f"{k} keypoints", _replace(base, k=k)) for k in k_list]
    if args.ablate_pose_input:
        variants.append(("Without I_p", _replace(base, k=ref_k, zero_pose_image=True)))

    table, runs = {}, {}
    for label, cfg in variants:
        run_dir = out / _slug(label)
        ckpt = Trainer(cfg, manifest, run_dir).run()
        runs[label] = (ckpt, run_dir)
        report = evaluate(manifest, ckpt, run_dir / "eval", grids=False, seed=args.seed or 0)
        table[label] = report["methods"]["OURS"][ALL_ROW]
        print(f"{label:<20} ssim {table[label]['ssim']:.4f}  lpips {table[label]['lpips']:.4f}  "
              f"fid {table[label]['fid']:.4f}")
    if args.skip_e2e:
        label = "Without End-to-End"
        gen_ckpt = load_checkpoint(runs[f"{ref_k} keypoints"][1] / "gen.pt")
        report = evaluate(manifest, gen_ckpt, out / _slug(label) / "eval", grids=False, seed=args.seed or 0)
        table[label] = report["methods"]["OURS"][ALL_ROW]
        runs[label] = (gen_ckpt, None)
        print(f"{label:<20} ssim {table[label]['ssim']:.4f}  lpips {table[label]['lpips']:.4f}  "
              f"fid {table[label]['fid']:.4f}")

    _ablation_strips(manifest, runs, out / "strips", n=args.strips)
    doc = {"table": "keypoint ablation", "metrics_backend": report["backend"],
           "descriptor_backend": report["descriptor_backend"], "split": "test",
           "rows": [{"method": label, **row} for label, row in table.items()]}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(doc, indent=1))
    print(f"wrote {out / 'ablation.json'}")
    return EXIT_OK


def _replace(config: TrainConfig, **changes) -> TrainConfig:
    flat = config.to_flat()
    flat.update(changes)
    return TrainConfig.from_flat(flat)


def _slug(label: str) -> str:
    return label.lower().replace(" ", "_").replace("-", "_")


def _ablation_strips(manifest, runs: dict, out: Path, n: int) -> None:
    """Per test sample: I_a | I_p | warped image of every variant | I_gt."""
    records = manifest.split("test")[:n]
    if not records:
        return
    out.mkdir(parents=True, exist_ok=True)
    pipes = {label: Pipeline.from_checkpoint(ckpt) for label, (ckpt, _) in runs.items()}
    kps = {}
    for rec in records:
        s = load_sample(manifest, rec)
        cols = [s.appearance, s.pose]
        for label, pipe in pipes.items():
            key = pipe.config.k
            if key not in kps:
                kps[key] = correspondence_cache(manifest, pipe.config)
            Pa, Pp = kps[key][int(rec["id"])]
            cols.append(pipe.infer(s.appearance, s.pose, Pa, Pp, seed=0)["warped"])
        cols.append(s.ground_truth)
        save_png(out / f"{int(rec['id']):05d}.png", np.concatenate(cols, axis=2))
    (out / "columns.txt").write_text("\n".join(["I_a", "I_p", *pipes, "I_gt"]) + "\n")


# ---------------------------------------------------------------------------


def _epochs(text: str):
    try:
        parts = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma-separated integers") from None
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError("expected three non-negative integers: warp,gen,e2e")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reposer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON training config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("datagen", help="render a paired dataset")
    common(p)
    p.add_argument("--classes", nargs="+", help=f"subset of {', '.join(CLASSES)}")
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--models-per-class", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("match", help="best-buddy keypoints for one pair")
    common(p)
    p.add_argument("--data")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--appearance")
    p.add_argument("--pose")
    p.add_argument("--k", type=int)
    p.add_argument("--descriptor-seed", type=int, default=0)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="three-phase training")
    common(p)
    p.add_argument("--data")
    p.add_argument("--res", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=_epochs, help="warp,gen,e2e")
    p.add_argument("--skip-e2e", action="store_true")
    p.add_argument("--ablate-pose-input", action="store_true", help="zero the pose-image channels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="repose one appearance image")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--appearance", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--dump-flow", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics and grids on a split")
    common(p, out_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--no-grids", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="keypoint-count ablation")
    common(p)
    p.add_argument("--data")
    p.add_argument("--res", type=int)
    p.add_argument("--k", dest="k_list", type=int, nargs="+", help="keypoint counts (default 15 25 35 45)")
    p.add_argument("--epochs", type=_epochs, help="warp,gen,e2e")
    p.add_argument("--ablate-pose-input", action="store_true")
    p.add_argument("--skip-e2e", action="store_true", help="also report the model without end-to-end finetuning")
    p.add_argument("--strips", type=int, default=4, help="test samples to render as comparison strips")
    p.set_defaults(func=cmd_ablate_keypoints, k=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"reposer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingFault as exc:
        print(f"reposer: training fault: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ValueError, OSError, KeyError) as exc:
        print(f"reposer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
