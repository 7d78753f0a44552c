"""Command-line front end.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import imageio, training
from .irstyle import ArchVariant, IRStyleModel, load_model, make_thumbnail, save_model, transfer
from .lut import apply_lut, compose_luts, read_cube_file, write_cube_file

log = logging.getLogger("lutstyle")

VARIANTS = [v.value for v in ArchVariant]


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--config", type=Path, help="key = value file overriding this command's defaults")
    p.add_argument("--threads", type=int, help="worker threads for LUT application "
                                               "(default: $MRSTYLE_THREADS or all cores)")


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, help="model checkpoint (MRSW); default is a fresh "
                                              "zero-initialised model, i.e. identity transfer")
    p.add_argument("--variant", choices=VARIANTS, default=ArchVariant.INTERACTION_DUAL.value,
                   help="architecture when no checkpoint is given")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="lutstyle", description="LUT-based color style transfer")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    cmds = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        cmds[name] = p
        return p

    p = add("transfer", "stylise a content image from a style image or a prior-feature file")
    p.add_argument("--content", type=Path)
    p.add_argument("--style", type=Path, help="style reference image")
    p.add_argument("--style-features", type=Path, help="MRSF prior-feature file (text reference)")
    p.add_argument("--mapper", type=Path, help="mapper checkpoint for --style-features")
    p.add_argument("--blend-image", type=Path, help="image reference mixed with --style-features")
    p.add_argument("--w", type=float, default=0.5, help="image weight when blending (default 0.5)")
    p.add_argument("--out", type=Path)
    _model_opts(p)

    p = add("apply-lut", "apply a .cube LUT to an image")
    p.add_argument("--lut", type=Path)
    p.add_argument("--in", dest="input", type=Path)
    p.add_argument("--out", type=Path)

    p = add("compose-lut", "compose two .cube LUTs (first, then second) into one")
    p.add_argument("--first", type=Path)
    p.add_argument("--second", type=Path)
    p.add_argument("--out", type=Path)

    defaults = training.TrainConfig()
    p = add("train", "train the image-reference model with combined paired/unpaired supervision")
    p.add_argument("--corpus", type=Path, help="directory of PPM/PNG images (default: synthetic toy corpus)")
    p.add_argument("--filters", type=Path, help="directory of .cube filters (default: synthetic library)")
    p.add_argument("--out", type=Path)
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--batch", type=int, default=defaults.batch)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--lambda", dest="lam", type=float, default=defaults.lam,
                   help="weight of the unpaired losses")
    p.add_argument("--bins", type=int, default=defaults.bins)
    p.add_argument("--variant", choices=VARIANTS, default=defaults.variant)
    p.add_argument("--log-every", type=int, default=defaults.log_every)

    p = add("train-mapper", "distil the prior-feature mapper against a frozen model")
    p.add_argument("--model", type=Path, help="trained image-reference checkpoint")
    p.add_argument("--triplets", type=Path, help="directory of content_N.ppm, target_N.ppm, "
                                                 "prior_N.mrsf (default: self-distilled toy set)")
    p.add_argument("--corpus", type=Path, help="images for self-distillation")
    p.add_argument("--count", type=int, default=32, help="self-distilled triplet count")
    p.add_argument("--out", type=Path)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-4)

    p = add("synth-pairs", "write paired/unpaired training samples (and optionally the filter library)")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--filters", type=Path)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", type=Path)
    p.add_argument("--export-filters", type=Path, help="also write the filter library as .cube files")

    p = add("metrics", "print style_gram and content_ssim for image pairs")
    p.add_argument("--a", action="append", type=Path, default=None)
    p.add_argument("--b", action="append", type=Path, default=None)

    p = add("video-transfer", "stylise a frame directory, one LUT set per detected scene")
    p.add_argument("--in", dest="input", type=Path)
    p.add_argument("--style", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--scene-threshold", type=float, default=0.3)
    _model_opts(p)

    p = add("dump-lut", "export the predicted (composed) transfer LUT as .cube")
    p.add_argument("--content", type=Path)
    p.add_argument("--style", type=Path)
    p.add_argument("--out", type=Path)
    _model_opts(p)

    for p in cmds.values():
        _common(p)
    return parser, cmds


REQUIRED = {
    "transfer": ["content", "out"],
    "apply-lut": ["lut", "input", "out"],
    "compose-lut": ["first", "second", "out"],
    "train": ["out"],
    "train-mapper": ["model", "out"],
    "synth-pairs": ["out"],
    "metrics": ["a", "b"],
    "video-transfer": ["input", "style", "out"],
    "dump-lut": ["content", "style", "out"],
}


def _apply_config(sub: argparse.ArgumentParser, path: Path) -> None:
    values = training.parse_config(path.read_text())
    actions = {a.dest: a for a in sub._actions}
    aliases = {"lambda": "lam"}
    overrides = {}
    for key, raw in values.items():
        dest = aliases.get(key, key.replace("-", "_"))
        if dest in ("config", "help") or dest not in actions:
            raise UsageError(f"{path}: unknown key {key!r} for this command")
        act = actions[dest]
        try:
            value = act.type(raw) if act.type else raw
        except (TypeError, ValueError):
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from None
        if act.choices is not None and value not in act.choices:
            raise UsageError(f"{path}: {key} must be one of {list(act.choices)}")
        overrides[dest] = value
    sub.set_defaults(**overrides)


def _threads(args) -> int | None:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("MRSTYLE_THREADS")
    return int(env) if env else None


def _load_or_fresh(args) -> IRStyleModel:
    if args.model is not None:
        return load_model(args.model)
    torch.manual_seed(args.seed)
    return IRStyleModel(args.variant).eval()


def cmd_transfer(args) -> None:
    from . import prior_mapper as pm

    if (args.style is None) == (args.style_features is None):
        raise UsageError("give exactly one of --style or --style-features")
    if args.blend_image is not None and args.style_features is None:
        raise UsageError("--blend-image needs --style-features")
    content = imageio.read_image(args.content)
    model = _load_or_fresh(args)
    if args.style is not None:
        result = transfer(content, imageio.read_image(args.style), model, threads=args.threads)
    else:
        priors = pm.read_feature_file(args.style_features)
        if args.mapper is not None:
            mapper = pm.load_mapper(args.mapper)
        else:
            torch.manual_seed(args.seed)
            mapper = pm.PriorMapper(priors.shapes())
        blend = imageio.read_image(args.blend_image) if args.blend_image else None
        result = pm.mapped_transfer(content, priors, mapper, model, blend, args.w, threads=args.threads)
    imageio.write_image(args.out, result.output)


def cmd_apply_lut(args) -> None:
    lut = read_cube_file(args.lut)
    imageio.write_image(args.out, apply_lut(lut, imageio.read_image(args.input), threads=args.threads))


def cmd_compose_lut(args) -> None:
    write_cube_file(args.out, compose_luts(read_cube_file(args.first), read_cube_file(args.second)))


def _corpus(path: Path | None, seed: int) -> list[np.ndarray]:
    if path is None:
        return training.synth_corpus(seed)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not files:
        raise FileNotFoundError(f"no .ppm/.png images in {path}")
    return [imageio.read_image(p) for p in files]


def _filters(path: Path | None, seed: int):
    return training.synth_filters(seed + 1) if path is None else training.load_filter_dir(path)


def cmd_train(args) -> None:
    cfg = training.TrainConfig(seed=args.seed, lr=args.lr, steps=args.steps, batch=args.batch,
                               lam=args.lam, bins=args.bins, variant=args.variant,
                               log_every=args.log_every)
    model, history = training.train(cfg, _corpus(args.corpus, args.seed), _filters(args.filters, args.seed))
    save_model(args.out, model)
    if history:
        print(f"final_total={history[-1]['total']:.6f}")


def _read_triplets(directory: Path):
    from . import prior_mapper as pm

    triplets = []
    for cpath in sorted(directory.glob("content_*.ppm")):
        key = cpath.stem.split("_", 1)[1]
        triplets.append(pm.Triplet(imageio.read_image(cpath),
                                   pm.read_feature_file(directory / f"prior_{key}.mrsf"),
                                   imageio.read_image(directory / f"target_{key}.ppm")))
    if not triplets:
        raise FileNotFoundError(f"no content_N.ppm triplets in {directory}")
    return triplets


def cmd_train_mapper(args) -> None:
    from . import prior_mapper as pm

    model = load_model(args.model)
    if args.triplets is not None:
        triplets = _read_triplets(args.triplets)
    else:
        rng = np.random.default_rng(args.seed)
        corpus = _corpus(args.corpus, args.seed)
        filters = training.synth_filters(args.seed + 1)
        contents, styles = [], []
        for _ in range(args.count):
            i, j = rng.choice(len(corpus), 2, replace=False)
            contents.append(np.ascontiguousarray(training.random_crop(corpus[i], rng)))
            styles.append(apply_lut(filters[rng.integers(len(filters))], training.random_crop(corpus[j], rng)))
        triplets = pm.make_self_distill_triplets(model, contents, styles)
    torch.manual_seed(args.seed)
    mapper = pm.PriorMapper(triplets[0].priors.shapes())
    trainer = pm.MapperTrainer(mapper, model, lr=args.lr)
    history = pm.train_mapper(trainer, triplets, args.steps, args.batch, seed=args.seed)
    pm.save_mapper(args.out, mapper)
    if history:
        print(f"final_teach={history[-1]['teach']:.6f}")


def cmd_synth_pairs(args) -> None:
    corpus = _corpus(args.corpus, args.seed)
    filters = _filters(args.filters, args.seed)
    if args.export_filters is not None:
        args.export_filters.mkdir(parents=True, exist_ok=True)
        for k, f in enumerate(filters):
            write_cube_file(args.export_filters / f"filter_{k:04d}.cube", f)
    args.out.mkdir(parents=True, exist_ok=True)
    stream = training.SampleStream(corpus, filters, args.seed)
    for k in range(args.count):
        paired, unpaired = stream.sample()
        imageio.write_image(args.out / f"pair_{k:06d}_1.ppm", paired.i1)
        imageio.write_image(args.out / f"pair_{k:06d}_2.ppm", paired.i2)
        imageio.write_image(args.out / f"style_{k:06d}.ppm", unpaired.style)


def cmd_metrics(args) -> None:
    from .metrics import content_ssim, gram_style_loss

    if len(args.a) != len(args.b):
        raise UsageError("--a and --b must be given the same number of times")
    for pa, pb in zip(args.a, args.b):
        a, b = imageio.read_image(pa), imageio.read_image(pb)
        print(f"style_gram={gram_style_loss(a, b):.6f} content_ssim={content_ssim(a, b):.6f}")


def cmd_video_transfer(args) -> None:
    from .video import transfer_video

    frames = imageio.read_frames(args.input)
    result = transfer_video(frames, imageio.read_image(args.style), _load_or_fresh(args),
                            args.scene_threshold, threads=args.threads)
    imageio.write_frames(args.out, result.frames)
    print(f"frames={len(frames)} scenes={len(result.segments)}")


def cmd_dump_lut(args) -> None:
    model = _load_or_fresh(args)
    luts = model.predict_luts(make_thumbnail(imageio.read_image(args.content)),
                              make_thumbnail(imageio.read_image(args.style)))
    write_cube_file(args.out, luts.composed())


COMMANDS = {
    "transfer": cmd_transfer,
    "apply-lut": cmd_apply_lut,
    "compose-lut": cmd_compose_lut,
    "train": cmd_train,
    "train-mapper": cmd_train_mapper,
    "synth-pairs": cmd_synth_pairs,
    "metrics": cmd_metrics,
    "video-transfer": cmd_video_transfer,
    "dump-lut": cmd_dump_lut,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, cmds = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config is not None:
            _apply_config(cmds[args.command], args.config)
            args = parser.parse_args(argv)
        missing = [d for d in REQUIRED[args.command] if getattr(args, d) in (None, [])]
        if missing:
            raise UsageError("missing required option(s): "
                             + ", ".join("--" + ("in" if d == "input" else d.replace("_", "-")) for d in missing))
        args.threads = _threads(args)
    except UsageError as exc:
        cmds[args.command].print_usage(sys.stderr)
        print(f"lutstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"lutstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    torch.manual_seed(args.seed)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lutstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"lutstyle {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
