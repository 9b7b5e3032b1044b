"""Command line interface.

Subcommands: estimate, correct, detect, train-cnn, train-aggregator,
gen-scenes, relight, evaluate, inspect-activations. The shared flags
(--seed, --config, --threads, --output-dir) are accepted both before and
after the subcommand name.

Exit codes: 0 success, 1 usage problems, 2 bad or missing data,
3 numeric failures (divergence, non-convergence, degenerate statistics).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import aggregator as agg
from . import cnn as cnn_mod
from . import datagen, io
from .detector import DetectorConfig, detect_multiple, kde_2d, project_chromaticity
from .errors import DataError, NumericError
from .estimators import NAMED_ESTIMATORS, EstimatorConfig, estimate_illuminant, estimate_named
from .imaging import (
    IlluminantEstimate,
    LinearImage,
    extract_patches,
    resize_max_side,
    upsample_estimate_map,
    von_kries_correct,
)
from .pipeline import MODES, PipelineConfig, evaluate, run_pipeline, write_report


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _shared_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="RNG seed")
    parser.add_argument("--config", default=default, help="TOML or JSON config file")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--output-dir", default=default, help="where outputs are written")


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} does not exist")
    if p.suffix.lower() == ".toml":
        with p.open("rb") as fh:
            return tomllib.load(fh)
    if p.suffix.lower() == ".json":
        return json.loads(p.read_text())
    raise DataError(f"config must be .toml or .json, got {p.suffix!r}")


def _build(cls, section: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise DataError(
            f"unknown {cls.__name__} config keys: {', '.join(sorted(unknown))}"
        )
    return cls(**section)


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise DataError(f"config section {name!r} must be a table/object")
    return dict(section)


def _parse_triplet(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"expected r,g,b; got {text!r}")
    try:
        return np.array([float(v) for v in parts])
    except ValueError:
        raise UsageError(f"expected numeric r,g,b; got {text!r}") from None


def _out_dir(args) -> Path:
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, section: dict | None = None, fallback: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    if section and "seed" in section:
        return int(section["seed"])
    return fallback


def _load_models(args):
    cnn = cnn_mod.load_model(args.cnn) if getattr(args, "cnn", None) else None
    aggregator = (
        agg.load_aggregator(args.aggregator) if getattr(args, "aggregator", None) else None
    )
    return cnn, aggregator


def _single_estimate(args, image: LinearImage, config: dict) -> IlluminantEstimate:
    """Resolve --method (plus custom family parameters) to one estimate."""
    method = args.method
    if method == "custom":
        if args.p is None or args.order is None:
            raise UsageError("custom method needs --order and --p (and optional --sigma)")
        p = float("inf") if str(args.p).lower() in ("inf", "max") else float(args.p)
        cfg = EstimatorConfig(args.order, p, args.sigma or 0.0)
        return estimate_illuminant(image, cfg)
    if method == "DN":
        return IlluminantEstimate.uniform()
    if method in NAMED_ESTIMATORS:
        return estimate_named(image, method)
    cnn, aggregator = _load_models(args)
    if cnn is None:
        raise UsageError(f"method {method!r} needs --cnn")
    emap = cnn_mod.estimate_map(cnn, image)
    if method == "cnn-median":
        return agg.median_pool_baseline(emap)
    if method == "cnn-global":
        if aggregator is None:
            raise UsageError("cnn-global needs --aggregator")
        return agg.predict_global(aggregator, emap)
    raise UsageError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Handlers

def _cmd_estimate(args, config):
    image = io.load_image(args.image)
    if args.resize_max:
        image = resize_max_side(image, args.resize_max)
    est = _single_estimate(args, image, config)
    print(json.dumps({
        "image": str(args.image),
        "method": args.method,
        "estimate": [float(v) for v in est.rgb],
    }))


def _cmd_correct(args, config):
    image = io.load_image(args.image)
    sources = [args.illuminant is not None, args.method is not None,
               args.use_gt, args.pipeline]
    if sum(sources) != 1:
        raise UsageError(
            "pick exactly one of --illuminant, --method, --use-gt, --pipeline"
        )
    def divide_out(triplet: np.ndarray) -> LinearImage:
        # green-preserving: rescale so G = 1, broadcast to a field so the
        # correction op does not renormalize the scaling away
        scaled = triplet / triplet[1]
        return von_kries_correct(image, np.broadcast_to(scaled, image.data.shape))

    decision = "single"
    if args.illuminant is not None:
        illum = IlluminantEstimate(_parse_triplet(args.illuminant))
        corrected = divide_out(illum.rgb)
        used = [float(v) for v in illum.rgb]
    elif args.method is not None:
        est = _single_estimate(args, image, config)
        corrected = divide_out(est.rgb)
        used = [float(v) for v in est.rgb]
    elif args.use_gt:
        truth = io.load_ground_truth(args.image)
        if isinstance(truth, IlluminantEstimate):
            corrected = divide_out(truth.rgb)
            used = [float(v) for v in truth.rgb]
        else:
            field_arr = truth / truth[:, :, 1:2]
            corrected = von_kries_correct(image, field_arr)
            used = "field"
            decision = "multiple"
    else:
        cnn, aggregator = _load_models(args)
        if cnn is None:
            raise UsageError("--pipeline needs --cnn")
        det = _build(DetectorConfig, _section(config, "detector"))
        result = run_pipeline(image, PipelineConfig(cnn, aggregator, det, args.mode))
        corrected = result.corrected
        decision = result.decision
        used = (
            [float(v) for v in result.global_estimate.rgb]
            if result.global_estimate is not None
            else "field"
        )
    out = _out_dir(args)
    stem = Path(args.image).stem
    target = out / f"{stem}.corrected.pfm"
    io.save_image(target, corrected)
    if args.preview:
        io.save_preview(out / f"{stem}.corrected.png", corrected)
    print(json.dumps({"output": str(target), "decision": decision, "illuminant": used}))


def _cmd_detect(args, config):
    cnn, _ = _load_models(args)
    if cnn is None:
        raise UsageError("detect needs --cnn")
    image = io.load_image(args.image)
    det = _build(DetectorConfig, _section(config, "detector"))
    emap = cnn_mod.estimate_map(cnn, image)
    result = detect_multiple(emap, det)
    payload = {
        "image": str(args.image),
        "decision": result.decision,
        "max_pairwise_angle_deg": result.max_pairwise_angle_deg,
        "modes": [
            {"r": m.point.r, "b": m.point.b, "density": m.density} for m in result.modes
        ],
    }
    if args.dump_density:
        points, dropped = project_chromaticity(emap)
        grid = kde_2d(points, det)
        out = _out_dir(args)
        stem = Path(args.image).stem
        io.save_pfm(out / f"{stem}.density.pfm", grid.values.astype(np.float32))
        meta = {
            "bounds": list(grid.bounds),
            "bandwidth": list(grid.bandwidth),
            "points": int(points.shape[0]),
            "dropped": dropped,
        }
        (out / f"{stem}.density.json").write_text(json.dumps(meta, indent=2) + "\n")
        payload["density"] = str(out / f"{stem}.density.pfm")
    print(json.dumps(payload))


def _entries_positions(index, entries) -> list[int]:
    return [index.entries.index(e) for e in entries]


def _load_fold(index, entries, resize_to: int | None = 1200):
    images, truths = [], []
    for pos in _entries_positions(index, entries):
        image, truth = index.load_entry(pos)
        if not isinstance(truth, IlluminantEstimate):
            raise DataError(
                f"{index.entries[pos].image}: training needs per-image ground truth"
            )
        if resize_to:
            image = resize_max_side(image, resize_to)
        images.append(image)
        truths.append(truth)
    return images, truths


def _cmd_train_cnn(args, config):
    index = datagen.load_index(args.index)
    split = datagen.three_folds(index)[args.run]
    section = _section(config, "train")
    if args.seed is not None:
        section["seed"] = args.seed
    if args.epochs is not None:
        section["epochs"] = args.epochs
    train_cfg = _build(cnn_mod.TrainConfig, section)
    model_cfg = _build(cnn_mod.CnnConfig, _section(config, "cnn"))
    train_imgs, train_truths = _load_fold(index, split.train)
    val_imgs, val_truths = _load_fold(index, split.val)
    train_set = cnn_mod.PatchDataset(train_imgs, train_truths, model_cfg.patch_size)
    val_set = cnn_mod.PatchDataset(val_imgs, val_truths, model_cfg.patch_size)
    result = cnn_mod.train(train_set, train_cfg, val_set, model_cfg)
    out = _out_dir(args) / args.out
    cnn_mod.save_model(out, result.model, {
        "run": args.run,
        "seed": train_cfg.seed,
        "epochs": train_cfg.epochs,
        "best_epoch": result.best_epoch,
        "history": result.history,
    })
    final = result.history[result.best_epoch]
    print(json.dumps({"model": str(out), "best_epoch": result.best_epoch,
                      "val_loss": final.get("val_loss")}))


def _cmd_train_aggregator(args, config):
    index = datagen.load_index(args.index)
    split = datagen.three_folds(index)[args.run]
    cnn = cnn_mod.load_model(args.cnn)
    section = _section(config, "aggregator")
    grid = agg.DEFAULT_GRID
    if "grid" in section:
        g = section.pop("grid")
        grid = (tuple(g["C"]), tuple(g["gamma"]), tuple(g["epsilon"]))
    tol = float(section.pop("tol", 1e-5))
    if section:
        raise DataError(f"unknown aggregator config keys: {', '.join(sorted(section))}")

    def featurize(entries):
        feats, targets = [], []
        images, truths = _load_fold(index, entries)
        for image, truth in zip(images, truths):
            emap = cnn_mod.estimate_map(cnn, image)
            feats.append(agg.pool_features(emap).vector)
            targets.append(truth.rgb)
        return np.stack(feats), np.stack(targets)

    train_F, train_T = featurize(split.train)
    val_F, val_T = featurize(split.val)
    model = agg.fit_aggregator(train_F, train_T, val_F, val_T, grid, tol)
    out = _out_dir(args) / args.out
    agg.save_aggregator(out, model, {"run": args.run, "cnn": str(args.cnn)})
    print(json.dumps({
        "model": str(out),
        "C": model.C, "gamma": model.gamma, "epsilon": model.epsilon,
        "validation_median_deg": model.validation_median_deg,
    }))


def _cmd_gen_scenes(args, config):
    section = _section(config, "scene")
    for key, flag in (("width", args.width), ("height", args.height),
                      ("num_surfaces", args.surfaces), ("noise_std", args.noise)):
        if flag is not None:
            section[key] = flag
    scene_cfg = _build(datagen.SceneConfig, section)
    seed = _seed(args)
    index = datagen.generate_scene_set(
        _out_dir(args), args.count, scene_cfg, seed, args.spread
    )
    print(json.dumps({"root": str(index.root), "count": len(index)}))


def _cmd_relight(args, config):
    source = datagen.load_index(args.index)
    section = _section(config, "relight")
    if args.num_illuminants is not None:
        section["num_illuminants"] = args.num_illuminants
    if args.sigma is not None:
        section["smoothing_sigma"] = args.sigma
    cfg = _build(datagen.RelightConfig, section)
    index = datagen.generate_relit_set(_out_dir(args), source, cfg, _seed(args))
    print(json.dumps({"root": str(index.root), "count": len(index)}))


def _cmd_evaluate(args, config):
    index = datagen.load_index(args.index)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("no methods given")
    cnn, aggregator = _load_models(args)
    det = _build(DetectorConfig, _section(config, "detector"))
    entries = None
    if args.run is not None:
        entries = datagen.three_folds(index)[args.run].test
    report = evaluate(
        index, methods, cnn, aggregator, det, args.mode,
        resize_to=args.resize_max, threads=args.threads or 1, entries=entries,
    )
    write_report(report, _out_dir(args))
    for line in report.summary_lines():
        print(line)


def _cmd_inspect(args, config):
    cnn, _ = _load_models(args)
    if cnn is None:
        raise UsageError("inspect-activations needs --cnn")
    patches = []
    names = []
    for image_path in args.image:
        image = io.load_image(image_path)
        stride = args.stride or cnn.config.patch_size
        for patch in extract_patches(image, cnn.config.patch_size, stride):
            if not patch.masked:
                patches.append(patch)
                names.append(Path(image_path).name)
    if not patches:
        raise DataError("no unmasked patches available")
    top = cnn_mod.top_activating_patches(cnn, patches, args.unit, args.top)
    out = _out_dir(args)
    source_of = {id(p): n for p, n in zip(patches, names)}
    entries = []
    for rank, (patch, activation) in enumerate(top):
        stretched, _ = cnn_mod.stretch_pixels(patch.pixels)
        preview = np.repeat(np.repeat(stretched, 8, axis=0), 8, axis=1)
        name = f"unit{args.unit:02d}_rank{rank:02d}.png"
        io.save_png(out / name, preview, bits=8)
        entries.append({
            "rank": rank,
            "activation": activation,
            "image": source_of[id(patch)],
            "origin": list(patch.origin),
            "preview": name,
        })
    (out / f"unit{args.unit:02d}_activations.json").write_text(
        json.dumps({"unit": args.unit, "patches": entries}, indent=2) + "\n"
    )
    print(json.dumps({"unit": args.unit, "written": len(entries)}))


# ---------------------------------------------------------------------------
# Parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="illumest", description=__doc__.splitlines()[0])
    _shared_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _shared_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("estimate", _cmd_estimate, "estimate the illuminant of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--method", default="GW",
                   help="GW, WP, SoG, gGW, GE1, GE2, DN, cnn-median, cnn-global, custom")
    p.add_argument("--cnn")
    p.add_argument("--aggregator")
    p.add_argument("--order", type=int, help="custom: derivative order 0/1/2")
    p.add_argument("--p", help="custom: Minkowski exponent (number or 'inf')")
    p.add_argument("--sigma", type=float, help="custom: Gaussian sigma in px")
    p.add_argument("--resize-max", type=int)

    p = add("correct", _cmd_correct, "white-balance one image")
    p.add_argument("--image", required=True)
    p.add_argument("--illuminant", help="explicit r,g,b")
    p.add_argument("--method", help="estimate first with this method")
    p.add_argument("--use-gt", action="store_true", help="correct with the sidecar truth")
    p.add_argument("--pipeline", action="store_true", help="full estimate pipeline")
    p.add_argument("--mode", choices=MODES, default="auto")
    p.add_argument("--cnn")
    p.add_argument("--aggregator")
    p.add_argument("--order", type=int)
    p.add_argument("--p")
    p.add_argument("--sigma", type=float)
    p.add_argument("--preview", action="store_true", help="also write an 8-bit preview PNG")

    p = add("detect", _cmd_detect, "single or multiple illuminants?")
    p.add_argument("--image", required=True)
    p.add_argument("--cnn", required=True)
    p.add_argument("--dump-density", action="store_true")

    p = add("train-cnn", _cmd_train_cnn, "train the patch network on a dataset index")
    p.add_argument("--index", required=True)
    p.add_argument("--run", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="patch_cnn.bin")

    p = add("train-aggregator", _cmd_train_aggregator, "fit the map-to-global regressor")
    p.add_argument("--index", required=True)
    p.add_argument("--cnn", required=True)
    p.add_argument("--run", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--out", default="aggregator.bin")

    p = add("gen-scenes", _cmd_gen_scenes, "render a synthetic scene dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--surfaces", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--spread", type=float, default=0.4,
                   help="illuminant chromaticity spread")

    p = add("relight", _cmd_relight, "build a multi-illuminant set from a single-illuminant one")
    p.add_argument("--index", required=True, help="source dataset index")
    p.add_argument("--num-illuminants", type=int)
    p.add_argument("--sigma", type=float, help="transition smoothing sigma")

    p = add("evaluate", _cmd_evaluate, "angular-error report over a dataset")
    p.add_argument("--index", required=True)
    p.add_argument("--methods", required=True, help="comma-separated method names")
    p.add_argument("--cnn")
    p.add_argument("--aggregator")
    p.add_argument("--mode", choices=MODES, default="auto")
    p.add_argument("--run", type=int, choices=(0, 1, 2),
                   help="restrict to this run's test fold")
    p.add_argument("--resize-max", type=int, default=1200)

    p = add("inspect-activations", _cmd_inspect, "dump the patches a hidden unit likes most")
    p.add_argument("--cnn", required=True)
    p.add_argument("--image", action="append", required=True,
                   help="repeatable; patches are drawn from all given images")
    p.add_argument("--unit", type=int, required=True)
    p.add_argument("--top", type=int, default=9)
    p.add_argument("--stride", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help()
            return 1
        for name, default in (("seed", None), ("config", None),
                              ("threads", 1), ("output_dir", ".")):
            if not hasattr(args, name) or getattr(args, name) is None:
                setattr(args, name, default)
        config = _load_config(args.config) if args.config else {}
        args.func(args, config)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
