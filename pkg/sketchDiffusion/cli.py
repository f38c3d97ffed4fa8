import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np
import pandas as pd

from . import tensor_engine as te
from .config import CONFIG_ENV, RunConfig
from .generation import GeneratedSketch, Generator, generate, generation_manifest, snapshot_trajectory
from .geometry import UdfField, normalize_sketch, normalize_stroke, render_udf, resample_stroke, udf_to_pgm, write_udf
from .latent_diffusion import (DenoiserConfig, LatentDataset, build_latent_dataset, build_schedule, class_names_of,
                               estimate_max_strokes, train_diffusion)
from .layers import load_checkpoint, save_checkpoint
from .metrics import evaluate, evaluate_by_group, report_to_frame
from .sketch_io import (build_manifest, export_svg, parse_quickdraw_ndjson, read_manifest, read_sketches, read_svg,
                        write_manifest, write_sketches)
from .stroke_autoencoder import (EncoderConfig, StrokeDataset, build_stroke_dataset, load_autoencoder,
                                 reconstruct_sketch, reconstruction_report, train_autoencoder)
from .utilities import DataError, Error, NumericError, UsageError, log_config, rng_stream

pd.set_option("display.precision", 3)

"""
Command-line surface. Stages exchange files in the work directory:

    sketches.ndjson, manifest.csv        ingest
    strokes.tens, udf/*.udf              preprocess
    encoder.ckpt, encoder_loss.csv       train-encoder
    latents.tens                         encode-dataset
    denoiser.ckpt, denoiser_loss.csv     train-diffusion
    generated/*.svg, generated.csv       generate
    metrics.jsonl, metrics.csv           evaluate
"""

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TABLE_VERSION = 1
CONFIG_DEST = "config__"


def _path(cfg, name):
    return os.path.join(cfg.work_dir, name)


def _require(path):
    if not os.path.exists(path):
        raise MissingArtifactError("required artifact {} does not exist; run the previous stage first".format(path))
    return path


def _write_table(frame, path, kind, cfg):
    with open(path, "w", encoding = "utf-8", newline = "") as handle:
        handle.write("# sketchDiffusion-{} {}\n".format(kind, TABLE_VERSION))
        for line in cfg.to_text().splitlines():
            handle.write("# {}\n".format(line))
        frame.to_csv(handle, index = False, lineterminator = "\n", float_format = "%.10g")


def _normalized_sketches(cfg):
    return [normalize_sketch(s) for s in read_sketches(_require(_path(cfg, "sketches.ndjson"))) if s.strokes]


def _load_encoder(cfg):
    return load_checkpoint(_require(_path(cfg, "encoder.ckpt")), EncoderConfig, "stroke_autoencoder")


def _load_denoiser(cfg):
    return load_checkpoint(_require(_path(cfg, "denoiser.ckpt")), DenoiserConfig, "denoiser")


def _max_strokes(cfg):
    """N_s: the manifest's when ingest estimated it, else the configured value."""
    if cfg.max_strokes_percentile > 0:
        return read_manifest(_require(_path(cfg, "manifest.csv"))).max_strokes
    return cfg.max_strokes


## Subcommands ###############

def cmd_ingest(args, cfg):
    try:
        with open(args.input, "rb") as handle:
            parsed = parse_quickdraw_ndjson(handle.read())
    except FileNotFoundError:
        raise MissingArtifactError("input {} does not exist".format(args.input)) from None
    for error in parsed.errors:
        logger.warning("%s: %s", args.input, error)
    max_strokes = cfg.max_strokes
    if cfg.max_strokes_percentile > 0:
        if not parsed:
            raise DataError("{} holds no sketches to estimate max_strokes from".format(args.input))
        max_strokes = estimate_max_strokes([s.stroke_count for s in parsed], cfg.max_strokes_percentile)
        logger.info("max_strokes=%d, the %g-th percentile of %d stroke counts", max_strokes, cfg.max_strokes_percentile,
                    len(parsed))
    echo = replace(cfg, max_strokes = max_strokes).to_text()
    manifest, retained = build_manifest(parsed, max_strokes)
    write_sketches(retained, _path(cfg, "sketches.ndjson"), echo)
    write_manifest(manifest, _path(cfg, "manifest.csv"), echo)
    logger.info("ingested %d sketches (%d malformed lines, %d over %d strokes)", len(retained), len(parsed.errors),
                len(parsed) - len(retained), max_strokes)


def cmd_preprocess(args, cfg):
    encoder_cfg = cfg.encoder_config()
    sketches = _normalized_sketches(cfg)
    dataset = build_stroke_dataset(sketches, encoder_cfg)
    entries = {"points": dataset.points, "boxes": dataset.boxes,
               "sketch": dataset.index["sketch"].values, "stroke": dataset.index["stroke"].values}
    if dataset.fields is not None:
        entries["fields"] = dataset.fields
        os.makedirs(_path(cfg, "udf"), exist_ok = True)
        for row, values in zip(dataset.index.itertuples(), dataset.fields):
            name = "{}_{}.udf".format(row.source_id, row.stroke)
            write_udf(UdfField(values, cfg.gamma), os.path.join(_path(cfg, "udf"), name))
    te.save_container(_path(cfg, "strokes.tens"), entries, cfg.to_text())


def _stroke_dataset(cfg):
    entries, _ = te.load_container(_require(_path(cfg, "strokes.tens")))
    encoder_cfg = cfg.encoder_config()
    fields_ = entries.get("fields")
    if encoder_cfg.use_image and (fields_ is None or fields_.shape[1:] != (cfg.resolution, cfg.resolution)):
        raise DataError("strokes.tens has no fields at resolution {}; rerun preprocess".format(cfg.resolution))
    if entries["points"].shape[1] != cfg.n_points:
        raise DataError("strokes.tens holds {} points per stroke, config says {}".format(entries["points"].shape[1], cfg.n_points))
    index = pd.DataFrame({"sketch": entries["sketch"].astype(np.int64), "stroke": entries["stroke"].astype(np.int64)})
    return StrokeDataset(entries["points"], fields_ if encoder_cfg.use_image else None, entries["boxes"], index)


def cmd_train_encoder(args, cfg):
    dataset = _stroke_dataset(cfg)
    checkpoint = train_autoencoder(dataset, cfg.encoder_config(), cfg.encoder_steps, cfg.seed, lr = cfg.lr,
                                   weight_decay = cfg.weight_decay, warmup_steps = cfg.warmup_steps,
                                   batch_size = cfg.batch_size, log_every = cfg.log_every, progress = args.progress)
    save_checkpoint(checkpoint, _path(cfg, "encoder.ckpt"))
    _write_table(checkpoint.loss_log, _path(cfg, "encoder_loss.csv"), "loss-log", cfg)


def cmd_encode_dataset(args, cfg):
    model = load_autoencoder(_load_encoder(cfg)).freeze()
    dataset = build_latent_dataset(model, _normalized_sketches(cfg))
    dataset.save(_path(cfg, "latents.tens"), cfg.to_text())
    logger.info("encoded %d strokes of %d sketches", len(dataset.latents), len(dataset))


def cmd_train_diffusion(args, cfg):
    dataset = LatentDataset.load(_require(_path(cfg, "latents.tens")))
    n_classes = len(dataset.class_names) if cfg.conditional else 0
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    denoiser_cfg = replace(cfg, max_strokes = _max_strokes(cfg)).denoiser_config(n_classes)
    checkpoint = train_diffusion(dataset, schedule, denoiser_cfg, cfg.diffusion_steps, cfg.seed, lr = cfg.diffusion_lr,
                                 weight_decay = cfg.weight_decay, warmup_steps = cfg.warmup_steps,
                                 batch_size = cfg.batch_size, log_every = cfg.log_every, split_weight = cfg.split_weight,
                                 split_max_t = cfg.split_max_t or None, shuffle_strokes = cfg.shuffle_strokes,
                                 progress = args.progress)
    save_checkpoint(checkpoint, _path(cfg, "denoiser.ckpt"))
    _write_table(checkpoint.loss_log, _path(cfg, "denoiser_loss.csv"), "loss-log", cfg)


def _resolve_cond(cond, checkpoint):
    if cond is None:
        return None, None
    names = class_names_of(checkpoint)
    if cond in names:
        return names.index(cond), cond
    try:
        index = int(cond)
    except ValueError:
        raise UsageError("unknown class {}; known classes: {}".format(cond, ", ".join(names))) from None
    return index, names[index] if 0 <= index < len(names) else None


def cmd_generate(args, cfg):
    denoiser_ckpt = _load_denoiser(cfg)
    generator = Generator(_load_encoder(cfg), denoiser_ckpt)
    cond, label = _resolve_cond(args.cond, denoiser_ckpt)
    out_dir = _path(cfg, "generated")
    os.makedirs(out_dir, exist_ok = True)
    sketches = []
    if args.n < 1:
        raise UsageError("--n must be positive, got {}".format(args.n))
    for seed in range(cfg.seed, cfg.seed + args.n):
        sketch = generate(generator, cond = cond, seed = seed)
        sketch.provenance["label"] = label
        sketches.append(sketch)
        description = "seed={} cond={} encoder={} denoiser={}\n{}".format(seed, label, generator.ids["encoder"],
                                                                          generator.ids["denoiser"], cfg.to_text())
        with open(os.path.join(out_dir, "sample_{:06d}.svg".format(seed)), "w", encoding = "utf-8") as handle:
            handle.write(export_svg(sketch, cfg.stroke_width, cfg.canvas, description))
    _write_table(generation_manifest(sketches), _path(cfg, "generated.csv"), "generation-manifest", cfg)
    if args.trajectory:
        try:
            timesteps = [int(t) for t in args.trajectory.split(",")]
        except ValueError:
            raise UsageError("--trajectory takes comma-separated integers, got {!r}".format(args.trajectory)) from None
        trajectory = snapshot_trajectory(generator, cfg.seed, timesteps, cond = cond)
        traj_dir = _path(cfg, "trajectory")
        os.makedirs(traj_dir, exist_ok = True)
        for t, sketch in zip(timesteps, trajectory):
            with open(os.path.join(traj_dir, "seed_{:06d}_t{:04d}.svg".format(cfg.seed, t)), "w", encoding = "utf-8") as handle:
                handle.write(export_svg(sketch, cfg.stroke_width, cfg.canvas, "seed={} t={}".format(cfg.seed, t)))
        if args.figure:
            from .plot import plot_trajectory
            plot_trajectory(trajectory).savefig(os.path.join(traj_dir, "seed_{:06d}.png".format(cfg.seed)))
    logger.info("generated %d sketches in %s", len(sketches), out_dir)


def cmd_reconstruct(args, cfg):
    model = load_autoencoder(_load_encoder(cfg))
    sketches = {s.source_id: s for s in _normalized_sketches(cfg)}
    if args.sketch_id not in sketches:
        raise DataError("no sketch with id {}".format(args.sketch_id))
    strokes = reconstruct_sketch(model, sketches[args.sketch_id])
    path = _path(cfg, "reconstruct_{}.svg".format(args.sketch_id))
    with open(path, "w", encoding = "utf-8") as handle:
        handle.write(export_svg(strokes, cfg.stroke_width, cfg.canvas, "reconstruction of {}".format(args.sketch_id)))
    report = reconstruction_report(model, [sketches[args.sketch_id]])
    logger.info("reconstruction of %s: mean point error %.5f", args.sketch_id, report["vec_error"].mean())


def _read_table(path, **kwargs):
    with open(path, "r", encoding = "utf-8") as handle:
        n_header = 0
        for line in handle:
            if not line.startswith("#"):
                break
            n_header += 1
    return pd.read_csv(path, skiprows = n_header, **kwargs)


def _generated_labels(cfg):
    """File name -> class label of the last generate run."""
    path = _path(cfg, "generated.csv")
    if not os.path.exists(path):
        return {}
    table = _read_table(path, dtype = {"label": str})
    return {"sample_{:06d}.svg".format(int(row.seed)): row.label for row in table.itertuples() if isinstance(row.label, str)}


def _read_generated(path, labels = None):
    if os.path.isdir(path):
        labels = labels or {}
        names = sorted(n for n in os.listdir(path) if n.endswith(".svg"))
        sketches = []
        for name in names:
            with open(os.path.join(path, name), "r", encoding = "utf-8") as handle:
                sketches.append(GeneratedSketch(read_svg(handle.read()), {"file": name, "label": labels.get(name)}))
        return sketches
    return [normalize_sketch(s) for s in read_sketches(_require(path)) if s.strokes]


def _noise_sketches(n, seed, n_points = 8):
    rng = rng_stream(seed, "noise-sketches")
    return [[rng.uniform(-1.0, 1.0, (n_points, 2)) for _ in range(int(rng.integers(1, 6)))] for _ in range(n)]


def cmd_evaluate(args, cfg):
    real = _normalized_sketches(cfg)
    labels = {} if args.generated else _generated_labels(cfg)
    generated = _read_generated(_require(args.generated or _path(cfg, "generated")), labels)
    metric_cfg = cfg.metric_config()
    reports = {"generated": evaluate(real, generated, metric_cfg)}
    if args.baselines:
        reference, holdout = real[0::2], real[1::2]
        reports["holdout"] = evaluate(reference, holdout, metric_cfg)
        reports["noise"] = evaluate(reference, _noise_sketches(len(holdout), cfg.seed), metric_cfg)
    if args.by_group:
        for group, report in evaluate_by_group(real, generated, metric_cfg).items():
            reports["group_" + group] = report
    with open(_path(cfg, "metrics.jsonl"), "w", encoding = "utf-8") as handle:
        handle.write('{{"format": "sketchDiffusion-metrics", "version": {}}}\n'.format(TABLE_VERSION))
        for name, report in reports.items():
            handle.write(json.dumps(dict(asdict(report), name = name), sort_keys = True) + "\n")
    table = report_to_frame(reports)
    _write_table(table.reset_index().rename(columns = {"index": "name"}), _path(cfg, "metrics.csv"), "metrics", cfg)
    print(table.to_string())


def _parse_points(text):
    try:
        points = np.array([[float(v) for v in pair.split(",")] for pair in text.split(";") if pair.strip()])
    except ValueError:
        raise UsageError("points must look like 'x,y;x,y', got {!r}".format(text)) from None
    if points.ndim != 2 or points.shape[1] != 2:
        raise UsageError("points must look like 'x,y;x,y', got {!r}".format(text))
    return points


def cmd_render_udf(args, cfg):
    if args.points:
        stroke = _parse_points(args.points)
    else:
        sketches = {s.source_id: s for s in _normalized_sketches(cfg)}
        if args.sketch_id not in sketches:
            raise DataError("no sketch with id {}".format(args.sketch_id))
        strokes = sketches[args.sketch_id].strokes
        if not 0 <= args.stroke < len(strokes):
            raise UsageError("sketch {} has no stroke {}".format(args.sketch_id, args.stroke))
        stroke, _ = normalize_stroke(resample_stroke(strokes[args.stroke], cfg.n_points))
    gammas = args.gamma or [cfg.gamma]
    out_dir = _path(cfg, "udf")
    os.makedirs(out_dir, exist_ok = True)
    rendered = []
    for gamma in gammas:
        field = render_udf(stroke, gamma, cfg.resolution, cfg.margin_scale)
        rendered.append(field)
        with open(os.path.join(out_dir, "render_g{:g}.pgm".format(gamma)), "wb") as handle:
            handle.write(udf_to_pgm(field))
    if args.figure:
        from .plot import plot_udf_sweep
        plot_udf_sweep(rendered).savefig(os.path.join(out_dir, "gamma_sweep.png"))


def cmd_ablate(args, cfg):
    sketches = _normalized_sketches(cfg)
    full_cfg = cfg.encoder_config()
    ablated_cfg = full_cfg
    if args.no_stroke_norm:
        ablated_cfg = replace(ablated_cfg, stroke_norm = False)
    if args.gamma is not None:
        ablated_cfg = replace(ablated_cfg, gamma = args.gamma)
    if ablated_cfg == full_cfg:
        raise UsageError("ablate needs --no-stroke-norm and/or --gamma 0")
    rows = {}
    for name, encoder_cfg in (("full", full_cfg), ("ablated", ablated_cfg)):
        dataset = build_stroke_dataset(sketches, encoder_cfg)
        checkpoint = train_autoencoder(dataset, encoder_cfg, cfg.encoder_steps, cfg.seed, lr = cfg.lr,
                                       weight_decay = cfg.weight_decay, warmup_steps = cfg.warmup_steps,
                                       batch_size = cfg.batch_size, log_every = cfg.log_every, progress = args.progress)
        report = reconstruction_report(load_autoencoder(checkpoint), sketches)
        rows[name] = {"stroke_norm": encoder_cfg.stroke_norm, "gamma": encoder_cfg.gamma,
                      "vec_error": report["vec_error"].mean(), "final_loss": checkpoint.loss_log["vec"].iloc[-1]}
    table = pd.DataFrame.from_dict(rows, orient = "index").reset_index().rename(columns = {"index": "variant"})
    _write_table(table, _path(cfg, "ablation.csv"), "ablation", cfg)
    print(table.to_string(index = False))


COMMANDS = {"ingest": cmd_ingest, "preprocess": cmd_preprocess, "train-encoder": cmd_train_encoder,
            "encode-dataset": cmd_encode_dataset, "train-diffusion": cmd_train_diffusion, "generate": cmd_generate,
            "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "render-udf": cmd_render_udf, "ablate": cmd_ablate}


## Parser ###############

def _add_config_flags(parser, skip = ()):
    group = parser.add_argument_group("config overrides (flags win over the config file)")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        flag, dest = "--" + f.name.replace("_", "-"), CONFIG_DEST + f.name
        if isinstance(f.default, bool):
            group.add_argument(flag, dest = dest, action = argparse.BooleanOptionalAction, default = argparse.SUPPRESS)
        else:
            group.add_argument(flag, dest = dest, type = str, default = argparse.SUPPRESS, metavar = f.name.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog = "sketchDiffusion", description = "Two-stage vector sketch generation.",
                                     formatter_class = argparse.RawDescriptionHelpFormatter,
                                     epilog = "The config file defaults to ${}.".format(CONFIG_ENV))
    common = argparse.ArgumentParser(add_help = False)
    common.add_argument("--config", help = "key=value config file")
    common.add_argument("-v", "--verbose", action = "store_true", help = "debug logging")
    common.add_argument("-q", "--quiet", action = "store_true", help = "warnings only")
    common.add_argument("--progress", action = "store_true", help = "progress bars for training loops")
    subparsers = parser.add_subparsers(dest = "command", metavar = "command")
    subparsers.required = True

    def add(name, text):
        return subparsers.add_parser(name, parents = [common], help = text, allow_abbrev = False)

    sub = add("ingest", "parse QuickDraw NDJSON, filter, write manifest")
    sub.add_argument("--input", required = True, help = "QuickDraw .ndjson file")
    _add_config_flags(sub)
    for name, text in (("preprocess", "resample, normalize and render stroke fields"),
                       ("train-encoder", "train the stroke autoencoder"),
                       ("encode-dataset", "encode every sketch with the frozen encoder"),
                       ("train-diffusion", "train the latent denoiser")):
        _add_config_flags(add(name, text))

    sub = add("generate", "sample sketches as SVG, seeds seed .. seed + n - 1")
    sub.add_argument("--n", type = int, default = 1, help = "number of samples")
    sub.add_argument("--cond", help = "class name or id")
    sub.add_argument("--trajectory", help = "comma-separated timesteps to snapshot, e.g. 1000,500,100,1")
    sub.add_argument("--figure", action = "store_true", help = "also write a trajectory figure")
    _add_config_flags(sub)

    sub = add("reconstruct", "autoencoder round trip of one sketch")
    sub.add_argument("--sketch-id", required = True)
    _add_config_flags(sub)

    sub = add("evaluate", "FID / precision / recall of generated sketches")
    sub.add_argument("--generated", help = "directory of SVGs or a sketch file; the generate output by default")
    sub.add_argument("--baselines", action = "store_true", help = "also report real-holdout and noise baselines")
    sub.add_argument("--by-group", action = "store_true", help = "also report per stroke-complexity group (low, medium, high)")
    _add_config_flags(sub)

    sub = add("render-udf", "render one stroke's field as PGM")
    source = sub.add_mutually_exclusive_group(required = True)
    source.add_argument("--points", help = "unit-square points 'x,y;x,y;...'")
    source.add_argument("--sketch-id")
    sub.add_argument("--stroke", type = int, default = 0)
    sub.add_argument("--gamma", type = float, nargs = "+", help = "one or more sharpness values")
    sub.add_argument("--figure", action = "store_true", help = "also write the gamma sweep figure")
    _add_config_flags(sub, skip = ("gamma",))

    sub = add("ablate", "compare an ablated autoencoder with the full one")
    sub.add_argument("--no-stroke-norm", action = "store_true")
    sub.add_argument("--gamma", type = float, help = "0 removes the image branch")
    _add_config_flags(sub, skip = ("gamma", "stroke_norm"))
    return parser


def dispatch(argv):
    """
    It runs one subcommand.

    Parameters
    ----------
    argv: list of string
        the arguments after the program name

    Returns
    -------
    code: int
        0 success, 2 usage error, 3 data error, 4 numeric failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit:
        return EXIT_OK if not exit.code else EXIT_USAGE
    log_config(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)
    overrides = {key[len(CONFIG_DEST):]: value for key, value in vars(args).items() if key.startswith(CONFIG_DEST)}
    try:
        cfg = RunConfig.resolve(args.config, overrides)
        os.makedirs(cfg.work_dir, exist_ok = True)
        COMMANDS[args.command](args, cfg)
    except UsageError as error:
        logger.error("%s", error)
        return EXIT_USAGE
    except NumericError as error:
        logger.error("%s", error)
        return EXIT_NUMERIC
    except (DataError, Error, OSError) as error:
        logger.error("%s", error)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(dispatch(sys.argv[1:]))


class MissingArtifactError(DataError):
    """Raised when a stage input file does not exist"""
