"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .camera import CameraPose, sample_poses
from .errors import ConfigError, ExtractorError, NumericalError
from .gaussians import NUM_ATTRIBUTES, POSITION, save_ply
from .guidance import PointMassPredictor
from .hypergraph import (
    build_knn_hypergraph, concat_hypergraphs, format_edge_list, hgnn_forward,
)
from .patchify import kmeans
from .pipeline import (
    ATTRIBUTE_GROUPS, PipelineConfig, RefinerCache, ReferenceTargets, hg_refine_step,
    optimize, resolve_init,
)
from .render import render, save_png

log = logging.getLogger("hyper3dg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
K_PAT_ADVISED = (10, 150)


def _floats(text, n=3):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(vals)


def _add_config_flags(parser):
    group = parser.add_argument_group("pipeline configuration")
    group.add_argument("--config", help="JSON file whose keys are PipelineConfig field names")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        if kind is tuple:
            group.add_argument(flag, dest=f.name, default=None, metavar="R,G,B")
        else:
            group.add_argument(flag, dest=f.name, default=None, type=kind, metavar=kind.__name__.upper())


def _config_from_args(args):
    data = {}
    if getattr(args, "config", None):
        data.update(dataclasses.asdict(PipelineConfig.from_json(args.config)))
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = _floats(value) if isinstance(f.default, tuple) else value
    config = PipelineConfig.from_dict(data).validate()
    lo, hi = K_PAT_ADVISED
    if not lo <= config.k_pat <= hi:
        log.warning("k_pat=%d is outside the advised range [%d, %d]", config.k_pat, lo, hi)
    return config


def _predictor(args, config):
    if args.reference:
        reference = resolve_init(args.reference, config.seed)
        targets = ReferenceTargets(reference, config.background)
    elif args.target_color:
        color = np.asarray(_floats(args.target_color))
        targets = {args.prompt: color}
    else:
        raise ConfigError("optimize needs --reference PLY or --target-color R,G,B")
    unconditional = "anchor" if args.unconditional == "anchor" else 0.5
    return PointMassPredictor(targets, unconditional, config.schedule)


def _write_json(path, data):
    text = json.dumps(data, indent=2)
    if path in (None, "-"):
        print(text)
        return
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _save_points_ply(points, path):
    points = np.ascontiguousarray(points, dtype="<f4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {points.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    ).encode("ascii")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + points.tobytes())
    os.replace(tmp, path)


def _load_poses(path, width, height):
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    poses = []
    for item in items:
        kw = {k: item[k] for k in ("eye", "target", "up") if k in item}
        if "fov_y_deg" in item:
            kw["fov_y"] = np.deg2rad(float(item["fov_y_deg"]))
        poses.append(CameraPose(width=item.get("width", width), height=item.get("height", height), **kw))
    return poses


# subcommands ---------------------------------------------------------------


def cmd_init(args):
    cloud = resolve_init(args.source, args.seed)
    save_ply(cloud, args.output)
    print(f"wrote {len(cloud)} Gaussians to {args.output}")


def cmd_optimize(args):
    config = _config_from_args(args)
    predictor = _predictor(args, config)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    _, report = optimize(config, args.init, args.prompt, predictor, output=args.output,
                         checkpoint_dir=args.checkpoint_dir)
    data = report.to_dict()
    data["wall_time"] = time.perf_counter() - t0
    data["config"] = config.to_dict()
    if args.report:
        _write_json(args.report, data)
    last = report.loss_trace[-1] if report.loss_trace else float("nan")
    print(f"{report.iterations} iterations, {report.blocks} refine blocks, final loss {last:.6g}")


def _delta_stats(delta, labels):
    stats = {}
    for name, sl in {**ATTRIBUTE_GROUPS, "scale": slice(4, 7), "rotation": slice(7, 11)}.items():
        block = np.abs(delta[:, sl])
        stats[name] = {"mean_abs": float(block.mean()), "max_abs": float(block.max())}
    stats["n_patches"] = int(labels.max() + 1)
    return stats


def cmd_refine_step(args):
    config = _config_from_args(args)
    cloud = resolve_init(args.input, config.seed).check_finite()
    refined, cache = hg_refine_step(cloud, RefinerCache(), config, None,
                                    np.random.default_rng(config.seed), rebuild=True)
    if args.output:
        save_ply(refined, args.output)
    if args.dump_edges:
        if cache.hypergraph is None:
            raise ConfigError("--dump-edges requires conv=hgnn")
        Path(args.dump_edges).write_text(format_edge_list(cache.hypergraph), encoding="utf-8")
    stats = _delta_stats(refined.params - cloud.params, cache.labels)
    stats["damping"] = config.refine_damping
    _write_json(args.stats, stats)


def cmd_render(args):
    cloud = resolve_init(args.input, args.seed).check_finite()
    if args.poses:
        poses = _load_poses(args.poses, args.width, args.height)
    else:
        poses = sample_poses(args.views, args.radius, seed=args.seed, width=args.width,
                             height=args.height, fov_y=np.deg2rad(args.fov_y_deg))
    background = _floats(args.background)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        save_png(render(cloud, pose, background), out / f"view_{i:03d}.png",
                 with_alpha=not args.opaque, background=background)
    print(f"wrote {len(poses)} images to {out}")


def cmd_patchify(args):
    lo, hi = K_PAT_ADVISED
    if not lo <= args.k_pat <= hi:
        log.warning("k_pat=%d is outside the advised range [%d, %d]", args.k_pat, lo, hi)
    cloud = resolve_init(args.input, args.seed)
    result = kmeans(cloud.positions, args.k_pat, seed=args.seed, max_iter=args.max_iter)
    tmp = Path(str(args.labels) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        writer.writerows(enumerate(result.labels.tolist()))
    os.replace(tmp, args.labels)
    if args.centroids:
        _save_points_ply(result.centroids, args.centroids)
    print(f"{result.n_patches} patches, sse {result.sse:.6g}, {result.n_iter} iterations")


def cmd_bench(args):
    from .gaussians import synth_init

    cloud = synth_init(args.shape, args.m, seed=args.seed)
    timings = {}
    t = time.perf_counter()
    result = kmeans(cloud.positions, args.k_pat, seed=args.seed)
    timings["patchify"] = time.perf_counter() - t
    from .patchify import patch_means

    vbar = patch_means(cloud, result)
    rng = np.random.default_rng(args.seed)
    feats = rng.standard_normal((result.n_patches, args.feature_dim))
    t = time.perf_counter()
    h = concat_hypergraphs(build_knn_hypergraph(vbar[:, POSITION], args.k_spa, "spatial"),
                           build_knn_hypergraph(feats, args.k_lat, "latent"))
    timings["construction"] = time.perf_counter() - t
    x = np.concatenate([vbar, feats], axis=1)
    t = time.perf_counter()
    hgnn_forward(x, h)
    timings["hgnn"] = time.perf_counter() - t
    timings["total"] = timings["patchify"] + timings["construction"] + timings["hgnn"]
    _write_json(args.output, {"m": args.m, "k_pat": args.k_pat, "feature_dim": args.feature_dim,
                              "attributes": NUM_ATTRIBUTES, "seconds": timings})


def build_parser():
    parser = argparse.ArgumentParser(prog="hyper3dg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a cloud from synth:SHAPE:M[:SEED] or a PLY")
    p.add_argument("source")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("optimize", help="run warm-up and refine blocks")
    p.add_argument("--init", required=True, help="PLY path or synth:SHAPE:M[:SEED]")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="cloud whose renders are the point-mass targets")
    p.add_argument("--target-color", help="constant target color R,G,B")
    p.add_argument("--unconditional", choices=("anchor", "gray"), default="anchor")
    p.add_argument("--prompt", default="reference")
    p.add_argument("--report", help="write the run report as JSON")
    p.add_argument("--checkpoint-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("refine-step", help="apply the refiner once and print increment stats")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.add_argument("--stats", default="-", help="stats JSON path (default stdout)")
    p.add_argument("--dump-edges", help="write the hyperedge list as text")
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine_step)

    p = sub.add_parser("render", help="render a cloud to PNGs")
    p.add_argument("input")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--poses", help="JSON list of {eye, target, up, fov_y_deg}")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--fov-y-deg", type=float, default=49.1)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--opaque", action="store_true", help="composite over background, no alpha")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("patchify", help="K-Means labels as CSV")
    p.add_argument("input")
    p.add_argument("--labels", required=True)
    p.add_argument("--centroids")
    p.add_argument("--k-pat", type=int, default=50)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("bench", help="time patchify, construction and one convolution")
    p.add_argument("--m", type=int, default=100_000)
    p.add_argument("--k-pat", type=int, default=50)
    p.add_argument("--k-spa", type=int, default=13)
    p.add_argument("--k-lat", type=int, default=13)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--shape", default="sphere")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ExtractorError as exc:
        print(f"extractor error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(exc.diagnostics, file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
