"""Command-line interface.

Subcommands: gen-data, train-loc, sample, train-seg, predict, eval, ablate,
add-class, gradcheck, render, run. A single JSON config drives `run` and
`ablate`; individual stage commands take explicit flags. Flags always win
over config-file values. `--jobs` (or the DIVSEED_JOBS environment variable)
sizes the worker pool for per-class localizer training and per-image scoring.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline
from .dataset import load_manifest, write_dataset
from .errors import ConfigError, DataError, DivseedError, NumericError, TensorFormatError
from .localization import (
    LocConfig,
    ScoreMap,
    load_loc_checkpoint,
    save_loc_checkpoint,
    score_image,
    train_localizer,
)
from .nn import grad_check, init_linear, linear_fwd, masked_ce_loss_and_grad
from .render import save_heatmap_pgm, save_label_ppm, save_overlay_ppm
from .rng import Rng, derive_seed
from .sampling import SamplingConfig, load_points, save_points
from .segmentation import (
    SegConfig,
    add_class,
    augment_with_global,
    load_seg_checkpoint,
    predict,
    save_seg_checkpoint,
    train_segmentation,
)
from .synthdata import ExtractorSpec, generate_dataset
from .tensor import load_tensor, save_tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _resolve_jobs(args) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    env = os.environ.get("DIVSEED_JOBS", "")
    return int(env) if env.isdigit() and int(env) > 0 else 1


def _strategy_name(cli_name: str) -> str:
    return "top_k" if cli_name == "topk" else cli_name


def _load_config(args) -> pipeline.PipelineConfig:
    doc = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set wants key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            doc[key] = json.loads(raw)
        except json.JSONDecodeError:
            doc[key] = raw
    cfg = pipeline.PipelineConfig.from_dict(doc)
    jobs = _resolve_jobs(args)
    if jobs != cfg.jobs:
        cfg = pipeline.base_with(cfg, {"jobs": jobs})
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    scenes = generate_dataset(
        args.n, args.classes, args.size, args.size, args.seed, id_prefix=args.prefix
    )
    spec = ExtractorSpec(seed=derive_seed(args.seed, pipeline._STREAM_EXTRACTOR)
                         if args.extractor_seed is None else args.extractor_seed)
    manifest = write_dataset(args.out, scenes, spec, stats_from=args.stats_from)
    print(f"wrote {len(scenes)} scenes -> {manifest}")
    return EXIT_OK


def cmd_train_loc(args) -> int:
    manifest = load_manifest(args.data)
    records = manifest.load_records()
    config = LocConfig(hidden=args.hidden, pooling=args.pooling)
    result = train_localizer(
        args.class_id,
        [(r.features, r.tags) for r in records],
        config,
        seed=args.seed,
    )
    save_loc_checkpoint(args.out, result)
    print(
        f"class {args.class_id}: epochs={len(result.epoch_losses)} "
        f"final_loss={result.epoch_losses[-1]:.4f} -> {args.out}"
    )
    if args.export_maps:
        os.makedirs(args.export_maps, exist_ok=True)
        n = 0
        for rec in records:
            if args.class_id not in rec.tags:
                continue
            sm = score_image(result.model, rec.features, image_id=rec.image_id)
            save_tensor(
                np.stack([sm.fg, sm.bg]),
                os.path.join(args.export_maps, f"{rec.image_id}__c{args.class_id}.dstn"),
            )
            n += 1
        print(f"exported {n} score maps -> {args.export_maps}")
    return EXIT_OK


def _load_map_dir(map_dir: str) -> dict[str, dict[int, "ScoreMap"]]:
    maps: dict[str, dict[int, ScoreMap]] = {}
    names = sorted(n for n in os.listdir(map_dir) if n.endswith(".dstn"))
    for name in names:
        stem = name[: -len(".dstn")]
        if "__c" not in stem:
            raise DataError(f"score map file {name!r} not named <image>__c<class>.dstn")
        image_id, cid = stem.rsplit("__c", 1)
        arr = load_tensor(os.path.join(map_dir, name))
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise DataError(f"{name}: expected a (2, H, W) tensor, got {arr.shape}")
        maps.setdefault(image_id, {})[int(cid)] = ScoreMap(
            class_id=int(cid), image_id=image_id, fg=arr[0], bg=arr[1]
        )
    return maps


def cmd_sample(args) -> int:
    from .sampling import compute_dense_calibration, image_stream, sample_image

    manifest = load_manifest(args.features)
    records = manifest.load_records()
    maps_by_image = _load_map_dir(args.in_dir)
    config = SamplingConfig(
        k=args.k, strategy=_strategy_name(args.strategy), tau=args.tau,
        spatial_scale=args.spatial_scale,
    )
    calibration = (
        compute_dense_calibration(maps_by_image) if args.strategy == "dense" else {}
    )
    points = []
    for index, rec in enumerate(records):
        maps = maps_by_image.get(rec.image_id, {})
        points.extend(
            sample_image(rec, maps, config, calibration,
                         image_stream(args.seed, index))
        )
    save_points(points, args.out)
    print(f"{len(points)} points -> {args.out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    manifest = load_manifest(args.features)
    records = manifest.load_records()
    points = load_points(args.points)
    features = {r.image_id: augment_with_global(r.features) for r in records}
    config = SegConfig(
        hidden=args.hidden, lr=args.lr, epochs=args.epochs, batch_size=args.batch
    )
    result = train_segmentation(points, features, manifest.classes, config, args.seed)
    save_seg_checkpoint(args.out, result, config)
    print(
        f"{len(points)} points, {result.wall_seconds:.1f}s, "
        f"final_loss={result.epoch_losses[-1]:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    manifest = load_manifest(args.data)
    model = load_seg_checkpoint(args.model)
    entry = next((e for e in manifest.entries if e.image_id == args.image), None)
    if entry is None:
        raise DataError(f"image {args.image!r} not in manifest")
    feats = manifest.load_unit_features(entry, manifest.load_stats())
    labels, _ = predict(model, augment_with_global(feats))
    save_tensor(labels.astype(np.float32), args.out)
    print(f"labels -> {args.out}")
    if args.ppm:
        save_label_ppm(labels, model.background_index, args.ppm)
        print(f"rendered -> {args.ppm}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    model = load_seg_checkpoint(args.model)
    stats = manifest.load_stats()
    images = [
        pipeline.EvalImage(
            image_id=e.image_id,
            features=manifest.load_unit_features(e, stats),
            truth=manifest.load_grid_truth(e),
        )
        for e in manifest.entries
    ]
    report, _ = pipeline.evaluate_images(model, images, manifest.background_label)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"miou={report.miou:.4f} -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config(args)
    summary = pipeline.run_pipeline(config, args.out)
    for stage in summary["stages"]:
        print(f"{stage['name']:>10s}: {stage['seconds']:.1f}s")
    print(f"miou={summary['report']['miou']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    with open(args.grid) as fh:
        grid = json.load(fh)
    base = pipeline.PipelineConfig.from_dict(grid.get("base", {}))
    variants = grid.get("variants", [])
    if not variants:
        raise ConfigError("ablation grid has no variants")
    seeds = grid.get("seeds") or [derive_seed(base.seed, i) % 10**6
                                  for i in range(args.seeds)]
    summary = pipeline.ablation_run(
        base, variants, seeds, jobs=_resolve_jobs(args), log=print
    )
    with open(args.out + ".json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = pipeline.format_ablation_table(summary)
    with open(args.out + ".txt", "w") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_add_class(args) -> int:
    new_manifest = load_manifest(args.data)
    base_manifest = load_manifest(args.base_data)
    stats = base_manifest.load_stats()  # normalization stays frozen
    new_records = new_manifest.load_records(stats)
    base_records = base_manifest.load_records(stats)
    loc_models = {}
    for name in sorted(os.listdir(args.loc_dir)):
        path = os.path.join(args.loc_dir, name)
        if os.path.isdir(path):
            model = load_loc_checkpoint(path)
            loc_models[model.class_id] = model
    points = load_points(args.points)
    features = {r.image_id: augment_with_global(r.features) for r in base_records}
    result = add_class(
        args.class_id,
        new_records,
        loc_models,
        points,
        features,
        base_manifest.classes,
        LocConfig(hidden=args.loc_hidden, pooling=args.pooling),
        SamplingConfig(k=args.k, strategy=_strategy_name(args.strategy)),
        SegConfig(hidden=args.seg_hidden, lr=args.lr, epochs=args.epochs,
                  batch_size=args.batch),
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    save_loc_checkpoint(
        os.path.join(args.out, f"loc_class_{args.class_id}"), result.loc_result
    )
    save_points(result.merged_points, os.path.join(args.out, "points.jsonl"))
    save_seg_checkpoint(
        os.path.join(args.out, "seg.ckpt"),
        result.seg_result,
        SegConfig(hidden=args.seg_hidden, lr=args.lr, epochs=args.epochs,
                  batch_size=args.batch),
    )
    print(
        f"class {args.class_id} added: +{len(result.new_points)} points, "
        f"universe {list(result.class_ids)} -> {args.out}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference checks of the three hand-derived losses."""
    from .nn import (
        bce_loss_and_grad,
        global_softmax_prob,
        linear_backward,
        pixel_softmax_prob,
        relu,
        relu_backward,
    )

    rng = Rng(args.seed)
    failures = 0
    n, d, h = 12, 6, 5

    def loc_loss(pooling):
        x = rng.uniform_array(n * d, -1, 1).reshape(n, d)
        label = 1

        def fn(params):
            w1, b1, w2, b2 = params
            from .nn import LinearLayer

            l1 = LinearLayer(w1, b1)
            l2 = LinearLayer(w2, b2)
            h1 = linear_fwd(l1, x)
            a1 = relu(h1)
            y = linear_fwd(l2, a1)
            pool = pixel_softmax_prob if pooling == "pixel" else global_softmax_prob
            p, trace = pool(y[:, 0], y[:, 1])
            lv = bce_loss_and_grad(p, label, trace, n_locations=n)
            dy = np.stack([lv.grads["fg"], lv.grads["bg"]], axis=1)
            dw2, db2, da1 = linear_backward(l2, a1, dy)
            dh1 = relu_backward(h1, da1)
            dw1, db1, _ = linear_backward(l1, x, dh1)
            return lv.loss, [dw1, db1, dw2, db2]

        return fn

    def masked_loss():
        x = rng.uniform_array(n * d, -1, 1).reshape(n, d)
        labels = [(i, i % 4) for i in range(0, n, 2)]

        def fn(params):
            w, b = params
            from .nn import LinearLayer

            logits = linear_fwd(LinearLayer(w, b), x)
            lv = masked_ce_loss_and_grad(logits, labels)
            dw, db, _ = linear_backward(LinearLayer(w, b), x, lv.grads["logits"])
            return lv.loss, [dw, db]

        return fn

    checks = []
    init = Rng(derive_seed(args.seed, 1))
    l1 = init_linear(init, d, h)
    l2 = init_linear(init, h, 2)
    for pooling in ("pixel", "global"):
        err = grad_check(
            loc_loss(pooling),
            [l1.weights.copy(), l1.bias.copy(), l2.weights.copy(), l2.bias.copy()],
            Rng(derive_seed(args.seed, 2)),
        )
        checks.append((f"pooled-bce[{pooling}]", err))
    out = init_linear(init, d, 4)
    err = grad_check(
        masked_loss(), [out.weights.copy(), out.bias.copy()],
        Rng(derive_seed(args.seed, 3)),
    )
    checks.append(("masked-ce", err))

    for name, err in checks:
        ok = err < args.tol
        failures += not ok
        print(f"{name:20s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def cmd_render(args) -> int:
    if args.kind == "heatmap":
        if not args.input:
            raise ConfigError("render heatmap needs --in")
        arr = load_tensor(args.input)
        if arr.ndim == 3 and arr.shape[0] == 2:
            arr = arr[0 if args.channel == "fg" else 1]
        if arr.ndim != 2:
            raise DataError(f"cannot render shape {arr.shape} as a heatmap")
        save_heatmap_pgm(arr, args.out)
    elif args.kind == "labels":
        if not args.input or args.background_index is None:
            raise ConfigError("render labels needs --in and --background-index")
        labels = load_tensor(args.input).astype(np.int64)
        save_label_ppm(labels, args.background_index, args.out)
    elif args.kind == "points":
        if not (args.points and args.data and args.image):
            raise ConfigError("render points needs --points, --data and --image")
        manifest = load_manifest(args.data)
        entry = next(
            (e for e in manifest.entries if e.image_id == args.image), None
        )
        if entry is None:
            raise DataError(f"image {args.image!r} not in manifest")
        image = load_tensor(manifest.path(entry.image_path))
        points = [p for p in load_points(args.points) if p.image_id == args.image]
        gh, gw = manifest.grid_size
        cell = manifest.image_size[0] // gh
        save_overlay_ppm(image, points, gw, cell, args.out)
    print(f"rendered -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divseed", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--prefix", default="scene")
    g.add_argument("--stats-from", default=None,
                   help="reuse an existing stats.dstn instead of computing one")
    g.add_argument("--extractor-seed", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-loc", help="train one class's localizer")
    t.add_argument("--class", dest="class_id", type=int, required=True)
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--pooling", choices=["pixel", "global"], default="global")
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--out", required=True)
    t.add_argument("--export-maps", default=None,
                   help="also write score maps for positive images")
    t.set_defaults(fn=cmd_train_loc)

    s = sub.add_parser("sample", help="sample pseudo-label points from score maps")
    s.add_argument("--strategy", choices=["diverse", "topk", "spatial", "dense"],
                   required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--tau", type=float, default=0.2)
    s.add_argument("--spatial-scale", type=float, default=None)
    s.add_argument("--in", dest="in_dir", required=True, help="score map directory")
    s.add_argument("--features", required=True, help="dataset manifest")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    ts = sub.add_parser("train-seg", help="train the segmentation head on points")
    ts.add_argument("--points", required=True)
    ts.add_argument("--features", required=True, help="dataset manifest")
    ts.add_argument("--hidden", type=int, default=128)
    ts.add_argument("--lr", type=float, default=1e-3)
    ts.add_argument("--epochs", type=int, default=2)
    ts.add_argument("--batch", type=int, default=100)
    ts.add_argument("--seed", type=int, default=7)
    ts.add_argument("--out", required=True)
    ts.set_defaults(fn=cmd_train_seg)

    pr = sub.add_parser("predict", help="dense labels for one image")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--ppm", default=None)
    pr.set_defaults(fn=cmd_predict)

    ev = sub.add_parser("eval", help="mIoU report over a manifest")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(fn=cmd_eval)

    r = sub.add_parser("run", help="full pipeline from a config")
    r.add_argument("--config", default=None, help="JSON config document")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (flags win)")
    r.add_argument("--out", required=True)
    r.add_argument("--jobs", type=int, default=None)
    r.set_defaults(fn=cmd_run)

    ab = sub.add_parser("ablate", help="run a config grid and tabulate mIoU")
    ab.add_argument("--grid", required=True,
                    help='JSON: {"base": {...}, "variants": [{...}], "seeds": [...]}')
    ab.add_argument("--seeds", type=int, default=5,
                    help="seed count when the grid lists none")
    ab.add_argument("--out", required=True, help="output prefix (.txt / .json)")
    ab.add_argument("--jobs", type=int, default=None)
    ab.set_defaults(fn=cmd_ablate)

    ac = sub.add_parser("add-class", help="extend the system with one new class")
    ac.add_argument("--class", dest="class_id", type=int, required=True)
    ac.add_argument("--data", required=True, help="manifest of the new images")
    ac.add_argument("--base-data", required=True, help="original training manifest")
    ac.add_argument("--loc-dir", required=True,
                    help="directory of existing localization checkpoints")
    ac.add_argument("--points", required=True, help="existing points.jsonl")
    ac.add_argument("--out", required=True)
    ac.add_argument("--seed", type=int, default=7)
    ac.add_argument("--pooling", choices=["pixel", "global"], default="global")
    ac.add_argument("--strategy", choices=["diverse", "topk", "spatial"],
                    default="diverse")
    ac.add_argument("--k", type=int, default=20)
    ac.add_argument("--loc-hidden", type=int, default=64)
    ac.add_argument("--seg-hidden", type=int, default=128)
    ac.add_argument("--lr", type=float, default=1e-3)
    ac.add_argument("--epochs", type=int, default=2)
    ac.add_argument("--batch", type=int, default=100)
    ac.set_defaults(fn=cmd_add_class)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--seed", type=int, default=7)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)

    rd = sub.add_parser("render", help="PGM/PPM figure outputs")
    rd.add_argument("--kind", choices=["heatmap", "labels", "points"], required=True)
    rd.add_argument("--in", dest="input", default=None, help="input tensor")
    rd.add_argument("--channel", choices=["fg", "bg"], default="fg")
    rd.add_argument("--background-index", type=int, default=None)
    rd.add_argument("--points", default=None)
    rd.add_argument("--data", default=None)
    rd.add_argument("--image", default=None)
    rd.add_argument("--out", required=True)
    rd.set_defaults(fn=cmd_render)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TensorFormatError as e:
        print(f"file format error: {e}", file=sys.stderr)
        return EXIT_IO
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except DivseedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
