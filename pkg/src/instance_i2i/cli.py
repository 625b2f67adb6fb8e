"""Command-line entry point.

Exit codes: 0 ok, 1 usage or config error, 2 data / checkpoint error,
3 numeric failure.  Every command prints the paths it produced as a final
JSON line on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from .config import ConfigError, RunConfig, config_from_dict, resolve_config
from .losses import NonFiniteLossError
from .networks import DimensionError
from .training import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS = ("diversity", "is", "cis", "hue_shift")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# -- data -----------------------------------------------------------------------


def _object_size(image_size: int) -> tuple[int, int]:
    # 10..24 px objects at the default 64 px, scaled for other sizes
    return max(1, image_size // 6), max(1, image_size * 3 // 8)


def load_corpora(cfg: RunConfig):
    """``(train_x, train_y, test_x, test_y, domain_names)`` for the configured dataset."""
    size = cfg.train.image_size
    if cfg.data.synthetic:
        spec = ds.SyntheticSceneSpec(image_size=size, n_images=cfg.data.synthetic_images, seed=cfg.data_seed,
                                     object_size=_object_size(size))
        manifest = ds.merge_manifests(*ds.generate_synthetic(spec))
        manifest.split_ratio, manifest.seed = cfg.data.split_ratio, cfg.data.split_seed
    elif cfg.data.manifest:
        manifest = ds.load_manifest(cfg.data.manifest, cfg.data.split_ratio, cfg.data.split_seed)
    else:
        raise ConfigError("no dataset: pass --synthetic or set data.manifest")
    names = tuple(cfg.data.domains or manifest.domains[:2])
    if len(names) != 2 or len(set(names)) != 2:
        raise ConfigError(f"exactly two distinct domains are needed, got {names}")
    train_ids, test_ids = ds.split(manifest)
    rng = np.random.default_rng(cfg.data_seed)

    def prep(ids, name):
        out = []
        for s in manifest.samples(name, ids, domain_order=names):
            if (s.height, s.width) != (size, size):
                s = ds.random_crop(ds.resize_short_side(s, size), size, rng)
            out.append(s)
        return out

    return (prep(train_ids, names[0]), prep(train_ids, names[1]),
            prep(test_ids, names[0]), prep(test_ids, names[1]), names)


def _run_config_of(meta: dict) -> RunConfig:
    rc = meta.get("run_config")
    if rc:
        return config_from_dict(rc)
    return config_from_dict({"network": meta["network"], "train": meta["train"], "loss": meta["loss"]})


def _domain_index(target: str, names) -> int:
    if target in names:
        return list(names).index(target)
    if target in ("0", "1"):
        return int(target)
    raise UsageError(f"unknown target domain {target!r}; expected one of {list(names)} or 0/1")


def _read_dir(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    if not path.is_dir():
        raise ds.MissingFileError(f"missing input directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    return [(p.stem, ds.read_image(p)) for p in files]


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    from .training import Trainer, save_checkpoint

    flags = {"train.iterations": args.iterations, "train.seed": args.seed,
             "data.synthetic": True if args.synthetic else None, "data.manifest": args.manifest}
    cfg = resolve_config(args.config, args.set or (), flags)
    train_x, train_y, _, _, names = load_corpora(cfg)
    if not train_x or not train_y:
        raise ds.ManifestError("both domains need at least one training image")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.yaml"
    run_dict = cfg.to_dict()
    run_dict["data"]["domains"] = list(names)
    config_path.write_text(config_from_dict(run_dict).dump())

    trainer = Trainer(cfg.network, cfg.train, cfg.loss)
    log_path = out / "train_log.jsonl"
    checkpoints = []
    start = time.time()
    with open(log_path, "w") as log:
        def on_step(tr, report):
            line = {"iteration": tr.iteration, **report.to_dict(), "wall_time": round(time.time() - start, 3)}
            log.write(json.dumps(line, sort_keys=True) + "\n")
            every = cfg.train.checkpoint_every
            if every and tr.iteration % every == 0:
                checkpoints.append(str(save_checkpoint(tr, out / "checkpoints" / f"iter_{tr.iteration:06d}",
                                                       run_dict)))

        reports = trainer.fit(train_x, train_y, cfg.train.iterations, on_step=on_step)
    if reports:
        last = reports[-1]
        print(f"final iteration {trainer.iteration}: total={last.total:.8f} "
              f"global_recon={last.global_recon:.8f} gan_discriminator={last.gan_discriminator:.8f}")
    final = save_checkpoint(trainer, out / "checkpoints" / "final", run_dict)
    _emit({"config": str(config_path), "log": str(log_path), "checkpoint": str(final),
           "checkpoints": checkpoints})
    return EXIT_OK


def cmd_translate(args) -> int:
    from .training import load_checkpoint, read_meta, translate

    meta = read_meta(args.checkpoint)
    model = load_checkpoint(args.checkpoint).model
    names = _run_config_of(meta).data.domains or ("0", "1")
    target = _domain_index(args.target_domain, names)
    if args.n_styles < 1:
        raise UsageError("--n-styles must be >= 1")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    outputs, grids = [], []
    for stem, px in _read_dir(args.input_dir):
        styles = torch.randn(args.n_styles, model.cfg.style_dim, generator=gen, dtype=model.dtype)
        x = torch.from_numpy(px).to(model.dtype)[None].expand(args.n_styles, -1, -1, -1)
        imgs = translate(model, x, target, style=styles).double().numpy()
        for k, img in enumerate(imgs):
            p = out / f"{stem}_style{k:02d}.png"
            ds.write_image(img, p)
            outputs.append(str(p))
        grid = np.concatenate([px, *imgs], axis=2)
        p = out / f"{stem}_grid.png"
        ds.write_image(grid, p)
        grids.append(str(p))
    _emit({"outputs": outputs, "grids": grids})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import evaluation as ev
    from .training import load_checkpoint, read_meta

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown or not metrics:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {list(METRICS)}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model, cfg = None, RunConfig()
    if args.checkpoint:
        cfg = _run_config_of(read_meta(args.checkpoint))
        model = load_checkpoint(args.checkpoint).model
    n_inputs = args.n_inputs or cfg.eval.n_inputs
    pairs = args.pairs or cfg.eval.pairs_per_input

    corpora = None
    if args.synthetic or args.manifest:
        data = {"synthetic": bool(args.synthetic), "manifest": args.manifest}
        cfg = config_from_dict({**cfg.to_dict(), "data": {**cfg.to_dict()["data"], **data}})
        corpora = load_corpora(cfg)
    if args.input_dir:
        inputs = [px for _, px in _read_dir(args.input_dir)]
    elif corpora is not None:
        inputs = [s.pixels for s in corpora[2]]
    else:
        inputs = []

    def need_model(metric):
        if model is None:
            raise UsageError(f"metric {metric!r} needs --checkpoint")

    def classifier_probs():
        need_model("is/cis")
        if corpora is None:
            raise UsageError("is/cis without --probs need labelled data (--synthetic or --manifest)")
        clf = ev.train_domain_classifier(corpora[0] + corpora[1], seed=args.seed)
        if len(inputs) < n_inputs:
            raise ds.ManifestError(f"need {n_inputs} inputs, got {len(inputs)}")
        return ev.translation_probs(model, inputs[:n_inputs], clf, cfg.eval.cis_samples, args.seed)

    probs_cache = {}
    written = {}
    for metric in metrics:
        extractor_id = None
        if metric == "diversity":
            need_model(metric)
            extractor = ev.RandomConvExtractor(seed=cfg.eval.extractor_seed)
            extractor_id = extractor.extractor_id
            try:
                value = ev.diversity_score(model, inputs, pairs, extractor, args.seed, n_inputs)
            except ValueError as e:
                raise ds.ManifestError(str(e)) from None
            report = ev.metric_report(metric, value, n_inputs, pairs, args.seed, extractor_id)
        elif metric in ("is", "cis"):
            if args.probs:
                probs = np.load(args.probs)
                if metric == "is":
                    probs = probs.reshape(-1, probs.shape[-1])
            else:
                if "p" not in probs_cache:
                    probs_cache["p"] = classifier_probs()
                probs = probs_cache["p"] if metric == "cis" else probs_cache["p"].reshape(-1, probs_cache["p"].shape[-1])
            try:
                value = ev.inception_score(probs) if metric == "is" else ev.conditional_inception_score(probs)
            except ValueError as e:
                raise ds.ManifestError(f"{metric}: {e}") from None
            n_in = probs.shape[0]
            n_per = 1 if metric == "is" else probs.shape[1]
            report = ev.metric_report(metric, value, n_in, n_per, args.seed, None)
        else:
            need_model(metric)
            if corpora is None:
                raise UsageError("hue_shift needs --synthetic or --manifest")
            h = ev.hue_shift(model, corpora[2] or corpora[0], corpora[1], seed=args.seed)
            report = ev.metric_report(metric, h["ratio"], len(corpora[2] or corpora[0]), 0, args.seed, None)
            report["details"] = h
        path = out / f"metric_{metric}.json"
        path.write_text(json.dumps(report, indent=1, sort_keys=True))
        print(f"{metric}: {report['value']:.6f}")
        written[metric] = str(path)
    _emit({"reports": written})
    return EXIT_OK


def cmd_dataset_stats(args) -> int:
    if args.synthetic:
        spec = ds.SyntheticSceneSpec(n_images=args.n_images, seed=args.seed, image_size=args.image_size,
                                     object_size=_object_size(args.image_size))
        manifest = ds.merge_manifests(*ds.generate_synthetic(spec))
    elif args.manifest:
        manifest = ds.load_manifest(args.manifest)
    else:
        raise UsageError("pass a manifest path or --synthetic")
    train_ids, test_ids = ds.split(manifest)
    train_ids, test_ids = set(train_ids), set(test_ids)
    stats = {}
    for name in manifest.domains:
        recs = [r for r in manifest.records if r.domain == name]
        stats[name] = {
            "images": len(recs),
            "boxes": sum(len(r.boxes) for r in recs),
            "train": sum(r.id in train_ids for r in recs),
            "test": sum(r.id in test_ids for r in recs),
        }
    total = {k: sum(v[k] for v in stats.values()) for k in ("images", "boxes", "train", "test")}
    print(f"{'domain':<12}{'images':>8}{'boxes':>8}{'train':>8}{'test':>8}")
    for name, row in [*stats.items(), ("total", total)]:
        print(f"{name:<12}{row['images']:>8}{row['boxes']:>8}{row['train']:>8}{row['test']:>8}")
    _emit({"domains": stats, "total": total})
    return EXIT_OK


def cmd_generate_synthetic(args) -> int:
    spec = ds.SyntheticSceneSpec(n_images=args.n_images, seed=args.seed, image_size=args.image_size,
                                 object_size=_object_size(args.image_size))
    path = ds.save_manifest(ds.merge_manifests(*ds.generate_synthetic(spec)), args.out)
    _emit({"manifest": str(path)})
    return EXIT_OK


def cmd_export_styles(args) -> int:
    from .evaluation import export_style_codes
    from .training import load_checkpoint, read_meta

    cfg = _run_config_of(read_meta(args.checkpoint))
    data = {"synthetic": bool(args.synthetic), "manifest": args.manifest}
    cfg = config_from_dict({**cfg.to_dict(), "data": {**cfg.to_dict()["data"], **data}})
    train_x, train_y, *_ = load_corpora(cfg)
    samples = train_x[: args.limit] + train_y[: args.limit]
    model = load_checkpoint(args.checkpoint).model
    export_style_codes(model, samples, args.out, instance_size=cfg.train.instance_size)
    _emit({"styles": str(args.out)})
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .evaluation import run_ablation

    flags = {"train.seed": args.seed, "data.synthetic": True if args.synthetic else None,
             "data.manifest": args.manifest}
    cfg = resolve_config(args.config, args.set or (), flags)
    train_x, train_y, *_ = load_corpora(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    iterations = cfg.train.iterations if args.iterations is None else args.iterations
    report = run_ablation(train_x, train_y, iterations=iterations, seed=cfg.train.seed,
                          n_inputs=min(args.n_inputs, len(train_x)), pairs_per_input=args.pairs,
                          net_cfg=cfg.network, train_cfg=cfg.train, weights=cfg.loss, out_path=out)
    for row in report["settings"]:
        print(f"{row['weight_sharing']:<11} diversity={row['diversity']:.4f} "
              f"IS={row['inception_score']:.4f} CIS={row['conditional_inception_score']:.4f}")
    _emit({"report": str(out)})
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="instance-i2i", description="Instance-aware unpaired image-to-image translation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        sp.add_argument("--synthetic", action="store_true", help="use the generated toy corpus")
        sp.add_argument("--manifest", help="annotation JSON or its directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train a model")
    config_args(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="translate a directory of images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input-dir", required=True)
    sp.add_argument("--target-domain", required=True)
    sp.add_argument("--n-styles", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("evaluate", help="compute translation metrics")
    sp.add_argument("--checkpoint")
    sp.add_argument("--metrics", default="diversity", help=f"comma list from {', '.join(METRICS)}")
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--manifest")
    sp.add_argument("--input-dir")
    sp.add_argument("--probs", help=".npy class probabilities: (N, K) for is, (M, S, K) for cis")
    sp.add_argument("--n-inputs", type=int)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", default="runs/eval")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("dataset-stats", help="per-domain image/box counts and split sizes")
    sp.add_argument("manifest", nargs="?")
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--n-images", type=int, default=64)
    sp.add_argument("--image-size", type=int, default=64)
    sp.set_defaults(func=cmd_dataset_stats)

    sp = sub.add_parser("generate-synthetic", help="write the toy corpus to disk")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--n-images", type=int, default=64)
    sp.add_argument("--image-size", type=int, default=64)
    sp.set_defaults(func=cmd_generate_synthetic)

    sp = sub.add_parser("export-styles", help="write style codes as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--manifest")
    sp.add_argument("--limit", type=int, default=8, help="images per domain")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_styles)

    sp = sub.add_parser("ablation", help="shared vs separate discriminator comparison")
    config_args(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--n-inputs", type=int, default=10)
    sp.add_argument("--pairs", type=int, default=5)
    sp.add_argument("--out", default="runs/ablation.json")
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ds.ManifestError, FileNotFoundError, DimensionError, OSError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # remaining ValueErrors come from invalid settings (e.g. a bad synthetic spec)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
