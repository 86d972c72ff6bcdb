"""Command-line interface.

Subcommands: ``build-dataset``, ``prep-kinface``, ``train``, ``transform``,
``eval-race``, ``eval-identity``, ``eval-age``, ``kinship-run``. Global
options ``--config`` (flat ``key = value`` file), ``--seed``, ``--out``.
Any config key can also be overridden through the environment with the
``FAIRAGE_`` prefix, e.g. ``FAIRAGE_BATCH_SIZE=2``.

Commands never mutate their inputs, write one ``run_manifest.json`` next to
their outputs, and exit 0 on success, 1 on failure (with a machine-readable
error JSON on stderr), or 3 when some inputs failed but the run finished.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import torch

from . import __version__, evalkit, report
from .backbones import build_all_backbones
from .core import (Config, ConfigError, FairageError, RaceLabel,
                   ValidationError, normalize_image)
from .datakit import (build_balanced_dataset, load_image_normalized,
                      load_image_raw, load_kin_pairs, load_manifest,
                      mirror_pad, save_image_png, write_manifest)
from .losses import CompositeLoss
from .synthesis import build_model
from .training import (build_train_state, load_checkpoint, load_model_weights,
                       run_training, save_checkpoint)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3


def _load_config(args) -> Config:
    config = Config.load(getattr(args, "config", None), env=os.environ)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "batch_size", None) is not None:
        config.batch_size = args.batch_size
    return config


def _backbone_sources(entries) -> dict:
    sources = {}
    for entry in entries or []:
        name, _, value = entry.partition("=")
        if not value:
            raise ConfigError(f"--backbone expects name=path|toy, got {entry!r}")
        sources[name.strip()] = value.strip()
    return sources


def _build_pipeline(config, args, checkpoint=None):
    backbones = build_all_backbones(config, _backbone_sources(getattr(args, "backbone", None)))
    model = build_model(config, backbones, generator_source=getattr(args, "generator", "toy"))
    composite = CompositeLoss(backbones["identity"], backbones["age"], backbones["race"],
                              config.loss_weights)
    if checkpoint is not None:
        load_model_weights(checkpoint, model)
    return model, composite, backbones


def _parse_ages(text, allow_base=False):
    """Parse '20,30' / '20-80:10' / 'base,20,...' age lists."""
    include_base, ages = False, []
    for token in str(text).split(","):
        token = token.strip()
        if not token:
            continue
        if token == "base":
            if not allow_base:
                raise ConfigError("'base' is only valid for kinship age lists")
            include_base = True
        elif "-" in token and ":" in token:
            span, _, step = token.partition(":")
            lo, _, hi = span.partition("-")
            ages.extend(range(int(lo), int(hi) + 1, int(step)))
        else:
            ages.append(int(token))
    if not ages and not include_base:
        raise ConfigError(f"empty age list: {text!r}")
    return (include_base, ages) if allow_base else ages


def _image_inputs(entries):
    paths = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.is_file()))
        else:
            paths.append(p)
    return paths


def _manifest_samples(manifest_path, split, limit=None):
    faces = [f for f in load_manifest(manifest_path) if f.split == split]
    if limit is not None:
        faces = faces[:limit]
    if not faces:
        raise ConfigError(f"manifest {manifest_path} has no '{split}' samples")
    return faces


def cmd_build_dataset(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    out_dir = Path(args.out)
    faces, summary = build_balanced_dataset(args.source, config.seed, strict=args.strict)
    manifest_path, summary_path = write_manifest(faces, summary, out_dir)
    figures = report.dataset_report(summary, out_dir)
    report.write_run_manifest(out_dir, "build-dataset", config.config_hash(), config.seed,
                              [args.source], [manifest_path, summary_path, *figures],
                              time.monotonic() - start)
    print(f"wrote {manifest_path} ({len(faces)} records)")
    return EXIT_OK


def cmd_prep_kinface(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    out_dir = Path(args.out)
    pairs = load_kin_pairs(args.root, args.dataset)
    images_dir = out_dir / "images"
    processed = {}
    for pair in pairs:
        for path in (pair.parent, pair.child):
            if path in processed:
                continue
            padded = mirror_pad(load_image_raw(path))
            rel = Path(path).relative_to(Path(args.root) / "images")
            target = images_dir / rel.with_suffix(".png")
            save_image_png(target, normalize_image(padded.clamp(0.0, 255.0)))
            processed[path] = str(target)
    pairs_path = out_dir / "pairs.jsonl"
    with open(pairs_path, "w") as fh:
        for pair in pairs:
            fh.write(json.dumps({"parent": processed[pair.parent],
                                 "child": processed[pair.child],
                                 "relation": pair.relation, "kin": pair.kin,
                                 "fold": pair.fold}, sort_keys=True) + "\n")
    report.write_run_manifest(out_dir, "prep-kinface", config.config_hash(), config.seed,
                              [args.root], [pairs_path, images_dir],
                              time.monotonic() - start)
    print(f"prepared {len(processed)} images, {len(pairs)} pairs -> {pairs_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    faces = _manifest_samples(args.manifest, "train")
    dataset = [(face.path, face.age) for face in faces]
    out_dir = Path(args.out)
    model, composite, _ = _build_pipeline(config, args)
    if args.resume:
        state = load_checkpoint(args.resume, model, composite, config)
    else:
        state = build_train_state(model, composite, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"
    records = run_training(state, dataset, steps=args.steps, out_dir=out_dir,
                           log_path=log_path,
                           checkpoint_every=args.checkpoint_every)
    final = out_dir / "checkpoint_final.weights"
    save_checkpoint(state, final)
    report.write_run_manifest(out_dir, "train", config.config_hash(), config.seed,
                              [args.manifest], [log_path, final],
                              time.monotonic() - start)
    last = records[-1] if records else {}
    print(f"trained to step {state.step}; last forward total "
          f"{last.get('forward', {}).get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_transform(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    ages = _parse_ages(args.ages)
    out_dir = Path(args.out)
    model, _, _ = _build_pipeline(config, args, checkpoint=args.checkpoint)
    inputs = _image_inputs(args.images)
    if not inputs:
        raise ConfigError("no input images given")
    outputs, failed = [], []
    for path in inputs:
        try:
            image = load_image_normalized(path)
        except (ValidationError, ConfigError) as exc:
            failed.append({"input": str(path), "error": str(exc)})
            continue
        panels = [image]
        for age in ages:
            with torch.no_grad():
                aged, _ = model.transform(image, age, age)
            target = out_dir / f"{path.stem}_age{age}.png"
            save_image_png(target, aged)
            outputs.append(target)
            panels.append(aged)
        if args.grid:
            target = out_dir / f"{path.stem}_grid.png"
            save_image_png(target, torch.cat(panels, dim=2))
            outputs.append(target)
    report.write_run_manifest(out_dir, "transform", config.config_hash(), config.seed,
                              [str(p) for p in inputs], outputs, time.monotonic() - start)
    print(f"wrote {len(outputs)} images to {out_dir}")
    if failed:
        print(json.dumps({"failed_inputs": failed}), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _transform_fn(model):
    def fn(image, age):
        with torch.no_grad():
            aged, _ = model.transform(image, age, age)
        return aged
    return fn


def cmd_eval_race(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    ages = _parse_ages(args.ages)
    out_dir = Path(args.out)
    model, _, backbones = _build_pipeline(config, args, checkpoint=args.checkpoint)
    faces = _manifest_samples(args.manifest, args.split, args.limit)
    samples = [(load_image_normalized(f.path), f.race) for f in faces]

    def classifier(image):
        with torch.no_grad():
            return RaceLabel(int(backbones["race"].logits(image).argmax()))

    reports = evalkit.race_accuracy_by_age(_transform_fn(model), samples, classifier,
                                           ages=ages)
    paths = report.race_report(reports, out_dir)
    report.write_run_manifest(out_dir, "eval-race", config.config_hash(), config.seed,
                              [args.manifest], paths, time.monotonic() - start)
    for r in reports:
        print(f"age {r.age}: accuracy {r.accuracy:.4f} ({r.failures} failures)")
    return EXIT_OK


def cmd_eval_identity(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    ages = _parse_ages(args.ages)
    out_dir = Path(args.out)
    model, _, backbones = _build_pipeline(config, args, checkpoint=args.checkpoint)
    faces = _manifest_samples(args.manifest, args.split, args.limit)
    images = [load_image_normalized(f.path) for f in faces]

    def embedder(image):
        with torch.no_grad():
            return backbones["identity"](image)

    reports = evalkit.identity_preservation(_transform_fn(model), images, embedder, ages=ages)
    paths = report.identity_report(reports, out_dir)
    report.write_run_manifest(out_dir, "eval-identity", config.config_hash(), config.seed,
                              [args.manifest], paths, time.monotonic() - start)
    for r in reports:
        print(f"age {r.age}: cosine {r.mean:.4f} +- {r.std:.4f} ({r.excluded} excluded)")
    return EXIT_OK


def cmd_eval_age(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    ages = _parse_ages(args.ages)
    out_dir = Path(args.out)
    model, _, backbones = _build_pipeline(config, args, checkpoint=args.checkpoint)
    faces = _manifest_samples(args.manifest, args.split, args.limit)
    images = [load_image_normalized(f.path) for f in faces]

    def estimator(image):
        with torch.no_grad():
            return float(backbones["age"].estimate_age(image))

    try:
        reports = evalkit.age_mae(_transform_fn(model), images, estimator, ages=ages,
                                  sample_size=args.sample_size, seed=config.seed,
                                  note="toy estimator, uncalibrated")
    except evalkit.EstimatorUnavailable as exc:
        paths = report.age_error_report(exc.partial, out_dir)
        report.write_run_manifest(out_dir, "eval-age", config.config_hash(), config.seed,
                                  [args.manifest], paths, time.monotonic() - start)
        print(json.dumps({"error": "EstimatorUnavailable", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_PARTIAL
    paths = report.age_error_report(reports, out_dir)
    report.write_run_manifest(out_dir, "eval-age", config.config_hash(), config.seed,
                              [args.manifest], paths, time.monotonic() - start)
    for r in reports:
        print(f"age {r.age}: MAE {r.mae_mean:.3f} +- {r.mae_std:.3f} over {r.count}")
    return EXIT_OK


def cmd_kinship_run(args) -> int:
    start = time.monotonic()
    config = _load_config(args)
    include_base, ages = _parse_ages(args.ages, allow_base=True)
    out_dir = Path(args.out)
    model, _, backbones = _build_pipeline(config, args, checkpoint=args.checkpoint)
    pairs = load_kin_pairs(args.root, args.dataset)

    def prepare(path):
        padded = mirror_pad(load_image_raw(path))
        with torch.no_grad():
            return model.reconstruct_fullface(normalize_image(padded.clamp(0.0, 255.0)))

    if args.verifier == "oracle":
        def verifier_factory():
            return evalkit.OracleVerifier()
    else:
        def verifier_factory():
            def embed(image):
                with torch.no_grad():
                    return backbones["identity"](image)
            return evalkit.CosineThresholdVerifier(embed)

    reports = evalkit.run_kinship_protocol(pairs, prepare, _transform_fn(model),
                                           verifier_factory, ages=ages,
                                           include_base=include_base)
    paths = report.kinship_report(reports, out_dir, ages)
    report.write_run_manifest(out_dir, "kinship-run", config.config_hash(), config.seed,
                              [args.root], paths, time.monotonic() - start)
    for r in reports:
        imp = r.improvement
        print(f"{r.relation}: base {r.base if r.base is not None else '-'} "
              f"improvement {'-' if imp != imp else f'{imp:+.2f}'}")
    return EXIT_OK


def _add_common(parser, out_required=True):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", required=out_required, help="output directory")


def _add_model_args(parser):
    parser.add_argument("--generator", default="toy",
                        help="'toy' or a weight-container path")
    parser.add_argument("--backbone", action="append", metavar="NAME=PATH|toy",
                        help="backbone source override (race, pyramid, identity, age)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairage",
                                     description="race-preserving face age transformation")
    parser.add_argument("--version", action="version", version=f"fairage {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="build a race-balanced train/test manifest")
    _add_common(p)
    p.add_argument("--source", required=True, help="directory of stamped face images")
    p.add_argument("--strict", action="store_true",
                   help="demand the full per-race target counts")
    p.set_defaults(fn=cmd_build_dataset)

    p = sub.add_parser("prep-kinface", help="mirror-pad kinship crops to full canvases")
    _add_common(p)
    p.add_argument("--root", required=True, help="benchmark root with images/ and meta_data/")
    p.add_argument("--dataset", required=True,
                   choices=["KinFaceW-I", "KinFaceW-II", "custom"])
    p.set_defaults(fn=cmd_prep_kinface)

    p = sub.add_parser("train", help="run the two-phase training loop")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--manifest", required=True, help="dataset manifest (jsonl)")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("transform", help="age input images to target ages")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--checkpoint", help="model checkpoint (fresh toy weights if omitted)")
    p.add_argument("--images", nargs="+", required=True, help="image files or directories")
    p.add_argument("--ages", default="20-80:10", help="e.g. '20,40' or '20-80:10'")
    p.add_argument("--grid", action="store_true",
                   help="also write one contact-sheet row per input")
    p.set_defaults(fn=cmd_transform)

    for name, fn, extra in (("eval-race", cmd_eval_race, {}),
                            ("eval-identity", cmd_eval_identity, {}),
                            ("eval-age", cmd_eval_age, {"sample": True})):
        p = sub.add_parser(name, help=f"{name} evaluation over age groups")
        _add_common(p)
        _add_model_args(p)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test", choices=["train", "test"])
        p.add_argument("--ages", default="20-80:10")
        p.add_argument("--limit", type=int, default=None,
                       help="cap the number of evaluated images")
        if extra.get("sample"):
            p.add_argument("--sample-size", type=int, default=None, dest="sample_size",
                           help="images sampled per age group")
        p.set_defaults(fn=fn)

    p = sub.add_parser("kinship-run", help="same-age kinship verification protocol")
    _add_common(p)
    _add_model_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--root", required=True)
    p.add_argument("--dataset", required=True,
                   choices=["KinFaceW-I", "KinFaceW-II", "custom"])
    p.add_argument("--ages", default="base,20,30,40,50,60")
    p.add_argument("--verifier", default="cosine", choices=["cosine", "oracle"])
    p.set_defaults(fn=cmd_kinship_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FairageError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
