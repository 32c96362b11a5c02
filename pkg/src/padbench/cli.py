"""Command-line entry points.

``padbench <command>`` bundles everything; ``toygen`` and ``splits`` are
also installed as standalone commands. Exit status is 0 only on success.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import neural, texture
from .manifest import (ISO_RESOLUTION, DirectoryImageStore, MultiRootImageStore, class_counts, deduplicate,
                       filter_iso_compliant, load_manifest, merge_manifests, save_manifest)
from .runner import ConfigError, ExperimentConfig, ResultsBundle, audit_leakage, emit_report, prepare_image, \
    run_experiment
from .splits import SplitPlan, closed_set_rotation, leave_one_pai_out, livdet_protocol
from .toygen import ToyConfig, generate_toy_corpus

log = logging.getLogger("padbench")


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return w, h


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


# ---------------------------------------------------------------------------
# toygen / curate / splits


def _add_toygen(p):
    p.add_argument("--per-class", type=int, required=True, help="images per class")
    p.add_argument("--size", type=_size, default=(64, 64), help="image size WxH (default 64x64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", default="toy", help="source_dataset tag")
    p.add_argument("--id-prefix", default="")
    p.add_argument("--out", required=True, help="output directory")


def cmd_toygen(args):
    config = ToyConfig(args.per_class, args.size, args.seed, args.source, args.id_prefix)
    manifest = generate_toy_corpus(config, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")
    return 0


def _add_curate(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="image root (default: manifest directory)")
    p.add_argument("--resolution", type=_size, default=ISO_RESOLUTION, help="required WxH (default 640x480)")
    p.add_argument("--out", required=True, help="output directory")


def cmd_curate(args):
    manifest = load_manifest(args.manifest, root=args.root)
    store = DirectoryImageStore(manifest.root)
    deduped, dedup_report = deduplicate(manifest, store)
    kept = filter_iso_compliant(deduped, store, args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(kept, out / "manifest.csv")
    (out / "dedup_report.json").write_text(dedup_report.to_json() + "\n", encoding="utf-8")
    for step in kept.curation_log:
        print(f"{step.name}: {step.input_count} -> {step.output_count} ({step.removed_count} removed)")
    print(json.dumps(class_counts(kept), sort_keys=True))
    return 0


def _add_splits(p):
    p.add_argument("protocol", choices=["closed", "loo", "livdet"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5, help="closed-set parts")
    p.add_argument("--left-out", action="append", default=[], help="PAI to hold out (repeatable)")
    p.add_argument("--external-bonafide", help="bona fide manifest used as test data (loo)")
    p.add_argument("--heldout", help="held-out test manifest (livdet)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True, help="directory for plan JSON files")


def cmd_splits(args):
    manifest = load_manifest(args.manifest)
    if args.protocol == "closed":
        plans = closed_set_rotation(manifest, args.k, args.seed)
    elif args.protocol == "loo":
        if not args.external_bonafide or not args.left_out:
            print("error: loo needs --external-bonafide and at least one --left-out", file=sys.stderr)
            return 2
        external = load_manifest(args.external_bonafide)
        plans = [leave_one_pai_out(manifest, pai, external, args.seed, args.val_fraction) for pai in args.left_out]
    else:
        if not args.heldout:
            print("error: livdet needs --heldout", file=sys.stderr)
            return 2
        plans = [livdet_protocol(manifest, load_manifest(args.heldout), args.seed, args.val_fraction)]
    for plan in plans:
        path = plan.save(Path(args.out) / f"{plan.name}.json")
        print(f"{path}: train={len(plan.train_ids)} val={len(plan.val_ids)} test={len(plan.test_ids)}")
    return 0


# ---------------------------------------------------------------------------
# train / score


def _add_train(p):
    p.add_argument("detector", choices=["vaepad", "cnn", "texture"])
    p.add_argument("--split", required=True, help="split plan JSON")
    p.add_argument("--manifest", action="append", required=True,
                   help="manifest(s) holding the plan's samples (repeatable)")
    p.add_argument("--config", help="JSON detector settings")
    p.add_argument("--image-size", type=_size, default=(64, 64))
    p.add_argument("--out", required=True, help="model archive path")


def _load_role(ids, by_id, store, size):
    ids = sorted(ids)
    images = np.stack([prepare_image(store.read(by_id[s]), size) for s in ids])
    return images, np.array([by_id[s].class_label for s in ids])


def cmd_train(args):
    plan = SplitPlan.load(args.split)
    manifests = [load_manifest(m) for m in args.manifest]
    merged, store = merge_manifests(*manifests), MultiRootImageStore(manifests)
    by_id = merged.by_id()
    missing = (plan.train_ids | plan.val_ids) - set(by_id)
    if missing:
        print(f"error: {len(missing)} plan samples not in the given manifests", file=sys.stderr)
        return 1
    cfg = _read_json(args.config)
    x_train, y_train = _load_role(plan.train_ids, by_id, store, args.image_size)
    x_val, y_val = _load_role(plan.val_ids, by_id, store, args.image_size)
    seed = cfg.pop("seed", plan.seed)
    if args.detector == "vaepad":
        vae_cfg = dict(cfg.get("vae", {}))
        vae_cfg["image_size"] = tuple(vae_cfg.get("image_size", args.image_size))
        model = neural.train_vaepad(x_train, y_train, neural.VaeConfig(seed=seed, **vae_cfg),
                                    neural.HeadConfig(seed=seed, **cfg.get("head", {})))
        neural.save_model(model, args.out)
    elif args.detector == "cnn":
        policy = cfg.pop("policy", {"kind": "fixed", "value": 0.4})
        if "channels" in cfg:
            cfg["channels"] = tuple(cfg["channels"])
        config = neural.CnnConfig(seed=seed, policy=neural.ThresholdPolicy(**policy), **cfg)
        model = neural.train_cnn(x_train, y_train, config)
        if config.policy.kind == "fdr_calibrated":
            model.calibrate(x_val, y_val)
        neural.save_model(model, args.out)
    else:
        bits, sizes, files = cfg.pop("bits", 8), cfg.pop("sizes", (3, 5, 7)), cfg.pop("bank_files", None)
        banks = ([texture.load_filter_bank(p) for p in files] if files
                 else [texture.random_filter_bank(bits, s, seed=seed + s) for s in sizes])
        if "kinds" in cfg:
            cfg["kinds"] = tuple(cfg["kinds"])
        pool = texture.train_pool(x_train, y_train, x_val, y_val, banks=banks, seed=seed, **cfg)
        pool.save(args.out)
    print(f"wrote {args.out}")
    return 0


def load_detector(path):
    """Return (scoring callable, (width, height) the detector expects)."""
    try:
        pool = texture.ClassifierPool.load(path)
    except Exception:
        pool = None
    if pool is not None:
        h, w = pool.image_shape
        return pool.score_images, (w, h)
    model = neural.load_model(path)
    if isinstance(model, neural.VaePad):
        return model.score_images, tuple(model.vae.config.image_size)
    if isinstance(model, neural.CnnModel):
        return model.score_images, None
    raise ValueError(f"{path} is not a detector archive")


def _add_score(p):
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-size", type=_size, default=(64, 64), help="used when the model does not fix one")
    p.add_argument("--out", required=True, help="scores CSV (sample_id, score)")


def cmd_score(args):
    scorer, size = load_detector(args.model)
    manifest = load_manifest(args.manifest)
    store = DirectoryImageStore(manifest.root)
    size = size or args.image_size
    images = np.stack([prepare_image(store.read(r), size) for r in manifest.records])
    scores = scorer(images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "score"])
        for rec, s in zip(manifest.records, scores):
            writer.writerow([rec.sample_id, repr(float(s))])
    print(f"wrote {len(scores)} scores to {out}")
    return 0


# ---------------------------------------------------------------------------
# run / report / audit


def cmd_run(args):
    config = ExperimentConfig.from_file(args.config)
    bundle = run_experiment(config)
    print(emit_report(bundle, "table"), end="")
    emit_report(bundle, "table", config.output_dir)
    emit_report(bundle, "json", config.output_dir)
    for failure in bundle.failures:
        print(f"fold {failure['fold']} failed: {failure['error']}", file=sys.stderr)
    return 1 if bundle.failures or not bundle.folds else 0


def cmd_report(args):
    bundle = ResultsBundle.load(args.bundle)
    if args.out:
        print(emit_report(bundle, args.format, args.out))
    else:
        print(emit_report(bundle, args.format), end="")
    return 0


def cmd_audit(args):
    problems = audit_leakage(args.bundle)
    for p in problems:
        print(p)
    print("no leakage found" if not problems else f"{len(problems)} problems")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="padbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_toygen(sub.add_parser("toygen", help="render a synthetic labeled corpus"))
    _add_curate(sub.add_parser("curate", help="deduplicate and keep ISO-compliant images"))
    _add_splits(sub.add_parser("splits", help="write split plans"))
    _add_train(sub.add_parser("train", help="train one detector on a split plan"))
    _add_score(sub.add_parser("score", help="score a manifest with a trained detector"))

    p = sub.add_parser("run", help="run a full experiment from a JSON config")
    p.add_argument("--config", required=True)
    p = sub.add_parser("report", help="render a results bundle")
    p.add_argument("--bundle", required=True, help="experiment output directory")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", help="write report file into this directory")
    p = sub.add_parser("audit", help="check persisted artifacts for train/test overlap")
    p.add_argument("--bundle", required=True)
    return parser


COMMANDS = {"toygen": cmd_toygen, "curate": cmd_curate, "splits": cmd_splits, "train": cmd_train,
            "score": cmd_score, "run": cmd_run, "report": cmd_report, "audit": cmd_audit}


def _dispatch(fn, args):
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _dispatch(COMMANDS[args.command], args)


def toygen_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="toygen", description="Render a synthetic labeled iris corpus.")
    _add_toygen(parser)
    return _dispatch(cmd_toygen, parser.parse_args(argv))


def splits_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="splits", description="Write split plans for one protocol.")
    _add_splits(parser)
    return _dispatch(cmd_splits, parser.parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
