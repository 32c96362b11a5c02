"""End-to-end experiment orchestration.

Layout of an output directory::

    config.json                 copy of the resolved configuration
    plans/<fold>.json           split plan per fold
    models/<fold>/...           texture pool, CNN, VAE, head, fusion models
    models/<fold>/provenance.json
                                sample ids each model was fit or calibrated on
    scores/<fold>_{val,test}.csv
    reports/<fold>.json         per-method metrics on the test set
    bundle.json                 all reports, aggregates and run provenance
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import ensemble, neural, texture
from .manifest import BONA_FIDE, PAIS, Manifest, MultiRootImageStore, load_manifest, merge_manifests
from .metrics import AggregateReport, MetricsReport, aggregate_folds, confusion, evaluate, report
from .splits import (CLOSED_SET, LEAVE_ONE_PAI_OUT, LIVDET, PROTOCOLS, SplitPlan, closed_set_rotation,
                     leave_one_pai_out, livdet_protocol)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DETECTOR_METHODS = ("texture", "cnn_fdr", "cnn_fixed", "vae")


def fusion_method(kernel):
    return f"fusion_{kernel}"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    protocol: str
    manifest: str
    output_dir: str
    external_bona_fide: str | None = None
    heldout_test: str | None = None
    left_out: list = field(default_factory=lambda: list(PAIS))
    k: int = 5
    seed: int = 0
    image_size: tuple = (64, 64)  # (width, height) fed to the detectors
    kernels: list = field(default_factory=lambda: list(ensemble.KERNELS))
    detectors: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.protocol == LEAVE_ONE_PAI_OUT:
            if not self.external_bona_fide:
                raise ConfigError("leave_one_pai_out needs external_bona_fide")
            if not self.left_out:
                raise ConfigError("leave_one_pai_out needs at least one left_out class")
            unknown = set(self.left_out) - set(PAIS)
            if unknown:
                raise ConfigError(f"left_out contains non-PAI classes {sorted(unknown)}")
        if self.protocol == LIVDET and not self.heldout_test:
            raise ConfigError("livdet needs heldout_test")
        unknown = set(self.kernels) - set(ensemble.KERNELS)
        if unknown:
            raise ConfigError(f"unknown fusion kernels {sorted(unknown)}")
        unknown = set(self.detectors) - {"texture", "cnn", "vae", "head"}
        if unknown:
            raise ConfigError(f"unknown detector sections {sorted(unknown)}")
        self.image_size = tuple(self.image_size)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Load JSON; relative paths resolve against the config's directory."""
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        for key in ("manifest", "external_bona_fide", "heldout_test", "output_dir"):
            if raw.get(key):
                raw[key] = str((base / raw[key]).resolve())
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class FoldResult:
    name: str
    plan_file: str
    reports: dict  # method -> MetricsReport
    left_out: list = field(default_factory=list)

    def to_dict(self):
        return {"name": self.name, "plan_file": self.plan_file, "left_out": list(self.left_out),
                "reports": {k: v.to_dict() for k, v in self.reports.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["plan_file"], {k: MetricsReport.from_dict(v) for k, v in d["reports"].items()},
                   d.get("left_out", []))


@dataclass
class ResultsBundle:
    protocol: str
    folds: list
    aggregate: dict = field(default_factory=dict)  # method -> AggregateReport
    failures: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def methods(self) -> list:
        seen = []
        for fold in self.folds:
            seen += [m for m in fold.reports if m not in seen]
        return seen

    def to_dict(self):
        return {"protocol": self.protocol,
                "folds": [f.to_dict() for f in self.folds],
                "aggregate": {k: v.to_dict() for k, v in self.aggregate.items()},
                "failures": list(self.failures),
                "provenance": dict(self.provenance)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["protocol"], [FoldResult.from_dict(f) for f in d["folds"]],
                   {k: AggregateReport.from_dict(v) for k, v in d["aggregate"].items()},
                   list(d.get("failures", [])), dict(d.get("provenance", {})))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, directory):
        return cls.from_json((Path(directory) / "bundle.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# helpers


def prepare_image(pixels, image_size) -> np.ndarray:
    """Resize a decoded single-channel image to ``image_size`` (width, height)."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"detectors take single-channel images, got shape {arr.shape}")
    w, h = image_size
    if arr.shape != (h, w):
        arr = np.asarray(Image.fromarray(arr).resize((w, h), Image.BILINEAR))
    return arr


def _dump_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_margins(rows, path) -> Path:
    """CSV of (sample_id, kernel, margin, decision) for fused test decisions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "kernel", "margin", "decision"])
        for sid, kernel, mg in rows:
            writer.writerow([sid, kernel, repr(mg), "attack" if mg > 0 else "bona_fide"])
    return path


class _Images:
    def __init__(self, manifest: Manifest, store, image_size):
        self.by_id = manifest.by_id()
        self.store = store
        self.image_size = image_size
        self._cache = {}

    def load(self, ids):
        ids = sorted(ids)
        out = []
        for sid in ids:
            if sid not in self._cache:
                self._cache[sid] = prepare_image(self.store.read(self.by_id[sid]), self.image_size)
            out.append(self._cache[sid])
        labels = np.array([self.by_id[s].class_label for s in ids])
        return ids, np.stack(out), labels


def _plans(config: ExperimentConfig, manifest, external, heldout):
    if config.protocol == CLOSED_SET:
        return closed_set_rotation(manifest, config.k, config.seed)
    if config.protocol == LEAVE_ONE_PAI_OUT:
        return [leave_one_pai_out(manifest, pai, external, config.seed) for pai in config.left_out]
    return [livdet_protocol(manifest, heldout, config.seed)]


def _texture_banks(cfg, seed):
    if "bank_files" in cfg:
        return [texture.load_filter_bank(p) for p in cfg["bank_files"]]
    bits = cfg.get("bits", 8)
    return [texture.random_filter_bank(bits, s, seed=seed + s) for s in cfg.get("sizes", (3, 5, 7))]


# ---------------------------------------------------------------------------
# one fold


def run_fold(plan: SplitPlan, images: _Images, config: ExperimentConfig, out: Path) -> FoldResult:
    det = config.detectors
    seed = config.seed
    fold_dir = out / "models" / plan.name
    plan_file = plan.save(out / "plans" / f"{plan.name}.json")

    train_ids, x_train, y_train = images.load(plan.train_ids)
    val_ids, x_val, y_val = images.load(plan.val_ids)
    test_ids, x_test, y_test = images.load(plan.test_ids)
    live = y_train == BONA_FIDE
    live_ids = [s for s, keep in zip(train_ids, live) if keep]

    tex_cfg = dict(det.get("texture", {}))
    banks = _texture_banks(tex_cfg, seed)
    pool = texture.train_pool(
        x_train, y_train, x_val, y_val, banks=banks, kinds=tuple(tex_cfg.get("kinds", texture.KINDS)),
        m=tex_cfg.get("m", 3), seed=seed, tune_fraction=tex_cfg.get("tune_fraction", 0.01),
        min_tune=tex_cfg.get("min_tune", 30),
    )
    pool.save(fold_dir / "texture.joblib")

    cnn_cfg = dict(det.get("cnn", {}))
    cnn_cfg.pop("policy", None)
    if "channels" in cnn_cfg:
        cnn_cfg["channels"] = tuple(cnn_cfg["channels"])
    cnn_fixed = neural.train_cnn(x_train, y_train, neural.CnnConfig(seed=seed, **cnn_cfg))
    cnn_fdr = cnn_fixed.with_policy(neural.FDR_0_2_PERCENT)
    cnn_fdr.calibrate(x_val, y_val)
    neural.save_model(cnn_fixed, fold_dir / "cnn_fixed.pt")
    neural.save_model(cnn_fdr, fold_dir / "cnn_fdr.pt")

    vae_cfg = dict(det.get("vae", {}))
    vae_cfg.setdefault("image_size", config.image_size)
    vae_cfg["image_size"] = tuple(vae_cfg["image_size"])
    # the VAE sees only the bona fide part of this fold's training split
    vaepad = neural.train_vaepad(x_train, y_train, neural.VaeConfig(seed=seed, **vae_cfg),
                                 neural.HeadConfig(seed=seed, **det.get("head", {})))
    neural.save_model(vaepad, fold_dir / "vaepad.pt")

    scorers = ensemble.DetectorTriple(texture=pool.score_images, cnn=cnn_fixed.score_images,
                                      vae=vaepad.score_images)

    def vectors(ids, x, role):
        cols = {name: fn(x) for name, fn in scorers.scorers().items()}
        return [ensemble.ScoreVector(sid, float(cols["texture"][i]), float(cols["cnn"][i]),
                                     float(cols["vae"][i]), role) for i, sid in enumerate(ids)]

    val_vectors = vectors(val_ids, x_val, "val")
    test_vectors = vectors(test_ids, x_test, "test")
    ensemble.write_scores(val_vectors, out / "scores" / f"{plan.name}_val.csv")
    ensemble.write_scores(test_vectors, out / "scores" / f"{plan.name}_test.csv")

    s_tex = np.array([v.s_texture for v in test_vectors])
    s_cnn = np.array([v.s_cnn for v in test_vectors])
    s_vae = np.array([v.s_vae for v in test_vectors])
    reports = {
        "texture": evaluate(s_tex, y_test, 0.5),
        # the calibrated threshold may be the above-range sentinel
        "cnn_fdr": report(confusion((s_cnn >= cnn_fdr.threshold).astype(float), y_test, 0.5),
                          cnn_fdr.threshold),
        "cnn_fixed": evaluate(s_cnn, y_test, cnn_fixed.threshold),
        "vae": evaluate(s_vae, y_test, 0.5),
    }

    provenance = {
        "texture": {"trained_on": train_ids, "calibrated_on": val_ids},
        "cnn_fixed": {"trained_on": train_ids, "calibrated_on": []},
        "cnn_fdr": {"trained_on": train_ids, "calibrated_on": val_ids, "threshold": cnn_fdr.threshold},
        "vae": {"trained_on": live_ids, "calibrated_on": []},
        "head": {"trained_on": train_ids, "calibrated_on": []},
    }
    margin_rows = []
    for kernel in config.kernels:
        fusion = ensemble.train_fusion(val_vectors, y_val, kernel, seed=seed, detector_training_ids=train_ids)
        fusion.save(fold_dir / f"fusion_{kernel}.joblib")
        margins = fusion.margins(test_vectors)
        margin_rows += [(sid, kernel, float(mg)) for sid, mg in zip(test_ids, margins)]
        reports[fusion_method(kernel)] = evaluate((margins > 0).astype(float), y_test, 0.5)
        provenance[fusion_method(kernel)] = {"trained_on": fusion.training_ids, "calibrated_on": [],
                                             "training_digest": fusion.training_digest}
    if margin_rows:
        write_margins(margin_rows, out / "scores" / f"{plan.name}_fusion_test.csv")
    _dump_json(fold_dir / "provenance.json", provenance)
    _dump_json(out / "reports" / f"{plan.name}.json", {k: v.to_dict() for k, v in reports.items()})
    return FoldResult(plan.name, str(plan_file.relative_to(out)), reports, sorted(plan.left_out_classes))


# ---------------------------------------------------------------------------
# experiment


def run_experiment(config: ExperimentConfig) -> ResultsBundle:
    """Run every fold of the configured protocol and persist all artifacts.

    A fold that fails is logged in ``bundle.failures`` and skipped; the
    other folds still run.
    """
    started = time.time()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", config.to_dict())

    manifest = load_manifest(config.manifest)
    external = load_manifest(config.external_bona_fide) if config.external_bona_fide else None
    heldout = load_manifest(config.heldout_test) if config.heldout_test else None
    everything = [m for m in (manifest, external, heldout) if m is not None]
    images = _Images(merge_manifests(*everything), MultiRootImageStore(everything), config.image_size)

    folds, failures = [], []
    for plan in _plans(config, manifest, external, heldout):
        log.info("running fold %s", plan.name)
        try:
            folds.append(run_fold(plan, images, config, out))
        except Exception as exc:
            log.error("fold %s failed: %s", plan.name, exc)
            failures.append({"fold": plan.name, "error": repr(exc), "traceback": traceback.format_exc()})

    aggregate = {}
    if config.protocol == CLOSED_SET and folds:
        for method in folds[0].reports:
            aggregate[method] = aggregate_folds([f.reports[method] for f in folds if method in f.reports])

    bundle = ResultsBundle(
        protocol=config.protocol,
        folds=folds,
        aggregate=aggregate,
        failures=failures,
        provenance={
            "config_digest": config.digest(),
            "seed": config.seed,
            "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": round(time.time() - started, 3),
        },
    )
    (out / "bundle.json").write_text(bundle.to_json() + "\n", encoding="utf-8")
    return bundle


# ---------------------------------------------------------------------------
# audit


def audit_leakage(output_dir) -> list[str]:
    """Re-check persisted artifacts for train/test overlap.

    Every model's fit and calibration ids must avoid its fold's test set,
    and fusion models must be fit exactly on validation-role scores that
    no detector trained on.
    """
    out = Path(output_dir)
    problems = []
    plan_files = sorted((out / "plans").glob("*.json"))
    if not plan_files:
        problems.append(f"no split plans under {out / 'plans'}")
    for plan_file in plan_files:
        plan = SplitPlan.load(plan_file)
        prov_file = out / "models" / plan.name / "provenance.json"
        if not prov_file.exists():
            problems.append(f"{plan.name}: missing provenance file")
            continue
        prov = json.loads(prov_file.read_text(encoding="utf-8"))
        for model, record in prov.items():
            for key in ("trained_on", "calibrated_on"):
                leaked = set(record.get(key, [])) & plan.test_ids
                if leaked:
                    problems.append(f"{plan.name}/{model}: {len(leaked)} test samples in {key}")
        detector_fit = set()
        for model in ("texture", "cnn_fixed", "cnn_fdr", "vae", "head"):
            detector_fit |= set(prov.get(model, {}).get("trained_on", []))
        for model, record in prov.items():
            if not model.startswith("fusion_"):
                continue
            fit = set(record["trained_on"])
            if fit & detector_fit:
                problems.append(f"{plan.name}/{model}: trained on detector-training samples")
            if not fit <= plan.val_ids:
                problems.append(f"{plan.name}/{model}: trained on samples outside validation")
            archive = out / "models" / plan.name / f"{model}.joblib"
            if archive.exists():
                stored = ensemble.FusionModel.load(archive)
                if set(stored.training_ids) != fit:
                    problems.append(f"{plan.name}/{model}: archive and provenance disagree")
        val_scores = out / "scores" / f"{plan.name}_val.csv"
        if val_scores.exists():
            for v in ensemble.read_scores(val_scores):
                if v.role != "val" or v.sample_id not in plan.val_ids:
                    problems.append(f"{plan.name}: validation score file holds {v.sample_id} ({v.role})")
    return problems


# ---------------------------------------------------------------------------
# reporting


def _table(header_rows, rows):
    widths = [max(len(r[i]) for r in header_rows + rows) for i in range(len(rows[0]) if rows else 0)]
    lines = []
    for r in header_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def format_table(bundle: ResultsBundle) -> str:
    """Aligned plain-text table in the layout used for each protocol."""
    methods = bundle.methods
    if not methods:
        return "no completed folds\n"
    if bundle.protocol == CLOSED_SET:
        header = [["Method", "CCR ± 1σ", "APCER ± 1σ", "BPCER ± 1σ"]]
        rows = [[m] + [bundle.aggregate[m].cell(k) for k in ("ccr", "apcer", "bpcer")] for m in methods]
        return _table(header, rows)
    if bundle.protocol == LEAVE_ONE_PAI_OUT:
        top, sub = ["Left out"], ["Method"]
        for fold in bundle.folds:
            name = fold.name.removeprefix("loo_")
            top += [name, "", ""]
            sub += ["CCR", "APCER", "BPCER"]
        rows = []
        for m in methods:
            row = [m]
            for fold in bundle.folds:
                rep = fold.reports.get(m)
                row += [rep.percent(k) if rep else "--" for k in ("ccr", "apcer", "bpcer")]
            rows.append(row)
        return _table([top, sub], rows)
    header = [["Method", "CCR", "APCER", "BPCER", "ACER"]]
    fold = bundle.folds[0]
    rows = [[m] + [fold.reports[m].percent(k) for k in ("ccr", "apcer", "bpcer", "acer")] for m in methods]
    return _table(header, rows)


def emit_report(bundle: ResultsBundle, fmt: str = "table", out_dir=None) -> Path | str:
    """Render the bundle as ``table`` text or ``json``.

    With ``out_dir`` the result is written to ``report.txt``/``report.json``
    there and the path returned; otherwise the text itself is returned.
    """
    if fmt == "table":
        text, name = format_table(bundle), "report.txt"
    elif fmt == "json":
        text, name = bundle.to_json() + "\n", "report.json"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if out_dir is None:
        return text
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
