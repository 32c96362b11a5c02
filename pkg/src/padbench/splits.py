"""Split plans for the closed-set, leave-one-PAI-out and LivDet protocols."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .manifest import BONA_FIDE, CLASS_LABELS, Manifest

CLOSED_SET = "closed_set"
LEAVE_ONE_PAI_OUT = "leave_one_pai_out"
LIVDET = "livdet"
PROTOCOLS = (CLOSED_SET, LEAVE_ONE_PAI_OUT, LIVDET)

# Printouts of textured-lens eyes share artefacts with both parents, so the
# composite class leaves with either of them and takes both along with it.
LINKED_EXCLUSIONS = {
    "textured_contact": frozenset({"textured_contact", "textured_contact_printed"}),
    "printout": frozenset({"printout", "textured_contact_printed"}),
    "textured_contact_printed": frozenset({"textured_contact_printed", "textured_contact", "printout"}),
    "artificial": frozenset({"artificial"}),
    "diseased": frozenset({"diseased"}),
    "post_mortem": frozenset({"post_mortem"}),
    "synthetic": frozenset({"synthetic"}),
}


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    name: str
    train_ids: frozenset = frozenset()
    val_ids: frozenset = frozenset()
    test_ids: frozenset = frozenset()
    left_out_classes: frozenset = frozenset()
    seed: int = 0
    protocol: str = CLOSED_SET
    k: int | None = None
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids", "left_out_classes"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))

    def role_of(self, sample_id) -> str | None:
        for role in ("train", "val", "test"):
            if sample_id in getattr(self, f"{role}_ids"):
                return role
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "protocol": self.protocol,
            "seed": self.seed,
            "k": self.k,
            "val_fraction": self.val_fraction,
            "left_out_classes": sorted(self.left_out_classes),
            "train_ids": sorted(self.train_ids),
            "val_ids": sorted(self.val_ids),
            "test_ids": sorted(self.test_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "SplitPlan":
        return cls(
            name=d["name"],
            train_ids=d["train_ids"],
            val_ids=d["val_ids"],
            test_ids=d["test_ids"],
            left_out_classes=d.get("left_out_classes", ()),
            seed=d.get("seed", 0),
            protocol=d.get("protocol", CLOSED_SET),
            k=d.get("k"),
            val_fraction=d.get("val_fraction", 0.2),
        )

    @classmethod
    def from_json(cls, text) -> "SplitPlan":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def linked_exclusion(left_out: str) -> frozenset:
    """Classes that leave training together with ``left_out``."""
    if left_out == BONA_FIDE:
        raise SplitError("the bona fide class cannot be left out")
    try:
        return LINKED_EXCLUSIONS[left_out]
    except KeyError:
        raise SplitError(f"{left_out!r} is not a presentation attack instrument") from None


def _ids_by_class(records) -> dict[str, list[str]]:
    by_class = defaultdict(list)
    for r in records:
        by_class[r.class_label].append(r.sample_id)
    # sorted so the result depends only on the id sets, not on row order
    return {c: sorted(by_class[c]) for c in CLASS_LABELS if by_class.get(c)}


def _deal(ids_by_class, k, rng) -> list[list[str]]:
    """Shuffle each class and deal round-robin into ``k`` parts.

    A class with ``n`` members puts ``n // k + 1`` into the lowest
    ``n % k`` parts and ``n // k`` into the rest.
    """
    parts = [[] for _ in range(k)]
    for label in CLASS_LABELS:
        ids = ids_by_class.get(label)
        if not ids:
            continue
        order = rng.permutation(len(ids))
        for j, idx in enumerate(order):
            parts[j % k].append(ids[idx])
    return parts


def _train_val(ids_by_class, val_fraction, rng):
    train, val = [], []
    for label in CLASS_LABELS:
        ids = ids_by_class.get(label)
        if not ids:
            continue
        order = rng.permutation(len(ids))
        n_val = int(np.floor(len(ids) * val_fraction + 0.5))
        val += [ids[i] for i in order[:n_val]]
        train += [ids[i] for i in order[n_val:]]
    return train, val


def closed_set_rotation(manifest: Manifest, k: int = 5, seed: int = 0) -> list[SplitPlan]:
    """Stratified k-way partition with circular train/val/test rotation.

    Fold ``i`` trains on parts ``i, i+1, i+2``, validates on ``i+3`` and
    tests on ``i+4`` (all mod ``k``). With ``k != 5`` the first ``k - 2``
    parts after ``i`` are used for training.
    """
    if k < 3:
        raise SplitError("closed-set rotation needs k >= 3")
    by_class = _ids_by_class(manifest.records)
    for label, ids in by_class.items():
        if len(ids) < k:
            raise SplitError(f"class {label!r} has {len(ids)} samples, fewer than k={k}")
    parts = _deal(by_class, k, np.random.default_rng(seed))
    plans = []
    for i in range(k):
        train = [sid for j in range(k - 2) for sid in parts[(i + j) % k]]
        plans.append(
            SplitPlan(
                name=f"closed_set_fold{i}",
                train_ids=train,
                val_ids=parts[(i + k - 2) % k],
                test_ids=parts[(i + k - 1) % k],
                seed=seed,
                protocol=CLOSED_SET,
                k=k,
                val_fraction=1.0 / (k - 1),
            )
        )
    return plans


def _resolved(manifest, record):
    return str((manifest.root / record.path).resolve()) if manifest.root else record.path


def _check_disjoint(manifest: Manifest, other: Manifest, what: str):
    mine = manifest.by_id()
    clash = sorted(set(mine) & set(other.by_id()))
    if clash:
        raise SplitError(f"{what} shares sample ids with the training manifest: {clash[:5]}")
    shared_paths = sorted({_resolved(manifest, r) for r in manifest.records}
                          & {_resolved(other, r) for r in other.records})
    if shared_paths:
        raise SplitError(f"{what} shares image paths with the training manifest: {shared_paths[:5]}")
    hashes = {r.pixel_hash for r in manifest.records if r.pixel_hash}
    shared = sorted(r.sample_id for r in other.records if r.pixel_hash and r.pixel_hash in hashes)
    if shared:
        raise SplitError(f"{what} has pixel-identical copies of training images: {shared[:5]}")


def leave_one_pai_out(manifest: Manifest, left_out: str, external_bona_fide: Manifest,
                      seed: int = 0, val_fraction: float = 0.2) -> SplitPlan:
    """Hold one PAI (plus linked PAIs) out of training and validation.

    The test set is every record of the excluded classes plus every record
    of ``external_bona_fide``; the rest is split 80/20 per class.
    """
    excluded = linked_exclusion(left_out)
    if not any(r.class_label == left_out for r in manifest.records):
        raise SplitError(f"left-out class {left_out!r} has no samples in the manifest")
    not_live = [r.sample_id for r in external_bona_fide.records if r.class_label != BONA_FIDE]
    if not_live:
        raise SplitError(f"external bona fide set contains attack samples: {not_live[:5]}")
    _check_disjoint(manifest, external_bona_fide, "external bona fide set")

    test = [r.sample_id for r in manifest.records if r.class_label in excluded]
    test += external_bona_fide.ids
    remaining = [r for r in manifest.records if r.class_label not in excluded]
    train, val = _train_val(_ids_by_class(remaining), val_fraction, np.random.default_rng(seed))
    return SplitPlan(
        name=f"loo_{left_out}",
        train_ids=train,
        val_ids=val,
        test_ids=test,
        left_out_classes=excluded,
        seed=seed,
        protocol=LEAVE_ONE_PAI_OUT,
        val_fraction=val_fraction,
    )


def livdet_protocol(manifest: Manifest, heldout_test: Manifest, seed: int = 0,
                    val_fraction: float = 0.2) -> SplitPlan:
    """Train/validate on the whole manifest (80/20 per class), test on the
    held-out benchmark."""
    _check_disjoint(manifest, heldout_test, "held-out test set")
    train, val = _train_val(_ids_by_class(manifest.records), val_fraction, np.random.default_rng(seed))
    return SplitPlan(
        name="livdet",
        train_ids=train,
        val_ids=val,
        test_ids=heldout_test.ids,
        seed=seed,
        protocol=LIVDET,
        val_fraction=val_fraction,
    )


@dataclass
class SplitValidation:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_split(plan: SplitPlan, manifest: Manifest, tolerance: int = 1) -> SplitValidation:
    """Audit a plan against the records it refers to.

    Checks pairwise disjointness, that excluded classes stay out of
    train/val, that every id is known, and that each class's validation
    share (and, for closed-set folds, test share) is within ``tolerance``
    samples of its target. Violations are returned, never raised.
    """
    out = []
    roles = {"train": plan.train_ids, "val": plan.val_ids, "test": plan.test_ids}
    names = list(roles)
    for a_idx, a in enumerate(names):
        for b in names[a_idx + 1:]:
            for sid in sorted(roles[a] & roles[b]):
                out.append(f"sample {sid} is in both {a} and {b}")

    labels = {r.sample_id: r.class_label for r in manifest.records}
    for role, ids in roles.items():
        for sid in sorted(ids - set(labels)):
            out.append(f"sample {sid} in {role} is not in the manifest")

    for role in ("train", "val"):
        leaked = sorted({labels[s] for s in roles[role] if s in labels} & plan.left_out_classes)
        for label in leaked:
            out.append(f"left-out class {label} appears in {role}")

    def count(ids, label):
        return sum(1 for s in ids if labels.get(s) == label)

    for label in CLASS_LABELS:
        n_train, n_val = count(plan.train_ids, label), count(plan.val_ids, label)
        n_fit = n_train + n_val
        if n_fit and abs(n_val - plan.val_fraction * n_fit) > tolerance:
            out.append(
                f"class {label}: {n_val} of {n_fit} train+val samples in val, "
                f"target {plan.val_fraction:.3f}"
            )
        if plan.protocol == CLOSED_SET and plan.k:
            n_test = count(plan.test_ids, label)
            n_all = n_fit + n_test
            if abs(n_test - n_all / plan.k) > tolerance:
                out.append(f"class {label}: {n_test} of {n_all} samples in test, target 1/{plan.k}")
    return SplitValidation(out)


def plan_manifests(plan: SplitPlan, manifest: Manifest) -> dict[str, Manifest]:
    return {role: manifest.subset(getattr(plan, f"{role}_ids")) for role in ("train", "val", "test")}


def rotation_covers(plans: Iterable[SplitPlan], manifest: Manifest) -> bool:
    tested = sorted(s for p in plans for s in p.test_ids)
    return tested == sorted(manifest.ids)
