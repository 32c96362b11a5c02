"""Score-level fusion of the texture, CNN and VAE detectors with an SVM.

The fusion model must be trained on scores of samples the base detectors
never trained on (their validation set). Every :class:`ScoreVector`
carries a provenance role so this is checked rather than assumed.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import joblib
import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.svm import SVC

from .metrics import attack_mask

COMPONENT_ORDER = ("texture", "cnn", "vae")
KERNELS = ("rbf", "linear", "poly3", "sigmoid")
ENSEMBLE_ROLE = "val"  # only detector-validation scores may train the fusion


class ProvenanceError(ValueError):
    """Fusion training data overlaps what the detectors were trained on."""


class DetectorError(RuntimeError):
    def __init__(self, sample_id, detector, cause):
        super().__init__(f"{detector} detector failed on sample {sample_id!r}: {cause}")
        self.sample_id = sample_id
        self.detector = detector


@dataclass(frozen=True)
class ScoreVector:
    sample_id: str
    s_texture: float
    s_cnn: float
    s_vae: float
    role: str = ENSEMBLE_ROLE
    order: tuple = COMPONENT_ORDER

    def __post_init__(self):
        for name in ("s_texture", "s_cnn", "s_vae"):
            value = getattr(self, name)
            if value is None or not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value!r} for {self.sample_id!r} is outside [0, 1]")

    def as_array(self) -> np.ndarray:
        values = {"texture": self.s_texture, "cnn": self.s_cnn, "vae": self.s_vae}
        return np.array([values[c] for c in self.order])


# ---------------------------------------------------------------------------
# score collection


@dataclass
class DetectorTriple:
    """Callables mapping an image stack to attack likelihoods in [0, 1]."""

    texture: object
    cnn: object
    vae: object

    def scorers(self):
        return {"texture": self.texture, "cnn": self.cnn, "vae": self.vae}


def _score_with_attribution(name, fn, images, ids):
    try:
        return np.asarray(fn(images), dtype=float)
    except Exception:
        # re-run one by one to name the offending sample
        out = []
        for sid, img in zip(ids, images):
            try:
                out.append(float(np.asarray(fn(img[None]))[0]))
            except Exception as exc:
                raise DetectorError(sid, name, exc) from exc
        return np.asarray(out)


def collect_scores(detectors: DetectorTriple, manifest, image_store, role: str = ENSEMBLE_ROLE,
                   preprocess=None) -> list[ScoreVector]:
    """One ScoreVector per manifest record, in manifest order.

    ``preprocess`` (optional) maps a raw decoded image to detector input.
    """
    ids = manifest.ids
    if not ids:
        return []
    images = []
    for rec in manifest.records:
        img = image_store.read(rec)
        images.append(preprocess(img) if preprocess else img)
    images = np.stack(images)
    columns = {name: _score_with_attribution(name, fn, images, ids)
               for name, fn in detectors.scorers().items()}
    return [
        ScoreVector(sid, float(columns["texture"][i]), float(columns["cnn"][i]), float(columns["vae"][i]), role)
        for i, sid in enumerate(ids)
    ]


def write_scores(vectors: Sequence[ScoreVector], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "s_texture", "s_cnn", "s_vae", "provenance_role"])
        for v in vectors:
            writer.writerow([v.sample_id, repr(v.s_texture), repr(v.s_cnn), repr(v.s_vae), v.role])
    return path


def read_scores(path) -> list[ScoreVector]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ScoreVector(r["sample_id"], float(r["s_texture"]), float(r["s_cnn"]), float(r["s_vae"]),
                        r["provenance_role"])
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# fusion


def median_heuristic_gamma(x: np.ndarray, y=None) -> float:
    """``1 / median(pairwise distance)**2``, falling back to 1 on degenerate data.

    With labels ``y`` only bona fide/attack pairs enter the median. Detector
    scores saturate near 0 and 1, and attacks outnumber bona fide samples,
    so the all-pairs median is dominated by near-identical attack pairs and
    yields a kernel too narrow to generalize.
    """
    x = np.asarray(x, dtype=float)
    if y is not None:
        y = np.asarray(y, dtype=bool)
        if y.any() and not y.all():
            d = cdist(x[y], x[~y]).ravel()
        else:
            d = pdist(x)
    else:
        d = pdist(x) if len(x) >= 2 else np.array([])
    if d.size == 0:
        return 1.0
    med = float(np.median(d))
    return 1.0 / med ** 2 if med > 0 else 1.0


def kernel_params(kernel: str, x: np.ndarray, y=None) -> dict:
    if kernel == "linear":
        return {"kernel": "linear"}
    if kernel == "rbf":
        return {"kernel": "rbf", "gamma": median_heuristic_gamma(x, y)}
    if kernel == "poly3":
        return {"kernel": "poly", "degree": 3, "gamma": 1.0, "coef0": 1.0}
    if kernel == "sigmoid":
        return {"kernel": "sigmoid", "gamma": median_heuristic_gamma(x, y), "coef0": 0.0}
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def training_digest(vectors: Sequence[ScoreVector], labels) -> str:
    h = hashlib.sha256()
    for v, y in zip(vectors, attack_mask(labels)):
        h.update(f"{v.sample_id},{v.s_texture!r},{v.s_cnn!r},{v.s_vae!r},{int(y)}\n".encode())
    return h.hexdigest()


@dataclass
class FusionModel:
    kernel: str
    params: dict
    svc: SVC
    component_order: tuple = COMPONENT_ORDER
    training_digest: str = ""
    training_ids: list = field(default_factory=list)
    seed: int = 0
    C: float = 1.0

    def _matrix(self, vectors: Iterable[ScoreVector]) -> np.ndarray:
        rows = []
        for v in vectors:
            if tuple(v.order) != tuple(self.component_order):
                raise ValueError(f"score vector {v.sample_id!r} has component order {v.order}, "
                                 f"model expects {self.component_order}")
            rows.append(v.as_array())
        return np.array(rows).reshape(-1, len(self.component_order))

    def margins(self, vectors: Sequence[ScoreVector]) -> np.ndarray:
        """Signed distance to the separating surface; positive means attack."""
        return self.svc.decision_function(self._matrix(vectors))

    def decisions(self, vectors: Sequence[ScoreVector]) -> np.ndarray:
        return self.margins(vectors) > 0

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"format": "padbench.fusion/1", "kernel": self.kernel, "params": self.params,
                     "svc": self.svc, "component_order": self.component_order,
                     "training_digest": self.training_digest, "training_ids": self.training_ids,
                     "seed": self.seed, "C": self.C}, path)
        return path

    @classmethod
    def load(cls, path) -> "FusionModel":
        d = joblib.load(path)
        d.pop("format")
        return cls(**d)

    def describe(self) -> str:
        return json.dumps({"kernel": self.kernel, "params": self.params, "C": self.C,
                           "component_order": list(self.component_order),
                           "training_digest": self.training_digest}, sort_keys=True)


def train_fusion(vectors: Sequence[ScoreVector], labels, kernel: str = "rbf", seed: int = 0,
                 C: float = 1.0, detector_training_ids=None) -> FusionModel:
    """Fit a maximum-margin classifier on detector-validation score vectors.

    Raises
    ------
    ProvenanceError
        If any vector is not tagged with the validation role, or its
        sample_id is among ``detector_training_ids``.
    ValueError
        On single-class data or an unknown kernel.
    """
    bad_role = [v.sample_id for v in vectors if v.role != ENSEMBLE_ROLE]
    if bad_role:
        raise ProvenanceError(f"fusion must train on detector-validation scores; "
                              f"{len(bad_role)} vectors have another role (e.g. {bad_role[0]!r})")
    if detector_training_ids is not None:
        leaked = sorted(set(detector_training_ids) & {v.sample_id for v in vectors})
        if leaked:
            raise ProvenanceError(f"{len(leaked)} fusion training samples were used to train the "
                                  f"detectors (e.g. {leaked[0]!r})")
    y = attack_mask(labels)
    if len(y) != len(vectors):
        raise ValueError("vectors and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("fusion training needs both bona fide and attack samples")
    orders = {tuple(v.order) for v in vectors}
    if len(orders) != 1:
        raise ValueError(f"mixed component orders in training vectors: {orders}")
    order = orders.pop()
    x = np.array([v.as_array() for v in vectors])
    params = kernel_params(kernel, x, y)
    svc = SVC(C=C, random_state=seed, **params).fit(x, y.astype(int))
    return FusionModel(kernel, params, svc, order, training_digest(vectors, labels),
                       sorted(v.sample_id for v in vectors), seed, C)


def fuse(model: FusionModel, vector: ScoreVector) -> str:
    """``"attack"`` or ``"bona_fide"`` for one score vector."""
    return "attack" if model.decisions([vector])[0] else "bona_fide"


def margin(model: FusionModel, vector: ScoreVector) -> float:
    return float(model.margins([vector])[0])
