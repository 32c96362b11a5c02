"""Binarized-filter texture features with a voting pool of classifiers.

Each image is filtered by a bank of ``f`` zero-mean kernels; the signs of
the responses form an ``f``-bit code per pixel and the normalized code
histogram is the feature vector. A pool of (bank, classifier) members is
trained, ranked by validation ACER, and the ``m`` best vote.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import joblib
import numpy as np
from scipy import ndimage
from sklearn.ensemble import RandomForestClassifier
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .metrics import attack_mask, evaluate

KINDS = ("svm", "random_forest", "mlp")


class UntrainedPoolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterBank:
    filters: np.ndarray  # (f, s, s)
    scale_tag: str = ""

    def __post_init__(self):
        filters = np.asarray(self.filters, dtype=float)
        if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
            raise ValueError(f"filters must have shape (f, s, s), got {filters.shape}")
        if not 1 <= filters.shape[0] <= 16:
            raise ValueError(f"bank must hold 1..16 filters, got {filters.shape[0]}")
        object.__setattr__(self, "filters", filters)

    @property
    def bits(self) -> int:
        return self.filters.shape[0]

    @property
    def size(self) -> int:
        return self.filters.shape[1]

    @property
    def bank_id(self) -> str:
        digest = hashlib.sha256(self.filters.tobytes()).hexdigest()[:8]
        return f"{self.scale_tag or f'{self.size}x{self.size}'}-{self.bits}b-{digest}"


def random_filter_bank(bits: int, size: int, seed: int = 0) -> FilterBank:
    """Seeded zero-mean, mutually orthonormal kernels.

    Stand-in for ICA-learned BSIF filters; needs ``bits <= size**2 - 1``.
    """
    if bits > size * size - 1:
        raise ValueError(f"cannot fit {bits} zero-mean orthonormal {size}x{size} kernels")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(size * size, bits))
    raw -= raw.mean(axis=0, keepdims=True)
    q, _ = np.linalg.qr(raw)
    # QR of zero-mean columns keeps them zero-mean up to rounding
    q -= q.mean(axis=0, keepdims=True)
    filters = q.T.reshape(bits, size, size)
    return FilterBank(filters, scale_tag=f"{size}x{size}")


def load_filter_bank(path, scale_tag=None) -> FilterBank:
    """Read a kernel file: first line ``f s``, then ``f`` blocks of ``s`` rows."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'f s' header")
    f, s = int(tokens[0]), int(tokens[1])
    values = np.array([float(t) for t in tokens[2:]])
    if values.size != f * s * s:
        raise ValueError(f"{path}: expected {f * s * s} kernel values, found {values.size}")
    return FilterBank(values.reshape(f, s, s), scale_tag=scale_tag or Path(path).stem)


def save_filter_bank(bank: FilterBank, path) -> Path:
    path = Path(path)
    lines = [f"{bank.bits} {bank.size}"]
    for kernel in bank.filters:
        lines += [" ".join(repr(float(v)) for v in row) for row in kernel]
        lines.append("")
    path.write_text("\n".join(lines))
    return path


def default_banks(seed: int = 0) -> list[FilterBank]:
    return [random_filter_bank(8, s, seed=seed + s) for s in (3, 5, 7)]


def code_image(image, bank: FilterBank) -> np.ndarray:
    """Per-pixel integer codes in ``[0, 2**bits)``; periodic boundaries."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    codes = np.zeros(img.shape, dtype=np.int64)
    scale = max(1.0, float(np.abs(img).max()))
    for bit, kernel in enumerate(bank.filters):
        response = ndimage.convolve(img, kernel, mode="wrap")
        # rounding residue of an exactly-zero response must not set the bit
        tol = 1e-9 * scale * float(np.abs(kernel).sum())
        codes |= (response > tol).astype(np.int64) << bit
    return codes


def extract_features(image, bank: FilterBank, expected_shape=None) -> np.ndarray:
    """Normalized histogram of filter-sign codes (``2**bits`` bins, sums to 1).

    ``expected_shape`` is (height, width); a mismatch raises ``ValueError``.
    """
    img = np.asarray(image)
    if expected_shape is not None and img.shape != tuple(expected_shape):
        raise ValueError(f"image shape {img.shape} differs from configured {tuple(expected_shape)}")
    codes = code_image(img, bank)
    hist = np.bincount(codes.ravel(), minlength=1 << bank.bits).astype(float)
    return hist / hist.sum()


def feature_matrix(images, bank: FilterBank, expected_shape=None) -> np.ndarray:
    return np.stack([extract_features(im, bank, expected_shape) for im in images])


# ---------------------------------------------------------------------------
# classifier pool


_GRIDS = {
    "svm": {"svc__C": [0.1, 1.0, 10.0, 100.0]},
    "random_forest": {"n_estimators": [50, 100], "max_depth": [None, 8]},
    "mlp": {"mlpclassifier__hidden_layer_sizes": [(32,), (64,)], "mlpclassifier__alpha": [1e-4, 1e-2]},
}


def _make(kind, seed, **params):
    """Unfitted estimator; ``params`` use grid-search (pipeline) names."""
    if kind == "svm":
        model = make_pipeline(StandardScaler(), SVC(kernel="rbf", gamma="scale", class_weight="balanced",
                                                    random_state=seed))
    elif kind == "random_forest":
        model = RandomForestClassifier(class_weight="balanced", random_state=seed, n_jobs=1)
    elif kind == "mlp":
        model = make_pipeline(StandardScaler(), MLPClassifier(max_iter=800, random_state=seed))
    else:
        raise ValueError(f"unknown classifier kind {kind!r}; expected one of {KINDS}")
    return model.set_params(**params)


def tuning_subset(y, fraction, minimum, rng) -> np.ndarray:
    """Stratified index sample of ``max(fraction * n, minimum)`` items."""
    n = len(y)
    target = min(n, max(int(round(fraction * n)), minimum))
    idx = []
    for cls in (False, True):
        members = np.flatnonzero(y == cls)
        take = max(1, int(round(target * members.size / n)))
        idx.extend(rng.choice(members, size=min(take, members.size), replace=False))
    return np.sort(np.array(idx))


@dataclass
class PoolMember:
    bank_index: int
    kind: str
    model: object
    val_acer: float
    params: dict = field(default_factory=dict)


@dataclass
class ClassifierPool:
    banks: list[FilterBank]
    members: list[PoolMember] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)
    image_shape: tuple | None = None
    seed: int = 0

    @property
    def m(self) -> int:
        return len(self.selected)

    def _check(self):
        if not self.selected:
            raise UntrainedPoolError("classifier pool has not been trained")

    def votes(self, images) -> np.ndarray:
        """(n_images, m) boolean matrix of attack votes by selected members."""
        self._check()
        feats = {}
        cols = []
        for idx in self.selected:
            member = self.members[idx]
            if member.bank_index not in feats:
                feats[member.bank_index] = feature_matrix(
                    images, self.banks[member.bank_index], self.image_shape
                )
            cols.append(member.model.predict(feats[member.bank_index]).astype(bool))
        return np.column_stack(cols)

    def score_images(self, images) -> np.ndarray:
        return self.votes(images).mean(axis=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(
            {"format": "padbench.texture_pool/1", "banks": [(b.filters, b.scale_tag) for b in self.banks],
             "members": self.members, "selected": self.selected, "image_shape": self.image_shape,
             "seed": self.seed},
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "ClassifierPool":
        d = joblib.load(path)
        banks = [FilterBank(f, tag) for f, tag in d["banks"]]
        return cls(banks, d["members"], d["selected"], d["image_shape"], d["seed"])


def train_pool(train_images, train_labels, val_images, val_labels,
               banks: Sequence[FilterBank] | None = None, kinds=KINDS, m: int = 3,
               seed: int = 0, tune_fraction: float = 0.01, min_tune: int = 30) -> ClassifierPool:
    """Train every (bank, kind) member and keep the ``m`` lowest-ACER ones.

    Hyperparameters are grid-searched on a stratified subsample of the
    training set (``tune_fraction`` of it, at least ``min_tune`` images),
    then each member is refit on the full training set.
    """
    if m < 1 or m % 2 == 0:
        raise ValueError(f"pool size m must be odd and positive, got {m}")
    banks = list(banks) if banks is not None else default_banks(seed)
    y_train, y_val = attack_mask(train_labels), attack_mask(val_labels)
    for name, y in (("training", y_train), ("validation", y_val)):
        if y.all() or not y.any():
            raise ValueError(f"{name} data must contain both bona fide and attack samples")
    if m > len(banks) * len(kinds):
        raise ValueError(f"cannot select {m} of {len(banks) * len(kinds)} members")

    shape = np.asarray(train_images[0]).shape
    rng = np.random.default_rng(seed)
    tune_idx = tuning_subset(y_train, tune_fraction, min_tune, rng)
    pool = ClassifierPool(banks, image_shape=shape, seed=seed)

    for b_idx, bank in enumerate(banks):
        x_train = feature_matrix(train_images, bank, shape)
        x_val = feature_matrix(val_images, bank, shape)
        for kind in kinds:
            params = _tune(kind, x_train[tune_idx], y_train[tune_idx], seed)
            model = _make(kind, seed, **params).fit(x_train, y_train)
            pred = model.predict(x_val).astype(float)
            acer = evaluate(pred, y_val, 0.5).acer
            pool.members.append(PoolMember(b_idx, kind, model, acer, params))

    # stable sort: ties keep training order
    ranked = sorted(range(len(pool.members)), key=lambda i: pool.members[i].val_acer)
    pool.selected = sorted(ranked[:m])
    return pool


def _tune(kind, x, y, seed) -> dict:
    per_class = min(int(y.sum()), int((~y).sum()))
    if per_class < 3:
        return {}
    search = GridSearchCV(
        _make(kind, seed), _GRIDS[kind],
        cv=StratifiedKFold(n_splits=3, shuffle=True, random_state=seed),
        scoring="balanced_accuracy",
    )
    search.fit(x, y)
    return dict(search.best_params_)


def score(pool: ClassifierPool, image) -> float:
    """Fraction of selected members voting attack for one image."""
    return float(pool.score_images([image])[0])
