"""ISO/IEC 30107-3 error rates, threshold calibration and fold aggregation.

Scores follow the convention 0 = bona fide, 1 = attack, and a sample is
called an attack when ``score >= threshold``.
"""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .manifest import BONA_FIDE

METRIC_NAMES = ("ccr", "apcer", "bpcer", "acer")


def attack_mask(labels) -> np.ndarray:
    """Boolean array, True where the label denotes an attack.

    Accepts booleans/ints (1 = attack), or strings where ``"bona_fide"`` is
    the live class and ``"attack"`` or any PAI name is an attack.
    """
    arr = np.asarray(labels)
    if arr.dtype.kind in "biu":
        return arr.astype(bool)
    if arr.dtype.kind in "US":
        return arr != BONA_FIDE
    if arr.dtype.kind == "O" or arr.size == 0:
        return np.array([(x != BONA_FIDE) if isinstance(x, str) else bool(x) for x in arr.tolist()],
                        dtype=bool)
    raise TypeError(f"unsupported label dtype {arr.dtype}")


@dataclass(frozen=True)
class Confusion:
    tp_attack: int = 0
    fn_attack: int = 0
    tn_bona: int = 0
    fp_bona: int = 0

    def __post_init__(self):
        if min(self.tp_attack, self.fn_attack, self.tn_bona, self.fp_bona) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_attack(self):
        return self.tp_attack + self.fn_attack

    @property
    def n_bona(self):
        return self.tn_bona + self.fp_bona


def confusion(scores, labels, threshold: float) -> Confusion:
    scores = np.asarray(scores, dtype=float)
    is_attack = attack_mask(labels)
    if scores.shape != is_attack.shape:
        raise ValueError(f"{scores.shape[0] if scores.ndim else 0} scores but {is_attack.size} labels")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    called_attack = scores >= threshold
    return Confusion(
        tp_attack=int(np.sum(called_attack & is_attack)),
        fn_attack=int(np.sum(~called_attack & is_attack)),
        tn_bona=int(np.sum(~called_attack & ~is_attack)),
        fp_bona=int(np.sum(called_attack & ~is_attack)),
    )


@dataclass(frozen=True)
class MetricsReport:
    """Error rates as fractions. ``apcer``/``bpcer``/``acer`` are ``None``
    when the corresponding class is absent."""

    ccr: float
    apcer: float | None
    bpcer: float | None
    acer: float | None
    n_attack: int
    n_bona: int
    threshold: float | None
    confusion: Confusion = field(default_factory=Confusion)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        d = dict(d)
        d["confusion"] = Confusion(**d.get("confusion", {}))
        return cls(**d)

    def percent(self, name) -> str:
        value = getattr(self, name)
        return "--" if value is None else f"{round_half_up(100 * Decimal(repr(value))):.2f}"


def round_half_up(value, places: int = 2) -> Decimal:
    """Decimal rounding with ties away from zero, as printed tables round.

    Floats are taken at their shortest repr, so ``36.255`` rounds to
    ``36.26`` rather than to the nearest binary neighbour's rounding.
    """
    if not isinstance(value, Decimal):
        value = Decimal(repr(float(value)))
    return value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def acer_from_rates(apcer, bpcer):
    """Mean of the two error rates; works on floats or Decimals."""
    return (apcer + bpcer) / 2


def ccr_from_rates(apcer, bpcer, n_attack, n_bona):
    """CCR implied by the error rates and class sizes.

    Works on floats, Decimals or Fractions; with Fractions the result is exact.
    """
    errors = (apcer or 0) * n_attack + (bpcer or 0) * n_bona
    return 1 - errors / (n_attack + n_bona)


def report(conf: Confusion, threshold: float | None = None) -> MetricsReport:
    n_attack, n_bona = conf.n_attack, conf.n_bona
    if n_attack + n_bona == 0:
        raise ValueError("cannot report metrics on an empty set")
    apcer = conf.fn_attack / n_attack if n_attack else None
    bpcer = conf.fp_bona / n_bona if n_bona else None
    acer = acer_from_rates(apcer, bpcer) if apcer is not None and bpcer is not None else None
    # from counts, so it is the exactly rounded ratio; ccr_from_rates agrees in exact arithmetic
    return MetricsReport(
        ccr=(conf.tp_attack + conf.tn_bona) / (n_attack + n_bona),
        apcer=apcer,
        bpcer=bpcer,
        acer=acer,
        n_attack=n_attack,
        n_bona=n_bona,
        threshold=threshold,
        confusion=conf,
    )


def evaluate(scores, labels, threshold: float) -> MetricsReport:
    return report(confusion(scores, labels, threshold), threshold)


def threshold_at_fdr(val_scores, val_labels, target_fdr: float) -> float:
    """Smallest threshold whose bona fide false-detection rate is within target.

    Candidates are the observed validation scores plus a sentinel just
    above ``max(1, max score)``, at which nothing is called an attack.
    FDR here is the fraction of bona fide samples with ``score >= tau``.
    """
    scores = np.asarray(val_scores, dtype=float)
    is_attack = attack_mask(val_labels)
    if scores.shape != is_attack.shape:
        raise ValueError("scores and labels differ in length")
    bona = np.sort(scores[~is_attack])
    if bona.size == 0:
        raise ValueError("calibration set has no bona fide samples")
    if not 0.0 <= target_fdr <= 1.0:
        raise ValueError(f"target FDR {target_fdr} outside [0, 1]")
    sentinel = np.nextafter(max(1.0, float(scores.max())), np.inf)
    candidates = np.append(np.unique(scores), sentinel)
    # false detections at each candidate: bona fide scores >= tau
    false_det = bona.size - np.searchsorted(bona, candidates, side="left")
    ok = false_det / bona.size <= target_fdr
    # false detections are non-increasing in tau, so the first hit is minimal
    return float(candidates[np.argmax(ok)])


@dataclass(frozen=True)
class AggregateReport:
    mean: dict
    std: dict
    n_folds: int

    def cell(self, name) -> str:
        m, s = self.mean.get(name), self.std.get(name)
        if m is None:
            return "--"
        return f"{round_half_up(100 * Decimal(repr(m)))}% ± {round_half_up(100 * Decimal(repr(s)))}%"

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std), "n_folds": self.n_folds}

    @classmethod
    def from_dict(cls, d) -> "AggregateReport":
        return cls(dict(d["mean"]), dict(d["std"]), d["n_folds"])


def aggregate_folds(reports: Sequence[MetricsReport]) -> AggregateReport:
    """Mean and sample standard deviation (n - 1) of each metric.

    Folds where a metric is undefined are skipped for that metric.
    """
    if not reports:
        raise ValueError("no fold reports to aggregate")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            mean[name] = std[name] = None
            continue
        mean[name] = math.fsum(values) / len(values)
        std[name] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return AggregateReport(mean, std, len(reports))
