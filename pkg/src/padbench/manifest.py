"""Corpus catalog and curation.

A manifest is a comma-separated text file with a header row. The four
required columns are ``sample_id, path, class_label, source_dataset``;
``width, height, channels, pixel_hash`` are optional and are filled in by
the curation steps. Paths are relative to a corpus root given at load time.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

BONA_FIDE = "bona_fide"
PAIS = (
    "artificial",
    "textured_contact",
    "textured_contact_printed",
    "diseased",
    "post_mortem",
    "printout",
    "synthetic",
)
CLASS_LABELS = (BONA_FIDE,) + PAIS

REQUIRED_COLUMNS = ("sample_id", "path", "class_label", "source_dataset")
OPTIONAL_COLUMNS = ("width", "height", "channels", "pixel_hash")

ISO_RESOLUTION = (640, 480)  # (width, height)


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content."""


class ImageDecodeError(RuntimeError):
    def __init__(self, sample_id, reason):
        super().__init__(f"cannot decode image for sample {sample_id!r}: {reason}")
        self.sample_id = sample_id


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    path: str
    class_label: str
    source_dataset: str
    width: int | None = None
    height: int | None = None
    channels: int | None = None
    pixel_hash: str | None = None

    @property
    def is_attack(self) -> bool:
        return self.class_label != BONA_FIDE


@dataclass(frozen=True)
class CurationStep:
    name: str
    input_count: int
    removed_count: int
    output_count: int


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...] = ()
    curation_log: tuple[CurationStep, ...] = ()
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "curation_log", tuple(self.curation_log))
        seen = set()
        for rec in self.records:
            if rec.class_label not in CLASS_LABELS:
                raise ManifestError(f"unknown class label {rec.class_label!r} for {rec.sample_id!r}")
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return replace(self, records=tuple(r for r in self.records if r.sample_id in keep))

    def _with_step(self, records, name) -> "Manifest":
        step = CurationStep(name, len(self.records), len(self.records) - len(records), len(records))
        return replace(self, records=tuple(records), curation_log=self.curation_log + (step,))


@dataclass
class DedupReport:
    input_count: int
    removed_count: int
    kept_count: int
    duplicate_groups: list[tuple[str, list[str]]] = field(default_factory=list)

    def to_json(self) -> str:
        payload = asdict(self)
        payload["duplicate_groups"] = [
            {"kept": kept, "removed": list(removed)} for kept, removed in self.duplicate_groups
        ]
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DedupReport":
        payload = json.loads(text)
        groups = [(g["kept"], list(g["removed"])) for g in payload["duplicate_groups"]]
        return cls(payload["input_count"], payload["removed_count"], payload["kept_count"], groups)


def merge_manifests(*manifests: Manifest) -> Manifest:
    """Concatenate manifests. Records keep their own paths, so use a store
    per manifest (see :class:`MultiRootImageStore`) to read pixels."""
    records = [r for m in manifests for r in m.records]
    return Manifest(records)


# ---------------------------------------------------------------------------
# image stores


def pixel_digest(pixels: np.ndarray) -> str:
    """SHA-256 of decoded pixels in row-major order, prefixed by shape and
    dtype so that equal byte strings of different geometry never collide."""
    arr = np.ascontiguousarray(pixels)
    h = hashlib.sha256()
    h.update(f"{arr.dtype.str}:{'x'.join(map(str, arr.shape))}:".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class DirectoryImageStore:
    """Decode images from files under a corpus root."""

    def __init__(self, root):
        self.root = Path(root)

    def read(self, record: SampleRecord) -> np.ndarray:
        path = self.root / record.path
        try:
            with Image.open(path) as im:
                im.load()
                return np.asarray(im)
        except Exception as exc:  # PIL raises a zoo of types
            raise ImageDecodeError(record.sample_id, exc) from exc


class MultiRootImageStore:
    """Route reads to per-manifest stores by sample_id."""

    def __init__(self, manifests: Sequence[Manifest]):
        self._stores = {}
        for m in manifests:
            if m.root is None:
                raise ValueError("manifest has no corpus root")
            store = DirectoryImageStore(m.root)
            for r in m.records:
                self._stores[r.sample_id] = store

    def read(self, record: SampleRecord) -> np.ndarray:
        try:
            store = self._stores[record.sample_id]
        except KeyError:
            raise ImageDecodeError(record.sample_id, "no store registered") from None
        return store.read(record)


class MemoryImageStore:
    """In-memory images keyed by sample_id (tests and notebooks)."""

    def __init__(self, images: Mapping[str, np.ndarray]):
        self.images = dict(images)

    def read(self, record: SampleRecord) -> np.ndarray:
        try:
            return np.asarray(self.images[record.sample_id])
        except KeyError:
            raise ImageDecodeError(record.sample_id, "missing from store") from None


def describe_image(pixels: np.ndarray) -> dict:
    pixels = np.asarray(pixels)
    height, width = pixels.shape[:2]
    channels = 1 if pixels.ndim == 2 else pixels.shape[2]
    return {"width": int(width), "height": int(height), "channels": int(channels)}


def annotate(manifest: Manifest, image_store, workers: int | None = None) -> Manifest:
    """Fill geometry and pixel_hash for every record.

    Hashing runs on a thread pool; results are merged in input order so the
    output never depends on scheduling.
    """

    def work(rec):
        if rec.pixel_hash is not None and rec.channels is not None:
            return rec
        pixels = image_store.read(rec)
        return replace(rec, pixel_hash=pixel_digest(pixels), **describe_image(pixels))

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(work, manifest.records))
    else:
        records = [work(r) for r in manifest.records]
    return replace(manifest, records=tuple(records))


# ---------------------------------------------------------------------------
# file I/O


def _parse_int(value, row_number, column):
    if value in (None, ""):
        return None
    try:
        return int(value)
    except ValueError:
        raise ManifestError(f"row {row_number}: column {column!r} is not an integer: {value!r}") from None


def load_manifest(path, root=None) -> Manifest:
    """Read a manifest file.

    Parameters
    ----------
    path : path-like
        Manifest CSV.
    root : path-like, optional
        Corpus root that record paths are relative to. Defaults to the
        directory containing the manifest.

    Raises
    ------
    ManifestError
        On a malformed row (the message names the 1-based data row), an
        unknown class label, or a repeated sample_id.
    """
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    records = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"header is missing columns {missing}")
        for row_number, row in enumerate(reader, start=1):
            if None in row or any(row.get(c) in (None, "") for c in REQUIRED_COLUMNS):
                raise ManifestError(f"row {row_number}: malformed row {row!r}")
            label = row["class_label"].strip()
            if label not in CLASS_LABELS:
                raise ManifestError(f"row {row_number}: class label {label!r} is not in the taxonomy")
            sid = row["sample_id"].strip()
            if sid in seen:
                raise ManifestError(
                    f"row {row_number}: duplicate sample_id {sid!r} (first seen in row {seen[sid]})"
                )
            seen[sid] = row_number
            records.append(
                SampleRecord(
                    sample_id=sid,
                    path=row["path"].strip(),
                    class_label=label,
                    source_dataset=row["source_dataset"].strip(),
                    width=_parse_int(row.get("width"), row_number, "width"),
                    height=_parse_int(row.get("height"), row_number, "height"),
                    channels=_parse_int(row.get("channels"), row_number, "channels"),
                    pixel_hash=(row.get("pixel_hash") or None),
                )
            )
    return Manifest(records, root=root)


def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS + OPTIONAL_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [r.sample_id, r.path, r.class_label, r.source_dataset]
                + ["" if v is None else v for v in (r.width, r.height, r.channels, r.pixel_hash)]
            )
    return path


# ---------------------------------------------------------------------------
# curation


def deduplicate(manifest: Manifest, image_store, workers: int | None = None):
    """Collapse records whose decoded pixels are identical.

    One representative survives per pixel-hash group: the record with the
    lowest ``(source_dataset, sample_id)``. Surviving records keep their
    input order.

    Returns
    -------
    (Manifest, DedupReport)
    """
    annotated = annotate(manifest, image_store, workers=workers)
    groups = defaultdict(list)
    for rec in annotated.records:
        groups[rec.pixel_hash].append(rec)

    kept_ids = set()
    duplicate_groups = []
    for members in groups.values():
        keeper = min(members, key=lambda r: (r.source_dataset, r.sample_id))
        kept_ids.add(keeper.sample_id)
        if len(members) > 1:
            removed = [r.sample_id for r in members if r is not keeper]
            duplicate_groups.append((keeper.sample_id, removed))
    duplicate_groups.sort()

    kept = [r for r in annotated.records if r.sample_id in kept_ids]
    out = annotated._with_step(kept, "deduplicate")
    report = DedupReport(
        input_count=len(annotated),
        removed_count=len(annotated) - len(kept),
        kept_count=len(kept),
        duplicate_groups=duplicate_groups,
    )
    return out, report


def filter_iso_compliant(manifest: Manifest, image_store, resolution=ISO_RESOLUTION,
                         workers: int | None = None) -> Manifest:
    """Keep single-channel images at ``resolution`` (width, height).

    The default is the ISO/IEC 19794-6 640x480 grey-scale format; toy
    corpora pass their own resolution.
    """
    annotated = annotate(manifest, image_store, workers=workers)
    width, height = resolution
    kept = [r for r in annotated.records if r.channels == 1 and (r.width, r.height) == (width, height)]
    return annotated._with_step(kept, f"iso_compliant[{width}x{height},1ch]")


def class_counts(manifest: Manifest) -> dict[str, int]:
    counts = Counter(r.class_label for r in manifest.records)
    return {label: counts.get(label, 0) for label in CLASS_LABELS}
