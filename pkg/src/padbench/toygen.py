"""Deterministic toy iris corpus.

Every class has its own rendering style and iris base level, so a
nearest-centroid classifier on raw pixels separates the classes. The corpus
exists to exercise the pipeline, not to benchmark detectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .manifest import CLASS_LABELS, Manifest, SampleRecord, pixel_digest, save_manifest

DOT_PITCH = 5


@dataclass(frozen=True)
class ToyConfig:
    """Toy corpus parameters.

    ``per_class_count`` is either one count for every class or a mapping from
    class label to count (missing classes get zero).
    """

    per_class_count: int | Mapping[str, int] = 5
    image_size: tuple[int, int] = (64, 64)  # (width, height)
    seed: int = 0
    source_dataset: str = "toy"
    id_prefix: str = ""

    def __post_init__(self):
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        for label, n in self.counts().items():
            if n < 0:
                raise ValueError(f"negative count for {label}")

    def counts(self) -> dict[str, int]:
        if isinstance(self.per_class_count, Mapping):
            unknown = set(self.per_class_count) - set(CLASS_LABELS)
            if unknown:
                raise ValueError(f"unknown class labels {sorted(unknown)}")
            return {c: int(self.per_class_count.get(c, 0)) for c in CLASS_LABELS}
        return {c: int(self.per_class_count) for c in CLASS_LABELS}


# ---------------------------------------------------------------------------
# rendering primitives


class _Eye:
    def __init__(self, rng, size):
        w, h = size
        self.rng = rng
        self.shape = (h, w)
        s = min(w, h)
        cx = (w - 1) / 2 + rng.uniform(-1.5, 1.5)
        cy = (h - 1) / 2 + rng.uniform(-1.5, 1.5)
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        self.dx, self.dy = xx - cx, yy - cy
        self.r = np.hypot(self.dx, self.dy)
        self.theta = np.arctan2(self.dy, self.dx)
        self.r_pupil = s * rng.uniform(0.11, 0.14)
        self.r_iris = s * rng.uniform(0.38, 0.42)
        self.iris = (self.r >= self.r_pupil) & (self.r < self.r_iris)
        self.pupil = self.r < self.r_pupil
        self.yy, self.xx = yy, xx

    def canvas(self):
        h = self.shape[0]
        sclera = 175.0 + 10.0 * (self.yy / max(h - 1, 1) - 0.5)
        img = sclera.copy()
        img[self.pupil] = 25.0
        return img

    def radial_texture(self):
        rng = self.rng
        spokes = rng.integers(8, 15)
        wavelength = rng.uniform(4.0, 7.0)
        t = 0.5 * np.sin(spokes * self.theta + rng.uniform(0, 2 * np.pi))
        t += 0.5 * np.sin(2 * np.pi * self.r / wavelength + rng.uniform(0, 2 * np.pi))
        return t

    def finish(self, img):
        img = img + self.rng.normal(0.0, 2.0, self.shape)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _bona_fide_like(eye, level, contrast):
    img = eye.canvas()
    img[eye.iris] = level + contrast * eye.radial_texture()[eye.iris]
    return img


def _dot_grid(eye, img, depth=45.0):
    mask = (eye.yy.astype(int) % DOT_PITCH < 2) & (eye.xx.astype(int) % DOT_PITCH < 2)
    out = img.copy()
    out[mask] -= depth
    return out


def _blob_annulus(eye, level):
    field = ndimage.gaussian_filter(eye.rng.normal(size=eye.shape), 1.2, mode="wrap")
    blobs = np.where(field > 0, 50.0, -50.0)
    img = eye.canvas()
    img[eye.iris] = level + blobs[eye.iris]
    return img


def _render_bona_fide(eye):
    return _bona_fide_like(eye, 115.0 + eye.rng.uniform(-3, 3), 25.0)


def _render_printout(eye):
    return _dot_grid(eye, _bona_fide_like(eye, 115.0 + eye.rng.uniform(-3, 3), 25.0))


def _render_textured_contact(eye):
    return _blob_annulus(eye, 60.0 + eye.rng.uniform(-3, 3))


def _render_textured_contact_printed(eye):
    return _dot_grid(eye, _blob_annulus(eye, 60.0 + eye.rng.uniform(-3, 3)))


def _render_synthetic(eye):
    noise = ndimage.gaussian_filter(eye.rng.normal(size=eye.shape), 0.8)
    noise /= noise.std() + 1e-12
    img = eye.canvas()
    img[eye.iris] = 185.0 + eye.rng.uniform(-3, 3) + 30.0 * noise[eye.iris]
    return img


def _render_post_mortem(eye):
    img = _bona_fide_like(eye, 95.0 + eye.rng.uniform(-3, 3), 8.0)
    centre = np.deg2rad(-135.0 + eye.rng.uniform(-10, 10))
    half_width = np.deg2rad(25.0)
    delta = np.angle(np.exp(1j * (eye.theta - centre)))
    wedge = (np.abs(delta) < half_width) & (eye.r < eye.r_iris * 1.15)
    img[wedge] = 235.0
    return img


def _render_artificial(eye):
    ring_width = eye.rng.uniform(3.5, 4.5)
    rings = (np.floor((eye.r - eye.r_pupil) / ring_width) % 2 == 0)
    img = eye.canvas()
    flat = np.where(rings, 110.0, 70.0) + eye.rng.uniform(-3, 3)
    img[eye.iris] = flat[eye.iris]
    return img


def _render_diseased(eye):
    img = _bona_fide_like(eye, 125.0 + eye.rng.uniform(-3, 3), 25.0)
    rng = eye.rng
    lesion = np.zeros(eye.shape)
    for _ in range(rng.integers(7, 10)):
        rad = rng.uniform(eye.r_pupil + 2, eye.r_iris - 2)
        ang = rng.uniform(0, 2 * np.pi)
        size = rng.uniform(4.0, 6.5)
        d = np.hypot(eye.dx - rad * np.cos(ang), eye.dy - rad * np.sin(ang))
        lesion = np.maximum(lesion, d < size * (1 + 0.35 * np.sin(3 * eye.theta + ang)))
    img[lesion > 0] = 200.0
    return img


_RENDERERS = {
    "bona_fide": _render_bona_fide,
    "printout": _render_printout,
    "textured_contact": _render_textured_contact,
    "textured_contact_printed": _render_textured_contact_printed,
    "synthetic": _render_synthetic,
    "post_mortem": _render_post_mortem,
    "artificial": _render_artificial,
    "diseased": _render_diseased,
}


def render_sample(class_label: str, instance_seed: int, image_size=(64, 64)) -> np.ndarray:
    """Render one single-channel uint8 image of shape (height, width)."""
    if class_label not in _RENDERERS:
        raise ValueError(f"unknown class label {class_label!r}")
    rng = np.random.default_rng([int(instance_seed), CLASS_LABELS.index(class_label)])
    eye = _Eye(rng, image_size)
    return eye.finish(_RENDERERS[class_label](eye))


def instance_seed(seed: int, class_label: str, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(CLASS_LABELS.index(class_label), index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_toy_corpus(config: ToyConfig, output_dir) -> Manifest:
    """Write PNG images plus ``manifest.csv`` under ``output_dir``.

    Returns the manifest with geometry and pixel hashes filled in.
    """
    out = Path(output_dir)
    width, height = config.image_size
    records = []
    for label, n in config.counts().items():
        if n == 0:
            continue
        class_dir = out / "images" / label
        try:
            class_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {class_dir}: {exc}") from exc
        for i in range(n):
            sid = f"{config.id_prefix}{label}_{i:05d}"
            pixels = render_sample(label, instance_seed(config.seed, label, i), config.image_size)
            rel = f"images/{label}/{sid}.png"
            try:
                Image.fromarray(pixels).save(out / rel)
            except OSError as exc:
                raise OSError(f"cannot write {out / rel}: {exc}") from exc
            records.append(
                SampleRecord(sid, rel, label, config.source_dataset, width, height, 1, pixel_digest(pixels))
            )
    manifest = Manifest(records, root=out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.csv")
    return manifest
