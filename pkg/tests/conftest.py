import numpy as np
import pytest

from padbench.manifest import CLASS_LABELS, Manifest, MemoryImageStore, SampleRecord
from padbench.toygen import ToyConfig, generate_toy_corpus


def memory_corpus(images_by_label, source="mem"):
    """Manifest + in-memory store from {label: [image, ...]}."""
    records, images = [], {}
    for label, imgs in images_by_label.items():
        for i, img in enumerate(imgs):
            sid = f"{source}_{label}_{i:03d}"
            records.append(SampleRecord(sid, f"{sid}.png", label, source))
            images[sid] = np.asarray(img)
    return Manifest(records), MemoryImageStore(images)


def id_manifest(per_class, prefix="", source="toy"):
    """Records with no pixels behind them; enough for split logic."""
    if isinstance(per_class, int):
        per_class = {c: per_class for c in CLASS_LABELS}
    records = [SampleRecord(f"{prefix}{c}_{i:04d}", f"{prefix}{c}/{i}.png", c, source)
               for c, n in per_class.items() for i in range(n)]
    return Manifest(records)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """12 images per class, 64x64, written to disk."""
    out = tmp_path_factory.mktemp("toy12")
    return generate_toy_corpus(ToyConfig(12, seed=11), out)


@pytest.fixture(scope="session")
def external_live(tmp_path_factory):
    out = tmp_path_factory.mktemp("ext")
    return generate_toy_corpus(ToyConfig({"bona_fide": 8}, seed=12, source_dataset="ext", id_prefix="ext_"), out)


def toy_arrays(per_class, seed=0, labels=CLASS_LABELS):
    """Rendered toy images and labels without touching disk."""
    from padbench.toygen import instance_seed, render_sample
    images, y = [], []
    for label in labels:
        for i in range(per_class):
            images.append(render_sample(label, instance_seed(seed, label, i)))
            y.append(label)
    return np.stack(images), np.array(y)
