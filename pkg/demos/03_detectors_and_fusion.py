"""Three detectors on one fold, fused by a kernel machine.

Trains the texture pool, the CNN and the VAE-based detector on a fold's
training split, scores validation and test, fits the fusion on
validation scores only, and compares all of them on test.

    python3 demos/03_detectors_and_fusion.py      # about a minute on one CPU
"""

import numpy as np

from padbench import ensemble, neural, texture
from padbench.manifest import CLASS_LABELS, Manifest, SampleRecord
from padbench.metrics import evaluate
from padbench.splits import closed_set_rotation
from padbench.toygen import instance_seed, render_sample

PER_CLASS = 40


def main():
    images, records = {}, []
    for label in CLASS_LABELS:
        for i in range(PER_CLASS):
            sid = f"{label}_{i:03d}"
            images[sid] = render_sample(label, instance_seed(0, label, i))
            records.append(SampleRecord(sid, f"{sid}.png", label, "toy"))
    manifest = Manifest(records)
    plan = closed_set_rotation(manifest, seed=0)[0]
    labels = {r.sample_id: r.class_label for r in records}

    def arrays(ids):
        ids = sorted(ids)
        return ids, np.stack([images[s] for s in ids]), np.array([labels[s] for s in ids])

    _, x_train, y_train = arrays(plan.train_ids)
    val_ids, x_val, y_val = arrays(plan.val_ids)
    test_ids, x_test, y_test = arrays(plan.test_ids)
    print(f"{plan.name}: {len(x_train)} train, {len(x_val)} val, {len(x_test)} test")

    pool = texture.train_pool(x_train, y_train, x_val, y_val, seed=0)
    print("texture pool keeps:", [(pool.members[i].kind, pool.members[i].bank_index) for i in pool.selected])
    cnn = neural.train_cnn(x_train, y_train, neural.CnnConfig(seed=0))
    vaepad = neural.train_vaepad(x_train, y_train, neural.VaeConfig(seed=0), neural.HeadConfig(seed=0))

    def vectors(ids, x, role):
        cols = pool.score_images(x), cnn.score_images(x), vaepad.score_images(x)
        return [ensemble.ScoreVector(sid, *(float(c[i]) for c in cols), role=role) for i, sid in enumerate(ids)]

    val_vectors, test_vectors = vectors(val_ids, x_val, "val"), vectors(test_ids, x_test, "test")
    print("\ntest CCR")
    for name, column, tau in (("texture", "s_texture", 0.5), ("cnn", "s_cnn", cnn.threshold), ("vae", "s_vae", 0.5)):
        s = np.array([getattr(v, column) for v in test_vectors])
        print(f"  {name:<16} {evaluate(s, y_test, tau).percent('ccr')}%")

    for kernel in ensemble.KERNELS:
        fusion = ensemble.train_fusion(val_vectors, y_val, kernel, detector_training_ids=plan.train_ids)
        decisions = fusion.decisions(test_vectors).astype(float)
        print(f"  fusion {kernel:<9} {evaluate(decisions, y_test, 0.5).percent('ccr')}%")

    try:
        ensemble.train_fusion(test_vectors, y_test, "rbf")
    except ensemble.ProvenanceError as exc:
        print("\nfitting the fusion on test scores is refused:", exc)


if __name__ == "__main__":
    main()
