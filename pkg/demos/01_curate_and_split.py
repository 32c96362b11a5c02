"""Curating a corpus and carving it into evaluation splits.

Renders a small synthetic iris-like corpus, plants exact duplicates,
removes them, then builds closed-set and leave-one-PAI-out plans and
shows which attack types travel together when one is held out.

    python3 demos/01_curate_and_split.py
"""

import tempfile
from collections import Counter
from pathlib import Path

from padbench.manifest import (BONA_FIDE, PAIS, DirectoryImageStore, Manifest, SampleRecord, class_counts,
                               deduplicate)
from padbench.splits import LINKED_EXCLUSIONS, closed_set_rotation, leave_one_pai_out, validate_split
from padbench.toygen import ToyConfig, generate_toy_corpus


def main():
    work = Path(tempfile.mkdtemp(prefix="padbench_demo_"))
    corpus = generate_toy_corpus(ToyConfig(10, seed=0), work / "toy")
    print(f"rendered {len(corpus)} images under {work / 'toy'}")
    print("per class:", dict(class_counts(corpus)))

    # a second listing of three files under new ids mimics a dataset shipped twice
    copies = [SampleRecord(f"copy_{r.sample_id}", r.path, r.class_label, "mirror") for r in corpus.records[:3]]
    padded = Manifest(corpus.records + tuple(copies), root=corpus.root)
    curated, dedup = deduplicate(padded, DirectoryImageStore(corpus.root))
    print(f"\ndedup: {dedup.input_count} in, {dedup.removed_count} removed, {dedup.kept_count} kept")
    for kept, dropped in dedup.duplicate_groups:
        print(f"  kept {kept}, dropped {dropped}")

    plans = closed_set_rotation(curated, k=5, seed=0)
    print("\nclosed-set rotation (train / val / test sizes):")
    for p in plans:
        print(f"  {p.name}: {len(p.train_ids)} / {len(p.val_ids)} / {len(p.test_ids)}"
              f"  valid={validate_split(p, curated).ok}")

    print("\nholding out one attack type removes its linked types as well:")
    for pai in PAIS:
        print(f"  {pai:<26} -> {sorted(LINKED_EXCLUSIONS[pai])}")

    external = generate_toy_corpus(ToyConfig({BONA_FIDE: 10}, seed=1, source_dataset="ext", id_prefix="ext_"),
                                   work / "ext")
    plan = leave_one_pai_out(curated, "printout", external, seed=0)
    labels = {r.sample_id: r.class_label for r in curated.records + external.records}
    print(f"\n{plan.name}: test classes {dict(Counter(labels[s] for s in plan.test_ids))}")
    print(f"  classes seen in training: {sorted({labels[s] for s in plan.train_ids})}")


if __name__ == "__main__":
    main()
