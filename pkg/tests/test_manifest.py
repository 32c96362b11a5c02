import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padbench.manifest import (CLASS_LABELS, DedupReport, DirectoryImageStore, ImageDecodeError, Manifest,
                               ManifestError, MemoryImageStore, SampleRecord, class_counts, deduplicate,
                               filter_iso_compliant, load_manifest, pixel_digest, save_manifest)

from conftest import memory_corpus

HEADER = "sample_id,path,class_label,source_dataset\n"


def write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_header_only_file_gives_empty_manifest(tmp_path):
    m = load_manifest(write(tmp_path, HEADER))
    assert len(m) == 0
    assert class_counts(m) == {c: 0 for c in CLASS_LABELS}


def test_label_outside_taxonomy_rejected_with_row_number(tmp_path):
    text = HEADER + "a,a.png,bona_fide,x\nb,b.png,e_ink,x\n"
    with pytest.raises(ManifestError, match="row 2"):
        load_manifest(write(tmp_path, text))


def test_duplicate_sample_id_rejected(tmp_path):
    text = HEADER + "a,a.png,bona_fide,x\na,b.png,printout,x\n"
    with pytest.raises(ManifestError, match="duplicate sample_id 'a'"):
        load_manifest(write(tmp_path, text))


def test_malformed_row_names_row(tmp_path):
    text = HEADER + "a,a.png,bona_fide,x\nb,b.png\n"
    with pytest.raises(ManifestError, match="row 2"):
        load_manifest(write(tmp_path, text))


def test_missing_required_column(tmp_path):
    with pytest.raises(ManifestError, match="missing columns"):
        load_manifest(write(tmp_path, "sample_id,path,class_label\n"))


def test_twelve_row_fixture_counts(tmp_path):
    # 3 bona fide, 2 printout, 2 synthetic, 1 each of five other PAIs
    labels = ["bona_fide"] * 3 + ["printout"] * 2 + ["synthetic"] * 2 + [
        "artificial", "textured_contact", "textured_contact_printed", "diseased", "post_mortem"]
    rows = "".join(f"s{i},img/{i}.png,{lab},setA\n" for i, lab in enumerate(labels))
    m = load_manifest(write(tmp_path, HEADER + rows))
    assert len(m) == 12
    assert m.ids == [f"s{i}" for i in range(12)]
    assert class_counts(m) == {"bona_fide": 3, "artificial": 1, "textured_contact": 1,
                               "textured_contact_printed": 1, "diseased": 1, "post_mortem": 1,
                               "printout": 2, "synthetic": 2}


def test_save_load_round_trip(tmp_path):
    recs = [SampleRecord("a", "x/a.png", "bona_fide", "s", 64, 64, 1, "ab" * 32),
            SampleRecord("b", "x/b.png", "printout", "s")]
    path = save_manifest(Manifest(recs), tmp_path / "m.csv")
    assert load_manifest(path).records == tuple(recs)


def test_pixel_digest_separates_geometry():
    a = np.zeros((4, 6), np.uint8)
    assert pixel_digest(a) != pixel_digest(a.reshape(6, 4))
    assert pixel_digest(a) == pixel_digest(a.copy())
    assert len(pixel_digest(a)) == 64


def distinct_images(n, seed=0, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, shape, dtype=np.uint8) for _ in range(n)]


def test_three_copies_planted_among_ten_distinct():
    imgs = distinct_images(10)
    extra = distinct_images(1, seed=99)[0]
    manifest, store = memory_corpus({"bona_fide": imgs + [extra, extra.copy(), extra.copy()]})
    _, rep = deduplicate(manifest, store)
    assert (rep.input_count, rep.removed_count, rep.kept_count) == (13, 2, 11)
    assert len(rep.duplicate_groups) == 1
    kept, removed = rep.duplicate_groups[0]
    assert kept == "mem_bona_fide_010" and len(removed) == 2


def test_all_distinct_is_unchanged():
    manifest, store = memory_corpus({"printout": distinct_images(6)})
    out, rep = deduplicate(manifest, store)
    assert rep.removed_count == 0
    assert out.ids == manifest.ids


def test_kept_representative_is_lowest_source_then_id():
    img = distinct_images(1)[0]
    recs = [SampleRecord("z1", "p", "bona_fide", "beta"), SampleRecord("a9", "p", "bona_fide", "gamma"),
            SampleRecord("m5", "p", "bona_fide", "alpha"), SampleRecord("b2", "p", "bona_fide", "alpha")]
    store = MemoryImageStore({r.sample_id: img for r in recs})
    out, rep = deduplicate(Manifest(recs), store)
    assert out.ids == ["b2"]
    assert rep.duplicate_groups == [("b2", ["z1", "a9", "m5"])]


def test_dedup_report_json_round_trip():
    rep = DedupReport(5, 2, 3, [("a", ["b", "c"])])
    back = DedupReport.from_json(rep.to_json())
    assert back == rep
    assert json.loads(rep.to_json())["duplicate_groups"][0]["kept"] == "a"


def test_undecodable_image_names_sample(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    m = Manifest([SampleRecord("bad_one", "bad.png", "bona_fide", "s")], root=tmp_path)
    with pytest.raises(ImageDecodeError, match="bad_one"):
        deduplicate(m, DirectoryImageStore(tmp_path))


def test_iso_filter_rules():
    rng = np.random.default_rng(1)
    gray = rng.integers(0, 256, (480, 640), dtype=np.uint8)
    rgb = rng.integers(0, 256, (480, 640, 3), dtype=np.uint8)
    small = rng.integers(0, 256, (240, 320), dtype=np.uint8)
    manifest, store = memory_corpus({"bona_fide": [gray, rgb, small]})
    out = filter_iso_compliant(manifest, store)
    assert out.ids == ["mem_bona_fide_000"]
    step = out.curation_log[-1]
    assert step.input_count - step.removed_count == step.output_count == 1


def test_toy_resolution_override_twenty_with_four_small():
    imgs = distinct_images(16, shape=(48, 64)) + distinct_images(4, seed=5, shape=(24, 32))
    manifest, store = memory_corpus({"synthetic": imgs})
    out = filter_iso_compliant(manifest, store, resolution=(64, 48))
    assert len(out) == 16


def test_toy_corpus_class_counts(toy_corpus):
    assert class_counts(toy_corpus) == {c: 12 for c in CLASS_LABELS}


planted = st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(copies=planted, n_unique=st.integers(0, 5))
def test_dedup_removes_exactly_extra_copies_and_is_idempotent(copies, n_unique):
    base = distinct_images(len(copies) + n_unique, seed=len(copies) * 7 + n_unique)
    imgs = []
    for img, k in zip(base, copies):
        imgs += [img.copy() for _ in range(k)]
    imgs += base[len(copies):]
    order = np.random.default_rng(len(imgs)).permutation(len(imgs))
    manifest, store = memory_corpus({"printout": [imgs[i] for i in order]})
    once, rep = deduplicate(manifest, store)
    assert rep.removed_count == sum(k - 1 for k in copies)
    assert rep.input_count == rep.removed_count + rep.kept_count
    assert len({r.pixel_hash for r in once.records}) == len(once)
    twice, rep2 = deduplicate(once, store)
    assert rep2.removed_count == 0
    assert twice.records == once.records
    for step in twice.curation_log:
        assert step.input_count - step.removed_count == step.output_count
    assert sum(class_counts(twice).values()) == len(twice)


@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_dedup_and_iso_filter_commute(data):
    n = data.draw(st.integers(2, 10))
    rng = np.random.default_rng(n)
    shapes = [(6, 8), (4, 8), (6, 8, 3)]
    pool = [rng.integers(0, 256, shapes[data.draw(st.integers(0, 2))], dtype=np.uint8) for _ in range(n)]
    picks = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=15))
    sources = data.draw(st.lists(st.sampled_from(["a", "b", "c"]), min_size=len(picks), max_size=len(picks)))
    recs, images = [], {}
    for i, (p, src) in enumerate(zip(picks, sources)):
        sid = f"s{i:02d}"
        recs.append(SampleRecord(sid, sid, "bona_fide", src))
        images[sid] = pool[p]
    m, store = Manifest(recs), MemoryImageStore(images)
    a = filter_iso_compliant(deduplicate(m, store)[0], store, (8, 6))
    b = deduplicate(filter_iso_compliant(m, store, (8, 6)), store)[0]
    assert a.ids == b.ids
