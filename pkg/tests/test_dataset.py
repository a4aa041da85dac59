from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlvision.dataset import (
    MANIFEST_HEADER,
    ManifestRecord,
    Preprocessor,
    SyntheticSpec,
    blob_mask,
    class_texture,
    generate_synthetic,
    load_blobs,
    load_manifest,
    make_batches,
    num_classes,
    select_split,
    split_by_specimen,
)
from kdlvision.errors import (
    ImageLoadError,
    NonContiguousClasses,
    ParseError,
    SpecimenSplitLeak,
    TooFewSpecimens,
)
from kdlvision.imageproc import read_netpbm, write_olt


def write_rows(path, rows, header=",".join(MANIFEST_HEADER)):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def records(n_classes, n_specimens):
    return [
        ManifestRecord(f"c{c}s{s}v{v}.pgm", c, f"class{c}", f"c{c}s{s}", v)
        for c in range(n_classes)
        for s in range(n_specimens)
        for v in (0, 1)
    ]


# ------------------------------------------------------------------ manifests

def test_load_manifest_happy_path(tmp_path):
    path = write_rows(tmp_path / "m.csv", [
        "a0.pgm,0,alpha,s1,0,train",
        "a1.pgm,0,alpha,s1,1,train",
        "b0.pgm,1,beta,s2,0,test",
        "b1.pgm,1,beta,s2,1,test",
    ])
    recs = load_manifest(path)
    assert len(recs) == 4 and num_classes(recs) == 2
    assert recs[2] == ManifestRecord("b0.pgm", 1, "beta", "s2", 0, "test")


def test_specimen_split_leak(tmp_path):
    path = write_rows(tmp_path / "m.csv", ["a0.pgm,0,a,s1,0,train", "a1.pgm,0,a,s1,1,test"])
    with pytest.raises(SpecimenSplitLeak):
        load_manifest(path)


def test_non_contiguous_classes(tmp_path):
    path = write_rows(tmp_path / "m.csv", ["a.pgm,0,a,s1,0,train", "b.pgm,2,b,s2,0,train"])
    with pytest.raises(NonContiguousClasses):
        load_manifest(path)


@pytest.mark.parametrize(
    "rows, line",
    [
        (["a.pgm,0,a,s1,0,train", "b.pgm,x,b,s2,0,train"], 3),
        (["a.pgm,0,a,s1,0"], 2),
        (["a.pgm,0,a,s1,2,train"], 2),
        (["a.pgm,0,a,s1,0,holdout"], 2),
        (["a.pgm,-1,a,s1,0,train"], 2),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path, rows, line):
    with pytest.raises(ParseError) as info:
        load_manifest(write_rows(tmp_path / "m.csv", rows))
    assert info.value.line == line


def test_duplicate_paths_and_class_conflicts(tmp_path):
    with pytest.raises(ParseError, match="duplicate"):
        load_manifest(write_rows(tmp_path / "m.csv", ["a.pgm,0,a,s1,0,train", "a.pgm,0,a,s1,1,train"]))
    with pytest.raises(ParseError, match="two class"):
        load_manifest(write_rows(tmp_path / "m.csv", ["a.pgm,0,a,s1,0,train", "b.pgm,1,b,s1,1,train"]))
    with pytest.raises(ParseError):
        load_manifest(write_rows(tmp_path / "m.csv", [], header="file,label"))


# ------------------------------------------------------------------ splitting

def test_split_exact_fractions():
    out = split_by_specimen(records(3, 10), (0.8, 0.1, 0.1), seed=0)
    for c in range(3):
        per_split = Counter(r.split for r in out if r.class_id == c and r.view == 0)
        assert per_split == {"train": 8, "val": 1, "test": 1}


def test_split_determinism_and_seed_sensitivity():
    recs = records(1, 100)
    a = split_by_specimen(recs, seed=5)
    assert a == split_by_specimen(recs, seed=5)
    b = split_by_specimen(recs, seed=6)
    assert any(x.split != y.split for x, y in zip(a, b))


def test_split_errors():
    with pytest.raises(TooFewSpecimens):
        split_by_specimen(records(2, 2))
    with pytest.raises(ValueError):
        split_by_specimen(records(2, 5), (0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        split_by_specimen(records(2, 5), (1.0, 0.0, 0.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(3, 30), st.integers(0, 1000),
       st.sampled_from([(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (1 / 3, 1 / 3, 1 / 3)]))
def test_split_never_leaks_and_covers_all_splits(n_classes, n_specimens, seed, fractions):
    out = split_by_specimen(records(n_classes, n_specimens), fractions, seed)
    by_specimen = {}
    for r in out:
        assert by_specimen.setdefault(r.specimen_id, r.split) == r.split
    for c in range(n_classes):
        assert {r.split for r in out if r.class_id == c} == {"train", "val", "test"}


# ------------------------------------------------------------------ batching

def _fake_preprocess(record):
    return np.full((3, 2, 2), record.class_id, dtype=np.float32)


def test_batch_sizes_ceiling():
    recs = records(5, 1)
    sizes = [len(b.labels) for b in make_batches(recs, 3, None, 0, _fake_preprocess)]
    assert sizes == [3, 3, 3, 1]


def test_unshuffled_order_is_manifest_order():
    recs = records(3, 2)
    paths = [p for b in make_batches(recs, 4, None, 0, _fake_preprocess) for p in b.paths]
    assert paths == [r.relative_path for r in recs]


def test_shuffle_coverage_and_determinism():
    recs = records(4, 5)
    def epoch(seed, e):
        return [p for b in make_batches(recs, 3, seed, e, _fake_preprocess) for p in b.paths]

    assert sorted(epoch(1, 1)) == sorted(r.relative_path for r in recs)
    assert epoch(1, 1) == epoch(1, 1)
    assert epoch(1, 1) != epoch(1, 2)
    labels = Counter(int(l) for b in make_batches(recs, 3, 1, 3, _fake_preprocess) for l in b.labels)
    assert labels == Counter(r.class_id for r in recs)


def test_batch_inputs_shape():
    batch = next(make_batches(records(2, 2), 3, None, 0, _fake_preprocess))
    assert batch.inputs.shape == (3, 3, 2, 2) and batch.labels.dtype == np.int64


def test_image_load_error(tmp_path):
    pp = Preprocessor(tmp_path)
    with pytest.raises(ImageLoadError) as info:
        list(make_batches(records(1, 1), 1, None, 0, pp))
    assert "c0s0v0.pgm" in str(info.value)


# ------------------------------------------------------------------ synthetic generator

SMALL = SyntheticSpec(num_classes=3, images_per_class=6, image_size=24, seed=3)


def test_generate_counts_and_manifest(tmp_path):
    spec = SyntheticSpec(num_classes=10, images_per_class=200, image_size=16, seed=1)
    recs = load_manifest(generate_synthetic(spec, tmp_path))
    assert len(recs) == 4000
    assert len({r.specimen_id for r in recs}) == 2000
    assert num_classes(recs) == 10


def test_generate_is_deterministic(tmp_path):
    a = generate_synthetic(SMALL, tmp_path / "a").parent
    b = generate_synthetic(SMALL, tmp_path / "b").parent
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    c = generate_synthetic(SyntheticSpec(3, 6, 24, seed=4), tmp_path / "c").parent
    assert (a / "images/c000s00000_v0.pgm").read_bytes() != (c / "images/c000s00000_v0.pgm").read_bytes()


def test_second_view_is_180_rotation_and_blobs_follow(tmp_path):
    root = generate_synthetic(SMALL, tmp_path).parent
    blobs = load_blobs(root / "blobs.csv")
    v0 = read_netpbm(root / "images/c001s00002_v0.pgm").pixels
    v1 = read_netpbm(root / "images/c001s00002_v1.pgm").pixels
    assert np.array_equal(v1, np.rot90(v0, 2))
    (x0, y0, r0), (x1, y1, r1) = blobs["images/c001s00002_v0.pgm"], blobs["images/c001s00002_v1.pgm"]
    assert r0 == r1
    assert (x0 + x1, y0 + y1) == pytest.approx((23, 23))
    m0, m1 = blob_mask((x0, y0), r0, 24), blob_mask((x1, y1), r1, 24)
    assert np.array_equal(m1, np.rot90(m0, 2))
    assert m0.mean() == pytest.approx(0.25, abs=0.03)


def test_pretext_orientations_avoid_benchmark_classes():
    from kdlvision.cli import PRETEXT_ORIENTATION_OFFSET

    bench = [class_texture(k, 10)[0] for k in range(10)]
    pretext = [class_texture(k, 10, PRETEXT_ORIENTATION_OFFSET)[0] for k in range(10)]
    gaps = [min(abs(a - b) for b in bench) for a in pretext]
    # every pretext class sits half a class step (9 degrees) from its nearest benchmark class
    assert min(gaps) == pytest.approx(np.pi / 20)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticSpec(images_per_class=1)


def test_preprocessor_prefers_olt_cache(tmp_path):
    root = generate_synthetic(SMALL, tmp_path / "data").parent
    rec = load_manifest(root / "manifest.csv")[0]
    marker = np.full((3, 24, 24), 0.5, dtype=np.float32)
    cache = tmp_path / "cache"
    (cache / "images").mkdir(parents=True)
    write_olt(cache / "images" / (rec.relative_path.split("/")[1][:-4] + ".olt"), marker)
    assert np.array_equal(Preprocessor(root, 24, cache)(rec), marker)
    assert not np.array_equal(Preprocessor(root, 24)(rec), marker)


def test_preprocessor_threads_match_serial(tmp_path):
    root = generate_synthetic(SMALL, tmp_path).parent
    recs = load_manifest(root / "manifest.csv")
    serial = Preprocessor(root, 24, threads=1).load_many(recs)
    threaded = Preprocessor(root, 24, threads=4).load_many(recs)
    assert serial.tobytes() == threaded.tobytes()


def test_linear_pixel_classifier_is_weak(benchmark_data):
    """A ridge classifier on raw pixels stays below 60% validation accuracy."""
    recs = load_manifest(benchmark_data)
    root = benchmark_data.parent

    def design(split):
        rows = select_split(recs, split)
        x = np.stack([read_netpbm(root / r.relative_path).pixels.ravel() / 255.0 for r in rows])
        return np.hstack([x, np.ones((len(x), 1))]), np.array([r.class_id for r in rows])

    x_tr, y_tr = design("train")
    x_va, y_va = design("val")
    targets = np.eye(num_classes(recs))[y_tr]
    w = np.linalg.solve(x_tr.T @ x_tr + 1.0 * np.eye(x_tr.shape[1]), x_tr.T @ targets)
    acc = np.mean(np.argmax(x_va @ w, axis=1) == y_va)
    assert acc < 0.60
