import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdfnet.data import (
    IGNORE, LabelError, ParseError, halving_subsets, load_sample, nearest_indices, normalize,
    parse_netpbm, read_manifest, read_pgm, read_ppm, resize_labels, seeded_split, synthetic_samples,
    write_manifest, write_pgm, write_ppm,
)
from pdfnet.tensor import ConfigurationError


def test_ppm_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    grey = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm(tmp_path / "a.pgm", grey)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm")[0], rgb)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm")[0], grey)


def test_header_comments_and_whitespace():
    blob = b"P5\n# made by hand\n3   2\n# depth\n255\n" + bytes(range(6))
    img, maxval = parse_netpbm(blob)
    assert maxval == 255
    np.testing.assert_array_equal(img, [[0, 1, 2], [3, 4, 5]])


@pytest.mark.parametrize("blob, where, msg", [
    (b"P3\n1 1\n255\n000", 0, "magic"),
    (b"P5\n2 x\n255\n", 5, "height"),
    (b"P5\n2 2\n65535\n", 7, "8-bit"),
    (b"P5\n2 2\n255\n\x00", 11, "truncated"),
    (b"P5\n2 2", 6, "end of header"),
])
def test_parse_errors_report_offsets(blob, where, msg):
    with pytest.raises(ParseError, match=msg) as info:
        parse_netpbm(blob)
    assert info.value.offset == where


def test_wrong_kind_rejected(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ParseError, match="expected P6"):
        read_ppm(tmp_path / "g.pgm")


def test_load_sample_resizes_and_validates(tmp_path):
    rgb = np.full((8, 12, 3), 255, dtype=np.uint8)
    lab = np.zeros((8, 12), dtype=np.uint8)
    lab[:, 6:] = 3
    lab[0, 0] = IGNORE
    write_ppm(tmp_path / "i.ppm", rgb)
    write_pgm(tmp_path / "l.pgm", lab)
    s = load_sample(tmp_path / "i.ppm", tmp_path / "l.pgm", target=(4, 6), num_classes=4)
    assert s.image.shape == (1, 3, 4, 6) and s.image.dtype == np.float32
    np.testing.assert_allclose(s.image, 1.0)
    assert set(np.unique(s.label)) <= {0, 3, IGNORE}
    with pytest.raises(LabelError, match=r"\[3\]"):
        load_sample(tmp_path / "i.ppm", tmp_path / "l.pgm", num_classes=3)


def test_misaligned_pair(tmp_path):
    write_ppm(tmp_path / "i.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    write_pgm(tmp_path / "l.pgm", np.zeros((4, 5), dtype=np.uint8))
    with pytest.raises(ConfigurationError, match="not aligned"):
        load_sample(tmp_path / "i.ppm", tmp_path / "l.pgm")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.integers(1, 20))
def test_label_resize_never_invents_values(h, w, oh, ow):
    lab = np.random.default_rng(h * 100 + w).choice([0, 5, 7, IGNORE], size=(h, w))
    out = resize_labels(lab, oh, ow)
    assert out.shape == (oh, ow)
    assert set(np.unique(out)) <= set(np.unique(lab))


def test_nearest_indices_identity_and_halving():
    np.testing.assert_array_equal(nearest_indices(5, 5), np.arange(5))
    np.testing.assert_array_equal(nearest_indices(8, 4), [1, 3, 5, 7])


def test_normalize_per_channel():
    img = np.ones((1, 3, 2, 2), dtype=np.float32)
    out = normalize(img)
    np.testing.assert_allclose(out[0, :, 0, 0], [(1 - 0.485) / 0.229, (1 - 0.456) / 0.224, (1 - 0.406) / 0.225],
                               rtol=1e-6)


def test_manifest_round_trip(tmp_path):
    (tmp_path / "d").mkdir()
    for k in range(2):
        write_ppm(tmp_path / "d" / f"{k}.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
        write_pgm(tmp_path / "d" / f"{k}.pgm", np.zeros((4, 4), dtype=np.uint8))
    entries = [(str(tmp_path / "d" / f"{k}.ppm"), str(tmp_path / "d" / f"{k}.pgm")) for k in range(2)]
    write_manifest(tmp_path / "m.tsv", entries)
    text = (tmp_path / "m.tsv").read_text()
    (tmp_path / "m.tsv").write_text("# comment\n\n" + text)
    m = read_manifest(tmp_path / "m.tsv")
    assert [tuple(map(str, e)) for e in m.entries] == entries
    assert m.load(1).label.shape == (4, 4)
    (tmp_path / "bad.tsv").write_text("missing.ppm\tmissing.pgm\n")
    with pytest.raises(ConfigurationError, match="missing file"):
        read_manifest(tmp_path / "bad.tsv")


def test_seeded_split_is_disjoint_exhaustive_and_stable():
    plan = seeded_split(100, [60, 20, None], seed=42)
    parts = [set(p) for p in plan.parts]
    assert [len(p) for p in parts] == [60, 20, 20]
    assert set().union(*parts) == set(range(100))
    assert sum(len(p) for p in parts) == 100
    assert seeded_split(100, [60, 20, None], seed=42).order == plan.order
    assert seeded_split(100, [60, 20, None], seed=7).order != plan.order
    with pytest.raises(ConfigurationError):
        seeded_split(10, [8, 5])


def test_halving_subsets_published_sizes():
    train = seeded_split(2975, [None]).parts[0]
    subsets = halving_subsets(train, 5)
    assert [len(s) for s in subsets] == [1487, 743, 371, 185, 92]
    for big, small in zip(subsets, subsets[1:]):
        assert big[: len(small)] == small
    assert [len(s) for s in halving_subsets(list(range(367)), 3, first=0)] == [367, 183, 91]


def test_synthetic_samples_are_seeded():
    a = synthetic_samples(2, 16, 32, seed=3)
    b = synthetic_samples(2, 16, 32, seed=3)
    np.testing.assert_array_equal(a[1].image, b[1].image)
    assert a[0].image.shape == (1, 3, 16, 32)
    assert a[0].label.max() < 4
