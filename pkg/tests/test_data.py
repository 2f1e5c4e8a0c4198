import numpy as np
import pytest

from selftransfer import data as D
from selftransfer.errors import ConfigError, LoadError
from selftransfer.pgm import decode_pgm, encode_pgm, read_pgm, to_unit, write_pgm


def small_spec(**kw):
    args = dict(canvas=(32, 32), n_samples=20, target_size=(7, 11), distractor_size=(3, 6), seed=3)
    args.update(kw)
    return D.GenSpec(**args)


# -- pgm ------------------------------------------------------------------

def test_pgm_8bit_normalization(tmp_path):
    img = np.array([[128, 0], [255, 7]], dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    raw, maxval = read_pgm(tmp_path / "a.pgm")
    np.testing.assert_array_equal(raw, img)
    assert to_unit(raw, maxval)[0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_pgm_16bit_big_endian_fixture():
    # 2x2 raster written by hand: 0x0102, 0xFFFF, 0x0000, 0x8000
    blob = b"P5\n2 2\n65535\n" + bytes([1, 2, 255, 255, 0, 0, 128, 0])
    img, maxval = decode_pgm(blob)
    assert maxval == 65535
    assert img.tolist() == [[258, 65535], [0, 32768]]
    assert encode_pgm(img, 65535) == blob


def test_pgm_header_comments_and_errors():
    img, _ = decode_pgm(b"P5 # comment\n1 1\n255\n\x09")
    assert img[0, 0] == 9
    with pytest.raises(LoadError):
        decode_pgm(b"P2\n1 1\n255\n1")
    with pytest.raises(LoadError):
        decode_pgm(b"P5\n2 2\n255\n\x00")


# -- generation -----------------------------------------------------------

def test_exact_positive_count():
    spec = D.GenSpec(n_samples=1000, positive_fraction=0.4)
    assert D.assign_labels(spec).sum() == 400


def test_generate_and_load_round_trip(tmp_path):
    spec = small_spec()
    manifest = D.generate(spec, tmp_path / "a")
    assert len(manifest) == 20 and manifest.labels.sum() == 10
    for rec in manifest.records:
        if rec.label == 0:
            assert rec.boxes == []
        else:
            (x0, y0, x1, y1), = rec.boxes
            assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
    ds = D.load(tmp_path / "a" / "manifest.tsv")
    assert ds.images.shape == (20, 1, 32, 32) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, manifest.labels)
    assert ds.boxes is None
    assert all(s.boxes is None for s in D.iter_samples(tmp_path / "a" / "manifest.tsv"))
    ev = D.load(tmp_path / "a" / "manifest.tsv", "eval")
    assert [b for b in ev.boxes] == [r.boxes for r in manifest.records]


def test_box_tightly_bounds_target():
    spec = small_spec()
    for i in range(10):
        img, boxes, mask, _ = D.render_sample(spec, i, 1)
        x0, y0, x1, y1 = boxes[0]
        ys, xs = np.nonzero(mask)
        assert (x0, y0, x1, y1) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        assert 0.0 <= img.min() and img.max() <= 1.0


def test_target_area_fraction_on_default_canvas():
    spec = D.GenSpec()
    for i in range(50):
        _, boxes, _, _ = D.render_sample(spec, i, 1)
        x0, y0, x1, y1 = boxes[0]
        assert 0.02 <= (x1 - x0) * (y1 - y0) / (64 * 64) <= 0.06


def test_generate_is_deterministic(tmp_path):
    D.generate(small_spec(), tmp_path / "a")
    D.generate(small_spec(), tmp_path / "b")
    D.generate(small_spec(seed=4), tmp_path / "c")
    for name in ("manifest.tsv", "images/s00.pgm", "images/s13.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "images/s00.pgm").read_bytes() != \
        (tmp_path / "c" / "images/s00.pgm").read_bytes()


def test_distractor_statistics_match_across_classes():
    spec = D.GenSpec(canvas=(24, 24), target_size=(5, 8), distractor_size=(3, 6))
    counts = {0: [], 1: []}
    values = {0: [], 1: []}
    for i in range(10_000):
        label = i % 2
        rng = D.Rng(spec.seed).spawn("data").spawn(f"sample-{i}")
        # replay only the distractor draws to keep the test fast
        rng.uniform(1)
        n = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1, 1)[0])
        counts[label].append(n)
        for _ in range(n):
            rng.integers(spec.distractor_size[0], spec.distractor_size[1] + 1, 1)
            values[label].append(rng.uniform_range(*spec.distractor_intensity, 1)[0])
            rng.uniform(2)
    for stat in (counts, values):
        a, b = np.array(stat[0]), np.array(stat[1])
        se = np.sqrt(a.var() / a.size + b.var() / b.size)
        assert abs(a.mean() - b.mean()) < 2 * se


def test_replayed_distractor_draws_match_renderer():
    spec = small_spec()
    _, _, _, (n, intensities) = D.render_sample(spec, 5, 0)
    rng = D.Rng(spec.seed).spawn("data").spawn("sample-5")
    rng.uniform(1)
    assert int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1, 1)[0]) == n
    _, _, _, (n1, intensities1) = D.render_sample(spec, 5, 1)
    assert (n1, intensities1) == (n, intensities)


def test_spec_validation():
    with pytest.raises(ConfigError):
        D.GenSpec(canvas=(16, 16), target_size=(9, 20)).validate()
    with pytest.raises(ConfigError):
        D.GenSpec(positive_fraction=1.0).validate()


# -- manifest errors ------------------------------------------------------

def write_lines(tmp_path, lines):
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_degenerate_box_rejected_with_line(tmp_path):
    path = write_lines(tmp_path, ["#stl-manifest v1 canvas=8x8 classes=2 seed=0",
                                  "a\timages/a.pgm\t0\t-",
                                  "b\timages/b.pgm\t1\t5,1,5,3"])
    with pytest.raises(LoadError) as info:
        D.read_manifest(path)
    assert info.value.line == 3 and "x0<x1" in str(info.value)


def test_missing_image_and_size_mismatch(tmp_path):
    (tmp_path / "images").mkdir()
    write_pgm(tmp_path / "images" / "a.pgm", np.zeros((4, 4), np.uint8))
    path = write_lines(tmp_path, ["#stl-manifest v1 canvas=8x8 classes=2 seed=0",
                                  "a\timages/a.pgm\t0\t-"])
    with pytest.raises(LoadError, match=r"manifest.tsv:2.*4x4"):
        D.load(path)
    path = write_lines(tmp_path, ["#stl-manifest v1 canvas=4x4 classes=2 seed=0",
                                  "a\timages/zz.pgm\t0\t-"])
    with pytest.raises(LoadError, match="not found"):
        D.load(path)


def test_malformed_records(tmp_path):
    header = "#stl-manifest v1 canvas=8x8 classes=2 seed=0"
    for bad in ("a\timages/a.pgm\t0", "a\timages/a.pgm\tx\t-", "a\timages/a.pgm\t2\t-"):
        with pytest.raises(LoadError) as info:
            D.read_manifest(write_lines(tmp_path, [header, bad]))
        assert info.value.line == 2
    with pytest.raises(LoadError):
        D.read_manifest(write_lines(tmp_path, ["id\tpath\tlabel\tboxes"]))


# -- import ---------------------------------------------------------------

def test_import_directory(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    big = np.zeros((1000, 1000), np.uint8)
    big[100:200, 100:200] = 200
    write_pgm(src / "p.pgm", big)
    write_pgm(src / "deep.pgm", np.full((10, 20), 40000, np.uint16), 65535)
    (src / "bad.pgm").write_bytes(b"not an image")
    (tmp_path / "labels.csv").write_text("filename,label\np.pgm,1\ndeep.pgm,0\nbad.pgm,0\n")
    (tmp_path / "boxes.csv").write_text("filename,x0,y0,x1,y1\np.pgm,100,100,200,200\n")
    manifest, report = D.import_directory(src, tmp_path / "labels.csv", tmp_path / "out",
                                          canvas=(500, 500), boxes_csv=tmp_path / "boxes.csv")
    assert report.skipped[0][0] == "bad.pgm"
    recs = {r.id: r for r in manifest.records}
    assert recs["p"].boxes == [(50, 50, 100, 100)]
    _, maxval = read_pgm(tmp_path / "out" / "images" / "deep.pgm")
    assert maxval == 65535
    ds = D.load(tmp_path / "out" / "manifest.tsv", "eval")
    assert ds.images.shape == (2, 1, 500, 500)
    assert "bad.pgm,skipped" in (tmp_path / "out" / "import_report.csv").read_text()
