import struct

import numpy as np
import pytest

from snnrobust.data import (
    Dataset,
    IdxFormatError,
    load_csv,
    load_idx,
    read_idx,
    synth_blobs,
    synth_frames,
    write_csv,
    write_idx,
)


@pytest.fixture
def idx_fixture(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 5, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 2, 1, 2], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lbl.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lbl.idx", images, labels


def test_idx_round_trip(idx_fixture):
    img, lbl, images, labels = idx_fixture
    np.testing.assert_array_equal(read_idx(img), images)
    np.testing.assert_array_equal(read_idx(lbl), labels)
    ds = load_idx(img, lbl)
    assert len(ds) == 4 and ds.x.shape == (4, 1, 5, 3) and ds.num_classes == 3
    assert ds.x[0, 0, 0, 0] == 1.0
    np.testing.assert_allclose(ds.x[:, 0], images / 255.0, rtol=1e-6)


def test_idx_header_bytes(idx_fixture):
    img, lbl, _, _ = idx_fixture
    assert img.read_bytes()[:16] == struct.pack(">IIII", 0x00000803, 4, 5, 3)
    assert lbl.read_bytes()[:8] == struct.pack(">II", 0x00000801, 4)


def test_idx_gzip(tmp_path):
    write_idx(tmp_path / "l.idx.gz", np.arange(5, dtype=np.uint8))
    np.testing.assert_array_equal(read_idx(tmp_path / "l.idx.gz"), np.arange(5))


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">II", 9999, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(p)


def test_idx_truncated(idx_fixture, tmp_path):
    img, _, _, _ = idx_fixture
    p = tmp_path / "short.idx"
    p.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(IdxFormatError):
        read_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError):
        read_idx(p)


def test_idx_count_mismatch(idx_fixture, tmp_path):
    img, _, _, _ = idx_fixture
    write_idx(tmp_path / "l3.idx", np.array([0, 1, 2], dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx(img, tmp_path / "l3.idx")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 3), 1.5), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0], 2)


def test_blobs_examples():
    a = synth_blobs(100, 8, 2, 0.1, 7)
    b = synth_blobs(100, 8, 2, 0.1, 7)
    assert len(a) == 100 and a.num_classes == 2 and set(a.y) == {0, 1}
    np.testing.assert_array_equal(a.x, b.x)
    z = synth_blobs(50, 4, 3, 0.0, 1)
    for c in range(3):
        rows = z.x[z.y == c]
        np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))
    with pytest.raises(ValueError):
        synth_blobs(10, 2, 1, 0.1)


def test_blobs_linearly_separable():
    ds = synth_blobs(400, 10, 2, 0.05, seed=4)
    c0, c1 = ds.x[ds.y == 0].mean(0), ds.x[ds.y == 1].mean(0)
    # nearest-centre rule is the bisecting hyperplane
    w, b = c1 - c0, (c0 @ c0 - c1 @ c1) / 2
    pred = (ds.x @ w + b > 0).astype(int)
    assert (pred == ds.y).mean() >= 0.95


def test_frames_shape_and_degenerate_case():
    ds = synth_frames(20, 10, 6, 3, seed=0)
    assert ds.frames and ds.x.shape == (20, 10, 6) and ds.timesteps == 10 and ds.sample_shape == (6,)
    one = synth_frames(5, 1, 6, 2, seed=0)
    assert one.timesteps == 1
    with pytest.raises(ValueError):
        synth_frames(5, 0, 6, 2)


def test_split_and_batches():
    ds = synth_blobs(30, 3, 2, 0.1, seed=0)
    tr, te = ds.split(0.2, seed=1)
    assert len(tr) + len(te) == 30 and len(te) == 6
    sizes = [len(y) for _, y in tr.batches(7, np.random.default_rng(0))]
    assert sizes == [7, 7, 7, 3]


def test_csv_round_trip(tmp_path):
    ds = synth_blobs(12, 5, 3, 0.1, seed=0)
    write_csv(tmp_path / "d.csv", ds)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "label,f0,f1,f2,f3,f4"
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_allclose(back.x, ds.x, rtol=1e-6)
