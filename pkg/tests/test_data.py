import gzip
import struct

import numpy as np
import pytest

from sdlss.checkpoint import load_checkpoint, save_checkpoint
from sdlss.data import (IDX_IMAGES, IDX_LABELS, ImageDataset, batches, find_fashion_mnist,
                        load_fashion_mnist, load_idx, load_raw_images, make_planted, read_idx,
                        read_pnm, support_collision_bound, synthetic_images, write_idx,
                        write_image_grid)
from sdlss.errors import FormatError
from sdlss.models import gen_forward


def fixture_bytes():
    pixels = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 254]]], dtype=np.uint8)
    blob = struct.pack(">IIII", IDX_IMAGES, 2, 2, 2) + pixels.tobytes()
    return blob, pixels


@pytest.mark.parametrize("compressed", [False, True])
def test_idx_fixture_round_trip(tmp_path, compressed):
    blob, pixels = fixture_bytes()
    path = tmp_path / ("f.idx.gz" if compressed else "f.idx")
    path.write_bytes(gzip.compress(blob) if compressed else blob)
    ds = load_idx(path)
    assert ds.images.shape == (2, 4) and ds.shape == (2, 2)
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), pixels.reshape(2, 4))
    out = tmp_path / "again.idx"
    write_idx(out, pixels)
    assert out.read_bytes() == blob


def test_idx_errors(tmp_path):
    blob, _ = fixture_bytes()
    path = tmp_path / "f.idx"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match=r"expected 0x00000801, found 0x00000803"):
        read_idx(path, IDX_LABELS)
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="byte offset 21"):
        read_idx(path)
    path.write_bytes(blob[:10])
    with pytest.raises(FormatError, match="offset"):
        read_idx(path)


def test_fashion_mnist_lookup(tmp_path, monkeypatch):
    monkeypatch.delenv("SDLSS_DATA_DIR", raising=False)
    assert find_fashion_mnist(tmp_path) is None
    with pytest.raises(FileNotFoundError):
        load_fashion_mnist(tmp_path)
    sub = tmp_path / "fashion-mnist"
    sub.mkdir()
    write_idx(sub / "train-images-idx3-ubyte.gz", np.zeros((3, 28, 28), np.uint8))
    monkeypatch.setenv("SDLSS_DATA_DIR", str(tmp_path))
    ds = load_fashion_mnist(limit=2)
    assert len(ds) == 2 and ds.n == 784


def test_dataset_invariants():
    with pytest.raises(FormatError):
        ImageDataset(np.full((1, 4), 1.5), 2, 2)
    with pytest.raises(FormatError):
        ImageDataset(np.zeros((1, 5)), 2, 2)
    ds = synthetic_images(10, seed=0)
    assert ds.images.min() >= 0 and ds.images.max() <= 1 and ds.n == 784
    assert np.array_equal(ds.images, synthetic_images(10, seed=0).images)


def test_raw_tensor_stub(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (3, 4, 5, 3), dtype=np.uint8)
    np.save(tmp_path / "c.npy", arr)
    ds = load_raw_images(tmp_path / "c.npy")
    assert (ds.rows, ds.cols, ds.channels, ds.n) == (4, 5, 3, 60)
    assert np.allclose(ds.images.reshape(arr.shape) * 255, arr)
    np.save(tmp_path / "bad.npy", np.zeros((2, 3)))
    with pytest.raises(FormatError):
        load_raw_images(tmp_path / "bad.npy")


def test_batches_shuffle_is_reproducible():
    a = [b.tolist() for b in batches(10, 3, seed=4)]
    b = [b.tolist() for b in batches(10, 3, seed=4)]
    assert a == b and sorted(sum(a, [])) == list(range(10))
    assert [len(x) for x in a] == [3, 3, 3, 1]


def test_planted_instances(tmp_path):
    p = make_planted(20, 3, 100, 100, seed=0)
    assert all(len(s) == 3 for s in p.supports())
    assert np.array_equal(gen_forward(p.generator, p.latents).value, p.signals)
    # C(20,3) = 1140 supports: the union bound C(100,2)/1140 exceeds 1 and clamps
    assert support_collision_bound(20, 3, 100) == 1.0
    assert support_collision_bound(20, 3, 10) == pytest.approx(45 / 1140)
    dense = make_planted(6, 6, 10, 5, seed=1)
    assert np.all(dense.latents != 0)
    save_checkpoint(tmp_path / "p.sdls", p.generator, latents=p.latents)
    ck = load_checkpoint(tmp_path / "p.sdls")
    assert np.array_equal(gen_forward(ck.generator, ck.latents).value, p.signals)


def test_distinct_supports_when_space_is_large():
    p = make_planted(40, 5, 10, 100, seed=3, hidden=(8,))
    assert support_collision_bound(40, 5, 100) < 0.01
    assert len(set(p.supports())) == 100


def test_image_grid(tmp_path):
    path = tmp_path / "black.pgm"
    write_image_grid(np.zeros((1, 784)), path)
    assert not any(path.read_bytes()[len(b"P5\n28 28\n255\n"):])
    imgs = np.random.default_rng(0).uniform(size=(64, 784))
    dims = write_image_grid(imgs, tmp_path / "g.pgm")
    assert dims == (8 * 28 + 14, 8 * 28 + 14) == (238, 238)
    back = read_pnm(tmp_path / "g.pgm")
    assert back.shape == (238, 238)
    assert np.abs(back[:28, :28] - imgs[0].reshape(28, 28)).max() <= 0.5 / 255 + 1e-12
    assert np.abs(back[30:58, 30:58] - imgs[9].reshape(28, 28)).max() <= 0.5 / 255 + 1e-12
    assert not back[28:30].any()
    col = np.random.default_rng(1).uniform(size=(4, 2 * 3 * 3))
    write_image_grid(col, tmp_path / "c.ppm", 2, 3, channels=3)
    assert read_pnm(tmp_path / "c.ppm").shape == (6, 8, 3)


def test_load_write_load_is_lossless_to_quantization(tmp_path):
    ds = synthetic_images(4, seed=2)
    write_image_grid(ds.images, tmp_path / "s.pgm", grid_cols=4, sep=0)
    back = read_pnm(tmp_path / "s.pgm")
    tiles = np.stack([back[:, 28 * i:28 * (i + 1)].ravel() for i in range(4)])
    assert np.abs(tiles - ds.images).max() <= 1 / 255
