import json
import logging

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmnet.data import (DatasetSplit, ImageDecodeError, load_images, load_split, preprocess,
                        read_image, synthetic_images, to_model_range, to_uint8, write_png)


def make_dir(tmp_path, n=10, size=8):
    for i in range(n):
        write_png(tmp_path / f"img_{i:02d}.png", np.full((size, size, 3), i * 10, np.uint8))
    return tmp_path


def test_split_counts_and_determinism(tmp_path):
    root = make_dir(tmp_path)
    a = load_split(root, 0.8, seed=0)
    b = load_split(root, 0.8, seed=0)
    assert len(a.train) == 8 and len(a.test) == 2
    assert a == b
    assert not set(a.train) & set(a.test)
    assert list(a.train) == sorted(a.train)
    assert set(a.train) | set(a.test) == {f"img_{i:02d}.png" for i in range(10)}


def test_split_manifest_written_and_reused(tmp_path):
    root = make_dir(tmp_path / "imgs")
    split = load_split(root, 0.7, seed=3, write_manifest=tmp_path / "m.json")
    again = load_split(root, 0.7, seed=3, write_manifest=tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    explicit = {"train": ["img_09.png", "img_00.png"], "test": ["img_05.png"]}
    (tmp_path / "explicit.json").write_text(json.dumps(explicit))
    from_manifest = load_split(root, manifest=tmp_path / "explicit.json")
    assert list(from_manifest.train) == explicit["train"]
    assert list(from_manifest.test) == explicit["test"]
    assert split == again


def test_split_rejects_overlap_and_empty(tmp_path):
    with pytest.raises(ValueError):
        DatasetSplit("r", ("a.png",), ("a.png",))
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        load_split(tmp_path / "empty")
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "missing")


def test_unreadable_files_skipped_with_warning(tmp_path, caplog):
    root = make_dir(tmp_path, n=4)
    (root / "broken.png").write_bytes(b"garbage")
    with caplog.at_level(logging.WARNING):
        split = load_split(root, 0.5)
    assert "broken.png" not in split.train + split.test
    assert "skipped 1 unreadable" in caplog.text


def test_preprocess_constant_128(tmp_path):
    write_png(tmp_path / "c.png", np.full((512, 512, 3), 128, np.uint8))
    out = preprocess(tmp_path / "c.png", (256, 256))
    assert out.shape == (256, 256, 3)
    assert np.all(out == np.float32(128) / np.float32(127.5) - np.float32(1))
    assert out[0, 0, 0] == pytest.approx(128 / 127.5 - 1, abs=1e-7)


def test_range_endpoints():
    x = to_model_range(np.array([0, 255], np.uint8))
    assert x.tolist() == [-1.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
def test_uint8_round_trip_exact(values):
    v = np.array(values, np.uint8)
    assert np.array_equal(to_uint8(to_model_range(v)), v)


def test_preprocess_round_trip_through_area_resize(tmp_path, rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    write_png(tmp_path / "r.png", img)
    back = to_uint8(preprocess(tmp_path / "r.png", (32, 32)))
    assert np.array_equal(back, img)


def test_png_round_trip_preserves_rgb(tmp_path):
    img = np.zeros((4, 4, 3), np.uint8)
    img[..., 0] = 200
    write_png(tmp_path / "x.png", img)
    assert np.array_equal(read_image(tmp_path / "x.png"), img)
    assert cv2.imread(str(tmp_path / "x.png"))[0, 0, 2] == 200  # stored BGR on disk


def test_decode_failure(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"nope")
    with pytest.raises(ImageDecodeError):
        read_image(tmp_path / "bad.png")
    with pytest.raises(TypeError):
        write_png(tmp_path / "f.png", np.zeros((2, 2, 3), np.float32))


def test_load_images_layout(tmp_path):
    root = make_dir(tmp_path, n=3, size=16)
    arr = load_images(sorted(root.iterdir()), (8, 8))
    assert arr.shape == (3, 3, 8, 8) and arr.dtype == np.float32


def test_synthetic_images_deterministic():
    a = synthetic_images(4, (32, 48), seed=1)
    assert a.shape == (4, 32, 48, 3) and a.dtype == np.uint8
    assert np.array_equal(a, synthetic_images(4, (32, 48), seed=1))
    assert not np.array_equal(a, synthetic_images(4, (32, 48), seed=2))
