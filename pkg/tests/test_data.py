import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainbench import data as D


def test_png_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((3, 9, 13), dtype=np.float32)
    D.save_image(img, tmp_path / "x.png")
    back = D.load_image(tmp_path / "x.png")
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.abs(back - img).max() <= 1 / 255


def test_pure_red_pixel(tmp_path):
    from PIL import Image
    Image.fromarray(np.array([[[255, 0, 0]]], np.uint8)).save(tmp_path / "r.png")
    assert np.array_equal(D.load_image(tmp_path / "r.png")[:, 0, 0], [1.0, 0.0, 0.0])


def test_non_image_file_rejected(tmp_path):
    bad = tmp_path / "notes.png"
    bad.write_text("not an image")
    with pytest.raises(D.ImageFormatError, match="notes.png"):
        D.load_image(bad)


def test_jpeg_rejected(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "x.jpg", format="JPEG")
    with pytest.raises(D.ImageFormatError, match="PNG"):
        D.load_image(tmp_path / "x.jpg")


def test_pad_to_multiple():
    img = np.arange(3 * 5 * 6, dtype=float).reshape(3, 5, 6)
    padded, hw = D.pad_to_multiple(img, 4)
    assert padded.shape == (3, 8, 8) and hw == (5, 6)
    assert np.array_equal(padded[:, :5, :6], img)


# --- tiling ---------------------------------------------------------------------


def test_four_tiles_for_512():
    tiles, grid = D.tile_image(np.zeros((3, 512, 512)), 256, 0)
    assert tiles.shape == (4, 3, 256, 256)
    assert grid.origins == [(0, 0), (0, 256), (256, 0), (256, 256)]


def test_large_slide_partition():
    img = np.zeros((3, 3120, 3168), np.uint8)
    tiles, grid = D.tile_image(img, 512, 0)
    assert len(tiles) == 7 * 7
    assert grid.row_origins[-1] == 3120 - 512 and grid.col_origins[-1] == 3168 - 512


def test_tile_errors():
    with pytest.raises(ValueError):
        D.tile_image(np.zeros((3, 10, 10)), 16, 0)
    with pytest.raises(ValueError):
        D.tile_image(np.zeros((3, 10, 10)), 4, 4)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(8, 70), w=st.integers(8, 70), t=st.integers(2, 8), data=st.data())
def test_tile_stitch_round_trip(h, w, t, data):
    o = data.draw(st.integers(0, t - 1))
    img = np.random.default_rng(h * 100 + w).random((3, h, w))
    tiles, grid = D.tile_image(img, t, o)
    assert grid.origins == sorted(grid.origins)
    assert np.array_equal(D.stitch(tiles, grid, "center-crop"), img)
    # up to t*t overlapping copies are summed then divided: a few ulps of rounding
    np.testing.assert_allclose(D.stitch(tiles, grid, "average"), img, rtol=0, atol=1e-13)


def test_zero_overlap_is_pure_placement():
    grid = D.TileGrid.build(4, 4, 2, 0)
    tiles = np.arange(4, dtype=float)[:, None, None, None] * np.ones((4, 1, 2, 2))
    out = D.stitch(tiles, grid)
    assert np.array_equal(out[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


@pytest.mark.parametrize("blend", ["center-crop", "average"])
def test_uniform_tiles_give_uniform_output(blend):
    grid = D.TileGrid.build(20, 20, 8, 3)
    out = D.stitch(np.full((len(grid.origins), 3, 8, 8), 0.3), grid, blend)
    assert np.all(out == 0.3)


def test_average_blend_of_two_constants():
    grid = D.TileGrid.build(4, 6, 4, 2)  # origins (0,0), (0,2): overlap cols 2..3
    tiles = np.stack([np.full((1, 4, 4), 0.2), np.full((1, 4, 4), 0.6)])
    out = D.stitch(tiles, grid, "average")
    np.testing.assert_allclose(out[0, :, 2:4], 0.4)
    assert np.all(out[0, :, :2] == 0.2) and np.all(out[0, :, 4:] == 0.6)


def test_stitch_rejects_mismatched_tiles():
    grid = D.TileGrid.build(8, 8, 4, 0)
    with pytest.raises(ValueError):
        D.stitch(np.zeros((3, 3, 4, 4)), grid)
    with pytest.raises(ValueError):
        D.stitch(np.zeros((4, 3, 4, 4)), grid, "median")


def test_seams_split_overlaps_at_midpoint():
    grid = D.TileGrid.build(512, 512, 128, 32)
    rows, cols = grid.seams()
    assert grid.row_origins == [0, 96, 192, 288, 384]
    assert rows == cols == [112, 208, 304, 400]
    assert D.TileGrid.build(512, 512, 128, 0).seams()[0] == [128, 256, 384]


# --- teacher ----------------------------------------------------------------------


def test_identity_teacher_is_identity():
    p = D.TeacherParams(np.eye(3), np.ones(3))
    img = np.random.default_rng(1).random((3, 8, 8))
    np.testing.assert_allclose(D.teacher_transform(img, p), img, atol=1e-12)


def test_teacher_forward_inverse_round_trip():
    p = D.TeacherParams.default()
    img = D.synth_tile(np.random.default_rng(2), 64)
    fake = D.quantize(D.teacher_transform(img, p))
    assert 0 < fake.min() and fake.max() <= 1  # no clipping for these tiles
    back = D.teacher_transform(fake, p, "inverse")
    assert np.abs(back - img).max() <= 2 / 255


def test_white_stays_white():
    white = np.ones((3, 2, 2))
    for seed in range(5):
        out = D.teacher_transform(white, D.TeacherParams.from_seed(seed))
        assert np.abs(out - 1).max() < 1e-9


def test_teacher_darkens_stained_tissue():
    tile = D.synth_tile(np.random.default_rng(3), 64)
    assert D.teacher_transform(tile, D.TeacherParams.default()).mean() < tile.mean()


@pytest.mark.parametrize("matrix,gain", [
    (np.diag([1.0, 1.0, 0.001]), np.ones(3)),
    (np.ones((3, 3)), np.ones(3)),
    (np.eye(3), [1.0, -1.0, 1.0]),
])
def test_invalid_teacher_params(matrix, gain):
    with pytest.raises(ValueError):
        D.TeacherParams(matrix, gain)


def test_teacher_params_serialize():
    p = D.TeacherParams.from_seed(4)
    q = D.TeacherParams.from_dict(json.loads(json.dumps(p.to_dict())))
    assert np.array_equal(p.matrix, q.matrix) and np.array_equal(p.gain, q.gain) and q.seed == 4


# --- corpus and pairs -------------------------------------------------------------


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_corpus_is_deterministic(tmp_path):
    m1 = D.gen_synthetic_corpus(tmp_path / "c1", n_train=3, n_eval=2, tile=32, seed=5)
    m2 = D.gen_synthetic_corpus(tmp_path / "c2", n_train=3, n_eval=2, tile=32, seed=5)
    assert _tree_bytes(tmp_path / "c1") == _tree_bytes(tmp_path / "c2")
    assert m1 == m2
    m3 = D.gen_synthetic_corpus(tmp_path / "c3", n_train=3, n_eval=2, tile=32, seed=6)
    assert _tree_bytes(tmp_path / "c3") != _tree_bytes(tmp_path / "c1")
    assert m3["seed"] == 6


def test_corpus_layout_and_manifest(tmp_path):
    m = D.gen_synthetic_corpus(tmp_path, n_train=4, n_eval=2, tile=32, seed=0)
    assert m["version"] == D.MANIFEST_VERSION
    for domain in "ab":
        assert sum(f["domain"] == domain for f in m["files"]) == 6
        assert len(list((tmp_path / domain / "train").glob("*.png"))) == 4
        assert len(list((tmp_path / domain / "eval").glob("*.png"))) == 2
    assert (tmp_path / "a" / "train" / "0000.png").exists()
    assert m["separation"] >= 0.05
    a = D.load_corpus_split(tmp_path, "a", "train")
    b = D.load_corpus_split(tmp_path, "b", "train")
    assert np.linalg.norm(a.mean(axis=(0, 2, 3)) - b.mean(axis=(0, 2, 3))) >= 0.05
    assert D.read_manifest(tmp_path) == m


@pytest.mark.skipif(os.geteuid() == 0, reason="root can write anywhere")
def test_unwritable_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir(mode=0o500)
    with pytest.raises(OSError):
        D.gen_synthetic_corpus(ro / "c", n_train=1, n_eval=0, tile=16)


def test_unwritable_path_is_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        D.gen_synthetic_corpus(blocker / "corpus", n_train=1, n_eval=0, tile=16)


def test_assemble_pairs(tmp_path):
    teacher = D.Teacher(D.TeacherParams.default())
    rng = np.random.default_rng(6)
    real_a = np.stack([D.quantize(D.synth_tile(rng, 32)) for _ in range(5)])
    real_b = np.stack([D.quantize(teacher.forward(D.synth_tile(rng, 32))) for _ in range(3)])
    pairs = D.assemble_pairs(real_a, real_b, teacher, seed=1, n_val=2)
    assert len(pairs) == 8
    assert pairs.provenance.count("real_a+fake_b") == 5
    assert pairs.provenance.count("fake_a+real_b") == 3
    for x, y in zip(pairs.inputs, pairs.targets):
        assert np.abs(teacher.forward(x) - y).max() <= 1 / 255
    train, val = pairs.subset("train"), pairs.subset("val")
    assert len(train) == 6 and len(val) == 2
    train_keys = {x.tobytes() for x in train.inputs}
    assert not train_keys & {x.tobytes() for x in val.inputs}
    swapped = pairs.swapped()
    assert np.array_equal(swapped.inputs, pairs.targets)


def test_assemble_pairs_needs_both_domains():
    with pytest.raises(ValueError):
        D.assemble_pairs(np.zeros((0, 3, 4, 4)), np.zeros((1, 3, 4, 4)), D.Teacher(D.TeacherParams.default()))
