"""Data pipeline tests: preprocessing geometry, manifests, splits, generator."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from emtnet.data import (
    DatasetManifest,
    Sample,
    SplitSpec,
    load_arrays,
    load_manifest,
    load_sample,
    normalize,
    pad_to_square,
    resize_to,
    split,
    synth_generate,
    to_network_input,
)


def _ellipse_sample(h, w, label=0, ry=0.3, rx=0.2):
    """Sample with a centered filled ellipse as the tumor."""
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (((yy - h / 2) / (ry * h)) ** 2 + ((xx - w / 2) / (rx * w)) ** 2 <= 1.0)
    image = np.full((h, w), 180, dtype=np.uint8)
    image[mask] = 60
    return Sample(image, mask.astype(np.uint8), label)


# ---------------------------------------------------------------------------
# Sample validation
# ---------------------------------------------------------------------------

def test_sample_validation():
    img = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ValueError, match="2-D"):
        Sample(np.zeros((4, 4, 3), dtype=np.uint8), img, 0)
    with pytest.raises(ValueError, match="shape"):
        Sample(img, np.zeros((4, 5), dtype=np.uint8), 0)
    with pytest.raises(ValueError, match="label"):
        Sample(img, img, 2)
    with pytest.raises(ValueError, match="binary"):
        Sample(img, np.full((4, 4), 7, dtype=np.uint8), 0)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def test_pad_100x60_gives_symmetric_bands():
    s = _ellipse_sample(100, 60)
    out = pad_to_square(s)
    assert out.image.shape == (100, 100)
    assert np.all(out.image[:, :20] == 0)
    assert np.all(out.image[:, 80:] == 0)
    np.testing.assert_array_equal(out.image[:, 20:80], s.image)


def test_pad_square_input_unchanged():
    s = _ellipse_sample(64, 64)
    assert pad_to_square(s) is s


def test_pad_odd_difference_extra_pixel_on_far_side():
    s = Sample(np.ones((5, 4), dtype=np.uint8), np.zeros((5, 4), dtype=np.uint8), 0)
    out = pad_to_square(s)
    assert out.image.shape == (5, 5)
    assert np.all(out.image[:, 0] == 1)   # no band on the near side
    assert np.all(out.image[:, 4] == 0)   # single band on the far side


def test_pad_preserves_tumor_pixel_count():
    s = _ellipse_sample(90, 50)
    out = pad_to_square(s)
    assert out.mask.sum() == s.mask.sum()
    assert out.label == s.label


# ---------------------------------------------------------------------------
# resizing and normalization
# ---------------------------------------------------------------------------

def test_resize_same_size_is_identity():
    s = _ellipse_sample(224, 224)
    assert resize_to(s, 224) is s


def test_resize_constant_image_stays_constant():
    s = Sample(np.full((64, 64), 99, dtype=np.uint8), np.zeros((64, 64), dtype=np.uint8), 0)
    out = resize_to(s, 224)
    assert np.all(out.image == 99)


def test_resize_checkerboard_mask_stays_binary():
    yy, xx = np.mgrid[0:448, 0:448]
    board = ((yy + xx) % 2).astype(np.uint8)
    s = Sample(np.full((448, 448), 128, dtype=np.uint8), board, 0)
    out = resize_to(s, 224)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.mask.shape == (224, 224)


def test_resize_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        resize_to(_ellipse_sample(100, 60), 224)


def test_normalize_endpoints_and_midpoint():
    vals = np.array([0, 128, 255], dtype=np.uint8)
    out = normalize(vals)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, [0.0, 128 / 255, 1.0], rtol=1e-6)


def test_normalize_quantization_bound():
    rng = np.random.default_rng(0)
    f = rng.random(1000)
    v = np.round(f * 255).astype(np.uint8)
    back = normalize(v)
    assert np.max(np.abs(back - f)) <= 1 / 510 + 1e-7


def test_to_network_input_shapes_and_replication():
    x, m, label = to_network_input(_ellipse_sample(100, 60, label=1), size=64)
    assert x.shape == (3, 64, 64) and x.dtype == np.float32
    assert m.shape == (1, 64, 64) and m.dtype == np.float32
    np.testing.assert_array_equal(x[0], x[1])
    np.testing.assert_array_equal(x[0], x[2])
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert label == 1


def test_aspect_ratio_preserved_through_pipeline():
    s = _ellipse_sample(200, 120, ry=0.35, rx=0.25)
    ys, xs = np.nonzero(s.mask)
    h0, w0 = np.ptp(ys) + 1, np.ptp(xs) + 1
    out = resize_to(pad_to_square(s), 224)
    ys, xs = np.nonzero(out.mask)
    h1, w1 = np.ptp(ys) + 1, np.ptp(xs) + 1
    scale = 224 / 200  # one uniform factor once the frame is square
    assert abs(h1 - h0 * scale) <= 2
    assert abs(w1 - w0 * scale) <= 2


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _toy_manifest(n):
    recs = [object()] * n

    class Fake:
        def __len__(self):
            return n

    return Fake()


def test_kfold_8_samples_4_disjoint_held_folds():
    assignments = split(_toy_manifest(8), SplitSpec.kfold(4, seed=42))
    assert len(assignments) == 4
    held_union = set()
    for a in assignments:
        held = set(a["val"]) | set(a["test"])
        assert len(held) == 2
        assert len(a["train"]) == 6
        assert held.isdisjoint(a["train"])
        assert held.isdisjoint(held_union)
        held_union |= held
    assert held_union == set(range(8))


def test_split_deterministic_under_seed():
    a = split(_toy_manifest(20), SplitSpec.kfold(4, seed=7))
    b = split(_toy_manifest(20), SplitSpec.kfold(4, seed=7))
    for fa, fb in zip(a, b):
        for key in ("train", "val", "test"):
            np.testing.assert_array_equal(fa[key], fb[key])
    c = split(_toy_manifest(20), SplitSpec.kfold(4, seed=8))
    assert any(
        not np.array_equal(fa["test"], fc["test"]) for fa, fc in zip(a, c)
    )


def test_kfold_more_folds_than_samples():
    with pytest.raises(ValueError, match="folds"):
        split(_toy_manifest(3), SplitSpec.kfold(4))


def test_holdout_70_15_15_sizes():
    (a,) = split(_toy_manifest(100), SplitSpec.holdout(70, 15, 15, seed=42))
    assert (len(a["train"]), len(a["val"]), len(a["test"])) == (70, 15, 15)
    all_idx = np.concatenate([a["train"], a["val"], a["test"]])
    assert sorted(all_idx) == list(range(100))


def test_holdout_fraction_validation():
    with pytest.raises(ValueError, match="sum to 100"):
        SplitSpec.holdout(70, 15, 20)
    with pytest.raises(ValueError, match="empty part"):
        split(_toy_manifest(3), SplitSpec.holdout())


def test_split_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        split(_toy_manifest(0), SplitSpec.kfold(4))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_same_seed_bitwise_identical(tmp_path):
    synth_generate(8, seed=3, out_dir=tmp_path / "a", image_size=64)
    synth_generate(8, seed=3, out_dir=tmp_path / "b", image_size=64)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    synth_generate(8, seed=4, out_dir=tmp_path / "c", image_size=64)
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_synth_masks_nonempty_and_in_bounds(tmp_path):
    manifest = synth_generate(10, seed=1, out_dir=tmp_path, image_size=64)
    assert len(manifest) == 10
    for rec in manifest.records:
        s = load_sample(rec)
        assert s.image.shape == (64, 64)
        assert s.mask.sum() > 0
        # lesion fully inside the frame: border rows/cols stay clear
        assert s.mask[0].sum() == 0 and s.mask[-1].sum() == 0
        assert s.mask[:, 0].sum() == 0 and s.mask[:, -1].sum() == 0


def test_synth_class_balance(tmp_path):
    manifest = synth_generate(25, seed=2, out_dir=tmp_path, image_size=64)
    n_mal = int(manifest.labels().sum())
    assert abs(n_mal - round(0.4 * 25)) <= 2


def test_synth_argument_validation(tmp_path):
    with pytest.raises(ValueError, match="at least 2"):
        synth_generate(1, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError, match="image_size"):
        synth_generate(4, seed=0, out_dir=tmp_path, image_size=16)
    with pytest.raises(ValueError, match="fraction"):
        synth_generate(4, seed=0, out_dir=tmp_path, malignant_fraction=1.5)


def test_synth_manifest_round_trip(tmp_path):
    generated = synth_generate(6, seed=9, out_dir=tmp_path, image_size=64)
    loaded = load_manifest(tmp_path / "manifest.csv")
    assert len(loaded) == 6
    np.testing.assert_array_equal(loaded.labels(), generated.labels())


# ---------------------------------------------------------------------------
# manifest loading errors
# ---------------------------------------------------------------------------

def _write_pair(root: Path, stem: str, size=(8, 8)):
    img = Image.fromarray(np.zeros(size, dtype=np.uint8), mode="L")
    img.save(root / f"{stem}_img.png")
    msk = Image.fromarray(np.full(size, 255, dtype=np.uint8), mode="L")
    msk.save(root / f"{stem}_msk.png")
    return f"{stem}_img.png", f"{stem}_msk.png"


def test_load_manifest_well_formed(tmp_path):
    rows = ["image,mask,label"]
    for i in range(3):
        ip, mp = _write_pair(tmp_path, f"s{i}")
        rows.append(f"{ip},{mp},{i % 2}")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    manifest = load_manifest(tmp_path / "manifest.csv")
    assert len(manifest) == 3
    assert list(manifest.labels()) == [0, 1, 0]


def test_load_manifest_rejects_bad_label(tmp_path):
    ip, mp = _write_pair(tmp_path, "s0")
    (tmp_path / "manifest.csv").write_text(f"image,mask,label\n{ip},{mp},2\n")
    with pytest.raises(ValueError, match=r"manifest.csv:2.*label"):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_rejects_size_mismatch(tmp_path):
    ip, _ = _write_pair(tmp_path, "s0", size=(8, 8))
    _, mp = _write_pair(tmp_path, "s1", size=(9, 9))
    (tmp_path / "manifest.csv").write_text(f"image,mask,label\n{ip},{mp},0\n")
    with pytest.raises(ValueError, match="size"):
        load_manifest(tmp_path / "manifest.csv")


def test_load_manifest_missing_file_and_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.csv")
    (tmp_path / "bad.csv").write_text("a,b,c\nx,y,0\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest(tmp_path / "bad.csv")
    ip, mp = _write_pair(tmp_path, "s0")
    (tmp_path / "gone.csv").write_text(f"image,mask,label\n{ip},missing.png,0\n")
    with pytest.raises(FileNotFoundError, match="missing.png"):
        load_manifest(tmp_path / "gone.csv")
    (tmp_path / "empty.csv").write_text("image,mask,label\n")
    with pytest.raises(ValueError, match="no records"):
        load_manifest(tmp_path / "empty.csv")


def test_manifest_save_load_round_trip(tmp_path):
    manifest = synth_generate(4, seed=11, out_dir=tmp_path / "data", image_size=64)
    manifest.save(tmp_path / "data" / "copy.csv")
    again = load_manifest(tmp_path / "data" / "copy.csv")
    np.testing.assert_array_equal(again.labels(), manifest.labels())
    assert [r.image_path for r in again.records] == [r.image_path for r in manifest.records]


def test_load_arrays_shapes(tmp_path):
    manifest = synth_generate(5, seed=12, out_dir=tmp_path, image_size=64)
    X, M, y = load_arrays(manifest, size=64)
    assert X.shape == (5, 3, 64, 64) and X.dtype == np.float32
    assert M.shape == (5, 1, 64, 64) and M.dtype == np.float32
    assert y.shape == (5,)
    assert X.min() >= 0.0 and X.max() <= 1.0
    with pytest.raises(ValueError, match="empty"):
        load_arrays(DatasetManifest([], tmp_path), size=64)
