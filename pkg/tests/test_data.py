import os

import numpy as np
import pytest

from microdet.data import (NO_AUGMENT, AugPolicy, SceneSpec, Sample, augment, crop_resize, format_labels,
                           generate, hflip, load, parse_labels, parse_ppm, read_manifest, render, render_sample)
from microdet.errors import ConfigError, FormatError
from microdet.rng import Rng


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def ds100(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "d"
    per = generate(SceneSpec(img_size=64, seed=7), root, 100)
    return root, per


def test_split_counts(ds100):
    root, per = ds100
    assert per == {"train": 80, "val": 10, "test": 10}
    for split, n in per.items():
        assert len(os.listdir(root / split / "images")) == n
        assert len(os.listdir(root / split / "labels")) == n
    m = read_manifest(root / "manifest.txt")
    assert m["seed"] == "7" and m["img_size"] == "64" and m["generator_version"] == "1"


def test_same_seed_byte_identical(ds100, tmp_path):
    root, _ = ds100
    generate(SceneSpec(img_size=64, seed=7), tmp_path / "again", 100)
    assert _tree_bytes(root) == _tree_bytes(tmp_path / "again")
    generate(SceneSpec(img_size=64, seed=8), tmp_path / "other", 100)
    assert _tree_bytes(root) != _tree_bytes(tmp_path / "other")


def _measure(img, bg, box):
    """Tight pixel extent of changed pixels near ``box`` (pixel cx, cy, w, h)."""
    s = img.shape[0]
    cx, cy, w, h = box
    x0, y0 = max(0, int(np.floor(cx - w / 2)) - 2), max(0, int(np.floor(cy - h / 2)) - 2)
    x1, y1 = min(s, int(np.ceil(cx + w / 2)) + 2), min(s, int(np.ceil(cy + h / 2)) + 2)
    diff = np.any(img[y0:y1, x0:x1] != bg[y0:y1, x0:x1], axis=-1)
    ys, xs = np.nonzero(diff)
    if len(xs) == 0:
        return None
    return x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1


def _remeasure_ok(img, bg, boxes, tol=1.0):
    for cx, cy, w, h in boxes:
        got = _measure(img, bg, (cx, cy, w, h))
        assert got is not None
        want = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        assert max(abs(a - b) for a, b in zip(got, want)) <= tol, (got, want)


@pytest.mark.parametrize("spec", [SceneSpec(img_size=64, seed=3), SceneSpec(img_size=64, seed=4, difficulty="hard"),
                                  SceneSpec(img_size=32, seed=5)])
def test_labels_agree_with_raster(spec):
    n = 0
    for i in range(60):
        img, placed = render(spec, i)
        bg, _ = render(spec, i, defects=False)
        _remeasure_ok(img, bg, [d.box for d in placed])
        n += len(placed)
    assert n > 60


def test_written_labels_agree_with_raster(ds100):
    root, _ = ds100
    spec = SceneSpec(img_size=64, seed=7)
    ds = load(root, "train")
    for k, sample in enumerate(ds[:20]):
        index = int(sample.id.split("_")[1])
        bg, _ = render(spec, index, defects=False)
        img = np.round(sample.image * 255).astype(np.uint8).transpose(1, 2, 0)
        _remeasure_ok(img, bg, sample.gts_pixels()[:, 1:])


def test_round_trip_preserves_boxes(ds100):
    root, _ = ds100
    spec = SceneSpec(img_size=64, seed=7)
    for split in ("val", "test"):
        for s in load(root, split):
            ref = render_sample(spec, int(s.id.split("_")[1]))
            assert ref.split == split
            assert s.gts.shape == ref.gts.shape
            assert np.max(np.abs(s.gts - ref.gts), initial=0.0) <= 1e-6 / 2 + 1e-12
            assert np.array_equal(s.image, ref.image)


def test_load_is_ordered_and_lazy(ds100):
    root, _ = ds100
    ds = load(root, "val")
    assert list(ds.ids) == sorted(ds.ids)
    assert [s.id for s in ds] == ds.ids
    imgs, gts = ds.arrays()
    assert imgs.shape == (10, 3, 64, 64) and len(gts) == 10


def test_label_errors_name_file_and_line():
    good = "0 0.5 0.5 0.1 0.1\n"
    with pytest.raises(FormatError, match=r"l\.txt:2") as e:
        parse_labels(good + "0 1.5 0.5 0.1 0.1\n", 2, "l.txt")
    assert "1.5" in str(e.value)
    with pytest.raises(FormatError, match=r"l\.txt:1.*class"):
        parse_labels("2 0.5 0.5 0.1 0.1\n", 2, "l.txt")
    with pytest.raises(FormatError, match=r"l\.txt:3"):
        parse_labels(good + good + "0 0.5 0.5 0.1\n", 2, "l.txt")
    with pytest.raises(FormatError):
        parse_labels("0 0.5 0.5 0.0 0.1\n", 2, "l.txt")
    assert parse_labels("", 2).shape == (0, 5)


def test_label_format_six_decimals_lf():
    text = format_labels(np.array([[1, 0.1234567, 0.5, 0.25, 1 / 3]]))
    assert text == "1 0.123457 0.500000 0.250000 0.333333\n"


def test_empty_label_file_is_zero_gt(ds100, tmp_path):
    root, _ = ds100
    ds = load(root, "test")
    lab = root / "test" / "labels" / f"{ds.ids[0]}.txt"
    saved = lab.read_bytes()
    try:
        lab.write_text("")
        assert load(root, "test")[0].gts.shape == (0, 5)
        lab.unlink()
        with pytest.raises(FormatError, match="missing label"):
            load(root, "test")[0]
    finally:
        lab.write_bytes(saved)


def test_ppm_parse_and_errors():
    body = bytes(range(12))
    img = parse_ppm(b"P6\n# c\n2 2\n255\n" + body)
    assert img.shape == (2, 2, 3) and img.tobytes() == body
    for buf, msg in [(b"P5\n2 2\n255\n" + body, "P6"), (b"P6\n2 2\n65535\n" + body, "maxval"),
                     (b"P6\n2 2\n255\n" + body[:-1], "truncated"), (b"P6\n2 2\n255\n" + body + b"x", "trailing"),
                     (b"P6\n2", "truncated")]:
        with pytest.raises(FormatError, match=msg) as e:
            parse_ppm(buf, "x.ppm")
        assert "x.ppm" in str(e.value)


def test_size_bounds_over_1000_samples():
    spec = SceneSpec(img_size=64, seed=11)
    lo, hi = spec.size_range
    sides = []
    for i in range(1000):
        g = render_sample(spec, i).gts
        assert np.all((g[:, 1:] >= 0) & (g[:, 1:] <= 1)) and np.all(g[:, 3:] > 0)
        assert np.all(g[:, 1] - g[:, 3] / 2 >= -1e-12) and np.all(g[:, 1] + g[:, 3] / 2 <= 1 + 1e-12)
        assert np.all(g[:, 2] - g[:, 4] / 2 >= -1e-12) and np.all(g[:, 2] + g[:, 4] / 2 <= 1 + 1e-12)
        assert np.all(g[:, 3:] * 64 >= 2.0)
        sides.extend(np.max(g[:, 3:], axis=1))
    sides = np.array(sides)
    assert len(sides) > 2000
    assert sides.min() >= lo - 1e-9 and sides.max() <= hi + 1e-9


def test_generate_validation(tmp_path):
    with pytest.raises(ConfigError):
        generate(SceneSpec(), tmp_path / "a", 5)
    with pytest.raises(ConfigError):
        generate(SceneSpec(), tmp_path / "b", 20, (8, 0, 1))
    with pytest.raises(ConfigError):
        generate(SceneSpec(img_size=16, size_range=(0.02, 0.1)), tmp_path / "c", 20)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        generate(SceneSpec(), blocker / "sub", 20)


def test_load_errors(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load(tmp_path, "train")
    with pytest.raises(ConfigError):
        load(tmp_path, "holdout")


# augmentation

def _sample(seed=2, size=64):
    return render_sample(SceneSpec(img_size=size, seed=seed), 1)


def test_hflip_involution():
    s = _sample()
    img, g = hflip(*hflip(s.image, s.gts))
    assert np.array_equal(img, s.image) and np.array_equal(g, s.gts)
    forced = AugPolicy(hflip=1.0, crop_scale=None, brightness=0.0, contrast=None)
    twice = augment(augment(s, forced, Rng(0)), forced, Rng(1))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.gts, s.gts)


def test_full_crop_identity():
    s = _sample()
    img, g = crop_resize(s.image, s.gts, 0, 0, 64)
    assert np.array_equal(img, s.image) and np.allclose(g, s.gts, atol=1e-15, rtol=0)
    out = augment(s, NO_AUGMENT, Rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.gts, s.gts)


def test_augment_boxes_follow_pixels():
    spec = SceneSpec(img_size=64, seed=9)
    # geometry only, so the defect-free render can be pushed through the same transform
    policy = AugPolicy(brightness=0.0, contrast=None)
    checked = 0
    for i in range(80):
        s = render_sample(spec, i)
        bg = render(spec, i, defects=False)[0].transpose(2, 0, 1).astype(np.float32) / 255.0
        a = augment(s, policy, Rng(100 + i))
        b = augment(Sample(bg, s.gts, s.id), policy, Rng(100 + i))
        # boxes kept whole can be re-measured; clipped ones are partial by construction
        px = a.gts.copy()
        px[:, 1:] *= 64
        img = np.round(a.image * 255).astype(np.uint8).transpose(1, 2, 0)
        ref = np.round(b.image * 255).astype(np.uint8).transpose(1, 2, 0)
        for row in px:
            k = _whole_scale(row, s.gts)
            if k is None:
                continue
            # output pixel i samples source floor((i + 0.5) / k): a source edge
            # error under 1 px becomes at most k + 0.5 output pixels
            _remeasure_ok(img, ref, [row[1:]], tol=1.0 if k == 1 else k + 0.5)
            checked += 1
    assert checked > 100


def _whole_scale(row, before):
    """Resize factor if ``row`` is an unclipped box from ``before``, else None."""
    w = row[3] / 64
    for g in before:
        k = w / g[3]
        if np.isclose(row[4] / 64, g[4] * k, rtol=1e-9):
            return k
    return None


def test_augment_properties():
    r = Rng(5)
    spec = SceneSpec(img_size=64, seed=12, difficulty="hard")
    for i in range(200):
        a = augment(render_sample(spec, i), AugPolicy(), r)
        g = a.gts
        assert a.image.dtype == np.float32 and a.image.min() >= 0 and a.image.max() <= 1
        assert np.all(g[:, 3:] > 0)
        assert np.all(g[:, 1] - g[:, 3] / 2 >= -1e-12) and np.all(g[:, 1] + g[:, 3] / 2 <= 1 + 1e-12)
        assert np.all(g[:, 2] - g[:, 4] / 2 >= -1e-12) and np.all(g[:, 2] + g[:, 4] / 2 <= 1 + 1e-12)


def test_crop_drops_mostly_removed_boxes():
    img = np.zeros((3, 64, 64), np.float32)
    gts = np.array([[0, 10 / 64, 32 / 64, 8 / 64, 8 / 64],     # spans x 6..14
                    [1, 40 / 64, 32 / 64, 8 / 64, 8 / 64]])
    _, g = crop_resize(img, gts, 13, 0, 51)                    # 1/8 left
    assert g[:, 0].tolist() == [1.0]
    _, g = crop_resize(img, gts, 12, 0, 52)                    # exactly 1/4 left is kept
    assert g[:, 0].tolist() == [0.0, 1.0]
    _, g = crop_resize(img, gts, 8, 0, 56)                     # 6 of 8 px wide remain
    assert g[:, 0].tolist() == [0.0, 1.0]
