import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchssl.dataset import (
    Geometry,
    GeometryError,
    ImageFormatError,
    PatchDataset,
    PatchLabel,
    SynthConfig,
    build_patch_dataset,
    disc_pixels,
    downsample_patch,
    label_patch,
    load_and_normalize,
    load_mask,
    make_split,
    render_fundus,
    sample_labeled_subset,
    synth_generate,
    tile,
)


def write_rgb(path, rgb):
    assert cv2.imwrite(str(path), np.ascontiguousarray(rgb[:, :, ::-1]))


# -- load_and_normalize ------------------------------------------------------


def test_load_resizes_fundus_sized_source(tmp_path):
    rng = np.random.default_rng(0)
    src = rng.integers(0, 200, size=(2848, 4288, 3), dtype=np.uint8)
    write_rgb(tmp_path / "big.png", src)
    img = load_and_normalize(tmp_path / "big.png", 1024)
    assert img.pixels.shape == (1024, 1024, 3)
    assert img.pixels.max() == 1.0
    assert img.image_id == "big"


def test_load_constant_image_becomes_one(tmp_path):
    write_rgb(tmp_path / "c.png", np.full((40, 40, 3), 128, np.uint8))
    img = load_and_normalize(tmp_path / "c.png", 40)
    assert np.all(img.pixels == 1.0)


def test_load_ramp_divides_by_max(tmp_path):
    ramp = np.zeros((64, 64, 3), np.uint8)
    ramp[..., 0] = np.arange(64)[None, :] * 2
    ramp[..., 1] = np.arange(64)[:, None]
    ramp[..., 2] = 7
    write_rgb(tmp_path / "ramp.png", ramp)
    img = load_and_normalize(tmp_path / "ramp.png", 64)
    expected = ramp.astype(np.float64) / ramp.max()
    np.testing.assert_allclose(img.pixels, expected, rtol=0, atol=1e-7)


def test_load_sixteen_bit_keeps_precision(tmp_path):
    src = np.zeros((32, 32, 3), np.uint16)
    src[..., 0] = 1000
    src[0, 0, 2] = 40000
    write_rgb(tmp_path / "deep.png", src)
    img = load_and_normalize(tmp_path / "deep.png", 32)
    assert img.pixels[0, 0, 2] == 1.0
    assert img.pixels[5, 5, 0] == pytest.approx(1000 / 40000, abs=1e-7)


def test_load_all_zero_is_flagged(tmp_path):
    write_rgb(tmp_path / "z.png", np.zeros((32, 32, 3), np.uint8))
    img = load_and_normalize(tmp_path / "z.png", 32)
    assert img.all_zero
    assert not img.pixels.any()


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_and_normalize(tmp_path / "missing.png", 32)
    cv2.imwrite(str(tmp_path / "gray.png"), np.zeros((32, 32), np.uint8))
    with pytest.raises(ImageFormatError):
        load_and_normalize(tmp_path / "gray.png", 32)
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(OSError):
        load_and_normalize(tmp_path / "junk.png", 32)


def test_masks_are_or_combined_and_nearest_resized(tmp_path):
    a = np.zeros((8, 8), np.uint8)
    b = np.zeros((8, 8), np.uint8)
    a[0, 0] = 255
    b[7, 7] = 1
    cv2.imwrite(str(tmp_path / "a.png"), a)
    cv2.imwrite(str(tmp_path / "b.png"), b)
    m = load_mask([tmp_path / "a.png", tmp_path / "b.png"], 32, "x")
    assert m.mask.shape == (32, 32)
    assert set(np.unique(m.mask)) == {0, 1}
    assert m.mask[:4, :4].all() and m.mask[28:, 28:].all()
    assert m.mask.sum() == 32


# -- tiling ------------------------------------------------------------------


def test_tile_full_scale_geometry():
    blocks = tile(np.zeros((1024, 1024, 3), np.float32), 8, 128)
    assert len(blocks) == 64
    assert [(r, c) for r, c, _ in blocks[:9]] == [(0, c) for c in range(8)] + [(1, 0)]
    assert all(b.shape == (128, 128, 3) for _, _, b in blocks)


def test_tile_identity_and_checkerboard():
    img = np.random.default_rng(1).random((16, 16, 3))
    [(r, c, block)] = tile(img, 1, 16)
    assert (r, c) == (0, 0) and np.array_equal(block, img)

    yy, xx = np.mgrid[0:64, 0:64]
    board = np.repeat(((yy // 4 + xx // 4) % 2)[..., None], 3, axis=2).astype(np.float32)
    blocks = {(r, c): b for r, c, b in tile(board, 4, 16)}
    np.testing.assert_array_equal(blocks[(0, 1)], board[0:16, 16:32])


def test_tile_geometry_error():
    with pytest.raises(GeometryError):
        tile(np.zeros((100, 100, 3)), 8, 128)


@settings(max_examples=40, deadline=None)
@given(grid=st.integers(1, 6), patch=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_tiling_partitions_the_image(grid, patch, seed):
    canvas = grid * patch
    img = np.random.default_rng(seed).random((canvas, canvas, 3))
    rebuilt = np.full_like(img, np.nan)
    for r, c, block in tile(img, grid, patch):
        target = rebuilt[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch]
        assert np.isnan(target).all()  # no overlap
        target[...] = block
    np.testing.assert_array_equal(rebuilt, img)  # no gap, exact values


# -- labeling ----------------------------------------------------------------


def brute_force_overlap(mask, row, col, patch):
    count = 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x] and y // patch == row and x // patch == col:
                count += 1
    return count


def test_label_examples():
    zero = np.zeros((1024, 1024), np.uint8)
    assert label_patch(zero, 3, 3, 8, 128) == (PatchLabel.HEALTHY, 0)

    single = zero.copy()
    single[130, 5] = 1
    labels = {(r, c): label_patch(single, r, c, 8, 128) for r in range(8) for c in range(8)}
    assert labels.pop((1, 0)) == (PatchLabel.DISEASED, 1)
    assert all(v == (PatchLabel.HEALTHY, 0) for v in labels.values())

    full = np.ones((64, 64), np.uint8)
    assert all(label_patch(full, r, c, 4, 16) == (PatchLabel.DISEASED, 256)
               for r in range(4) for c in range(4))


def test_label_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mask = (rng.random((24, 24)) < rng.uniform(0, 0.05)).astype(np.uint8)
        for r in range(3):
            for c in range(3):
                label, n = label_patch(mask, r, c, 3, 8)
                assert n == brute_force_overlap(mask, r, c, 8)
                assert (label == PatchLabel.DISEASED) == (n >= 1)


# -- downsampling ------------------------------------------------------------


def test_downsample_constant_and_identity():
    block = np.full((128, 128, 3), 0.3, np.float32)
    np.testing.assert_allclose(downsample_patch(block, 32), 2 * 0.3 - 1, atol=1e-6)
    rnd = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    np.testing.assert_allclose(downsample_patch(rnd, 16), 2 * rnd - 1, atol=1e-6)


def test_downsample_cell_means():
    block = np.arange(48, dtype=np.float32).reshape(4, 4, 3) / 47.0
    out = downsample_patch(block, 2)
    for i in range(2):
        for j in range(2):
            cell = block[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            expected = 2 * (cell.sum(axis=(0, 1)) / 4.0) - 1
            np.testing.assert_allclose(out[i, j], expected, atol=1e-6)


def test_downsample_rejects_non_divisible():
    with pytest.raises(GeometryError):
        downsample_patch(np.zeros((10, 10, 3)), 3)


def test_geometry_validation():
    Geometry()  # full-scale defaults
    with pytest.raises(GeometryError):
        Geometry(canvas=1000)
    with pytest.raises(GeometryError):
        Geometry(64, 4, 16, 5)


# -- splits ------------------------------------------------------------------


IDS = [f"img_{k:04d}" for k in range(249)]


def test_split_full_cohort_counts_and_disjointness():
    s = make_split(IDS, (149, 50, 50), seed=0)
    assert (len(s.train_ids), len(s.val_ids), len(s.test_ids)) == (149, 50, 50)
    assert set(s.train_ids) | set(s.val_ids) | set(s.test_ids) == set(IDS)
    assert len(set(s.train_ids) | set(s.val_ids) | set(s.test_ids)) == 249


def test_split_determinism_and_degenerate():
    assert make_split(IDS, (149, 50, 50), 5) == make_split(IDS, (149, 50, 50), 5)
    assert make_split(IDS, (149, 50, 50), 5) != make_split(IDS, (149, 50, 50), 6)
    s = make_split(IDS, (0, 0, 249), 1)
    assert sorted(s.test_ids) == IDS and not s.train_ids and not s.val_ids
    with pytest.raises(ValueError):
        make_split(IDS, (100, 50, 50), 0)


def test_stratified_split_keeps_class_ratio():
    labels = {iid: int(k < 81) for k, iid in enumerate(IDS)}
    s = make_split(IDS, (149, 50, 50), 0, labels)
    for part, n in ((s.train_ids, 149), (s.val_ids, 50), (s.test_ids, 50)):
        frac = sum(labels[i] for i in part) / n
        assert abs(frac - 81 / 249) < 0.03


def test_split_json_round_trip():
    from patchssl.dataset import SplitManifest

    s = make_split(IDS, (149, 50, 50), 3)
    assert SplitManifest.from_json(json.loads(json.dumps(s.to_json()))) == s


def test_labeled_subset_sizes():
    train = IDS[:149]
    full = sample_labeled_subset(train, 149, 0)
    assert full.unlabeled_ids == [] and sorted(full.labeled_ids) == sorted(train)
    ten = sample_labeled_subset(train, 10, 0)
    assert len(ten.labeled_ids) == 10 and len(ten.unlabeled_ids) == 139
    assert set(ten.labeled_ids).isdisjoint(ten.unlabeled_ids)
    assert set(ten.labeled_ids) | set(ten.unlabeled_ids) == set(train)


def test_labeled_subset_determinism_and_range():
    train = IDS[:149]
    assert sample_labeled_subset(train, 10, 4) == sample_labeled_subset(train, 10, 4)
    assert sample_labeled_subset(train, 10, 4).labeled_ids != sample_labeled_subset(train, 10, 5).labeled_ids
    for bad in (0, 150):
        with pytest.raises(ValueError):
            sample_labeled_subset(train, bad, 0)


def test_labeled_subset_is_stratified():
    train = IDS[:149]
    labels = {iid: int(k == 77) for k, iid in enumerate(train)}  # one diseased image
    for seed in range(20):
        sub = sample_labeled_subset(train, 2, seed, labels)
        assert {labels[i] for i in sub.labeled_ids} == {0, 1}


# -- synthetic data ----------------------------------------------------------


def test_disc_pixels_stay_inside_area_bound():
    for r in np.linspace(0.75, 4.0, 14):
        for cy, cx in ((10.5, 10.5), (10.0, 10.3), (10.2, 10.9)):
            n = disc_pixels(24, cy, cx, r).sum()
            assert n <= np.pi * r ** 2
    assert disc_pixels(24, 10.5, 10.5, 0.75).sum() == 1


def test_diseased_requires_a_lesion():
    cfg = SynthConfig(canvas=32)
    with pytest.raises(ValueError):
        render_fundus(cfg, np.random.default_rng(0), n_lesions=0, diseased=True)
    with pytest.raises(ValueError):
        SynthConfig(lesion_count=(0, 3))


def test_synth_cohort_counts_and_mask_bounds(tmp_path):
    cfg = SynthConfig(canvas=32, n_healthy=168, n_diseased=81)
    manifest = synth_generate(cfg, tmp_path, seed=7)
    assert len(manifest["images"]) == 249
    assert len(list((tmp_path / "images").glob("*.png"))) == 249
    assert len(list((tmp_path / "masks").glob("*.png"))) == 249
    k = cfg.lesion_count[1]
    r_max = cfg.lesion_radius[1]
    for entry in manifest["images"]:
        mask = cv2.imread(str(tmp_path / "masks" / f"{entry['id']}.png"), cv2.IMREAD_UNCHANGED)
        n = int((mask > 0).sum())
        if entry["label"] == "diseased":
            assert 1 <= n <= k * np.pi * r_max ** 2
        else:
            assert n == 0
    s = manifest["split"]
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (149, 50, 50)


def test_synth_is_deterministic(tmp_path):
    cfg = SynthConfig(canvas=32, n_healthy=6, n_diseased=4)
    synth_generate(cfg, tmp_path / "a", seed=3)
    synth_generate(cfg, tmp_path / "b", seed=3)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "images" / p.name).read_bytes()


def test_synth_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_generate(SynthConfig(canvas=32, n_healthy=1, n_diseased=1), blocker / "sub", 0)


# -- patch dataset -----------------------------------------------------------


@pytest.fixture(scope="module")
def small_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    synth_generate(SynthConfig(canvas=64, n_healthy=8, n_diseased=8, split=(10, 3, 3)), root, seed=11)
    return root


def test_patch_labels_match_recount(small_cohort):
    g = Geometry(64, 4, 16, 16)
    data = build_patch_dataset(small_cohort, g)
    assert len(data.labels) == 16 * 16
    for k, iid in enumerate(data.image_ids):
        mask = cv2.imread(str(small_cohort / "masks" / f"{iid}.png"), cv2.IMREAD_UNCHANGED) > 0
        sel = np.flatnonzero(data.image_index == k)
        for j in sel:
            n = brute_force_overlap(mask, data.rows[j], data.cols[j], 16)
            assert data.overlap[j] == n
            assert data.labels[j] == int(n >= 1)
    assert data.pixels.min() >= -1.0 and data.pixels.max() <= 1.0


def test_lesions_are_localized(small_cohort):
    data = build_patch_dataset(small_cohort, Geometry(64, 4, 16, 16))
    truth = data.image_labels
    diseased = [k for k, iid in enumerate(data.image_ids) if truth[iid]]
    frac = data.labels[np.isin(data.image_index, diseased)].mean()
    assert 0.0 < frac < 1.0


def test_patch_store_round_trip_and_determinism(small_cohort, tmp_path):
    a = build_patch_dataset(small_cohort, Geometry(64, 2, 32, 16))
    b = build_patch_dataset(small_cohort, Geometry(64, 2, 32, 16), workers=4)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.labels, b.labels)
    a.save(tmp_path / "p.bin")
    c = PatchDataset.load(tmp_path / "p.bin")
    np.testing.assert_array_equal(a.pixels, c.pixels)
    np.testing.assert_array_equal(a.labels, c.labels)
    assert c.split == a.split and c.image_ids == a.image_ids and c.geometry == a.geometry


def test_records_mark_unlabeled(small_cohort):
    data = build_patch_dataset(small_cohort, Geometry(64, 4, 16, 16))
    labeled = data.split.train_ids[:2]
    recs = list(data.records(data.split.train_ids, labeled=labeled))
    assert len(recs) == 16 * len(data.split.train_ids)
    for rec in recs:
        if rec.image_id in labeled:
            assert rec.label != PatchLabel.UNLABELED
            assert (rec.label == PatchLabel.DISEASED) == (rec.overlap_pixels >= 1)
        else:
            assert rec.label == PatchLabel.UNLABELED


def test_per_lesion_mask_subdirectories(tmp_path):
    root = tmp_path
    (root / "images").mkdir()
    (root / "masks" / "exudates").mkdir(parents=True)
    (root / "masks" / "hemorrhages").mkdir()
    write_rgb(root / "images" / "a.png", np.full((64, 64, 3), 90, np.uint8))
    m1 = np.zeros((64, 64), np.uint8)
    m1[1, 1] = 255
    m2 = np.zeros((64, 64), np.uint8)
    m2[60, 60] = 255
    cv2.imwrite(str(root / "masks" / "exudates" / "a.png"), m1)
    cv2.imwrite(str(root / "masks" / "hemorrhages" / "a.png"), m2)
    (root / "manifest.json").write_text(json.dumps({"images": [{"id": "a", "label": "diseased"}]}))
    data = build_patch_dataset(root, Geometry(64, 4, 16, 16))
    assert data.labels.reshape(4, 4)[0, 0] == 1 and data.labels.reshape(4, 4)[3, 3] == 1
    assert data.labels.sum() == 2
