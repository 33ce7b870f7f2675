import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from pnipath.preprocess import LabelMask, TissueMask
from pnipath.slide_io import slide_from_array
from pnipath.tiler import (PatchGridSpec, PatchRecord, PhysicalSizeWarning, SamplingManifest, augment,
                           axis_offsets, build_sampling_manifest, check_physical_size, extract_patches,
                           generate_grid, read_patch_csv, tissue_fraction, write_patch_csv)


def rec(i, pos):
    return PatchRecord(f"p{i:04d}", "s", "u", 0, 0, 0, "pos" if pos else "neg", 1.0)


@pytest.mark.parametrize("width,xs", [(1196, [0, 299, 598]), (598, [0]), (700, [0, 102]), (500, [])])
def test_axis_offsets_examples(width, xs):
    assert axis_offsets(width, 598, 299) == xs


def test_strict_grid_without_edge_tiles():
    assert axis_offsets(700, 598, 299, edge_tiles=False) == [0]


def test_grid_row_major():
    grid = generate_grid((700, 1196), PatchGridSpec())
    assert grid[:3] == [(0, 0), (102, 0), (0, 299)]
    assert len(grid) == 2 * 3


def test_spec_validation():
    with pytest.raises(ValueError):
        PatchGridSpec(patch_px=100, stride_px=200)
    with pytest.raises(ValueError):
        PatchGridSpec(min_tissue_fraction=1.5)
    seg = PatchGridSpec.segmentation()
    assert (seg.patch_px, seg.stride_px, seg.min_tissue_fraction) == (512, 256, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 700), st.data())
def test_grid_covers_every_pixel(dim, patch, data):
    stride = data.draw(st.integers(1, patch))
    offs = axis_offsets(dim, patch, stride)
    if dim < patch:
        assert offs == []
        return
    covered = np.zeros(dim, bool)
    for o in offs:
        assert 0 <= o and o + patch <= dim
        covered[o:o + patch] = True
    assert covered.all()


@pytest.mark.parametrize("spec", [PatchGridSpec.classification(), PatchGridSpec.segmentation()])
def test_consecutive_overlap(spec):
    offs = axis_offsets(20 * spec.patch_px, spec.patch_px, spec.stride_px, edge_tiles=False)
    for a, b in zip(offs, offs[1:]):
        assert a + spec.patch_px - b == spec.patch_px - spec.stride_px


def test_tissue_fraction_full_and_empty():
    full = TissueMask(np.ones((4, 4), bool))
    empty = TissueMask(np.zeros((4, 4), bool))
    assert tissue_fraction((0, 0, 64, 64), full) == 1.0
    assert tissue_fraction((0, 0, 64, 64), empty) == 0.0


def test_tissue_fraction_half_plane():
    mask = np.zeros((40, 40), bool)
    mask[:, 20:] = True  # tissue from level-0 column 320 on
    tm = TissueMask(mask)
    frac = tissue_fraction((21, 0, 598, 598), tm)
    assert abs(frac - 0.5) <= 1 / 598 + 16 / 598


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 100), st.integers(0, 100), st.integers(1, 60), st.integers(1, 60))
def test_tissue_fraction_matches_upsampled(seed, x, y, w, h):
    mask = np.random.default_rng(seed).random((11, 11)) > 0.5
    up = np.repeat(np.repeat(mask, 16, 0), 16, 1)
    ref = up[y:y + h, x:x + w].mean()
    assert tissue_fraction((x, y, w, h), TissueMask(mask)) == pytest.approx(ref, abs=1e-12)


def test_tissue_fraction_outside():
    with pytest.raises(ValueError):
        tissue_fraction((0, 0, 100, 100), TissueMask(np.ones((2, 2), bool)))


def _slide_with_focus(shape=(1196, 1196)):
    h, w = shape
    slide = slide_from_array(np.full((h, w, 3), 200, np.uint8), "S", "P")
    labels = np.ones(shape, np.uint8)
    labels[590:610, 590:610] = 2
    tissue = TissueMask(np.ones((-(-h // 16), -(-w // 16)), bool))
    return slide, LabelMask(labels, "S"), tissue


def test_focus_marks_every_intersecting_patch():
    slide, lm, tissue = _slide_with_focus()
    recs = extract_patches(slide, lm, tissue, PatchGridSpec())
    assert len(recs) == 9
    for r in recs:
        expect = lm.pni[r.y:r.y + 598, r.x:r.x + 598].any()
        assert r.positive == expect
    # the focus straddles the 598 boundary, so all patches touching it are positive
    assert {(r.x, r.y) for r in recs if r.positive} == {(x, y) for x in (0, 299, 598) for y in (0, 299, 598)}


def test_background_slide_has_no_records():
    slide, lm, _ = _slide_with_focus()
    assert extract_patches(slide, lm, TissueMask(np.zeros((75, 75), bool)), PatchGridSpec()) == []


def test_mismatched_masks():
    slide, lm, tissue = _slide_with_focus()
    with pytest.raises(ValueError):
        extract_patches(slide, LabelMask(np.ones((10, 10), np.uint8)), tissue, PatchGridSpec())
    with pytest.raises(ValueError):
        extract_patches(slide, lm, TissueMask(np.ones((3, 3), bool)), PatchGridSpec())


def test_jpeg_export(tmp_path):
    slide, lm, tissue = _slide_with_focus()
    recs = extract_patches(slide, lm, tissue, PatchGridSpec(), out_dir=tmp_path)
    with Image.open(recs[0].image_path) as im:
        assert im.format == "JPEG" and im.size == (598, 598)


def test_physical_size_checks():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_physical_size(PatchGridSpec(), 0.5032) == pytest.approx(300.9136)
        check_physical_size(PatchGridSpec.segmentation(), 0.45202)
    with pytest.warns(PhysicalSizeWarning):
        check_physical_size(PatchGridSpec(), 0.25)


def test_augment_group_laws():
    p = np.arange(48).reshape(4, 4, 3)
    r = p
    for _ in range(4):
        r = augment(r, "rot90")
    assert np.array_equal(r, p)
    assert np.array_equal(augment(augment(p, "hflip"), "hflip"), p)
    assert np.array_equal(augment(augment(p, "rot90"), "rot90"), augment(p, "rot180"))
    assert np.array_equal(augment(augment(p, "rot180"), "rot90"), augment(p, "rot270"))
    assert sorted(augment(p, "rot90").ravel()) == sorted(p.ravel())


def test_augment_errors():
    with pytest.raises(ValueError):
        augment(np.zeros((2, 3)), "rot90")
    with pytest.raises(ValueError):
        augment(np.zeros((2, 2)), "shear")


def test_manifest_enough_negatives():
    records = [rec(i, i < 10) for i in range(110)]
    m = build_sampling_manifest(records, 2, seed=3)
    assert len(m.patch_ids) == 30
    pos = {r.patch_id for r in records if r.positive}
    negs = [p for p in m.patch_ids if p not in pos]
    assert len(negs) == 20 == len(set(negs))
    assert sorted(p for p in m.patch_ids if p in pos) == sorted(pos)


def test_manifest_small_pool():
    records = [rec(i, i < 10) for i in range(15)]
    m = build_sampling_manifest(records, 2, seed=3)
    negs = [p for p in m.patch_ids if p >= "p0010"]
    assert len(negs) == 20 and set(negs) == {f"p{i:04d}" for i in range(10, 15)}


def test_manifest_determinism_and_order_insensitivity(tmp_path):
    records = [rec(i, i % 7 == 0) for i in range(200)]
    a = build_sampling_manifest(records, 4, seed=9)
    b = build_sampling_manifest(list(reversed(records)), 4, seed=9)
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "m.txt")
    assert SamplingManifest.load(tmp_path / "m.txt") == a
    assert build_sampling_manifest(records, 4, seed=10).dumps() != a.dumps()


def test_manifest_needs_positive():
    with pytest.raises(ValueError):
        build_sampling_manifest([rec(0, False)], 2, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 200), st.integers(0, 5), st.integers(0, 1000))
def test_manifest_ratio_property(n_pos, n_neg, ratio, seed):
    records = [rec(i, i < n_pos) for i in range(n_pos + n_neg)]
    if n_neg == 0 and ratio > 0:
        with pytest.raises(ValueError):
            build_sampling_manifest(records, ratio, seed)
        return
    m = build_sampling_manifest(records, ratio, seed)
    pos = {r.patch_id for r in records if r.positive}
    assert sum(p in pos for p in m.patch_ids) == n_pos == len(set(m.patch_ids) & pos)
    assert m.n_negative == ratio * n_pos
    if ratio * n_pos <= n_neg:
        negs = [p for p in m.patch_ids if p not in pos]
        assert len(set(negs)) == len(negs)


def test_patch_csv_round_trip(tmp_path):
    records = [PatchRecord("a", "s", "u", 1, 2, 0, "pos", 0.625, "x.jpg"), rec(1, False)]
    write_patch_csv(records, tmp_path / "p.csv")
    assert read_patch_csv(tmp_path / "p.csv") == records
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == \
        "patch_id,slide_id,subject_id,x,y,level,label,tissue_fraction,image_path"
