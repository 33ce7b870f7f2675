from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from matplotlib.path import Path as MplPath

from pnipath.preprocess import (AnnotationError, AnnotationSet, LabelMask, Polygon, TissueMask,
                                labels_from_masks, laplacian_response, otsu_from_histogram,
                                otsu_threshold, rasterize_labels, rasterize_polygons, scale_to_bins,
                                split_extent, split_sections, tissue_mask, tissue_mask_from_thumbnail,
                                to_grayscale)
from pnipath.slide_io import RasterImage, slide_from_array
from pnipath.synth import CohortSpec, generate_slide


def brute_otsu(hist):
    """Exhaustive scan with exact rational between-class variance."""
    n = sum(hist)
    best, best_t = None, None
    for t in range(len(hist)):
        w0 = sum(hist[:t + 1])
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = Fraction(sum(i * hist[i] for i in range(t + 1)), w0)
        m1 = Fraction(sum(i * hist[i] for i in range(t + 1, len(hist))), w1)
        var = Fraction(w0 * w1, n * n) * (m0 - m1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t


def square(x0, y0, side):
    return Polygon(((x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)))


@pytest.mark.parametrize("rgb,gray", [((100, 100, 100), 100), ((255, 0, 0), 76), ((0, 0, 0), 0)])
def test_grayscale_examples(rgb, gray):
    assert to_grayscale(np.array([[rgb]], np.uint8)).pixels[0, 0] == gray


@given(st.tuples(*[st.integers(0, 255)] * 3))
def test_grayscale_within_half(rgb):
    exact = 0.2989 * rgb[0] + 0.5870 * rgb[1] + 0.1140 * rgb[2]
    out = int(to_grayscale(np.array([[rgb]], np.uint8)).pixels[0, 0])
    assert abs(out - exact) <= 0.5


def test_grayscale_rejects_gray():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((3, 3), np.uint8))


def test_laplacian_constant_and_impulse():
    assert not laplacian_response(np.full((5, 5), 37, np.uint8)).any()
    img = np.zeros((5, 5), np.uint8)
    img[2, 2] = 255
    lap = laplacian_response(img)
    assert lap[2, 2] == 1020
    assert lap[1, 2] == lap[3, 2] == lap[2, 1] == lap[2, 3] == 255
    assert lap[1, 1] == 0


def test_laplacian_ramp_interior_zero():
    ramp = np.tile(np.arange(0, 200, 10, dtype=np.uint8), (6, 1))
    assert not laplacian_response(ramp)[1:-1, 1:-1].any()


def test_laplacian_empty():
    with pytest.raises(ValueError):
        laplacian_response(np.zeros((0, 0), np.uint8))


def test_otsu_two_clusters():
    hist = [0] * 256
    hist[10] = hist[200] = 50
    t = otsu_from_histogram(hist)
    # every t in [10, 199] separates the clusters equally; the smallest wins
    assert t == brute_otsu(hist) == 10
    values = np.array([10] * 50 + [200] * 50)
    fg = values > otsu_threshold(values)
    assert fg.sum() == 50 and (values[fg] == 200).all()


def test_otsu_degenerate():
    values = np.full(40, 77)
    t = otsu_threshold(values)
    assert t == 77 and not (values > t).any()


def test_otsu_three_clusters():
    rng = np.random.default_rng(5)
    values = np.concatenate([rng.normal(m, 6, 300) for m in (30, 110, 220)])
    values = np.clip(np.round(values), 0, 255).astype(int)
    hist = np.bincount(values, minlength=256).tolist()
    assert otsu_threshold(values) == brute_otsu(hist)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=2, max_size=24).filter(lambda h: sum(1 for v in h if v) >= 2))
def test_otsu_matches_brute_force(hist):
    assert otsu_from_histogram(hist) == brute_otsu(hist)


def test_scale_to_bins_range():
    b = scale_to_bins(np.array([2.0, 4.0, 6.0]))
    assert b.tolist() == [0, 128, 255]


def _blob_image(h=160, w=224, seed=0):
    rng = np.random.default_rng(seed)
    img = np.full((h, w, 3), 245, np.uint8)
    yy, xx = np.mgrid[:h, :w]
    blob = (yy - h / 2) ** 2 / (h / 3) ** 2 + (xx - w / 3) ** 2 / (w / 4) ** 2 < 1
    img[blob] = rng.integers(60, 200, (int(blob.sum()), 3), dtype=np.uint8)
    return img, blob


def test_tissue_blank_slide_empty():
    slide = slide_from_array(np.full((320, 320, 3), 255, np.uint8), "blank")
    tm = tissue_mask(slide)
    assert tm.mask.shape == (20, 20) and not tm.mask.any()


def test_tissue_dims_ceil():
    slide = slide_from_array(np.full((33, 50, 3), 255, np.uint8), "odd")
    assert tissue_mask(slide).mask.shape == (3, 4)


def test_tissue_mirror_equivariance():
    thumb, _ = _blob_image()
    a = tissue_mask_from_thumbnail(RasterImage(thumb)).mask
    b = tissue_mask_from_thumbnail(RasterImage(np.ascontiguousarray(thumb[:, ::-1]))).mask
    assert np.array_equal(a[:, ::-1], b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tissue_covers_synthetic_blob(seed):
    spec = CohortSpec(seed=seed, slide_dims=(1536, 1536), coverage_grids=())
    syn = generate_slide(spec, "S", "P", 1)
    mask = tissue_mask(slide_from_array(syn.rgb, "S", downsamples=(1, 16))).mask
    blob = syn.tissue_cells
    assert (mask & blob).sum() >= 0.9 * blob.sum()


def test_tissue_mask_png_round_trip(tmp_path):
    tm = TissueMask(np.eye(4, dtype=bool), "s")
    tm.save(tmp_path / "t.png")
    assert np.array_equal(TissueMask.load(tmp_path / "t.png").mask, tm.mask)


def test_square_polygon_exactly_100():
    ann = AnnotationSet("s", (square(5, 7, 10),))
    assert rasterize_polygons(ann, (40, 40)).sum() == 100


def test_overlapping_polygons_union():
    ann = AnnotationSet("s", (square(0, 0, 10), square(5, 5, 10)))
    assert rasterize_polygons(ann, (30, 30)).sum() == 100 + 100 - 25


def test_empty_annotations_no_pni():
    tissue = TissueMask(np.ones((2, 2), bool))
    lm = labels_from_masks((32, 32), AnnotationSet("s"), tissue)
    assert not lm.pni.any() and (lm.labels == 1).all()


def test_pni_overrides_missing_tissue():
    tissue = TissueMask(np.zeros((2, 2), bool))
    lm = labels_from_masks((32, 32), AnnotationSet("s", (square(2, 2, 4),)), tissue)
    assert lm.pni.sum() == 16 and set(np.unique(lm.labels)) == {0, 2}


def test_polygon_out_of_bounds():
    with pytest.raises(AnnotationError):
        rasterize_polygons(AnnotationSet("s", (square(25, 25, 10),)), (30, 30))


def test_polygon_needs_three_vertices():
    with pytest.raises(AnnotationError):
        Polygon(((0, 0), (1, 1)))


def test_annotation_for_other_slide():
    slide = slide_from_array(np.zeros((32, 32, 3), np.uint8), "a")
    with pytest.raises(AnnotationError):
        rasterize_labels(slide, AnnotationSet("b", (square(1, 1, 3),)), TissueMask(np.ones((2, 2), bool)))


def test_annotation_json_round_trip(tmp_path):
    ann = AnnotationSet("s", (square(1.5, 2, 3), Polygon(((0, 0), (4, 0), (2, 3)))))
    ann.save(tmp_path / "a.json")
    assert AnnotationSet.load(tmp_path / "a.json") == ann


def test_malformed_annotation():
    with pytest.raises(AnnotationError):
        AnnotationSet.from_json({"slide_id": "s", "polygons": [{"points": [[0, 0], [1]]}]})


polygons = st.lists(st.tuples(st.floats(0, 40, allow_nan=False), st.floats(0, 30, allow_nan=False)),
                    min_size=3, max_size=9)


@settings(max_examples=80, deadline=None)
@given(polygons)
def test_rasterization_matches_point_in_polygon(pts):
    shape = (30, 40)
    ours = rasterize_polygons(AnnotationSet("s", (Polygon(tuple(pts)),)), shape)
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    centres = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    ref = MplPath(np.array(pts)).contains_points(centres).reshape(shape)
    # both use even-odd crossing; only centres exactly on an edge may differ
    diff = ours != ref
    if diff.any():
        path = MplPath(np.array(pts))
        for y, x in zip(*np.nonzero(diff)):
            c = (x + 0.5, y + 0.5)
            assert path.contains_point(c, radius=1e-9) != path.contains_point(c, radius=-1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), polygons)
def test_label_values_and_pni_subset(seed, pts):
    tissue = TissueMask(np.random.default_rng(seed).random((2, 3)) > 0.5)
    ann = AnnotationSet("s", (Polygon(tuple(pts)),))
    lm = labels_from_masks((30, 40), ann, tissue)
    assert set(np.unique(lm.labels)) <= {0, 1, 2}
    assert not (lm.pni & ~rasterize_polygons(ann, (30, 40))).any()


def test_label_mask_png_round_trip(tmp_path):
    lm = LabelMask(np.array([[0, 1], [2, 1]], np.uint8))
    lm.save(tmp_path / "l.png")
    assert np.array_equal(LabelMask.load(tmp_path / "l.png").labels, lm.labels)


def test_label_mask_rejects_bad_values():
    with pytest.raises(ValueError):
        LabelMask(np.array([[3]], np.uint8))


def test_split_left_half():
    s = split_extent(200, 100, AnnotationSet("s", (square(10, 10, 20),)))
    assert (s.half, s.needs_review) == ("first", False)
    assert (s.region.x, s.region.y, s.region.w, s.region.h) == (0, 0, 100, 100)


def test_split_bottom_half_portrait():
    s = split_extent(100, 300, AnnotationSet("s", (square(10, 200, 20),)))
    assert s.half == "second" and (s.region.y, s.region.h) == (150, 150)


def test_split_straddle_and_empty():
    assert split_extent(200, 100, AnnotationSet("s", (square(90, 10, 20),))).needs_review
    slide = slide_from_array(np.zeros((10, 20, 3), np.uint8), "s")
    s = split_sections(slide, AnnotationSet("s"))
    assert s.needs_review and s.half == "whole" and s.region.w == 20
