from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vesselstereo import raster
from vesselstereo.errors import ParameterError


# --------------------------------------------------------------------------
# independent oracles
# --------------------------------------------------------------------------


def global_equalize(img, top=255):
    flat = np.sort(img.ravel())
    cdf = np.searchsorted(flat, img, side="right") / img.size
    return np.rint(top * cdf).astype(img.dtype)


def tile_cdf(tile, top=255):
    """Lookup table value -> top * P(X <= value) for one tile (no clipping)."""
    lut = np.zeros(256)
    n = tile.size
    for v in range(256):
        lut[v] = top * np.count_nonzero(tile <= v) / n
    return lut


def flood_components(mask, connectivity):
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                comp, q = [], deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    comp.append((cy, cx))
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
                comps.append(comp)
    return comps


def border_flood_fill(mask):
    """Foreground plus every background pixel not 4-reachable from the border."""
    h, w = mask.shape
    outside = np.zeros_like(mask, dtype=bool)
    q = deque()
    for y in range(h):
        for x in range(w):
            if (y in (0, h - 1) or x in (0, w - 1)) and not mask[y, x]:
                outside[y, x] = True
                q.append((y, x))
    while q:
        y, x = q.popleft()
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx] and not outside[ny, nx]:
                outside[ny, nx] = True
                q.append((ny, nx))
    return ~outside


def naive_dilate(mask, radius):
    h, w = mask.shape
    r = int(np.floor(radius))
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dx * dx + dy * dy <= radius * radius:
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                            out[y, x] = True
    return out


def window_entropy(img, y, x, window, bins):
    r = window // 2
    padded = np.pad(img, r, mode="edge")
    win = padded[y:y + window, x:x + window].astype(np.int64)
    q = (win * bins) // 256
    counts = {}
    for v in q.ravel().tolist():
        counts[v] = counts.get(v, 0) + 1
    p = np.array(list(counts.values()), dtype=float) / win.size
    return float(-(p * np.log2(p)).sum())


# --------------------------------------------------------------------------
# CLAHE
# --------------------------------------------------------------------------


def test_clahe_constant_image_stays_constant():
    img = np.full((32, 32), 128, dtype=np.uint8)
    out = raster.clahe(img, (4, 4), 0.01)
    assert np.unique(out).size == 1


def test_clahe_without_clipping_on_one_tile_is_global_equalization():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (40, 56)).astype(np.uint8)
    out = raster.clahe(img, (1, 1), 1.0, 256)
    np.testing.assert_array_equal(out, global_equalize(img))


def test_clahe_two_tiles_match_per_tile_cdf_oracle():
    h, w = 8, 32
    img = np.zeros((h, w), dtype=np.uint8)
    img[:, :16] = np.tile(np.arange(20, 36, dtype=np.uint8), (h, 1))
    img[:, 16:] = np.tile(np.arange(200, 232, 2, dtype=np.uint8), (h, 1))
    out = raster.clahe(img, (2, 1), 1.0, 256)
    luts = [tile_cdf(img[:, :16]), tile_cdf(img[:, 16:])]
    c0, c1 = 7.5, 23.5
    expect = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            t = min(max((x - c0) / (c1 - c0), 0.0), 1.0)
            v = img[y, x]
            expect[y, x] = np.rint((1 - t) * luts[0][v] + t * luts[1][v])
    np.testing.assert_array_equal(out, expect)


def test_clahe_keeps_16_bit_depth():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 65536, (24, 24)).astype(np.uint16)
    out = raster.clahe(img, (2, 2), 0.02, 128)
    assert out.dtype == np.uint16 and out.shape == img.shape


@pytest.mark.parametrize("kw", [dict(tile_grid=(0, 1)), dict(clip_limit=0.0), dict(clip_limit=1.5), dict(bins=1)])
def test_clahe_rejects_bad_parameters(kw):
    img = np.zeros((16, 16), dtype=np.uint8)
    with pytest.raises(ParameterError):
        raster.clahe(img, **kw)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(8, 24), st.integers(8, 24))),
       st.integers(1, 3), st.integers(1, 3), st.floats(0.01, 1.0))
def test_clahe_preserves_shape_and_is_monotone_on_one_tile(img, nx, ny, clip):
    out = raster.clahe(img, (nx, ny), clip)
    assert out.shape == img.shape and out.dtype == img.dtype
    single = raster.clahe(img, (1, 1), clip)
    order = np.argsort(img.ravel(), kind="stable")
    assert (np.diff(single.ravel()[order].astype(int)) >= 0).all()


# --------------------------------------------------------------------------
# entropy
# --------------------------------------------------------------------------


def test_entropy_of_constant_window_is_zero():
    img = np.full((15, 15), 77, dtype=np.uint8)
    assert raster.local_entropy(img, window=9).max() == 0.0


def test_entropy_of_uniformly_occupied_bins():
    # 3x3 window holding nine distinct bins: log2(9) bits at the centre
    img = (np.arange(9, dtype=np.uint8) * 4).reshape(3, 3)
    ent = raster.local_entropy(img, window=3, bins=64)
    assert ent[1, 1] == pytest.approx(np.log2(9), abs=1e-12)


def test_entropy_matches_histogram_enumeration():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (20, 23)).astype(np.uint8)
    img[5:12, 3:9] = 40
    ent = raster.local_entropy(img, window=9, bins=64)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            assert ent[y, x] == pytest.approx(window_entropy(img, y, x, 9, 64), abs=1e-9)


def test_entropy_is_zero_outside_mask_and_rejects_large_window():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (12, 12)).astype(np.uint8)
    mask = np.zeros((12, 12), dtype=bool)
    mask[3:6, 3:6] = True
    ent = raster.local_entropy(img, mask, window=5)
    assert (ent[~mask] == 0).all() and (ent[mask] > 0).all()
    with pytest.raises(ParameterError):
        raster.local_entropy(img, window=13)
    with pytest.raises(ParameterError):
        raster.local_entropy(img, window=4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (12, 12)), st.sampled_from([3, 5, 7]), st.sampled_from([2, 16, 64, 256]))
def test_entropy_bounded_by_bin_count(img, window, bins):
    ent = raster.local_entropy(img, window=window, bins=bins)
    assert ent.min() >= 0
    assert ent.max() <= np.log2(bins) + 1e-12


# --------------------------------------------------------------------------
# morphology
# --------------------------------------------------------------------------


def test_largest_component_keeps_bigger_blob():
    m = np.zeros((10, 10), dtype=bool)
    m[0:2, 0:5] = True
    m[7, 7:10] = True
    out = raster.largest_component(m)
    assert out.sum() == 10 and not out[7].any()


def test_largest_component_of_empty_mask_is_empty():
    assert not raster.largest_component(np.zeros((5, 5), dtype=bool)).any()


def test_largest_component_tie_goes_to_earliest_pixel():
    m = np.zeros((6, 6), dtype=bool)
    m[4, 0:3] = True
    m[1, 3:6] = True
    out = raster.largest_component(m)
    assert out[1, 3:6].all() and not out[4].any()


@pytest.mark.parametrize("connectivity", [4, 8])
def test_largest_component_matches_flood_fill(connectivity):
    rng = np.random.default_rng(11 + connectivity)
    for _ in range(5):
        m = rng.random((64, 64)) < 0.45
        comps = flood_components(m, connectivity)
        best = max(comps, key=len)
        assert sum(len(c) == len(best) for c in comps) >= 1
        expect = np.zeros_like(m)
        first = min((c for c in comps if len(c) == len(best)), key=lambda c: min(c))
        for y, x in first:
            expect[y, x] = True
        np.testing.assert_array_equal(raster.largest_component(m, connectivity), expect)


def test_fill_holes_ring_becomes_disk():
    yy, xx = np.mgrid[0:21, 0:21]
    d = np.hypot(yy - 10, xx - 10)
    ring = (d <= 8) & (d >= 5)
    np.testing.assert_array_equal(raster.fill_holes(ring), d <= 8)


def test_fill_holes_without_enclosed_background_is_identity():
    m = np.zeros((9, 9), dtype=bool)
    m[:, 4] = True
    np.testing.assert_array_equal(raster.fill_holes(m), m)


def test_fill_holes_matches_border_flood():
    rng = np.random.default_rng(2)
    for _ in range(10):
        m = rng.random((40, 40)) < 0.55
        np.testing.assert_array_equal(raster.fill_holes(m), border_flood_fill(m))


def test_dilate_radius_zero_and_unit_disk():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    np.testing.assert_array_equal(raster.dilate(m, 0), m)
    cross = np.zeros_like(m)
    cross[1:4, 2] = cross[2, 1:4] = True
    np.testing.assert_array_equal(raster.dilate(m, 1), cross)
    np.testing.assert_array_equal(raster.dilate(m, 1.5), np.pad(np.ones((3, 3), bool), 1))


@pytest.mark.parametrize("radius", [1, 1.5, 2, 2.5, 3])
def test_dilate_matches_naive_disk_max(radius):
    rng = np.random.default_rng(int(radius * 10))
    m = rng.random((25, 30)) < 0.05
    np.testing.assert_array_equal(raster.dilate(m, radius), naive_dilate(m, radius))


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, (16, 16)), st.floats(0, 4))
def test_morphology_properties(m, radius):
    f = raster.fill_holes(m)
    np.testing.assert_array_equal(raster.fill_holes(f), f)
    d1 = raster.dilate(m, radius)
    d2 = raster.dilate(m, radius + 1)
    assert (d1 >= m).all() and (d2 >= d1).all()
    lc = raster.largest_component(m, 8)
    assert (lc <= m).all()
    if lc.any():
        assert len(flood_components(lc, 8)) == 1


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
@pytest.mark.parametrize("dtype", [np.uint8, np.uint16])
def test_image_round_trip(tmp_path, suffix, dtype):
    rng = np.random.default_rng(4)
    img = rng.integers(0, np.iinfo(dtype).max + 1, (13, 17)).astype(dtype)
    p = tmp_path / f"img{suffix}"
    raster.write_image(p, img)
    back = raster.read_image(p)
    assert back.dtype == dtype
    np.testing.assert_array_equal(back, img)


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(0).random((9, 11)) < 0.5
    raster.write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(raster.read_mask(tmp_path / "m.png"), m)
