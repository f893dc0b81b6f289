import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canalseg.volgrid import (
    BinaryMask,
    Box,
    DegeneratePolygon,
    MalformedHeader,
    ModeLabelMismatch,
    NormVolume,
    PayloadSizeMismatch,
    PolygonAnnotation,
    ProbMap,
    SlicePolygon,
    UnsupportedDtype,
    Volume,
    compute_histogram,
    crop_pad,
    fill_polygon,
    load_volume,
    mask_bounding_box,
    rasterize_polygons,
    resample,
    save_volume,
)

from . import oracles


def _write_raw(path, header, payload):
    path.write_bytes(json.dumps(header).encode() + b"\n" + payload)


# --- VOLZ ---------------------------------------------------------------


def test_roundtrip_4cube(tmp_path):
    v = Volume(np.arange(64, dtype=np.int32).reshape(4, 4, 4))
    save_volume(v, tmp_path / "a.volz")
    back = load_volume(tmp_path / "a.volz")
    assert back.dims == (4, 4, 4)
    assert back == v


def test_single_voxel_value(tmp_path):
    save_volume(Volume(np.full((1, 1, 1), 42)), tmp_path / "one.volz")
    assert load_volume(tmp_path / "one.volz").voxels[0, 0, 0] == 42


def test_mask_header_dtype(tmp_path):
    save_volume(BinaryMask(np.ones((2, 2, 2), dtype=bool)), tmp_path / "m.volz")
    header = json.loads((tmp_path / "m.volz").read_bytes().split(b"\n", 1)[0])
    assert header["dtype"] == "u8"
    assert header["order"] == "xfastest"


def test_payload_is_x_fastest(tmp_path):
    arr = np.zeros((3, 2, 2), dtype=np.int32)
    arr[1, 0, 0] = 7  # second element in x-fastest order
    save_volume(Volume(arr), tmp_path / "o.volz")
    payload = (tmp_path / "o.volz").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<i4")[1] == 7


def test_random_hu_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    v = Volume(rng.integers(-1000, 3000, size=(67, 53, 41)), spacing=(0.3, 0.4, 0.5))
    save_volume(v, tmp_path / "r.volz")
    assert load_volume(tmp_path / "r.volz") == v


@pytest.mark.parametrize(
    "grid",
    [
        Volume(np.arange(24).reshape(2, 3, 4) - 5),
        NormVolume(np.linspace(0, 1, 24).reshape(2, 3, 4)),
        ProbMap(np.linspace(0, 1, 24).reshape(4, 3, 2)),
        BinaryMask(np.arange(24).reshape(2, 3, 4) % 3 == 0),
    ],
    ids=["volume", "norm", "prob", "mask"],
)
def test_every_kind_roundtrips(tmp_path, grid):
    save_volume(grid, tmp_path / "g.volz")
    back = load_volume(tmp_path / "g.volz")
    assert type(back) is type(grid)
    assert back == grid


def test_short_payload(tmp_path):
    header = {"dims": [4, 4, 4], "spacing": [1, 1, 1], "dtype": "i32", "order": "xfastest"}
    _write_raw(tmp_path / "s.volz", header, b"\0" * (63 * 4))
    with pytest.raises(PayloadSizeMismatch):
        load_volume(tmp_path / "s.volz")


def test_header_without_kind_infers_from_dtype(tmp_path):
    header = {"dims": [1, 1, 2], "spacing": [1, 1, 1], "dtype": "u8", "order": "xfastest"}
    _write_raw(tmp_path / "k.volz", header, b"\x01\x00")
    m = load_volume(tmp_path / "k.volz")
    assert isinstance(m, BinaryMask) and m.count == 1


@pytest.mark.parametrize(
    "raw, exc",
    [
        (b"not json\n", MalformedHeader),
        (b'{"dims": [1, 1, 1]}\n\0', MalformedHeader),
        (b"no newline at all", MalformedHeader),
        (b'{"dims":[1,1,1],"spacing":[1,1,1],"dtype":"f64","order":"xfastest"}\n' + b"\0" * 8, UnsupportedDtype),
        (b'{"dims":[1,1,1],"spacing":[1,1,1],"dtype":"u8","order":"zfastest"}\n\0', MalformedHeader),
    ],
)
def test_bad_files(tmp_path, raw, exc):
    (tmp_path / "b.volz").write_bytes(raw)
    with pytest.raises(exc):
        load_volume(tmp_path / "b.volz")


# --- histogram ----------------------------------------------------------


def test_constant_volume_one_bin():
    h = compute_histogram(Volume(np.full((3, 4, 5), 500)))
    assert list(h.counts) == [60]
    assert h.origin == 500


def test_hand_counted_histogram():
    h = compute_histogram(Volume(np.array([0, 0, 10, 19]).reshape(4, 1, 1)), bin_width=10)
    assert list(h.counts) == [2, 2]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(-50, 50))
def test_histogram_conservation_and_shift(seed, k):
    rng = np.random.default_rng(seed)
    arr = rng.integers(-1000, 2000, size=(6, 5, 4))
    h = compute_histogram(Volume(arr))
    assert h.total == arr.size
    shifted = compute_histogram(Volume(arr + 10 * k))
    assert shifted.origin == h.origin + 10 * k
    assert np.array_equal(shifted.counts, h.counts)


# --- resampling ---------------------------------------------------------


def test_constant_stays_constant():
    v = NormVolume(np.full((4, 5, 6), 0.25))
    for dims in [(1, 1, 1), (9, 2, 7), (4, 5, 6)]:
        assert np.all(resample(v, dims).voxels == np.float32(0.25))


def test_ramp_upsample_monotone():
    ramp = np.broadcast_to(np.linspace(0, 1, 6)[:, None, None], (6, 3, 3))
    up = resample(NormVolume(ramp), (12, 3, 3)).voxels
    assert np.all(np.diff(up, axis=0) >= 0)


def test_trilinear_matches_per_voxel_oracle():
    rng = np.random.default_rng(0)
    arr = rng.random((5, 5, 5))
    got = resample(NormVolume(arr), (9, 9, 9)).voxels
    np.testing.assert_allclose(got, oracles.trilinear_voxel(arr.astype(np.float32), (9, 9, 9)), atol=1e-6)


@pytest.mark.parametrize("dims", [(3, 7, 4), (8, 2, 5)])
def test_trilinear_downsample_oracle(dims):
    arr = np.random.default_rng(1).random((6, 5, 7)).astype(np.float32)
    got = resample(ProbMap(arr), dims).voxels
    np.testing.assert_allclose(got, oracles.trilinear_voxel(arr, dims), atol=1e-6)


def test_same_dims_is_exact_copy():
    rng = np.random.default_rng(2)
    v = NormVolume(rng.random((4, 6, 5)))
    m = BinaryMask(rng.random((4, 6, 5)) > 0.5)
    assert resample(v, v.dims) == v
    assert resample(m, m.dims, "nearest") == m
    vol = Volume(rng.integers(-100, 100, (3, 3, 3)))
    assert np.array_equal(resample(vol, vol.dims).voxels, vol.voxels)


def test_mask_trilinear_rejected():
    with pytest.raises(ModeLabelMismatch):
        resample(BinaryMask(np.zeros((2, 2, 2), dtype=bool)), (4, 4, 4))


def test_nearest_mask_2x_upsample_duplicates():
    m = np.zeros((2, 2, 2), dtype=bool)
    m[1, 0, 1] = True
    up = resample(BinaryMask(m), (4, 4, 4), "nearest").voxels
    assert up.sum() == 8 and up[2:, :2, 2:].all()


def test_resample_scales_spacing():
    v = NormVolume(np.zeros((4, 4, 4)), spacing=(1.0, 2.0, 0.5))
    assert resample(v, (8, 2, 4)).spacing == (0.5, 4.0, 0.5)


# --- boxes --------------------------------------------------------------


def test_crop_inside_is_subgrid():
    arr = np.arange(120).reshape(4, 5, 6)
    out = crop_pad(Volume(arr), Box((1, 0, 2), (3, 4, 6)))
    assert np.array_equal(out.voxels, arr[1:3, 0:4, 2:6])


def test_crop_with_border():
    v = Volume(np.arange(1, 9).reshape(2, 2, 2))
    out = crop_pad(v, Box((-1, -1, -1), (3, 3, 3)), fill=0).voxels
    assert out.shape == (4, 4, 4)
    assert np.array_equal(out[1:3, 1:3, 1:3], v.voxels)
    assert out.sum() == v.voxels.sum()


def test_pad_then_crop_roundtrip():
    v = Volume(np.random.default_rng(4).integers(0, 100, (3, 4, 5)))
    padded = crop_pad(v, Box((-2, -1, -3), (5, 6, 7)), fill=-7)
    back = crop_pad(padded, Box((2, 1, 3), (5, 5, 8)))
    assert back == v


def test_bounding_box_single_voxel():
    m = np.zeros((8, 8, 8), dtype=bool)
    m[3, 4, 5] = True
    box = mask_bounding_box(BinaryMask(m))
    assert box.lo == (3, 4, 5) and box.hi == (4, 5, 6)


def test_bounding_box_empty():
    assert mask_bounding_box(BinaryMask(np.zeros((3, 3, 3), dtype=bool))) is None


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bounding_box_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((7, 6, 5)) > 0.93
    box = mask_bounding_box(BinaryMask(m))
    if not m.any():
        assert box is None
        return
    pts = [(x, y, z) for x in range(7) for y in range(6) for z in range(5) if m[x, y, z]]
    lo = tuple(min(p[a] for p in pts) for a in range(3))
    hi = tuple(max(p[a] for p in pts) + 1 for a in range(3))
    assert (box.lo, box.hi) == (lo, hi)


# --- polygons -----------------------------------------------------------


def test_unit_square():
    ann = PolygonAnnotation(left=[SlicePolygon(0, [(0, 0), (2, 0), (2, 2), (0, 2)])])
    left, right = rasterize_polygons(ann, (4, 4, 2))
    expected = {(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)}
    assert set(map(tuple, np.argwhere(left.voxels))) == expected
    assert right.count == 0


def test_empty_annotation():
    left, right = rasterize_polygons(PolygonAnnotation(), (3, 3, 3))
    assert left.count == 0 and right.count == 0


def test_degenerate_polygon():
    with pytest.raises(DegeneratePolygon):
        fill_polygon(np.array([(0, 0), (1, 1)]), 4, 4)


def _pnpoly_grid(pts, nx, ny):
    return np.array([[oracles.point_in_polygon(i + 0.5, j + 0.5, pts) for j in range(ny)] for i in range(nx)])


def _random_convex(rng, nx, ny):
    n = rng.integers(3, 9)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(1, min(nx, ny) / 2)
    c = rng.uniform(0, [nx, ny])
    return np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], axis=1)


def _random_simple(rng, nx, ny):
    # star-shaped: random radius per sorted angle, so edges never cross
    n = rng.integers(3, 12)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(0.5, min(nx, ny) / 2, n)
    c = rng.uniform(2, [nx - 2, ny - 2])
    pts = np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], axis=1)
    if rng.random() < 0.3:
        pts = np.round(pts * 2) / 2  # vertices on half-integers hit scanlines and centres
    return pts


def test_hundred_random_polygons_match_pnpoly():
    rng = np.random.default_rng(7)
    for i in range(100):
        pts = _random_convex(rng, 12, 10) if i % 2 else _random_simple(rng, 12, 10)
        assert np.array_equal(fill_polygon(pts, 12, 10), _pnpoly_grid(pts, 12, 10)), i


def test_polygon_annotation_json_roundtrip(tmp_path):
    ann = PolygonAnnotation(
        left=[SlicePolygon(1, [(0, 0), (3, 0), (0, 3)])],
        right=[SlicePolygon(2, [(1.5, 1), (4, 1), (4, 4.25)])],
    )
    ann.save(tmp_path / "a.json")
    back = PolygonAnnotation.load(tmp_path / "a.json")
    assert [p.z for p in back.left + back.right] == [1, 2]
    assert np.array_equal(back.right[0].pts, ann.right[0].pts)
