import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fairdiff import codec, kernels
from fairdiff.codec import BACKGROUND, CUP, DISC
from fairdiff.metrics import dice


def boundary_set(region):
    """Pixels of ``region`` with a 4-neighbour outside it (out of bounds counts as outside)."""
    h, w = region.shape
    out = set()
    for r, c in zip(*np.nonzero(region)):
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or not region[rr, cc]:
                out.add((int(c), int(r)))
                break
    return out


def nested_squares():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[3:17, 4:16] = DISC
    m[8:13, 8:13] = CUP  # radius-2 square around (10, 10)
    return m


def test_nested_square_contours():
    m = nested_squares()
    cs = codec.extract_boundaries(m)
    assert set(map(tuple, cs[CUP].points.tolist())) == boundary_set(m == CUP)
    assert set(map(tuple, cs[DISC].points.tolist())) == boundary_set(m >= DISC)
    assert len(cs[CUP].points) == 16 and len(cs[DISC].points) == 2 * (14 + 12) - 4
    assert cs[CUP].perimeter == pytest.approx(16.0)
    for c in cs.values():
        pts = c.points
        steps = np.abs(np.diff(np.vstack([pts, pts[:1]]), axis=0)).max(axis=1)
        assert steps.max() == 1  # closed, 8-connected
        assert len(set(map(tuple, pts.tolist()))) == len(pts)
        # counterclockwise as displayed (y down) -> negative shoelace area
        assert codec.signed_area(pts.astype(float)) < 0


def test_degenerate_masks():
    m = np.zeros((10, 10), dtype=np.uint8)
    m[2:8, 2:8] = DISC
    with pytest.raises(codec.DegenerateMask):
        codec.extract_boundaries(m)
    with pytest.raises(codec.DegenerateMask):
        codec.extract_boundaries(np.zeros((5, 5), dtype=np.uint8))


def test_full_image_disc_runs_along_border():
    m = np.full((12, 10), DISC, dtype=np.uint8)
    m[5:7, 4:6] = CUP
    cs = codec.extract_boundaries(m)
    disc = set(map(tuple, cs[DISC].points.tolist()))
    assert disc == boundary_set(m >= DISC)
    assert all(x in (0, 9) or y in (0, 11) for x, y in disc)


def test_largest_component_kept():
    m = np.zeros((30, 30), dtype=np.uint8)
    m[5:25, 5:25] = DISC
    m[10:18, 10:18] = CUP
    m[21, 21] = CUP  # speck
    cs = codec.extract_boundaries(m)
    assert (21, 21) not in set(map(tuple, cs[CUP].points.tolist()))


def test_heights_follow_class():
    cloud = codec.encode_mask(nested_squares(), n_points=64, z0=0.3)
    assert cloud.n == 64
    np.testing.assert_array_equal(cloud.points[:32, 2], 0.3)
    np.testing.assert_array_equal(cloud.points[32:, 2], -0.3)
    assert np.abs(cloud.points[:, :2]).max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        codec.encode_mask(nested_squares(), n_points=63)


def test_circle_sampling_is_arc_length_uniform():
    yy, xx = np.mgrid[0:80, 0:80]
    disc = (xx - 40) ** 2 + (yy - 40) ** 2 <= 30 ** 2
    cup = (xx - 40) ** 2 + (yy - 40) ** 2 <= 20 ** 2
    m = np.zeros((80, 80), dtype=np.uint8)
    m[disc] = DISC
    m[cup] = CUP
    cs = codec.extract_boundaries(m)
    pts = codec.resample_closed(cs[CUP].points, 8)
    d = pts - 40.0
    radii = np.hypot(d[:, 0], d[:, 1])
    assert radii.max() - radii.min() <= 1.0
    ang = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    gaps = np.degrees(np.abs(np.diff(ang)))
    np.testing.assert_allclose(gaps, 45.0, atol=3.0)


def test_normalize_round_trip_and_invariance():
    rng = np.random.default_rng(0)
    raw = np.column_stack([rng.uniform(5, 50, 40), rng.uniform(5, 50, 40), np.full(40, 0.3)])
    c = codec.normalize_cloud(raw)
    np.testing.assert_allclose(codec.denormalize_cloud(c), raw, atol=1e-9)
    shifted = raw.copy()
    shifted[:, :2] += 10.0
    np.testing.assert_allclose(codec.normalize_cloud(shifted).points, c.points, atol=1e-9)
    unit = np.array([[1.0, 0.0, 0.3], [-1.0, 0.0, 0.3], [0.0, 1.0, -0.3], [0.0, -1.0, -0.3]])
    np.testing.assert_array_equal(codec.normalize_cloud(unit).points, unit)
    with pytest.raises(ValueError):
        codec.normalize_cloud(np.tile([[3.0, 3.0, 0.3]], (5, 1)))
    with pytest.raises(ValueError):
        codec.normalize_cloud(np.empty((0, 3)))


def test_decode_triangles_and_nesting():
    pts = np.array([[10, 10, -1], [30, 10, -1], [20, 30, -1],
                    [15, 5, 1], [25, 5, 1], [20, 20, 1]], dtype=float)
    cloud = codec.BoundaryPointCloud(pts)
    m = codec.decode_point_cloud(cloud, 40, 40, edge_tol=0.0)
    # oracle: barycentric point-in-triangle at pixel centres
    yy, xx = np.mgrid[0:40, 0:40]

    def inside(tri):
        (x1, y1), (x2, y2), (x3, y3) = tri
        d = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
        a = ((y2 - y3) * (xx - x3) + (x3 - x2) * (yy - y3)) / d
        b = ((y3 - y1) * (xx - x3) + (x1 - x3) * (yy - y3)) / d
        return (a > 1e-9) & (b > 1e-9) & (1 - a - b > 1e-9)

    def inside_closed(tri, tol=1e-9):
        (x1, y1), (x2, y2), (x3, y3) = tri
        d = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
        a = ((y2 - y3) * (xx - x3) + (x3 - x2) * (yy - y3)) / d
        b = ((y3 - y1) * (xx - x3) + (x1 - x3) * (yy - y3)) / d
        return (a >= -tol) & (b >= -tol) & (1 - a - b >= -tol)

    disc_tri, cup_tri = inside(pts[:3, :2]), inside(pts[3:, :2])
    assert (m >= DISC)[disc_tri].all()
    assert ((m >= DISC) & ~disc_tri).sum() <= 40  # only edge pixels differ
    assert not ((m == CUP) & ~(m >= DISC)).any()
    assert (m == CUP)[cup_tri & disc_tri].all()
    # cup pixels strictly outside the (closed) disc triangle are clipped away
    outside = ~disc_tri & ~inside_closed(pts[:3, :2])
    assert not (m == CUP)[cup_tri & outside].any()


def test_cup_outside_disc_decodes_empty_cup():
    pts = np.array([[0, 0, -1], [5, 0, -1], [0, 5, -1],
                    [20, 20, 1], [25, 20, 1], [20, 25, 1]], dtype=float)
    m = codec.decode_point_cloud(codec.BoundaryPointCloud(pts), 30, 30)
    assert not (m == CUP).any()
    assert (m == DISC).any()


def test_decode_needs_three_points_per_class():
    pts = np.array([[0, 0, -1], [5, 0, -1], [0, 5, -1], [1, 1, 1], [2, 2, 1]], dtype=float)
    with pytest.raises(codec.DecodeError):
        codec.decode_point_cloud(codec.BoundaryPointCloud(pts), 10, 10)


def test_round_trip_ellipses():
    rng = np.random.default_rng(42)
    for _ in range(20):
        m = codec.random_ellipse_pair(rng)
        back = codec.decode_point_cloud(codec.encode_mask(m), 64, 64)
        assert dice(back, m, "cup") >= 0.95
        assert dice(back, m, "disc") >= 0.95
        assert not ((back == CUP) & (back < DISC)).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_decoding_uses_only_sign_of_z(seed, mag):
    rng = np.random.default_rng(seed)
    cloud = codec.encode_mask(codec.random_ellipse_pair(rng), n_points=128)
    scaled = codec.BoundaryPointCloud(cloud.points * [1, 1, mag], cloud.center, cloud.scale)
    np.testing.assert_array_equal(codec.decode_point_cloud(cloud, 64, 64),
                                  codec.decode_point_cloud(scaled, 64, 64))


def test_translation_invariance_of_encoding():
    rng = np.random.default_rng(5)
    m = codec.random_ellipse_pair(rng, size=64, radius_range=(12, 14))
    moved = np.zeros((80, 80), dtype=np.uint8)
    moved[7:71, 11:75] = m
    a, b = codec.encode_mask(m), codec.encode_mask(moved)
    np.testing.assert_allclose(a.points, b.points, atol=1e-9)
    np.testing.assert_allclose(b.center - a.center, [11, 7], atol=1e-9)


def test_mask_png_round_trip(tmp_path):
    m = nested_squares()
    p = tmp_path / "m.png"
    codec.write_mask_png(p, m)
    raw = np.asarray(Image.open(p))
    assert set(np.unique(raw)) == {0, 128, 255}
    np.testing.assert_array_equal(codec.read_mask_png(p), m)
    Image.fromarray(np.full((4, 4), 77, dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(codec.MaskFormatError):
        codec.read_mask_png(tmp_path / "bad.png")
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(codec.MaskFormatError):
        codec.read_mask_png(tmp_path / "rgb.png")


def test_fpc_round_trip(tmp_path):
    cloud = codec.encode_mask(nested_squares(), n_points=32)
    p = tmp_path / "c.fpc"
    codec.write_fpc(p, cloud)
    head = p.read_text().splitlines()[0].split()
    assert head[0] == "FPC1" and head[1] == "32"
    back = codec.read_fpc(p)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.center, cloud.center)
    assert back.scale == cloud.scale and back.z0 == cloud.z0


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m = codec.random_ellipse_pair(rng)
        region = np.ascontiguousarray((m >= DISC).astype(np.uint8))
        np.testing.assert_array_equal(kernels.moore_trace(region), kernels.py.moore_trace(region))
        xy = codec.resample_closed(kernels.moore_trace(region)[:, ::-1], 200) + rng.normal(0, 0.3, (200, 2))
        vx, vy = np.ascontiguousarray(xy[:, 0]), np.ascontiguousarray(xy[:, 1])
        np.testing.assert_array_equal(kernels.fill_polygon(vx, vy, 64, 64, 0.5),
                                      kernels.py.fill_polygon(vx, vy, 64, 64, 0.5))
    x = rng.normal(size=(2, 3, 11, 9))
    for s in (1, 2):
        np.testing.assert_array_equal(kernels.im2col(x, 3, 3, s), kernels.py.im2col(x, 3, 3, s))
        cols = kernels.im2col(x, 3, 3, s)
        np.testing.assert_allclose(kernels.col2im(cols, 3, 11, 9, 3, 3, s),
                                   kernels.py.col2im(cols, 3, 11, 9, 3, 3, s), atol=1e-12)
