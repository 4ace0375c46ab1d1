import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handmim.augment import (
    AugmentConfig,
    IDENTITY,
    ViewTransform,
    apply_geometric,
    crop_area_fraction,
    generate_views,
    invert_geometric,
    math_to_pixel,
    pixel_centers,
    render_view,
    sample_transform,
)
from handmim.errors import InvariantError
from oracles import homogeneous_view_matrix

angles = st.floats(0.0, math.radians(150))
scales = st.floats(0.5, 2.0)
coords = st.floats(-50.0, 50.0)
points = st.tuples(st.floats(-200, 200), st.floats(-200, 200))


def xf_strategy():
    return st.builds(lambda a, s, ox, oy: ViewTransform(a, s, (ox, oy)), angles, scales, coords, coords)


def test_identity_apply():
    assert np.allclose(apply_geometric((3.5, -2.0), IDENTITY), (3.5, -2.0), atol=0)


def test_rotate_90_and_scale():
    xf = ViewTransform(math.pi / 2, 2.0, (0.0, 0.0))
    assert np.allclose(apply_geometric((1.0, 0.0), xf), (0.0, 2.0), atol=1e-12)
    assert np.allclose(invert_geometric((0.0, 2.0), xf), (1.0, 0.0), atol=1e-12)


def test_round_trip_fixed_case():
    xf = ViewTransform(math.radians(30), 0.5, (4.0, 9.0))
    p = np.array([7.0, -1.0])
    assert np.abs(invert_geometric(apply_geometric(p, xf), xf) - p).max() < 1e-9


def test_identity_invert():
    assert np.array_equal(invert_geometric((1.25, -8.0), IDENTITY), (1.25, -8.0))


@settings(max_examples=200, deadline=None)
@given(xf_strategy(), points)
def test_apply_matches_homogeneous_matrix(xf, p):
    M = homogeneous_view_matrix(xf.angle, xf.scale, xf.offset)
    expected = (M @ np.array([p[0], p[1], 1.0]))[:2]
    assert np.abs(apply_geometric(p, xf) - expected).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(xf_strategy(), points)
def test_round_trip_property(xf, p):
    assert np.abs(invert_geometric(apply_geometric(p, xf), xf) - np.array(p)).max() < 1e-6


@settings(max_examples=200, deadline=None)
@given(xf_strategy(), points, points)
def test_similarity_preserves_distance_ratio(xf, p, q):
    d = np.linalg.norm(np.subtract(p, q))
    d2 = np.linalg.norm(apply_geometric(p, xf) - apply_geometric(q, xf))
    assert abs(d2 - xf.scale * d) < 1e-9 * max(1.0, d2)


def test_photometric_fields_do_not_touch_geometry():
    base = ViewTransform(0.7, 1.3, (2.0, -5.0))
    photo = ViewTransform(0.7, 1.3, (2.0, -5.0), photo={"brightness": 1.4, "grayscale": True}, seed=9)
    p = np.random.default_rng(0).normal(size=(10, 2))
    assert np.array_equal(apply_geometric(p, base), apply_geometric(p, photo))
    assert np.array_equal(invert_geometric(p, base), invert_geometric(p, photo))


def test_invert_rejects_non_positive_scale():
    with pytest.raises(InvariantError):
        invert_geometric((0, 0), ViewTransform(0.0, 0.0, (0, 0)))


def test_pixel_frame_conventions():
    c = pixel_centers(4)
    assert np.allclose(c[0, 0], (-1.5, 1.5))  # top-left pixel is up-left of center
    assert np.allclose(c[3, 3], (1.5, -1.5))
    rc = math_to_pixel(c, 4)
    rows, cols = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    assert np.allclose(rc[..., 0], rows) and np.allclose(rc[..., 1], cols)


def test_identity_render_is_original(rng):
    img = rng.random((16, 16, 3))
    assert np.allclose(render_view(img, IDENTITY, 16), img, atol=1e-12)


def test_rotation_render_moves_a_bright_pixel():
    img = np.zeros((8, 8, 3))
    img[0, 7] = 1.0  # top-right corner, math (3.5, 3.5)
    out = render_view(img, ViewTransform(math.pi / 2, 1.0, (0.0, 0.0)), 8)
    # 90 degrees counter-clockwise sends top-right to top-left
    assert np.allclose(out[0, 0], 1.0) and out.sum() == pytest.approx(3.0)


def test_same_seed_same_transform():
    cfg = AugmentConfig()
    assert sample_transform(42, 64, cfg) == sample_transform(42, 64, cfg)


def test_views_deterministic(rng):
    img = rng.random((64, 64, 3))
    a = generate_views(img, np.random.default_rng(5))
    b = generate_views(img, np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes() and a[2].tobytes() == b[2].tobytes()
    assert a[1] == b[1] and a[3] == b[3]


def test_sampled_ranges():
    cfg = AugmentConfig()
    for seed in range(1000):
        xf = sample_transform(seed, 64, cfg)
        assert 0.0 <= xf.angle <= math.radians(150)
        assert xf.scale > 0
        assert 0.08 <= crop_area_fraction(xf, 64, cfg.out_size) <= 1.0


def test_crop_stays_inside_source():
    cfg = AugmentConfig(photometric=False)
    for seed in range(200):
        xf = sample_transform(seed, 64, cfg)
        # view-frame corners of the unrotated crop square, mapped back to source
        h = cfg.out_size / 2
        corners = np.array([[-h, -h], [-h, h], [h, -h], [h, h]]) @ xf.rotation.T
        src = invert_geometric(corners, xf)
        assert np.abs(src).max() <= 32 + 1e-9
