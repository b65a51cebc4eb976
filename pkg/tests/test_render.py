import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from hashmoe.errors import DataError
from hashmoe.gating import GateDecision, balance_loss
from hashmoe.render import (
    Camera,
    RayBatch,
    SceneBound,
    bg_to_unit,
    composite,
    composite_backward,
    contract,
    deltas,
    fg_to_unit,
    importance_fine,
    losses,
    read_raw,
    rendering_loss,
    sample_pdf,
    sphere_exit,
    stratified,
    stratified_inverse,
    uncontract,
    write_png,
    write_raw,
)


# -- cameras -------------------------------------------------------------------------


def test_principal_ray_and_pixel_centres():
    cam = Camera(100.0, 100.0, 2.0, 2.0, np.eye(4), 4, 4)
    o, d = cam.rays(np.array([[1, 1], [2, 2], [0, 0]]))
    np.testing.assert_array_equal(o, 0.0)
    # pixel (1, 1) has centre (1.5, 1.5): half a pixel left of and above the principal point
    expected = np.array([-0.5 / 100, 0.5 / 100, -1.0])
    np.testing.assert_allclose(d[0], expected / np.linalg.norm(expected), rtol=1e-14)
    expected = np.array([0.5 / 100, -0.5 / 100, -1.0])
    np.testing.assert_allclose(d[1], expected / np.linalg.norm(expected), rtol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, rtol=1e-14)
    assert cam.pixel_grid().shape == (16, 2)


def test_drb_axes():
    cam = Camera(10.0, 10.0, 5.0, 5.0, np.eye(4), 10, 10, convention="drb")
    _, d = cam.rays(np.array([[9, 4], [4, 9]]))
    assert d[0, 1] > 0 and abs(d[0, 0]) < 0.06  # pixel to the right -> second axis
    assert d[1, 0] > 0 and abs(d[1, 1]) < 0.06  # pixel below -> first axis
    assert np.all(d[:, 2] < 0)


def test_camera_pose_applies_translation_and_rotation():
    rot = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    c2w = np.concatenate([rot, [[1.0], [2.0], [3.0]]], axis=1)
    cam = Camera(1.0, 1.0, 0.5, 0.5, c2w, 1, 1)
    o, d = cam.rays(np.array([[0, 0]]))
    np.testing.assert_array_equal(o[0], [1, 2, 3])
    np.testing.assert_allclose(d[0], [0, 0, -1], atol=1e-15)


def test_camera_validation():
    with pytest.raises(DataError):
        Camera(0.0, 1.0, 0, 0, np.eye(4), 2, 2)
    bad = np.eye(4)
    bad[0, 0] = 1.001
    with pytest.raises(DataError):
        Camera(1.0, 1.0, 0, 0, bad, 2, 2)
    with pytest.raises(DataError):
        Camera(1.0, 1.0, 0, 0, np.eye(4), 2, 2, convention="rdf")
    cam = Camera(1.0, 1.0, 0, 0, np.eye(4), 2, 2)
    with pytest.raises(DataError):
        cam.rays(np.array([[2, 0]]))
    with pytest.raises(DataError):
        cam.rays(np.array([[0, -1]]))


# -- contraction -------------------------------------------------------------------------


def test_contraction_examples():
    x = np.array([0.3, 0.0, 0.4])
    np.testing.assert_array_equal(contract(x), x)
    y = contract(np.array([0.0, 2.0, 0.0]))
    np.testing.assert_allclose(y, [0, 1.5, 0], rtol=1e-15)
    far = contract(np.array([[1e6, 0, 0]]))
    assert np.linalg.norm(far) == pytest.approx(2 - 1e-6, rel=1e-15)
    bound = SceneBound((10.0, 0.0, 0.0), 4.0)
    np.testing.assert_allclose(contract(np.array([18.0, 0, 0]), bound), [1.5, 0, 0])


finite_points = arrays(np.float64, (50, 3), elements=st.floats(-1e5, 1e5, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(finite_points)
def test_contraction_bounded_and_invertible(x):
    y = contract(x)
    r = np.linalg.norm(y, axis=1)
    assert np.all(r <= 2.0)
    norm = np.linalg.norm(x, axis=1)
    keep = norm < 1e4  # inverse is ill-conditioned as the radius approaches 2
    np.testing.assert_allclose(uncontract(y[keep]), x[keep], rtol=1e-6, atol=1e-9)
    # same direction
    nz = norm > 1e-9
    np.testing.assert_allclose(y[nz] / r[nz, None], x[nz] / norm[nz, None], atol=1e-12)


def test_contraction_is_continuous_across_the_sphere():
    d = np.random.default_rng(0).normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for eps in (1e-3, 1e-6, 1e-9):
        inner = contract(d * (1 - eps))
        outer = contract(d * (1 + eps))
        assert np.abs(inner - outer).max() < 3 * eps


def test_contraction_injective_on_random_pairs():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(10000, 3)) * rng.choice([0.3, 3.0, 300.0], (10000, 1))
    b = rng.normal(size=(10000, 3)) * rng.choice([0.3, 3.0, 300.0], (10000, 1))
    distinct = np.linalg.norm(a - b, axis=1) > 1e-6
    assert np.all(np.linalg.norm(contract(a) - contract(b), axis=1)[distinct] > 0)


def test_unit_cube_maps():
    np.testing.assert_array_equal(fg_to_unit(np.array([[-1.0, 0.0, 1.0]])), [[0.0, 0.5, 1.0]])
    np.testing.assert_allclose(bg_to_unit(np.array([[0.0, 2.0, 0.0]])), [[0.5, 0.875, 0.5]])
    pts = np.random.default_rng(2).normal(size=(1000, 3)) * 50
    u = bg_to_unit(pts)
    assert u.min() >= 0 and u.max() <= 1


# -- sampling -----------------------------------------------------------------------------


def test_stratified_midpoints():
    np.testing.assert_allclose(stratified(0.0, 1.0, 4)[0], [0.125, 0.375, 0.625, 0.875], rtol=1e-15)


def test_stratified_jitter_stays_in_bins():
    rng = np.random.default_rng(3)
    t = stratified(np.zeros(100), np.full(100, 2.0), 8, rng)
    bins = np.floor(t / 0.25)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(8), t.shape))
    assert np.all(np.diff(t, axis=1) > 0)


def test_inverse_stratified_is_uniform_in_inverse_depth():
    t = stratified_inverse(np.array([1.0]), 100.0, 4)
    inv = 1 / t[0]
    np.testing.assert_allclose(np.diff(inv), np.diff(inv)[0], rtol=1e-12)
    assert 1.0 < t[0, 0] and t[0, -1] < 100.0 and np.all(np.diff(t) > 0)


def test_degenerate_intervals_raise():
    with pytest.raises(DataError):
        stratified(np.array([1.0]), np.array([1.0]), 4)
    with pytest.raises(DataError):
        RayBatch(np.array([[5.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([0]))
    with pytest.raises(DataError):
        RayBatch(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([0]), near=np.array([2.0]))


def test_foreground_background_split():
    rng = np.random.default_rng(4)
    o = rng.uniform(-0.5, 0.5, (200, 3))
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rays = RayBatch(o, d, np.zeros(200, int))
    np.testing.assert_allclose(np.linalg.norm(o + rays.fg_far[:, None] * d, axis=1), 1.0, rtol=1e-12)
    t_fg = stratified(rays.near, rays.fg_far, 16, rng)
    t_bg = stratified_inverse(rays.fg_far, 100.0, 16, rng)
    fg = o[:, None] + t_fg[..., None] * d[:, None]
    bg = o[:, None] + t_bg[..., None] * d[:, None]
    assert np.all(np.linalg.norm(fg, axis=2) <= 1 + 1e-12)
    assert np.all(np.linalg.norm(bg, axis=2) >= 1 - 1e-12)
    assert np.all(t_fg.max(axis=1) <= t_bg.min(axis=1))
    assert np.all(sphere_exit(o, d) > 0)


def test_deltas_end_at_far():
    t = np.array([[0.1, 0.4, 0.5]])
    np.testing.assert_allclose(deltas(t, 1.0), [[0.3, 0.1, 0.5]])


def test_one_hot_weights_collapse_into_their_bin():
    edges = np.linspace(0.0, 1.0, 33)[None]
    for j in (0, 13, 31):
        w = np.zeros((1, 32))
        w[0, j] = 1.0
        s = sample_pdf(edges, w, 200, None, eps=0.0)
        assert np.all((s >= edges[0, j]) & (s <= edges[0, j + 1]))
        s = sample_pdf(edges, w, 200, np.random.default_rng(j), eps=0.0)
        assert np.all((s >= edges[0, j]) & (s <= edges[0, j + 1]))


def test_uniform_weights_give_uniform_samples():
    rng = np.random.default_rng(5)
    edges = np.linspace(0.0, 1.0, 17)[None]
    s = sample_pdf(edges, np.ones((1, 16)), 10000, rng)
    assert stats.kstest(s[0], "uniform").statistic < 0.05
    # many rays, a few samples each
    s = sample_pdf(np.repeat(edges, 2500, axis=0), np.ones((2500, 16)), 4, rng)
    assert stats.kstest(s.ravel(), "uniform").statistic < 0.05


def test_sample_pdf_follows_a_skewed_histogram():
    rng = np.random.default_rng(6)
    edges = np.linspace(0.0, 1.0, 5)[None]
    w = np.array([[1.0, 2.0, 3.0, 4.0]])
    s = sample_pdf(edges, w, 10000, rng, eps=0.0)[0]
    # piecewise-constant density with cumulative masses .1 .3 .6 1.0
    cdf_pts = np.concatenate([[0], np.cumsum(w[0]) / w.sum()])

    def cdf(x):
        return np.interp(x, edges[0], cdf_pts)

    assert stats.kstest(s, cdf).statistic < 0.05


def test_importance_fine_in_inverse_depth():
    rng = np.random.default_rng(7)
    t = stratified_inverse(np.array([1.0] * 3), 100.0, 8)
    fine = importance_fine(t, 100.0, np.ones((3, 8)), 2000, rng, inverse=True)
    assert fine.shape == (3, 2008) and np.all(np.diff(fine, axis=1) >= 0)
    for c in t[0]:
        assert c in fine[0]
    extra = np.setdiff1d(fine[0], t[0])
    # equal mass per bin, uniform in inverse depth inside each bin
    inv_edges = np.concatenate([[0.01], 1 / t[0][::-1]])
    mass = np.linspace(0.0, 1.0, 9)

    def cdf(x):
        return np.interp(x, inv_edges, mass)

    assert stats.kstest(1 / extra, cdf).statistic < 0.05


# -- compositing -----------------------------------------------------------------------


def test_vacuum():
    res = composite(np.zeros((2, 5)), np.full((2, 5, 3), 0.7), np.full((2, 5), 0.2), background_color=(0.1, 0.2, 0.3))
    np.testing.assert_array_equal(res.weights, 0)
    np.testing.assert_array_equal(res.final_transmittance, 1)
    np.testing.assert_allclose(res.color, [[0.1, 0.2, 0.3]] * 2)
    assert not composite(np.zeros((1, 3)), np.ones((1, 3, 3)), np.ones((1, 3))).color.any()


def test_opaque_sample_saturates():
    sigma = np.zeros((1, 9))
    sigma[0, 4] = 200.0
    rgb = np.random.default_rng(8).random((1, 9, 3))
    res = composite(sigma, rgb, np.full((1, 9), 0.1))
    np.testing.assert_allclose(res.color[0], rgb[0, 4], atol=1e-8)
    assert np.all(res.weights[0, 5:] < 1e-8)


def homogeneous_error(n, ramp):
    sigma = 2.0
    t = stratified(0.0, 1.0, n)
    rgb = np.repeat((t if ramp else np.full_like(t, 0.6))[..., None], 3, axis=2)
    res = composite(np.full((1, n), sigma), rgb, deltas(t, 1.0), t=t)
    exact = (1 - np.exp(-sigma) * (1 + sigma)) / sigma if ramp else 0.6 * (1 - np.exp(-sigma))
    return abs(res.color[0, 0] - exact)


@pytest.mark.parametrize("ramp", [False, True])
def test_homogeneous_medium_converges(ramp):
    errs = [homogeneous_error(n, ramp) for n in (8, 16, 32, 64, 128, 256, 512)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 12), elements=st.floats(0, 1e4)), arrays(np.float64, (4, 12), elements=st.floats(1e-6, 10)))
def test_weights_conserve_and_stay_in_range(sigma, delta):
    res = composite(sigma, np.full((4, 12, 3), 0.5), delta)
    assert np.all((res.weights >= 0) & (res.weights <= 1))
    np.testing.assert_allclose(res.weights.sum(axis=1) + res.final_transmittance, 1.0, atol=1e-6)
    assert np.all(res.weights.sum(axis=1) <= 1 + 1e-5)


def test_composite_backward_against_finite_differences():
    rng = np.random.default_rng(9)
    sigma = rng.uniform(0, 3, (3, 7))
    rgb = rng.random((3, 7, 3))
    delta = rng.uniform(0.05, 0.3, (3, 7))
    dcolor = rng.normal(size=(3, 3))
    bg = (0.3, 0.1, 0.8)

    def f(s, c):
        return float((composite(s, c, delta, background_color=bg).color * dcolor).sum())

    ds, dc = composite_backward(composite(sigma, rgb, delta, background_color=bg), dcolor)
    h = 1e-6
    for idx in np.ndindex(sigma.shape):
        up, down = sigma.copy(), sigma.copy()
        up[idx] += h
        down[idx] -= h
        assert ds[idx] == pytest.approx((f(up, rgb) - f(down, rgb)) / (2 * h), rel=1e-6, abs=1e-9)
    for idx in list(np.ndindex(rgb.shape))[::5]:
        up, down = rgb.copy(), rgb.copy()
        up[idx] += h
        down[idx] -= h
        assert dc[idx] == pytest.approx((f(sigma, up) - f(sigma, down)) / (2 * h), rel=1e-6, abs=1e-9)


def test_depth_is_weighted_mean_distance():
    t = np.array([[1.0, 2.0, 3.0]])
    res = composite(np.array([[0.0, 100.0, 0.0]]), None, np.ones((1, 3)), t=t)
    assert res.depth[0] == pytest.approx(2.0)
    assert res.opacity[0] == pytest.approx(1.0)


# -- losses ------------------------------------------------------------------------------


def test_loss_examples():
    gt = np.random.default_rng(10).random((5, 3))
    dec = GateDecision.from_probs(np.random.default_rng(11).dirichlet(np.ones(4), 50))
    l_o, l_r, l_b = losses(gt.copy(), gt, dec, 5e-4)
    assert l_r == 0.0 and l_o == 5e-4 * l_b and l_b == balance_loss(dec)
    l_o, l_r, _ = losses(np.array([[0.6, 0.2, 0.2]]), np.array([[0.5, 0.2, 0.2]]))
    assert l_r == pytest.approx(0.01, abs=1e-15) and l_o == l_r


def test_loss_matches_direct_recomputation():
    rng = np.random.default_rng(12)
    for _ in range(20):
        R = int(rng.integers(1, 500))
        pred, gt = rng.random((R, 3)), rng.random((R, 3))
        direct = sum(sum((pred[r, c] - gt[r, c]) ** 2 for c in range(3)) for r in range(R)) / R
        l_r, grad = rendering_loss(pred, gt)
        assert l_r == pytest.approx(direct, abs=1e-9)
        np.testing.assert_allclose(grad, 2 * (pred - gt) / R)


# -- image output -----------------------------------------------------------------------


def test_raw_round_trip(tmp_path):
    img = np.random.default_rng(13).random((5, 7, 3)).astype(np.float32)
    write_raw(tmp_path / "a.raw", img)
    np.testing.assert_array_equal(read_raw(tmp_path / "a.raw"), img)
    (tmp_path / "b.raw").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_raw(tmp_path / "b.raw")


def test_png_quantizes_to_eight_bits(tmp_path):
    from PIL import Image

    img = np.random.default_rng(14).random((4, 6, 3))
    write_png(tmp_path / "a.png", img)
    back = np.asarray(Image.open(tmp_path / "a.png"), np.float64) / 255
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
