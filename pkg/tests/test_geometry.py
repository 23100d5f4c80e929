import math

import numpy as np
import pytest
import torch

from dalf.errors import FormatError
from dalf.geometry import (FlowField, Homography, TpsParams, bilinear_sample,
                           compose_synthetic_flow, control_point_grid, decode_flow, encode_flow,
                           make_polar_grid, normalized_to_pixel, pixel_to_normalized, tps_kernel,
                           tps_transform, tps_warp_points, transfer_points, warp_points)


def central_diff(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numerical Jacobian of a scalar function by central differences."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        g.reshape(-1)[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h)
    return g


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# -- kernel ---------------------------------------------------------------------

def test_kernel_examples():
    assert tps_kernel(0.0) == 0.0
    assert tps_kernel(1.0) == 0.0
    assert tps_kernel(4.0) == pytest.approx(4 * math.log(2), abs=1e-12)
    assert tps_kernel(4.0) == pytest.approx(2.77259, abs=1e-5)


def test_kernel_negative_raises():
    with pytest.raises(ValueError):
        tps_kernel(-1e-3)
    with pytest.raises(ValueError):
        tps_kernel(torch.tensor([0.5, -1.0]))


def test_kernel_continuity_and_monotone():
    s = np.logspace(-12, -3, 20)
    assert np.all(np.abs(tps_kernel(s)) < 1e-2)
    big = np.linspace(1.0, 50.0, 200)
    assert np.all(np.diff(tps_kernel(big)) > 0)


def test_kernel_tensor_grad_finite_at_zero():
    s = torch.tensor([0.0, 0.5, 2.0], dtype=torch.float64, requires_grad=True)
    tps_kernel(s).sum().backward()
    assert torch.all(torch.isfinite(s.grad))


# -- TPS --------------------------------------------------------------------------

def test_tps_identity_example():
    ctrl = control_point_grid(8)
    p = tps_transform(TpsParams.identity(ctrl), torch.tensor([0.3, -0.7], dtype=torch.float64))
    assert p.tolist() == [0.3, -0.7]


def test_tps_identity_exact_everywhere():
    ctrl = control_point_grid(8)
    q = torch.rand(500, 2, dtype=torch.float64) * 4 - 2
    assert torch.equal(tps_transform(TpsParams.identity(ctrl), q), q)


def test_tps_single_control_point_examples():
    eye = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64)
    c = torch.zeros(1, 2, dtype=torch.float64)
    p0 = tps_transform(TpsParams(eye, torch.tensor([[0.1, 0.0]], dtype=torch.float64), c),
                       torch.tensor([0.0, 0.0], dtype=torch.float64))
    assert p0.tolist() == [0.0, 0.0]
    p = tps_transform(TpsParams(eye, torch.tensor([[0.5, 0.0]], dtype=torch.float64), c),
                      torch.tensor([2.0, 0.0], dtype=torch.float64))
    assert p[0].item() == pytest.approx(2 + 0.5 * 4 * math.log(2), abs=1e-12)
    assert p[0].item() == pytest.approx(3.38629, abs=1e-5)
    assert p[1].item() == 0.0


def test_tps_fit_interpolates():
    ctrl = control_point_grid(4).numpy()
    rng = np.random.default_rng(0)
    tgt = ctrl + rng.normal(0, 0.05, ctrl.shape)
    params = TpsParams.fit(ctrl, tgt)
    out = tps_transform(params, torch.from_numpy(ctrl)).numpy()
    np.testing.assert_allclose(out, tgt, atol=1e-10)


def test_tps_params_validation():
    with pytest.raises(ValueError):
        TpsParams(torch.zeros(2, 3), torch.zeros(4, 2), torch.zeros(5, 2))
    with pytest.raises(ValueError):
        TpsParams(torch.zeros(3, 3), torch.zeros(4, 2), torch.zeros(4, 2))


def test_tps_gradients_match_finite_differences():
    """Analytic gradients w.r.t. affine, weights and q; 100 random instances."""
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        ctrl = rng.uniform(-1, 1, (n, 2))
        aff = np.array([[1.0, 0, 0], [0, 1.0, 0]]) + rng.normal(0, 0.2, (2, 3))
        wts = rng.normal(0, 0.3, (n, 2))
        while True:
            q = rng.uniform(-1.2, 1.2, (3, 2))
            if np.min(np.linalg.norm(q[:, None] - ctrl[None], axis=-1)) > 0.05:
                break
        proj = rng.normal(size=(3, 2))

        def f_np(a, w, qq):
            with torch.no_grad():
                out = tps_warp_points(torch.from_numpy(a), torch.from_numpy(w),
                                      torch.from_numpy(ctrl), torch.from_numpy(qq))
            return float((out.numpy() * proj).sum())

        ta, tw, tq = (torch.tensor(v, requires_grad=True) for v in (aff, wts, q))
        out = tps_warp_points(ta, tw, torch.from_numpy(ctrl), tq)
        (out * torch.from_numpy(proj)).sum().backward()
        worst = max(worst,
                    rel_err(ta.grad.numpy(), central_diff(lambda a: f_np(a, wts, q), aff)),
                    rel_err(tw.grad.numpy(), central_diff(lambda w: f_np(aff, w, q), wts)),
                    rel_err(tq.grad.numpy(), central_diff(lambda qq: f_np(aff, wts, qq), q)))
    assert worst < 1e-4


# -- homography / normalization ------------------------------------------------------

def test_homography_normalized_and_degenerate():
    h = Homography(np.diag([2.0, 2.0, 2.0]))
    assert h.matrix[2, 2] == 1.0
    with pytest.raises(ValueError):
        Homography(np.zeros((3, 3)))


def test_normalization_round_trip():
    pts = np.random.default_rng(0).uniform(0, 100, (50, 2))
    back = normalized_to_pixel(pixel_to_normalized(pts, (64, 128)), (64, 128))
    np.testing.assert_allclose(back, pts, atol=1e-12)
    np.testing.assert_allclose(pixel_to_normalized([[0, 0], [127, 63]], (64, 128)),
                               [[-1, -1], [1, 1]])


# -- polar grid ------------------------------------------------------------------------

def test_polar_grid_small():
    g = make_polar_grid(2, 4, 1.0)
    assert g.coords.shape == (2, 4, 2)
    np.testing.assert_allclose(g.radii.numpy(), [0.5, 1.0])
    np.testing.assert_allclose(g.coords[1].numpy(), [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-12)


def test_polar_grid_rotation_is_cyclic_shift():
    g = make_polar_grid(8, 16, 1.0)
    t = 2 * math.pi / 16
    rot = torch.tensor([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]],
                       dtype=torch.float64)
    rotated = g.coords @ rot.T
    np.testing.assert_allclose(rotated.numpy(), torch.roll(g.coords, -1, dims=1).numpy(),
                               atol=1e-12)


def test_polar_grid_bounds_and_order():
    g = make_polar_grid(8, 16, 0.7)
    assert float(g.coords.norm(dim=-1).max()) <= 0.7 + 1e-12
    assert torch.all(torch.diff(g.radii) > 0)
    with pytest.raises(ValueError):
        make_polar_grid(1, 16, 1.0)


# -- bilinear sampling -------------------------------------------------------------------

def test_bilinear_lattice_and_midpoint():
    img = torch.arange(80, dtype=torch.float64).reshape(8, 10)
    vals, inside = bilinear_sample(img, torch.tensor([[3.0, 5.0]], dtype=torch.float64))
    assert vals[0, 0].item() == img[5, 3].item() and inside.all()
    block = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)
    v, _ = bilinear_sample(block, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert v.item() == 1.5


def test_bilinear_reproduces_all_lattice_points():
    img = torch.rand(7, 9, 3, dtype=torch.float64)
    ys, xs = torch.meshgrid(torch.arange(7.0), torch.arange(9.0), indexing="ij")
    coords = torch.stack([xs, ys], -1).double()
    vals, inside = bilinear_sample(img, coords)
    assert torch.equal(vals, img) and inside.all()


def test_bilinear_out_of_bounds():
    img = torch.ones(4, 4, dtype=torch.float64)
    vals, inside = bilinear_sample(img, torch.tensor([[-0.5, 1.0], [3.5, 1.0], [1.0, 1.0]],
                                                     dtype=torch.float64))
    assert inside.tolist() == [False, False, True]
    assert vals[:2].abs().sum() == 0


def test_bilinear_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        h, w, c = rng.integers(3, 8), rng.integers(3, 8), rng.integers(1, 3)
        img = rng.normal(size=(h, w, c))
        base = np.stack([rng.integers(0, w - 1, 4), rng.integers(0, h - 1, 4)], -1)
        coords = base + rng.uniform(0.05, 0.95, (4, 2))  # away from cell edges
        proj = rng.normal(size=(4, c))

        def f_np(im, co):
            with torch.no_grad():
                v, _ = bilinear_sample(torch.from_numpy(im), torch.from_numpy(co))
            return float((v.numpy() * proj).sum())

        ti, tc = torch.tensor(img, requires_grad=True), torch.tensor(coords, requires_grad=True)
        v, _ = bilinear_sample(ti, tc)
        (v * torch.from_numpy(proj)).sum().backward()
        worst = max(worst,
                    rel_err(tc.grad.numpy(), central_diff(lambda co: f_np(img, co), coords)),
                    rel_err(ti.grad.numpy(), central_diff(lambda im: f_np(im, coords), img)))
    assert worst < 1e-4


# -- flow -----------------------------------------------------------------------------------

def test_identity_flow():
    f = compose_synthetic_flow(Homography.identity(), TpsParams.identity(control_point_grid(4)),
                               (20, 30))
    assert f.valid.all()
    np.testing.assert_allclose(f.map, FlowField.identity(20, 30).map, atol=1e-12)


def test_translation_flow():
    h = Homography.from_pixel(np.array([[1, 0, 10.0], [0, 1, 0], [0, 0, 1]]), (32, 32))
    f = compose_synthetic_flow(h, None, (32, 32))
    ys, xs = np.mgrid[0:32, 0:32]
    np.testing.assert_allclose(f.map[..., 0], xs + 10, atol=1e-9)
    np.testing.assert_allclose(f.map[..., 1], ys, atol=1e-9)
    assert not f.valid[:, 22:].any() and f.valid[:, :22].all()
    mapped, ok = transfer_points(f, [[2.0, 2.0]])
    np.testing.assert_allclose(mapped[0], [12, 2], atol=1e-9)
    assert ok[0]


def _composite_oracle(hm, aff, wts, ctrl, pts, size):
    """Independent evaluation of 'homography then TPS' in normalized coordinates."""
    h, w = size
    q = np.stack([2 * pts[:, 0] / (w - 1) - 1, 2 * pts[:, 1] / (h - 1) - 1], 1)
    hom = np.c_[q, np.ones(len(q))] @ hm.T
    q = hom[:, :2] / hom[:, 2:]
    out = q @ aff[:, :2].T + aff[:, 2]
    for c, wk in zip(ctrl, wts):
        r2 = ((q - c) ** 2).sum(1)
        rho = np.where(r2 > 0, 0.5 * r2 * np.log(np.where(r2 > 0, r2, 1)), 0)
        out += rho[:, None] * wk
    return np.stack([(out[:, 0] + 1) * (w - 1) / 2, (out[:, 1] + 1) * (h - 1) / 2], 1)


def test_composite_flow_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    size = (48, 64)
    hm = np.eye(3) + rng.normal(0, 0.03, (3, 3))
    ctrl = control_point_grid(4).numpy()
    aff = np.array([[1.0, 0, 0], [0, 1.0, 0]]) + rng.normal(0, 0.02, (2, 3))
    wts = rng.normal(0, 0.02, ctrl.shape)
    flow = compose_synthetic_flow(Homography(hm), TpsParams(aff, wts, ctrl), size)
    # probe pixels: exact equality of the map
    probe = np.array([[5, 7], [30, 20], [63, 47]])
    direct = _composite_oracle(Homography(hm).matrix, aff, wts, ctrl, probe.astype(float), size)
    np.testing.assert_allclose(flow.map[probe[:, 1], probe[:, 0]], direct, atol=1e-9)
    # lattice probes through transfer_points
    ys, xs = np.mgrid[0:48:3, 0:64:3]
    pts = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
    mapped, ok = transfer_points(flow, pts)
    ref = _composite_oracle(Homography(hm).matrix, aff, wts, ctrl, pts, size)
    assert np.max(np.abs(mapped[ok] - ref[ok])) < 1e-6
    mapped2, _ = warp_points(Homography(hm), TpsParams(aff, wts, ctrl), pts, size)
    np.testing.assert_allclose(mapped2, ref, atol=1e-9)


def test_transfer_points_examples():
    f = FlowField.identity(16, 16)
    m, ok = transfer_points(f, [[4.5, 7.25]])
    np.testing.assert_allclose(m[0], [4.5, 7.25])
    assert ok[0]
    f.valid[7:9, 4:6] = False
    _, ok = transfer_points(f, [[4.5, 7.25], [20.0, 1.0], [1.0, 1.0]])
    assert ok.tolist() == [False, False, True]


def test_flow_file_round_trip_and_errors(tmp_path):
    f = FlowField.identity(5, 7)
    f.valid[2, 3] = False
    data = encode_flow(f)
    assert data[:8] == b"DALFFLOW" and len(data) == 17 + 5 * 7 * 8 + 35
    g = decode_flow(data)
    np.testing.assert_array_equal(g.map, f.map)
    np.testing.assert_array_equal(g.valid, f.valid)
    with pytest.raises(FormatError) as e:
        decode_flow(data[:-3])
    assert e.value.offset is not None
    with pytest.raises(FormatError):
        decode_flow(b"XXXXXXXX" + data[8:])
    bad = bytearray(data)
    bad[8] = 2
    with pytest.raises(FormatError):
        decode_flow(bytes(bad))
