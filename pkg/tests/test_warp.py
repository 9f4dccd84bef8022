import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltamri.warp import (
    InversionError, RigidParams, invert_map, pull, rotation_derivatives, rotation_matrix,
    sample_points, warp_adjoint, warp_apply, warp_jacobian_rigid, warp_jacobian_v,
)
from oracles import central_difference, rotation, warp_matrix


def random_params(rng, rank, angle=0.2, shift=1.5):
    k = 1 if rank == 2 else 3
    return RigidParams(rng.uniform(-angle, angle, k), rng.uniform(-shift, shift, rank))


def smooth_image(shape):
    g = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    return np.exp(-2 * sum((x - 0.1 * i) ** 2 for i, x in enumerate(g))) + 0.2 * g[0]


def off_boundary(pts, margin=0.05):
    frac = pts - np.floor(pts)
    return np.all((frac > margin) & (frac < 1 - margin), axis=1)


@pytest.mark.parametrize("shape", [(5, 5), (4, 3, 5)])
def test_matches_loop_oracle(shape, rng):
    p = random_params(rng, len(shape))
    v = rng.normal(scale=0.4, size=shape + (len(shape),))
    M = warp_matrix(shape, p.theta, p.t, v)
    cols = np.stack([warp_apply(e.reshape(shape), p, v).ravel()
                     for e in np.eye(M.shape[0])], axis=1)
    np.testing.assert_allclose(cols, M, atol=1e-12)


def test_dense_adjoint_is_transpose(rng):
    shape = (5, 5)
    p = random_params(rng, 2)
    v = rng.normal(scale=0.5, size=shape + (2,))
    n = 25
    fwd = np.stack([warp_apply(e.reshape(shape), p, v).ravel() for e in np.eye(n)], axis=1)
    adj = np.stack([warp_adjoint(e.reshape(shape), p, v).ravel() for e in np.eye(n)], axis=1)
    assert np.abs(fwd - adj.T).max() <= 1e-10


@given(st.sampled_from([(7, 6), (4, 5, 3)]), st.integers(0, 2**31))
def test_adjoint_identity(shape, seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, len(shape), shift=3)
    v = rng.normal(scale=1.0, size=shape + (len(shape),))
    r = rng.normal(size=shape)
    g = rng.normal(size=shape)
    lhs = np.vdot(warp_apply(r, p, v), g)
    rhs = np.vdot(r, warp_adjoint(g, p, v))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_identity_is_exact(rng):
    r = rng.random((6, 5, 4))
    assert np.array_equal(warp_apply(r, RigidParams.zeros(3)), r)
    assert np.array_equal(pull(r, np.zeros(r.shape + (3,))), r)


def test_integer_translation_shifts(rng):
    r = rng.random((6, 7))
    out = warp_apply(r, RigidParams([0.0], [2.0, -1.0]))
    np.testing.assert_allclose(out[2:, :-1], r[:-2, 1:], atol=1e-14)
    assert np.all(out[:2] == 0) and np.all(out[:, -1] == 0)


def test_displacement_field_matches_translation(rng):
    r = rng.random((6, 5, 4))
    t = np.array([0.3, -0.7, 1.2])
    a = warp_apply(r, RigidParams(np.zeros(3), t))
    b = warp_apply(r, RigidParams.zeros(3), np.broadcast_to(-t, r.shape + (3,)))
    np.testing.assert_allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("angle", [0.1, 0.25])
def test_rotating_symmetric_blob_about_center(angle):
    n = 41
    y, x = np.mgrid[:n, :n] - (n - 1) / 2
    blob = np.exp(-(x ** 2 + y ** 2) / 60)
    out = warp_apply(blob, RigidParams([angle], [0.0, 0.0]))
    assert np.abs(out - blob).max() < 1e-2


def test_rotation_convention():
    th = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(rotation_matrix(th), rotation(th), atol=1e-15)
    np.testing.assert_allclose(rotation_matrix([0.4]), rotation([0.4]), atol=1e-15)
    h = 1e-6
    for k, dR in enumerate(rotation_derivatives(th)):
        e = np.zeros(3)
        e[k] = h
        fd = (rotation_matrix(th + e) - rotation_matrix(th - e)) / (2 * h)
        np.testing.assert_allclose(dR, fd, atol=1e-9)


@pytest.mark.parametrize("shape", [(16, 16), (9, 8, 7)])
def test_field_jacobian_finite_differences(shape, rng):
    rank = len(shape)
    r = smooth_image(shape)
    p = random_params(rng, rank)
    v = rng.normal(scale=0.3, size=shape + (rank,))
    g = rng.normal(size=shape)
    grad = warp_jacobian_v(r, p, v, g)
    ok = np.flatnonzero(off_boundary(sample_points(shape, p, v)))
    f = lambda vv: float(np.vdot(warp_apply(r, p, vv.reshape(v.shape)), g))
    for i in rng.choice(ok, 20, replace=False):
        for a in range(rank):
            idx = np.unravel_index(i, shape) + (a,)
            fd = central_difference(f, v, idx, 1e-6)
            assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), 1e-3 * np.abs(grad).max())


@pytest.mark.parametrize("shape", [(16, 16), (9, 8, 7)])
def test_rigid_jacobian_finite_differences(shape, rng):
    rank = len(shape)
    r = smooth_image(shape)
    p = random_params(rng, rank)
    v = rng.normal(scale=0.3, size=shape + (rank,))
    g = rng.normal(size=shape)
    gth, gt = warp_jacobian_rigid(r, p, v, g)
    grad = np.concatenate([gth, gt])
    x0 = p.as_vector()
    f = lambda x: float(np.vdot(warp_apply(r, RigidParams.from_vector(x, rank), v), g))
    for k in range(x0.size):
        fd = central_difference(f, x0, k, 1e-7)
        assert abs(fd - grad[k]) <= 1e-4 * max(abs(fd), 1e-3 * np.abs(grad).max())


def test_invert_translation_gives_plus_t():
    t = np.array([1.5, -0.5, 0.25])
    u, res = invert_map(RigidParams(np.zeros(3), t), shape=(6, 6, 6))
    np.testing.assert_allclose(u, np.broadcast_to(t, u.shape), atol=1e-12)
    assert res < 1e-12


def test_invert_map_undoes_warp():
    shape = (40, 36)
    r = smooth_image(shape)
    y, x = np.mgrid[:40, :36]
    bump = np.exp(-((y - 20) ** 2 + (x - 18) ** 2) / 50)
    v = np.stack([bump, 0.5 * bump], axis=-1)
    p = RigidParams([0.05], [0.8, -0.6])
    u, res = invert_map(p, v)
    assert res < 1e-3
    back = warp_apply(pull(r, u), p, v)
    inner = (slice(5, -5), slice(5, -5))
    assert np.abs(back - r)[inner].max() < 2e-2


def test_invert_map_detects_divergence():
    y, x = np.mgrid[:20, :20]
    steep = 6 * np.exp(-((y - 10) ** 2 + (x - 10) ** 2) / 2)
    v = np.stack([steep, steep], axis=-1)
    with pytest.raises(InversionError):
        invert_map(RigidParams.zeros(2), v, iters=30)


def test_rigid_params_validation():
    with pytest.raises(ValueError):
        RigidParams([0.1, 0.2], [0, 0, 0])
    with pytest.raises(ValueError):
        RigidParams([0.1], [0, 0], lower=np.ones(3), upper=-np.ones(3))
    p = RigidParams([0.1, 0.2, 0.3], [1, 2, 3])
    assert RigidParams.from_dict(p.to_dict()).as_vector().tolist() == p.as_vector().tolist()
    assert not RigidParams([0.5], [0, 0]).within_bounds()
    assert RigidParams([0.5], [0, 0]).clipped().theta[0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        warp_apply(np.zeros((4, 4)), p)


def test_linear_in_image(rng):
    p = random_params(rng, 3)
    v = rng.normal(scale=0.5, size=(6, 5, 4, 3))
    a, b = rng.normal(size=(6, 5, 4)), rng.normal(size=(6, 5, 4))
    lhs = warp_apply(2 * a - 3 * b, p, v)
    np.testing.assert_allclose(lhs, 2 * warp_apply(a, p, v) - 3 * warp_apply(b, p, v),
                               atol=1e-12)


def test_constant_image_has_zero_rigid_gradient(rng):
    # sample points of interior voxels stay inside the grid, where the slope is 0
    r = np.full((8, 8, 8), 2.0)
    g = np.zeros(r.shape)
    g[2:-2, 2:-2, 2:-2] = rng.normal(size=(4, 4, 4))
    gth, gt = warp_jacobian_rigid(r, RigidParams([0.05, -0.02, 0.01], [0.3, 0.2, 0.1]), None, g)
    assert np.abs(gth).max() < 1e-12 and np.abs(gt).max() < 1e-12


def test_symmetric_blob_has_no_rotation_gradient():
    n = 21
    g = np.mgrid[:n, :n, :n] - (n - 1) / 2
    blob = np.exp(-np.sum(g ** 2, axis=0) / 20)
    gth, _ = warp_jacobian_rigid(blob, RigidParams.zeros(3), None, blob)
    assert np.abs(gth).max() < 1e-10
