import math

import numpy as np
import pytest

from tubekit import (Mask3, NumericDomainError, ParameterError, PhantomSpec,
                     RoiBox, Volume3, make_phantom, roi_from_label)
from tubekit.losses import (DEFAULT_EPSILON, GatedKernelParams, LossBreakdown,
                            RelaxedSupConfig, loss_con, loss_con_array,
                            loss_con_signature, loss_gsb, loss_mix,
                            loss_mix_array, loss_r_sup, loss_r_sup_array,
                            loss_spatial, loss_spatial_array, mix_inputs,
                            resolve_beta, uncertain_prediction,
                            uncertain_prediction_array)
from tubekit.skeleton import SoftSkeletonParams

from oracles import central_difference, spatial_pair_sum_bruteforce


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float32)
    return Volume3(data.shape, spacing, data)


def _mask(data):
    return Mask3(np.asarray(data).shape, np.asarray(data, dtype=np.uint8))


def _rand_setup(seed, n=6):
    rng = np.random.default_rng(seed)
    yhat = 0.1 + 0.8 * rng.random((n, n, n))
    y = (rng.random((n, n, n)) < 0.25).astype(np.float64)
    if y.sum() < 1:
        y[0, 0, 0] = 1.0
    roi = np.zeros((n, n, n), dtype=bool)
    roi[1:-1, 1:-1, 1:-1] = True
    return rng, yhat, y, roi


# ---------------------------------------------------------------------------
# uncertain prediction / beta
# ---------------------------------------------------------------------------

def test_uncertain_prediction_identity_on_certain_voxels():
    rng = np.random.default_rng(1)
    yhat = rng.random((6, 6, 6))
    y = np.ones((6, 6, 6))
    roi = np.ones((6, 6, 6), dtype=bool)
    yp, w = uncertain_prediction_array(y, yhat, roi, beta=0.3)
    assert np.array_equal(yp, yhat)
    assert np.array_equal(w, np.ones_like(w))


def test_uncertain_prediction_beta_scalar_example():
    # sum(y)=100, sum(y^c)=10000 -> beta = 1/ln(100)
    dims = (101, 10, 10)
    y = np.zeros(dims)
    y.ravel()[:100] = 1.0
    beta = resolve_beta(y, RelaxedSupConfig())
    assert abs(beta - 0.21714724) <= 1e-6
    yhat = np.ones(dims)
    roi = np.ones(dims, dtype=bool)
    yp, _ = uncertain_prediction_array(y, yhat, roi, beta)
    uncertain_voxel = yp[y == 0.0]
    assert np.abs(uncertain_voxel - beta).max() <= 1e-12


def test_uncertain_prediction_outside_roi_passthrough():
    rng = np.random.default_rng(2)
    yhat = rng.random((5, 5, 5))
    y = np.zeros((5, 5, 5))
    y[2, 2, 2] = 1.0
    roi = np.zeros((5, 5, 5), dtype=bool)
    roi[2:4, 2:4, 2:4] = True
    yp, _ = uncertain_prediction_array(y, yhat, roi, beta=0.5)
    outside_negative = (~roi) & (y == 0.0)
    assert np.array_equal(yp[outside_negative], yhat[outside_negative])


def test_auto_beta_undefined_cases():
    y = np.ones((4, 4, 4))
    with pytest.raises(NumericDomainError, match="beta undefined"):
        resolve_beta(y, RelaxedSupConfig())
    with pytest.raises(NumericDomainError):
        resolve_beta(np.zeros((4, 4, 4)), RelaxedSupConfig())


def test_uncertain_prediction_wrapper_validates():
    y = _mask(np.ones((4, 4, 4)))
    bad = _vol(np.full((4, 4, 4), 1.5))
    with pytest.raises(ParameterError):
        uncertain_prediction(y, bad, RoiBox((0, 0, 0), (3, 3, 3)))


# ---------------------------------------------------------------------------
# relaxed supervision loss
# ---------------------------------------------------------------------------

def test_r_sup_perfect_prediction_dice_is_half():
    _, _, y, _ = _rand_setup(3)
    roi = np.ones(y.shape, dtype=bool)
    beta = resolve_beta(y, RelaxedSupConfig())
    value, _ = loss_r_sup_array(y, y.copy(), roi, beta)
    s = y.sum()
    expected_dice = -s / (2 * s + DEFAULT_EPSILON)
    # CE term at yhat = y is -log(1+eps) ~ 0 on positives
    assert abs(value - expected_dice) <= 1e-6


def test_r_sup_zero_prediction_limits():
    _, _, y, roi = _rand_setup(4)
    beta = resolve_beta(y, RelaxedSupConfig())
    value, _ = loss_r_sup_array(y, np.zeros_like(y), roi, beta)
    expected_ce = -(y * math.log(DEFAULT_EPSILON)).sum() / y.size
    assert abs(value - expected_ce) <= 1e-9  # dice term is exactly 0


def test_r_sup_gradient_matches_fd():
    rng, yhat, y, roi = _rand_setup(5)
    beta = resolve_beta(y, RelaxedSupConfig())
    _, grad = loss_r_sup_array(y, yhat, roi, beta)
    worst = 0.0
    for _ in range(50):
        v = tuple(rng.integers(0, 6, 3))
        fd = central_difference(
            lambda x: loss_r_sup_array(y, x, roi, beta)[0], yhat, v)
        worst = max(worst, abs(grad[v] - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# connectivity loss
# ---------------------------------------------------------------------------

def _tube_pred(gap_voxels=0):
    dims = (17, 17, 17)
    spec = PhantomSpec("gapped_cylinder" if gap_voxels else "cylinder",
                       radius_mm=1.5, gap_len_voxels=gap_voxels)
    _, label = make_phantom(spec, dims)
    return label.data.astype(np.float64)


def test_con_connected_unit_skeleton_is_near_zero():
    pred = _tube_pred()
    value, grad = loss_con_array(pred, iterations=4)
    assert abs(value) <= 1e-6
    assert grad.shape == pred.shape


def test_con_empty_skeleton_returns_zero():
    value, grad = loss_con_array(np.full((8, 8, 8), 0.2), iterations=3)
    assert value == 0.0
    assert not grad.any()


def test_con_gap_penalized_and_fill_decreases():
    gapped = _tube_pred(gap_voxels=1) * 0.9
    before, _ = loss_con_array(gapped, iterations=4)
    assert before > 0.0
    filled = gapped.copy()
    z0 = (17 - 1) // 2
    solid = _tube_pred() > 0
    filled[:, :, z0][solid[:, :, z0]] = 0.9
    after, _ = loss_con_array(filled, iterations=4)
    assert after < before


def test_con_gradient_matches_fd_at_tie_free_voxels():
    rng = np.random.default_rng(6)
    size, iters, h = 8, 3, 1e-3
    lab = _tube_pred()[:size, :size, :size]
    jitter = rng.uniform(-0.02, 0.02, (size, size, size))
    pred = np.clip(0.12 + 0.78 * lab + jitter, 0.1, 0.9)
    value, grad = loss_con_array(pred, iterations=iters)
    sig0 = loss_con_signature(pred, iterations=iters)
    live = np.argsort(-np.abs(grad), axis=None)[:40]
    checked = 0
    worst = 0.0
    for flat in live:
        v = tuple(int(c) for c in np.unravel_index(flat, pred.shape))
        xp = pred.copy()
        xp[v] += h
        xm = pred.copy()
        xm[v] -= h
        if (loss_con_signature(xp, iterations=iters) != sig0
                or loss_con_signature(xm, iterations=iters) != sig0):
            continue
        fd = central_difference(lambda x: loss_con_array(x, iterations=iters)[0],
                                pred, v, h)
        worst = max(worst, abs(grad[v] - fd) / max(abs(fd), 1e-8))
        checked += 1
        if checked >= 20:
            break
    assert checked >= 10
    assert worst <= 1e-3


def test_con_drawn_only_support_mode():
    gapped = _tube_pred(gap_voxels=1) * 0.9
    v_all, _ = loss_con_array(gapped, iterations=4, support="reconnected")
    v_drawn, _ = loss_con_array(gapped, iterations=4, support="drawn")
    # drawn voxels have near-zero skeleton probability, so the drawn-only
    # average is the harshest penalty
    assert v_drawn >= v_all > 0.0


# ---------------------------------------------------------------------------
# spatial loss
# ---------------------------------------------------------------------------

def test_spatial_zeros_and_single_voxel():
    params = GatedKernelParams()
    z = np.zeros((6, 6, 6))
    value, grad, n = loss_spatial_array(z, z, params)
    assert value == 0.0 and not grad.any() and n == 0
    one = z.copy()
    one[3, 3, 3] = 1.0
    value, _, n = loss_spatial_array(one, z, params)
    assert value == 0.0 and n == 0


def test_spatial_two_adjacent_voxels_closed_form():
    params = GatedKernelParams(sigma_l=1.0, sigma_c=0.5, radius=2)
    yhat = np.zeros((7, 7, 7))
    yhat[3, 3, 3] = 1.0
    yhat[4, 3, 3] = 1.0
    guide = np.full((7, 7, 7), 0.25)
    value, grad, n = loss_spatial_array(yhat, guide, params)
    assert n == 2
    assert abs(value - math.exp(-0.5)) <= 1e-12
    assert abs(grad[3, 3, 3] - 2 * math.exp(-0.5) / 2) <= 1e-12


def test_spatial_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    yhat = rng.random((5, 5, 5))
    guide = rng.random((5, 5, 5))
    params = GatedKernelParams(sigma_l=1.3, sigma_c=0.4, radius=2)
    value, _, n = loss_spatial_array(yhat, guide, params)
    total, n_expected = spatial_pair_sum_bruteforce(yhat, guide, 1.3, 0.4, 2)
    assert n == n_expected
    assert abs(value - total / n_expected) <= 1e-10


def test_spatial_gradient_matches_fd():
    rng = np.random.default_rng(8)
    yhat = 0.1 + 0.8 * rng.random((6, 6, 6))
    guide = rng.random((6, 6, 6))
    params = GatedKernelParams()
    _, grad, _ = loss_spatial_array(yhat, guide, params)
    worst = 0.0
    for _ in range(50):
        v = tuple(rng.integers(0, 6, 3))
        fd = central_difference(
            lambda x: loss_spatial_array(x, guide, params)[0], yhat, v)
        worst = max(worst, abs(grad[v] - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


def test_spatial_gated_mode_gradient():
    rng = np.random.default_rng(9)
    yhat = 0.1 + 0.8 * rng.random((5, 5, 5))
    guide = rng.random((5, 5, 5))
    params = GatedKernelParams(mode="gated")
    _, grad, _ = loss_spatial_array(yhat, guide, params)
    for _ in range(20):
        v = tuple(rng.integers(0, 5, 3))
        fd = central_difference(
            lambda x: loss_spatial_array(x, guide, params)[0], yhat, v)
        assert abs(grad[v] - fd) / max(abs(fd), 1e-8) <= 1e-4


def test_spatial_shape_mismatch():
    with pytest.raises(ParameterError):
        loss_spatial_array(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)),
                           GatedKernelParams())


# ---------------------------------------------------------------------------
# mix
# ---------------------------------------------------------------------------

def test_mix_inputs_endpoints_and_blend():
    a = _vol(np.full((4, 4, 4), 4.0))
    b = _vol(np.full((4, 4, 4), 8.0))
    assert np.array_equal(mix_inputs(a, b, 1.0).x_mixed.data, a.data)
    assert np.array_equal(mix_inputs(a, b, 0.0).x_mixed.data, b.data)
    blended = mix_inputs(a, b, 0.25).x_mixed
    assert np.abs(blended.data - 7.0).max() <= 1e-6
    with pytest.raises(ParameterError):
        mix_inputs(a, b, 1.5)


def test_mix_loss_identical_and_orthogonal():
    m = np.zeros((5, 5, 5))
    m[1:3, 1:3, 1:3] = 1.0
    value, _ = loss_mix_array(m.copy(), m)
    assert abs(value + 1.0) <= 1e-12
    other = np.zeros((5, 5, 5))
    other[4, 4, 4] = 1.0
    value, _ = loss_mix_array(other, m)
    assert abs(value) <= 1e-12


def test_mix_loss_degenerate_error():
    with pytest.raises(NumericDomainError, match="degenerate cosine"):
        loss_mix_array(np.zeros((4, 4, 4)), np.ones((4, 4, 4)))


def test_mix_gradient_matches_fd():
    rng = np.random.default_rng(10)
    yhat = 0.1 + 0.8 * rng.random((6, 6, 6))
    m = (rng.random((6, 6, 6)) < 0.3).astype(np.float64)
    m[0, 0, 0] = 1.0
    _, grad = loss_mix_array(yhat, m)
    worst = 0.0
    for _ in range(50):
        v = tuple(rng.integers(0, 6, 3))
        fd = central_difference(lambda x: loss_mix_array(x, m)[0], yhat, v)
        worst = max(worst, abs(grad[v] - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


def test_mix_value_range_for_nonnegative_inputs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        yhat = rng.random((5, 5, 5)) + 1e-6
        m = rng.random((5, 5, 5)) + 1e-6
        value, _ = loss_mix_array(yhat, m)
        assert -1.0 - 1e-12 <= value <= 0.0


def test_mix_wrapper_labels():
    pred = _vol(np.full((4, 4, 4), 0.5))
    y1 = _mask(np.ones((4, 4, 4)))
    y2 = _mask(np.zeros((4, 4, 4)))
    value, grad = loss_mix(pred, y1, y2, alpha=0.5)
    assert abs(value + 1.0) <= 1e-9  # constant fields are collinear
    assert grad.dims == pred.dims


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def _fake_parts(rng, dims=(4, 4, 4)):
    def part(seed):
        g = Volume3(dims, (1, 1, 1), rng.random(dims).astype(np.float32))
        return float(rng.standard_normal()), g
    return part(0), part(1), part(2), part(3)


def test_gsb_lambda_zero_and_one():
    rng = np.random.default_rng(12)
    r_sup, con, spatial, mix = _fake_parts(rng)
    off = loss_gsb(r_sup, con, spatial, mix, 0.0)
    assert abs(off.total - (r_sup[0] + con[0])) <= 1e-12
    on = loss_gsb(r_sup, con, spatial, mix, 1.0)
    assert abs(on.total - (r_sup[0] + con[0] + spatial[0] + mix[0])) <= 1e-12
    with pytest.raises(ParameterError):
        loss_gsb(r_sup, con, spatial, mix, -0.5)


def test_gsb_linearity_over_lambda_grid():
    rng = np.random.default_rng(13)
    for _ in range(5):
        r_sup, con, spatial, mix = _fake_parts(rng)
        for lam in (0.0, 0.5, 0.75, 1.0, 1.5, 2.0):
            bd = loss_gsb(r_sup, con, spatial, mix, lam)
            lhs = bd.total - (bd.r_sup + bd.con)
            rhs = lam * (bd.spatial + bd.mix)
            assert abs(lhs - rhs) <= 1e-7 * max(1.0, abs(rhs))


def test_gsb_breakdown_total_recomputable():
    rng = np.random.default_rng(14)
    r_sup, con, spatial, mix = _fake_parts(rng)
    bd = loss_gsb(r_sup, con, spatial, mix, 1.5)
    recomputed = bd.r_sup + bd.con + bd.lam * (bd.spatial + bd.mix)
    assert abs(recomputed - bd.total) <= 1e-7 * max(1.0, abs(bd.total))
    assert isinstance(bd, LossBreakdown)


# ---------------------------------------------------------------------------
# container-level wrappers
# ---------------------------------------------------------------------------

def test_wrappers_round_trip_through_volumes():
    rng, yhat, y, _ = _rand_setup(15)
    pred = _vol(yhat)
    label = _mask(y)
    roi = roi_from_label(label, margin=1)
    v1, g1 = loss_r_sup(label, pred, roi)
    beta = resolve_beta(y, RelaxedSupConfig())
    v2, g2 = loss_r_sup_array(y, np.asarray(pred.data, dtype=np.float64),
                              roi.indicator(label.dims), beta)
    assert abs(v1 - v2) <= 1e-9
    assert np.abs(g1.data - g2).max() <= 1e-6

    vc, gc = loss_con(pred, SoftSkeletonParams(3))
    assert gc.dims == pred.dims
    vs, gs = loss_spatial(pred, _vol(rng.random((6, 6, 6))))
    assert gs.dims == pred.dims
