import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadedose import losses
from cascadedose.gradcheck import grad_check
from cascadedose.tensor import ConfigError, DimensionError, Tensor


def dice_ce_oracle(P, Y, eps=1e-5):
    J = P.shape[0]
    vox = list(itertools.product(*[range(n) for n in P.shape[1:]]))
    dsum = 0.0
    for j in range(J):
        num = den_y = den_p = 0.0
        for v in vox:
            num += Y[(j,) + v] * P[(j,) + v]
            den_y += Y[(j,) + v] ** 2
            den_p += P[(j,) + v] ** 2
        dsum += num / (den_y + den_p + eps)
    ce = 0.0
    for v in vox:
        for j in range(J):
            ce += Y[(j,) + v] * math.log(P[(j,) + v] + eps)
    return 1 - 2 / J * dsum - ce / len(vox)


def _simplex(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(0))
    return e / e.sum(0)


def _onehot(rng, shape):
    lab = rng.integers(0, shape[0], shape[1:])
    return (lab[None] == np.arange(shape[0]).reshape((-1,) + (1,) * (len(shape) - 1))).astype(float)


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(2, 2, 2, 2), (8, 2, 3, 2), (3, 4, 1, 2)]))
def test_dice_ce_matches_loop_oracle(seed, shape):
    r = np.random.default_rng(seed)
    P, Y = _simplex(r, shape), _onehot(r, shape)
    assert abs(losses.dice_ce_loss(Tensor(P), Y).item() - dice_ce_oracle(P, Y)) < 1e-9


def test_dice_ce_gradient(rng):
    P, Y = _simplex(rng, (2, 2, 2, 2)), _onehot(rng, (2, 2, 2, 2))
    assert grad_check(lambda t: losses.dice_ce_loss(t, Y), [Tensor(P, requires_grad=True)]).passed


def test_perfect_prediction_all_classes_present_is_zero():
    lab = np.arange(64).reshape(4, 4, 4) % 8
    Y = (lab[None] == np.arange(8).reshape(-1, 1, 1, 1)).astype(float)
    assert abs(losses.dice_ce_loss(Tensor(Y), Y, eps=1e-14).item()) < 1e-9
    assert losses.dice_ce_loss(Tensor(Y), Y).item() < 1e-4


def test_absent_class_contributes_nothing(rng):
    P, Y = _simplex(rng, (3, 2, 2, 2)), _onehot(rng, (3, 2, 2, 2))
    Y[2] = 0
    Y[0] += (Y.sum(0) == 0)
    P2 = np.concatenate([P[:2], np.zeros((1, 2, 2, 2))])
    P2[0] += P[2]
    full = losses.dice_ce_loss(Tensor(P2), Y).item()
    assert abs(full - dice_ce_oracle(P2, Y)) < 1e-12


def test_dice_ce_permutation_equivariant(rng):
    P, Y = _simplex(rng, (8, 4, 4, 4)), _onehot(rng, (8, 4, 4, 4))
    perm = rng.permutation(64)
    Pp = P.reshape(8, -1)[:, perm].reshape(P.shape)
    Yp = Y.reshape(8, -1)[:, perm].reshape(Y.shape)
    a = losses.dice_ce_loss(Tensor(P), Y).item()
    b = losses.dice_ce_loss(Tensor(Pp), Yp).item()
    assert abs(a - b) < 1e-12


def test_dice_ce_contract_errors():
    with pytest.raises(DimensionError):
        losses.dice_ce_loss(Tensor(np.zeros((2, 2, 2, 2))), np.zeros((2, 2, 2, 3)))
    with pytest.raises(losses.ContractError):
        losses.dice_ce_loss(Tensor(np.full((2, 2, 2, 2), 1.1)), np.zeros((2, 2, 2, 2)))


def interp_oracle(vol, out):
    """Per-voxel trilinear sample with half-pixel centres, edges clamped."""
    res = np.zeros(out)
    for idx in np.ndindex(*out):
        lo, w = [], []
        for a, i in enumerate(idx):
            s = (i + 0.5) * vol.shape[a] / out[a] - 0.5
            s = min(max(s, 0.0), vol.shape[a] - 1)
            f = math.floor(s)
            lo.append(min(f, vol.shape[a] - 1))
            w.append(s - f)
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            c, wt = [], 1.0
            for a in range(3):
                c.append(min(lo[a] + corner[a], vol.shape[a] - 1))
                wt *= w[a] if corner[a] else 1 - w[a]
            acc += wt * vol[tuple(c)]
        res[idx] = acc
    return res


def test_gt_pyramid_matches_interpolation_oracle(rng):
    d = rng.random((1, 8, 8, 8))
    levels = losses.build_gt_pyramid(d, 3)
    assert [l.shape for l in levels] == [(1, 2, 2, 2), (1, 4, 4, 4), (1, 8, 8, 8)]
    np.testing.assert_array_equal(levels[-1].data, d)
    for lev in levels[:-1]:
        np.testing.assert_allclose(lev.data[0], interp_oracle(d[0], lev.shape[1:]), atol=1e-9)


def test_gt_pyramid_constant_and_degenerate():
    d = np.full((1, 8, 8, 8), 3.25)
    assert all(np.allclose(l.data, 3.25) for l in losses.build_gt_pyramid(d, 4))
    (only,) = losses.build_gt_pyramid(d, 1)
    np.testing.assert_array_equal(only.data, d)
    with pytest.raises(ConfigError):
        losses.build_gt_pyramid(np.zeros((1, 6, 6, 6)), 3)


def dose_loss_oracle(pred, tgt, l1, l2):
    def mae(a, b):
        fa, fb = a.ravel(), b.ravel()
        return sum(abs(x - y) for x, y in zip(fa, fb)) / fa.size
    S = len(pred)
    return l1 * mae(pred[-1], tgt[-1]) + l2 * sum(mae(p, t) for p, t in zip(pred[:-1], tgt[:-1])) / (S - 1)


def _pyr(rng, S):
    return [rng.standard_normal((1,) + (2 ** s,) * 3) for s in range(1, S + 1)]


@given(st.integers(0, 2 ** 31 - 1))
def test_dose_loss_matches_oracle(seed):
    r = np.random.default_rng(seed)
    p, t = _pyr(r, 4), _pyr(r, 4)
    got = losses.dose_loss([Tensor(x) for x in p], [Tensor(x) for x in t], losses.LossWeights(10, 8)).item()
    assert abs(got - dose_loss_oracle(p, t, 10, 8)) < 1e-9


@given(st.floats(-50, 50, allow_nan=False), st.floats(0, 20), st.floats(0, 20))
def test_uniform_offset(c, l1, l2):
    t = _pyr(np.random.default_rng(0), 3)
    p = [x + c for x in t]
    got = losses.dose_loss([Tensor(x) for x in p], [Tensor(x) for x in t], losses.LossWeights(l1, l2)).item()
    assert abs(got - (l1 + l2) * abs(c)) <= 1e-9 * max(1.0, (l1 + l2) * abs(c))


def test_default_weights():
    w = losses.LossWeights()
    assert (w.lambda1, w.lambda2) == (10.0, 8.0)


@given(st.floats(0, 10))
def test_dose_loss_homogeneous(alpha):
    r = np.random.default_rng(4)
    t, d = _pyr(r, 3), _pyr(r, 3)
    base = losses.dose_loss([Tensor(a + b) for a, b in zip(t, d)], [Tensor(a) for a in t]).item()
    scaled = losses.dose_loss([Tensor(a + alpha * b) for a, b in zip(t, d)], [Tensor(a) for a in t]).item()
    assert abs(scaled - alpha * base) <= 1e-9 * max(1.0, scaled)


def test_dose_loss_zero_iff_equal(rng):
    t = _pyr(rng, 3)
    assert losses.dose_loss([Tensor(x) for x in t], [Tensor(x) for x in t]).item() == 0
    p = [x.copy() for x in t]
    p[0][0, 0, 0, 0] += 1e-3
    assert losses.dose_loss([Tensor(x) for x in p], [Tensor(x) for x in t]).item() > 0


def test_dose_loss_errors(rng):
    t = _pyr(rng, 2)
    with pytest.raises(ConfigError):
        losses.dose_loss([Tensor(t[0])], [Tensor(t[0])])
    assert losses.dose_loss([Tensor(t[0])], [Tensor(t[0] + 1)], losses.LossWeights(2, 0)).item() == 2
    with pytest.raises(DimensionError):
        losses.dose_loss([Tensor(x) for x in t], [Tensor(t[0])])
    with pytest.raises(ConfigError):
        losses.LossWeights(-1, 0)
