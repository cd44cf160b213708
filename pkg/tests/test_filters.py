import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from tconv.affine import AffineParams, warp
from tconv.core import ContractError, Tensor, gradcheck
from tconv.conv import conv3d
from tconv.filters import (Filter3T, identity_thetas, import_2d, init_base, materialize, materialize_bank,
                           param_count)
from tconv.network import Conv3T


def test_identity_thetas_replicate_the_base(rng):
    base = rng.normal(size=(2, 5, 5))
    dense = materialize(Filter3T.identity(base, 4)).weights.data
    assert dense.shape == (2, 4, 5, 5)
    for t in range(4):
        np.testing.assert_array_equal(dense[:, t], base)


def test_one_pixel_translation_of_a_delta():
    W = 7
    base = np.zeros((1, W, W))
    base[0, 3, 3] = 1.0
    f = Filter3T(base, np.array([[1.0, 0.0, 1.0 / W, 0.0]]))
    dense = materialize(f).weights.data
    expected = np.zeros((W, W))
    expected[2, 3] = 1.0  # pull-back: slice 2 at x reads slice 1 at x + 1
    assert np.abs(dense[0, 1] - expected).max() <= 1e-12


def test_two_45_degree_steps_against_the_two_step_oracle():
    W = 9
    base = np.zeros((1, W, W))
    base[0, 4, 1:8] = 1.0
    base[0, 2:7, 4] = 1.0
    base[0, 4, 7] = 2.0  # asymmetric arm so a quarter turn is visible
    step = (1.0, math.pi / 4, 0.0, 0.0)
    dense = materialize(Filter3T(base, np.array([step, step]))).weights.data
    oracle = oracles.materialize(base, [step, step])
    np.testing.assert_allclose(dense, oracle, rtol=0, atol=1e-12)
    quarter = np.rot90(base[0], k=1)
    # blurred by two resamplings, but it points the quarter-turned way
    out = dense[0, 2]
    assert (out * quarter).sum() > (out * base[0]).sum()


@pytest.mark.parametrize("seed", range(4))
def test_materialize_matches_iterated_oracle(seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(3, 4, 5))
    thetas = np.column_stack([rng.uniform(0.8, 1.2, 3), rng.uniform(-0.4, 0.4, (3, 3))])
    dense = materialize(Filter3T(base, thetas)).weights.data
    np.testing.assert_array_equal(dense, oracles.materialize(base, thetas.tolist()))


def test_theta_is_shared_across_input_channels(rng):
    base = rng.normal(size=(3, 5, 5))
    th = np.array([[1.1, 0.2, 0.05, -0.1]])
    dense = materialize(Filter3T(base, th)).weights.data
    for c in range(3):
        np.testing.assert_array_equal(dense[c, 1], warp(base[c], AffineParams(*th[0])))


@pytest.mark.parametrize("args,expected", [((1, 7, 7, 4), (61, 196)), ((3, 5, 5, 8), (103, 600)),
                                           ((1, 4, 6, 1), (24, 24))])
def test_param_count(args, expected):
    assert param_count(*args) == expected


def test_param_count_rejects_empty_extent():
    with pytest.raises(ContractError):
        param_count(1, 0, 3, 2)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_counted_scalars_equal_the_formula(c_in, w, h, d, c_out):
    layer = Conv3T("c", c_in, c_out, w, d, rng=np.random.default_rng(0)) if w == h else None
    if layer is not None:
        assert layer.n_filter_params() == c_out * param_count(c_in, w, h, d)[0]
    f = Filter3T(np.zeros((c_in, w, h)), identity_thetas(1, d)[0])
    assert f.n_trainable() == param_count(c_in, w, h, d)[0]
    assert f.depth == d
    assert all(p.is_identity() for p in f.params)


def test_import_2d_gives_identity_filters(rng):
    bank = rng.normal(size=(4, 2, 3, 3))
    filters = import_2d(bank, 5)
    assert len(filters) == 4
    for k, f in enumerate(filters):
        assert f.thetas.data.tolist() == [[1.0, 0.0, 0.0, 0.0]] * 4
        dense = f.materialize().weights.data
        for t in range(5):
            np.testing.assert_array_equal(dense[:, t], bank[k])


def test_import_2d_checks_geometry(rng):
    with pytest.raises(ContractError):
        import_2d(rng.normal(size=(4, 2, 3, 3)), 3, geometry=(4, 2, 5, 5))
    with pytest.raises(ContractError):
        import_2d(rng.normal(size=(2, 3, 3)), 3)


def test_materialize_is_deterministic(rng):
    base = rng.normal(size=(2, 3, 5, 5))
    th = np.concatenate([rng.uniform(0.9, 1.1, (2, 3, 1)), rng.uniform(-0.3, 0.3, (2, 3, 3))], axis=2)
    a = materialize_bank(base, th).data
    b = materialize_bank(base.copy(), th.copy()).data
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 3), st.integers(0, 3), st.floats(-0.2, 0.2).filter(lambda v: abs(v) > 1e-6))
def test_perturbing_one_step_only_changes_later_slices(t, k, delta):
    rng = np.random.default_rng(7)
    base = rng.normal(size=(1, 2, 5, 5))
    th = identity_thetas(1, 5) + np.concatenate([np.zeros((1, 4, 1)), rng.uniform(-0.2, 0.2, (1, 4, 3))], axis=2)
    before = materialize_bank(base, th).data
    th2 = th.copy()
    th2[0, t, k] += delta
    after = materialize_bank(base, th2).data
    for slice_ in range(t + 1):
        assert before[0, :, slice_].tobytes() == after[0, :, slice_].tobytes()
    assert not np.array_equal(before[0, :, t + 1], after[0, :, t + 1])


def test_base_gradient_collects_every_slice():
    rng = np.random.default_rng(3)
    base = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    th = Tensor(identity_thetas(1, 3) + rng.uniform(-0.1, 0.1, (1, 2, 4)), requires_grad=True)
    x = rng.normal(size=(2, 2, 5, 6, 6))
    report = gradcheck(lambda: conv3d(x, materialize_bank(base, th)).mean(), [base, th])
    assert sum(e.flagged for e in report) == 0


def test_materialize_gradcheck_random_banks():
    rng = np.random.default_rng(4)
    base = Tensor(rng.normal(size=(2, 2, 4, 5)), requires_grad=True)
    th = Tensor(np.concatenate([rng.uniform(0.8, 1.2, (2, 3, 1)), rng.uniform(-0.4, 0.4, (2, 3, 3))], axis=2),
                requires_grad=True)
    w = rng.normal(size=(2, 2, 4, 4, 5))
    report = gradcheck(lambda: (materialize_bank(base, th) * w).sum(), [base, th])
    assert sum(e.flagged for e in report) == 0


def test_filter3t_shape_contract():
    with pytest.raises(ContractError):
        Filter3T(np.zeros((3, 3)), identity_thetas(1, 2)[0])
    with pytest.raises(ContractError):
        Filter3T(np.zeros((1, 3, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        materialize_bank(np.zeros((2, 1, 3, 3)), identity_thetas(3, 2))


def test_init_base_bounds():
    b = init_base(np.random.default_rng(0), 8, 2, 5, 5)
    assert b.shape == (8, 2, 5, 5)
    assert np.abs(b).max() <= math.sqrt(1 / 50)
