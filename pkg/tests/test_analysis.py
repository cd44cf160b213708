import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from tconv.analysis import (DisplayRecord, ParamRecord, activation_max, distributions, from_display,
                            motion_recovery, read_records_csv, records_from_model, saliency, stats,
                            to_display, trajectory, write_records_csv)
from tconv.core import ContractError
from tconv.network import DivergenceError, ModelSpec, build_model, tinyt_spec

params = st.tuples(st.floats(0.5, 2.0), st.floats(-math.pi, math.pi), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))


def _rec(s=1.0, r=0.0, tx=0.0, ty=0.0, f=0, step=1):
    return ParamRecord("conv1", f, step, s, r, tx, ty)


# ---------------------------------------------------------------- display


def test_translation_in_pixels():
    assert to_display(_rec(tx=0.1), 28, 28).px_x == pytest.approx(2.8, abs=1e-15)


def test_rotation_is_clockwise_positive():
    assert to_display(_rec(r=math.radians(5)), 28, 28).rotation == pytest.approx(-5.0, abs=1e-12)


def test_identity_display():
    d = to_display(_rec(), 28, 28)
    assert (d.s, d.rotation, d.px_x, d.px_y) == (1.0, 0.0, 0.0, 0.0)


def test_display_needs_positive_extent():
    with pytest.raises(ContractError):
        to_display(_rec(), 0, 28)


@given(params, st.integers(1, 64), st.integers(1, 64))
def test_display_round_trip(p, W, H):
    rec = _rec(*p)
    back = from_display(to_display(rec, W, H), W, H)
    for a, b in zip((back.s, back.r, back.tx, back.ty), p):
        assert abs(a - b) <= 1e-12
    assert isinstance(to_display(rec, W, H), DisplayRecord)


# ---------------------------------------------------------------- trajectory


def test_identity_trajectory_stays_at_the_origin():
    tr = trajectory([(1.0, 0.0, 0.0, 0.0)] * 3)
    assert np.all(tr.position == 0) and np.all(tr.scale == 1) and np.all(tr.rotation == 0)


def test_constant_translation_walks_in_a_line():
    tr = trajectory([(1.0, 0.0, 0.1, 0.0)] * 4)
    np.testing.assert_allclose(tr.position[:, 0], [0, 0.1, 0.2, 0.3, 0.4], atol=1e-15)
    assert np.all(tr.position[:, 1] == 0)


def test_second_quarter_turn_rotates_the_next_displacement():
    tr = trajectory([(1.0, math.pi / 2, 0.1, 0.0)] * 2)
    d1 = tr.position[1] - tr.position[0]
    d2 = tr.position[2] - tr.position[1]
    np.testing.assert_allclose(d2, [[0, -1], [1, 0]] @ d1, atol=1e-15)
    assert tr.rotation[-1] == pytest.approx(math.pi)


def test_trajectory_matches_hand_composed_matrices():
    steps = [(1.1, 0.2, 0.05, -0.1), (0.9, -0.4, 0.2, 0.0), (1.0, 0.1, -0.1, 0.1)]
    tr = trajectory(steps)
    M = np.eye(3)
    for k, p in enumerate(steps, 1):
        M = M @ oracles.homogeneous(*p)
        np.testing.assert_allclose(tr.position[k], M[:2, 2], atol=1e-15)
    np.testing.assert_allclose(tr.scale, [1, 1.1, 1.1 * 0.9, 1.1 * 0.9], atol=1e-15)
    np.testing.assert_allclose(tr.rotation, [0, 0.2, -0.2, -0.1], atol=1e-15)


def test_trajectory_needs_a_step():
    with pytest.raises(ContractError):
        trajectory([])


@given(st.lists(params, min_size=1, max_size=4), st.lists(params, min_size=1, max_size=4))
def test_concatenation_is_composition(a, b):
    whole = trajectory(a + b)
    joined = trajectory(a).then(trajectory(b))
    assert np.abs(whole.position - joined.position).max() <= 1e-12
    assert np.abs(whole.rotation - joined.rotation).max() <= 1e-12
    assert np.abs(whole.scale - joined.scale).max() <= 1e-12 * max(1.0, whole.scale.max())


# ---------------------------------------------------------------- stats


def test_identity_model_has_zero_stats():
    table = stats(records_from_model(build_model(tinyt_spec(6))))
    assert all(m == 0.0 and s == 0.0 for _, m, s in table.rows())


def test_scale_deviation_mean_and_population_std():
    table = stats([_rec(s=1.01), _rec(s=1.03, f=1)])
    (name, m, s), *_ = table.scaled()
    assert name == "s"
    assert m == pytest.approx(20.0, abs=1e-9)
    assert s == pytest.approx(10.0, abs=1e-9)


def test_row_order_and_units():
    table = stats([_rec(s=0.9, r=-0.2, tx=0.3, ty=-0.4)])
    assert [row[0] for row in table.rows()] == ["s", "r", "p_x", "p_y"]
    np.testing.assert_allclose([m for _, m, _ in table.scaled()], [100, 200, 300, 400])
    assert all(s >= 0 for _, _, s in table.rows())


def test_stats_needs_records():
    with pytest.raises(ContractError):
        stats([])


@given(st.lists(params, min_size=1, max_size=12), st.randoms())
def test_stats_is_permutation_invariant(ps, rnd):
    recs = [_rec(*p, f=k) for k, p in enumerate(ps)]
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    a, b = stats(recs), stats(shuffled)
    for (_, m1, s1), (_, m2, s2) in zip(a.rows(), b.rows()):
        assert abs(m1 - m2) <= 1e-12 * max(1.0, abs(m1))
        assert abs(s1 - s2) <= 1e-12 * max(1.0, abs(s1))


def test_stats_csv_keeps_raw_and_scaled(tmp_path):
    stats([_rec(tx=0.002)]).to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",")[:6] == ["parameter", "mean_e3", "std_e3", "mean", "std", "n"]
    px = lines[3].split(",")
    assert px[0] == "p_x" and float(px[1]) == pytest.approx(2.0) and float(px[3]) == 0.002


# ---------------------------------------------------------------- distributions


def test_identity_mass_sits_in_the_centre_bin():
    d = distributions({"m": records_from_model(build_model(tinyt_spec(6)))})
    centre = d.bins // 2
    n = 8 * 3 + 16 * 2
    assert d.scale["m"][centre] == n and d.scale["m"].sum() == n
    assert d.rotation["m"][centre] == n
    assert d.translation["m"][centre, centre] == n


def test_grid_records_fill_bins_by_enumeration():
    half, bins = 0.061, 61
    width = 2 * half / bins
    centres = -half + (np.arange(bins) + 0.5) * width
    recs = []
    for i in range(0, bins, 5):
        for j in range(0, bins, 7):
            for _ in range(1 + (i + j) % 3):
                recs.append(_rec(tx=centres[i], ty=centres[j], f=len(recs)))
    d = distributions({"m": recs}, ranges={"scale": 0.1, "rotation": 1.0, "translation": half})
    expected = np.zeros((bins, bins), dtype=np.int64)
    for i in range(0, bins, 5):
        for j in range(0, bins, 7):
            expected[i, j] = 1 + (i + j) % 3
    assert np.array_equal(d.translation["m"], expected)


def test_models_share_axis_ranges():
    a = [_rec(s=1.2, r=0.1, tx=0.01, ty=0.0)]
    b = [_rec(s=0.99, r=-0.5, tx=0.0, ty=-0.3)]
    d = distributions({"a": a, "b": b})
    assert d.ranges["scale"] == pytest.approx(0.2 * 1.05)
    assert d.ranges["rotation"] == pytest.approx(math.degrees(0.5) * 1.05)
    assert d.ranges["translation"] == pytest.approx(0.3 * 1.05)
    for axis in ("scale", "rotation", "translation"):
        e = d.edges(axis)
        assert e[0] == -e[-1]
    assert d.scale["a"].sum() == d.scale["b"].sum() == 1
    assert d.translation["a"].shape == d.translation["b"].shape == (61, 61)


def test_distributions_need_records():
    with pytest.raises(ContractError):
        distributions({"a": []})


# ---------------------------------------------------------------- saliency


def _linear_spec(size=3, depth=2, filters=2):
    return ModelSpec([
        {"type": "conv3d", "name": "conv1", "filters": filters, "size": size, "depth": depth},
        {"type": "gap", "name": "gap"},
        {"type": "dense", "name": "head"},
    ], num_classes=2, seed=3)


def test_linear_layer_saliency_is_its_filter():
    model = build_model(_linear_spec())
    clip = np.random.default_rng(0).uniform(0, 1, (1, 2, 3, 3))
    res = saliency(model, clip, "conv1", 1)
    np.testing.assert_array_equal(res.gradient, model["conv1"].weight_.data[1])


def test_saliency_of_a_larger_input_sums_shifted_filters():
    model = build_model(_linear_spec())
    clip = np.zeros((1, 3, 4, 4))
    res = saliency(model, clip, "conv1", 0)
    w = model["conv1"].weight_.data[0, 0]
    expected = np.zeros((3, 4, 4))
    for a in range(2):
        for b in range(2):
            for c in range(2):
                expected[a: a + 2, b: b + 3, c: c + 3] += w / 8
    np.testing.assert_allclose(res.gradient[0], expected, atol=1e-15)


def test_dead_relu_gives_zero_saliency():
    model = build_model(tinyt_spec(4, seed=1))
    model["conv1"].bias.data[:] = -100.0
    res = saliency(model, np.random.default_rng(1).uniform(0, 1, (1, 8, 28, 28)), "relu1", 3)
    assert not res.gradient.any()


def test_saliency_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = build_model(tinyt_spec(4, seed=2))
    for layer in model.conv_layers:
        layer.thetas.data = layer.thetas.data + rng.uniform(-0.05, 0.05, layer.thetas.shape)
    clip = rng.uniform(0, 1, (1, 8, 28, 28))
    res = saliency(model, clip, "relu2", 5)
    h = 1e-5

    def value(c):
        return float(model.forward(c[None], upto="relu2").data[:, 5].mean())

    idx = [tuple(int(v) for v in np.unravel_index(k, clip.shape)) for k in rng.choice(clip.size, 50, replace=False)]
    for i in idx:
        up, down = clip.copy(), clip.copy()
        up[i] += h
        down[i] -= h
        num = (value(up) - value(down)) / (2 * h)
        assert oracles.relative_error(res.gradient[i], num) < 1e-3


def test_saliency_frame_has_the_largest_gradient_mass():
    model = build_model(tinyt_spec(4, seed=4))
    res = saliency(model, np.random.default_rng(4).uniform(0, 1, (1, 8, 28, 28)), "relu2", 0)
    mass = np.abs(res.maps).sum(axis=(1, 2))
    assert res.frame == int(np.argmax(mass))
    assert res.maps.shape == (8, 28, 28)


def test_saliency_rejects_unknown_channel():
    with pytest.raises(ContractError):
        saliency(build_model(tinyt_spec(4)), np.zeros((1, 8, 28, 28)), "conv1", 8)


# ---------------------------------------------------------------- activation maximization


def test_linear_trace_never_decreases():
    model = build_model(_linear_spec(size=3, depth=2))
    res = activation_max(model, "conv1", 0, steps=30, lr=0.1, frames=4, size=6)
    assert np.all(np.diff(res.trace) >= -1e-12)
    assert len(res.trace) == 31


def test_same_seed_gives_the_same_frame():
    model = build_model(tinyt_spec(4, seed=5))
    a = activation_max(model, "relu2", 2, steps=5, seed=7)
    b = activation_max(model, "relu2", 2, steps=5, seed=7)
    assert a.frame.tobytes() == b.frame.tobytes() and a.trace == b.trace


def test_optimized_frame_beats_random_frames():
    model = build_model(tinyt_spec(6, seed=0))
    res = activation_max(model, "relu2", 3, steps=100, lr=0.05, seed=0)
    frames = np.random.default_rng(123).uniform(0, 1, (1000, 1, 1, 28, 28))
    acts = np.concatenate([model.forward(np.repeat(frames[i: i + 100], 8, axis=2), upto="relu2").data[:, 3]
                           .mean(axis=(1, 2, 3)) for i in range(0, 1000, 100)])
    assert res.trace[-1] > np.percentile(acts, 95)


def test_activation_max_needs_a_step():
    with pytest.raises(ContractError):
        activation_max(build_model(tinyt_spec(4)), "relu1", 0, steps=0)


def test_activation_max_reports_the_diverging_step():
    model = build_model(_linear_spec())
    model["conv1"].weight_.data[:] = 1e307
    with pytest.raises(DivergenceError) as err:
        activation_max(model, "conv1", 0, steps=3, frames=2, size=3)
    assert err.value.step == 0


# ---------------------------------------------------------------- motion recovery


def _recovery_model():
    spec = ModelSpec([
        {"type": "conv3t", "name": "conv1", "filters": 2, "size": 1, "depth": 2},
        {"type": "relu", "name": "relu1"},
        {"type": "gap", "name": "gap"},
        {"type": "dense", "name": "head"},
    ], num_classes=2)
    model = build_model(spec)
    conv = model["conv1"]
    conv.base.data = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    conv.bias.data = np.array([0.0, 1.0])
    conv.thetas.data = np.array([[[1.0, 0.0, 0.1, 0.0]], [[1.0, 0.0, 0.1, 0.0]]])
    return model


def test_motion_recovery_counts_agreeing_channels():
    model = _recovery_model()
    # class 0 clips are bright (channel 0 fires), class 1 clips are dark (channel 1 fires)
    X = np.concatenate([np.ones((4, 1, 2, 3, 3)), np.zeros((4, 1, 2, 3, 3))])
    y = np.array([0] * 4 + [1] * 4)
    rep = motion_recovery(model, X, y, ("translate-left", "translate-right"), top_k=1)
    assert rep.channels == {"translate-left": [0], "translate-right": [1]}
    assert rep.agreement == {"translate-left": 1.0, "translate-right": 0.0}
    assert not rep.holds(0.7)
    model["conv1"].thetas.data[1, 0, 2] = -0.1
    assert motion_recovery(model, X, y, ("translate-left", "translate-right"), top_k=1).holds(0.7)


def test_motion_recovery_needs_temporal_parameters():
    model = build_model(tinyt_spec(6, "3d"))
    with pytest.raises(ContractError):
        motion_recovery(model, np.zeros((2, 1, 8, 28, 28)), np.array([0, 1]), ("translate-left", "zoom-in"))


# ---------------------------------------------------------------- csv


def test_records_csv_round_trip(tmp_path):
    recs = [_rec(1.0 + 1e-17 * k, 0.1 / 3, -0.2, 1 / 7, f=k, step=k % 3 + 1) for k in range(5)]
    write_records_csv(tmp_path / "r.csv", recs)
    assert read_records_csv(tmp_path / "r.csv") == recs
