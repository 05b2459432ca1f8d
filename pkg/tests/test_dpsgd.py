import numpy as np
import pytest

from diarygan import numcore as nc
from diarygan.dpsgd import (DiscriminatorBatch, DpSgdState, PrivacyConfig, RmspropState, clip_per_example,
                            discriminator_mean_gradient, discriminator_pair_gradients, dp_discriminator_step,
                            privatize_sum, rmsprop_step, sgd_update)
from diarygan.errors import DimensionError, ParameterError
from diarygan.nets import generator_forward, init_params


def _norm(gmap):
    return np.sqrt(sum((v ** 2).sum() for v in gmap.values()))


def _batch(ds, tiny_net, n=6, seed=0):
    g, _ = init_params(tiny_net, nc.SeededRng(seed + 100))
    fake_tab, fake_seq = generator_forward(g, np.random.default_rng(seed).normal(size=(n, tiny_net.latent_dim)))
    return DiscriminatorBatch(ds.tabular[:n], ds.sequences[:n], fake_tab, fake_seq)


# config -----------------------------------------------------------------------


def test_privacy_config_validation():
    with pytest.raises(ParameterError):
        PrivacyConfig(clip_norm=0.0)
    with pytest.raises(ParameterError):
        PrivacyConfig(noise_multiplier=-0.1)
    assert PrivacyConfig(2.0, 1.5).noise_std == 3.0


# clipping ---------------------------------------------------------------------


def test_clip_scales_large_gradient():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
    (out,) = clip_per_example([g], 1.0)
    np.testing.assert_allclose(out["a"], g["a"] / 10)
    np.testing.assert_allclose(out["b"], g["b"] / 10)
    assert _norm(out) == pytest.approx(1.0, abs=1e-15)


def test_clip_leaves_small_gradient():
    g = {"a": np.array([0.3, 0.4])}
    (out,) = clip_per_example([g], 1.0)
    np.testing.assert_array_equal(out["a"], g["a"])


def test_clip_is_per_example():
    grads = [{"a": np.array([3.0, 0.0])}, {"a": np.array([0.0, 0.2])}]
    out = clip_per_example(grads, 1.0)
    assert [_norm(o) for o in out] == pytest.approx([1.0, 0.2], abs=1e-15)


def test_clip_uses_joint_norm_across_tensors():
    # each tensor alone is under C, jointly they are not
    g = {"a": np.array([0.8]), "b": np.array([0.6])}
    (out,) = clip_per_example([g], 0.5)
    assert _norm(out) == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(out["a"] / out["b"], 0.8 / 0.6)


def test_clip_rejects_nonpositive_bound():
    with pytest.raises(ParameterError):
        clip_per_example([{"a": np.ones(2)}], 0.0)


def test_clip_bound_holds_on_random_maps():
    rng = np.random.default_rng(0)
    grads = [{"a": rng.normal(size=(3, 4)) * s, "b": rng.normal(size=5) * s}
             for s in rng.exponential(3.0, size=200)]
    for c in (0.1, 1.0, 4.0):
        assert max(_norm(o) for o in clip_per_example(grads, c)) <= c + 1e-9


def test_zero_gradient_survives_clipping():
    (out,) = clip_per_example([{"a": np.zeros(3)}], 1.0)
    np.testing.assert_array_equal(out["a"], 0.0)


def test_replacing_one_example_moves_sum_by_at_most_2c():
    rng = np.random.default_rng(1)
    c = 1.0
    cfg = PrivacyConfig(c, 0.0)
    base = [{"a": rng.normal(size=4) * 5} for _ in range(8)]
    for trial in range(20):
        other = list(base)
        other[trial % 8] = {"a": rng.normal(size=4) * 50}
        s1 = privatize_sum(clip_per_example(base, c), cfg, 1, nc.SeededRng(0))
        s2 = privatize_sum(clip_per_example(other, c), cfg, 1, nc.SeededRng(0))
        assert np.linalg.norm(s1["a"] - s2["a"]) <= 2 * c + 1e-12


# noise ------------------------------------------------------------------------


def test_zero_noise_gives_exact_mean():
    grads = [{"a": np.array([1.0, 2.0])}, {"a": np.array([3.0, -2.0])}, {"a": np.array([2.0, 3.0])}]
    out = privatize_sum(grads, PrivacyConfig(10.0, 0.0), 3, nc.SeededRng(0))
    np.testing.assert_allclose(out["a"], [2.0, 1.0], atol=1e-15)


def test_mean_of_two_equal_maps_is_the_map():
    g = {"a": np.array([0.25, -0.5])}
    out = privatize_sum([g, g], PrivacyConfig(1.0, 0.0), 2, nc.SeededRng(0))
    np.testing.assert_array_equal(out["a"], g["a"])


def test_noise_is_unit_normal_for_unit_sigma_and_clip():
    zeros = [{"a": np.zeros(100_000)}]
    out = privatize_sum(zeros, PrivacyConfig(1.0, 1.0), 1, nc.SeededRng(4))
    assert abs(out["a"].std() - 1.0) < 0.02
    assert abs(out["a"].mean()) < 0.02


def test_noise_added_to_sum_then_divided():
    zeros = [{"a": np.zeros(100_000)}] * 4
    out = privatize_sum(zeros, PrivacyConfig(0.5, 2.0), 4, nc.SeededRng(4))
    assert out["a"].std() == pytest.approx(2.0 * 0.5 / 4, rel=0.02)


def test_noise_draw_is_independent_of_map_order():
    g1 = {"a": np.zeros(3), "b": np.zeros(2)}
    g2 = {"b": np.zeros(2), "a": np.zeros(3)}
    cfg = PrivacyConfig(1.0, 1.0)
    o1 = privatize_sum([g1], cfg, 1, nc.SeededRng(3))
    o2 = privatize_sum([g2], cfg, 1, nc.SeededRng(3))
    for k in g1:
        np.testing.assert_array_equal(o1[k], o2[k])


def test_empty_batch_rejected():
    with pytest.raises(ParameterError):
        privatize_sum([{"a": np.zeros(1)}], PrivacyConfig(), 0, nc.SeededRng(0))


# discriminator step -----------------------------------------------------------


def test_pair_gradients_sum_to_minibatch_gradient(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net)
    per, losses = discriminator_pair_gradients(d, batch)
    mean, value = discriminator_mean_gradient(d, batch)
    assert losses.shape == (6,)
    assert value == pytest.approx(losses.mean(), abs=1e-12)
    for k in mean:
        np.testing.assert_allclose(per[k].mean(axis=0), mean[k], atol=1e-12)


def test_disabled_privacy_is_plain_sgd(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net)
    grads, _ = discriminator_mean_gradient(d, batch)
    expected = sgd_update(d.tensors, grads, 0.1)
    state = DpSgdState(0.1, PrivacyConfig(1e-6, 5.0, enabled=False), nc.SeededRng(0))
    new, stats = dp_discriminator_step(d, batch, state)
    for k in expected:
        np.testing.assert_array_equal(new.tensors[k], expected[k])
    assert stats.preclip_mean is None


@pytest.mark.parametrize("loss", ["standard", "wasserstein"])
def test_zero_noise_and_loose_clip_match_plain_sgd(toy_ds, tiny_net, loss):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net)
    grads, _ = discriminator_mean_gradient(d, batch, loss)
    expected = sgd_update(d.tensors, grads, 0.05)
    state = DpSgdState(0.05, PrivacyConfig(1e6, 0.0), nc.SeededRng(0))
    new, stats = dp_discriminator_step(d, batch, state, loss)
    assert stats.preclip_max < 1e6
    for k in expected:
        np.testing.assert_allclose(new.tensors[k], expected[k], rtol=0, atol=1e-12)


def test_zero_learning_rate_keeps_parameters(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    state = DpSgdState(0.0, PrivacyConfig(1.0, 3.0), nc.SeededRng(0))
    new, _ = dp_discriminator_step(d, _batch(toy_ds, tiny_net), state)
    for k in d.tensors:
        np.testing.assert_array_equal(new.tensors[k], d.tensors[k])


def test_private_step_reports_preclip_norms(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net)
    per, _ = discriminator_pair_gradients(d, batch)
    norms = np.sqrt(sum((v.reshape(6, -1) ** 2).sum(axis=1) for v in per.values()))
    _, stats = dp_discriminator_step(d, batch, DpSgdState(0.1, PrivacyConfig(0.01, 1.0), nc.SeededRng(0)))
    assert stats.preclip_mean == pytest.approx(norms.mean(), rel=1e-12)
    assert stats.preclip_max == pytest.approx(norms.max(), rel=1e-12)


def test_noise_changes_the_step(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net)
    a, _ = dp_discriminator_step(d, batch, DpSgdState(0.1, PrivacyConfig(1.0, 0.0), nc.SeededRng(0)))
    b, _ = dp_discriminator_step(d, batch, DpSgdState(0.1, PrivacyConfig(1.0, 1.0), nc.SeededRng(0)))
    assert any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in d.tensors)


def test_mismatched_halves_rejected(toy_ds, tiny_net):
    _, d = init_params(tiny_net, nc.SeededRng(1))
    b = _batch(toy_ds, tiny_net)
    bad = DiscriminatorBatch(b.real_tabular, b.real_sequence, b.fake_tabular[:3], b.fake_sequence[:3])
    with pytest.raises(DimensionError):
        discriminator_pair_gradients(d, bad)


# rmsprop ----------------------------------------------------------------------


def test_rmsprop_first_step_value():
    params = {"w": np.zeros(3)}
    new, state = rmsprop_step(RmspropState(lr=0.001, rho=0.9, eps=1e-8), params, {"w": np.ones(3)})
    np.testing.assert_allclose(new["w"], -0.001 / (np.sqrt(0.1) + 1e-8), rtol=1e-15)
    assert new["w"][0] == pytest.approx(-3.1623e-3, abs=5e-8)
    np.testing.assert_allclose(state.v["w"], 0.1)


def test_rmsprop_zero_gradient_decays_average():
    params = {"w": np.array([1.0, -2.0])}
    state = RmspropState(lr=0.01, rho=0.9, v={"w": np.array([0.5, 2.0])})
    new, st = rmsprop_step(state, params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(new["w"], params["w"])
    np.testing.assert_allclose(st.v["w"], [0.45, 1.8])
    np.testing.assert_array_equal(state.v["w"], [0.5, 2.0])  # input state untouched


def test_rmsprop_is_deterministic():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.normal(size=4)} for _ in range(5)]

    def run():
        p, s = {"w": np.ones(4)}, RmspropState()
        for g in grads:
            p, s = rmsprop_step(s, p, g)
        return p["w"]
    np.testing.assert_array_equal(run(), run())


def test_rmsprop_shape_mismatch():
    with pytest.raises(DimensionError):
        rmsprop_step(RmspropState(), {"w": np.zeros(3)}, {"w": np.zeros(4)})


def test_dp_state_rejects_negative_rate():
    with pytest.raises(ParameterError):
        DpSgdState(-1.0, PrivacyConfig(), nc.SeededRng(0))
