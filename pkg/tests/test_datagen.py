import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ippo import datagen
from ippo.datagen import GenConfig, GenError, SplitSpec


def test_covariance_is_symmetric_and_padded():
    S = datagen.default_covariance(5)
    np.testing.assert_array_equal(S, S.T)
    np.testing.assert_array_equal(S[3:, 3:], np.eye(2))
    assert np.all(np.linalg.eigvalsh(S) > 0)


def test_default_beta_ranges():
    B = datagen.default_beta(3, 4, 6)
    assert B.shape == (6, 5)
    assert np.all((B[:, 0] >= 10) & (B[:, 0] <= 50))
    assert np.all(np.abs(B[:, 1:]) <= 5)


def test_same_seed_same_data():
    cfg = GenConfig(noise_sigma=2.0, seed=4)
    a, ia, _ = datagen.generate(cfg, 1, 2)
    b, ib, _ = datagen.generate(cfg, 1, 2)
    np.testing.assert_array_equal(a.responses, b.responses)
    np.testing.assert_array_equal(ia.holding_cost, ib.holding_cost)
    c, _, _ = datagen.generate(cfg, 1, 3)
    assert not np.array_equal(a.features, c.features)


def test_streams_are_independent():
    cfg = GenConfig(noise_sigma=2.0, seed=4)
    other = cfg.with_(cost_ranges={"order": (0, 1), "backorder": (0, 2), "holding": (0, 1)})
    a, ia, _ = datagen.generate(cfg)
    b, ib, _ = datagen.generate(other)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.responses, b.responses)
    assert not np.array_equal(ia.order_cost, ib.order_cost)


def test_feature_moments():
    cfg = GenConfig(n=200_000, d_x=3, mean=np.array([1.0, -2.0, 0.5]))
    X = datagen.gen_features(cfg)
    np.testing.assert_allclose(X.mean(axis=0), cfg.mean, atol=0.02)
    np.testing.assert_allclose(np.cov(X.T), cfg.covariance, atol=0.02)


def test_zero_noise_is_exact():
    cfg = GenConfig(n=30)
    data, _, meta = datagen.generate(cfg)
    B = cfg.beta_true
    np.testing.assert_allclose(data.responses, B[:, 0] + data.features @ B[:, 1:].T)
    assert meta["r2_measured"] == pytest.approx(1.0)


@pytest.mark.parametrize("target", [0.07, 0.34, 0.92])
def test_calibration_hits_target_in_large_samples(target):
    cfg = GenConfig()
    sigma = datagen.calibrate_sigma(target, cfg)
    data, _, _ = datagen.generate(cfg.with_(n=40_000, noise_sigma=sigma), 99)
    assert datagen.measure_r2(data.features, data.responses) == pytest.approx(target, abs=0.01)


def test_calibration_is_monotone():
    cfg = GenConfig()
    sig = [datagen.calibrate_sigma(r, cfg) for r in datagen.DESK_R2_LADDER]
    assert all(a > b for a, b in zip(sig, sig[1:]))


def test_unreachable_and_invalid_targets():
    with pytest.raises(GenError):
        datagen.calibrate_sigma(1.0, GenConfig())
    flat = GenConfig(beta_true=np.array([[10.0, 0.0, 0.0]]), d_l=1)
    with pytest.raises(GenError):
        datagen.calibrate_sigma(0.5, flat)


def test_bad_configs():
    with pytest.raises(GenError):
        GenConfig(problem="portfolio")
    with pytest.raises(GenError):
        GenConfig(covariance=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(GenError):
        GenConfig(covariance=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(GenError):
        GenConfig(noise_sigma=-1.0)
    with pytest.raises(GenError):
        SplitSpec((0.5, 0.5, 0.0))


def test_desk_split_sizes():
    assert datagen.split_sizes(120, (0.7, 0.15, 0.15)) == (84, 18, 18)
    with pytest.raises(GenError):
        datagen.split_sizes(3, (0.7, 0.15, 0.15))


@settings(max_examples=50, deadline=None)
@given(st.integers(7, 400), st.integers(0, 1000), st.integers(0, 20))
def test_split_is_a_partition(n, seed, rep):
    tr, va, te = datagen.split_rows(n, SplitSpec(seed=seed), rep)
    assert (len(tr), len(va), len(te)) == datagen.split_sizes(n, (0.7, 0.15, 0.15))
    allrows = np.concatenate([tr, va, te])
    assert sorted(allrows.tolist()) == list(range(n))


def test_split_keeps_cost_rows_with_data():
    cfg = GenConfig(problem="shipment", d_l=3)
    data, inst, _ = datagen.generate(cfg)
    parts = datagen.split(data, inst, SplitSpec(seed=2))
    for d, i in parts:
        np.testing.assert_array_equal(i.ship_cost, inst.ship_cost[d.ids])
