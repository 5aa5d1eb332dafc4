import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from ippo.scenario import (
    Dataset, Decision, NewsvendorInstance, ShapeError, ShipmentInstance, load_dataset,
    newsvendor_costs, newsvendor_scenario_cost, save_dataset, scenario_costs, shipment_recourse,
    shipment_scenario_cost,
)


def recourse_oracle(z, y, C, P2):
    """Same recourse LP stated directly for scipy: variables S (d_w*d_l) then T (d_w)."""
    d_w, d_l = C.shape
    c = np.concatenate([C.ravel(), np.full(d_w, P2)])
    A, b = [], []
    for j in range(d_l):
        row = np.zeros(d_w * d_l + d_w)
        row[[i * d_l + j for i in range(d_w)]] = -1.0
        A.append(row); b.append(-y[j])
    for i in range(d_w):
        row = np.zeros(d_w * d_l + d_w)
        row[i * d_l:(i + 1) * d_l] = 1.0
        row[d_w * d_l + i] = -1.0
        A.append(row); b.append(z[i])
    return linprog(c, A_ub=np.array(A), b_ub=b, bounds=(0, None), method="highs").fun


def test_newsvendor_hand_example():
    # order 10 at 2, demand 13 with backorder 5: 20 + 15; second product over by 4 at holding 1
    cost = newsvendor_scenario_cost([10, 7], [13, 3], [2, 1], [5, 9], [3, 1])
    assert cost == pytest.approx(((20 + 15) + (7 + 4)) / 2)


def test_newsvendor_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    Y = rng.uniform(0, 40, (5, 3))
    inst = NewsvendorInstance(*(rng.uniform(0, 10, (5, 3)) for _ in range(3)))
    Q = rng.uniform(0, 40, (5, 3))
    per = newsvendor_costs(Q, Y, inst)
    for k in range(5):
        assert per[k] == pytest.approx(newsvendor_scenario_cost(
            Q[k], Y[k], inst.order_cost[k], inst.backorder_cost[k], inst.holding_cost[k]))


def test_shipment_single_warehouse_closed_form():
    # one warehouse, one location: ship everything, buy the shortfall last minute
    for z, y in [(5.0, 8.0), (10.0, 8.0), (0.0, 3.0)]:
        assert shipment_recourse([z], [y], [[2.0]], 100.0) == pytest.approx(2 * y + 100 * max(y - z, 0))
    assert shipment_scenario_cost([4.0], [8.0], [[2.0]], 5.0, 100.0) == pytest.approx(20 + 16 + 400)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_shipment_recourse_matches_oracle(seed, d_w, d_l):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0, 20, d_w)
    y = rng.uniform(-5, 30, d_l)
    C = rng.uniform(0, 30, (d_w, d_l))
    ref = 0.0 if np.all(y <= 0) else recourse_oracle(z, y, C, 100.0)
    assert shipment_recourse(z, y, C, 100.0) == pytest.approx(ref, abs=1e-7)


def test_negative_decisions_rejected():
    with pytest.raises(ValueError):
        newsvendor_scenario_cost([-1.0], [2.0], [1.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        Decision([1.0, -0.5])
    with pytest.raises(ValueError):
        ShipmentInstance(100.0, 5.0, np.ones((1, 1, 1)))


def test_shape_checks():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 1)), np.zeros(2), ids=[0, 0])
    d = Dataset(np.zeros((2, 1)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        scenario_costs(np.zeros((2, 2)), d, NewsvendorInstance(*(np.ones((3, 2)),) * 3))


@pytest.mark.parametrize("problem", ["newsvendor", "shipment"])
def test_dataset_round_trip(tmp_path, problem):
    rng = np.random.default_rng(1)
    data = Dataset(rng.normal(size=(6, 2)), rng.normal(20, 5, (6, 2)), ids=np.arange(10, 16))
    if problem == "newsvendor":
        inst = NewsvendorInstance(*(rng.uniform(0, 9, (6, 2)) for _ in range(3)))
    else:
        inst = ShipmentInstance(5.0, 100.0, rng.uniform(0, 30, (6, 3, 2)))
    save_dataset(tmp_path / "d", data, inst, {"note": "x"})
    d2, i2, meta = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(d2.features, data.features)
    np.testing.assert_array_equal(d2.responses, data.responses)
    np.testing.assert_array_equal(d2.ids, data.ids)
    D = np.abs(rng.normal(10, 3, (6, 2 if problem == "newsvendor" else 3)))
    np.testing.assert_array_equal(scenario_costs(D, d2, i2), scenario_costs(D, data, inst))
    assert meta["note"] == "x"
