import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collective_ac.countsim import returns_to_go, sample_batch
from collective_ac.domains import (
    GridParams, TaxiParams, build_domain, generate_synthetic_demand, grid_neighbors,
    load_demand_csv, make_grid_domain, make_taxi_domain, write_demand_csv,
)
from collective_ac.model import ObservationModel
from collective_ac.validation import random_policy


def test_default_grid_scale():
    m = make_grid_domain()
    assert (m.num_states, m.num_actions, m.horizon, m.population) == (25, 5, 100, 20)


@pytest.mark.parametrize("bad", [
    dict(goal_state=0),
    dict(goal_state=25),
    dict(initial_states=(30,)),
    dict(failure_slope=0.0),
    dict(failure_slope=1.5),
    dict(congestion_penalty=0.2),
    dict(initial_states=()),
])
def test_grid_rejects_invalid_params(bad):
    with pytest.raises(ValueError):
        make_grid_domain(GridParams(**bad))


def _one_cell(S, A, i, j, n):
    n_s = np.zeros((1, S), dtype=np.int64)
    n_sa = np.zeros((1, S, A), dtype=np.int64)
    n_s[0, i] = n
    n_sa[0, i, j] = n
    return n_s, n_sa


def test_single_agent_has_no_congestion():
    m = make_grid_domain(GridParams(population=1))
    n_s, n_sa = _one_cell(25, 5, 6, 3, 1)  # move right from cell 6
    row = m.transition_row(6, 3, n_s[0], n_sa[0])
    assert row[7] == 1.0
    assert m.reward_table(n_s[0], n_sa[0])[6, 3] == 0.0


def test_crowded_edge_success_probability():
    m = make_grid_domain()
    n_s, n_sa = _one_cell(25, 5, 6, 3, 20)
    row = m.transition_row(6, 3, n_s[0], n_sa[0])
    p = max(0.0, 1 - 0.5 * 19 / 20)
    assert row[7] == pytest.approx(p) and row[6] == pytest.approx(1 - p)
    assert m.reward_table(n_s[0], n_sa[0])[6, 3] == pytest.approx(-0.1 * 19 / 20)


def test_walls_and_goal_teleport():
    m = make_grid_domain()
    n_s, n_sa = _one_cell(25, 5, 0, 0, 1)  # up from the top-left corner
    assert m.transition_row(0, 0, n_s[0], n_sa[0])[0] == 1.0
    n_s, n_sa = _one_cell(25, 5, 24, 4, 3)
    row = m.transition_row(24, 4, n_s[0], n_sa[0])
    assert np.allclose(row[[0, 1, 5]], 1 / 3) and row.sum() == pytest.approx(1.0)
    assert np.all(m.reward_table(n_s[0], n_sa[0])[24] == 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_grid_rows_sum_to_one_and_rewards_bounded(seed):
    rng = np.random.default_rng(seed)
    m = make_grid_domain()
    n_sa = rng.multinomial(20, np.full(125, 1 / 125)).reshape(1, 25, 5)
    n_s = n_sa.sum(axis=2)
    b, i, j = np.nonzero(n_sa)
    rows = m.transition(0, n_s, n_sa, b, i, j)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-9) and (rows >= 0).all()
    r = m.reward(0, n_s, n_sa)
    assert r.min() >= -0.1 and r.max() <= 1.0


def test_grid_neighbors():
    nb = grid_neighbors(3, 3)
    assert sorted(nb[4]) == [1, 3, 5, 7] and sorted(nb[0]) == [1, 3]
    assert len(grid_neighbors(3, 3, diagonal=True)[4]) == 8


def test_default_taxi_scale():
    m = make_taxi_domain(TaxiParams(population=400))
    assert m.num_states == 81 and m.horizon == 48
    degrees = [len(n) for n in m.neighborhood]
    assert max(degrees) == 8 and np.mean(degrees) > 6
    assert m.num_actions == 9


def test_taxi_rejects_bad_inputs():
    with pytest.raises(ValueError):
        make_taxi_domain(TaxiParams(num_zones=4, horizon=3, demand=np.ones((2, 4))))
    with pytest.raises(ValueError):
        make_taxi_domain(TaxiParams(num_zones=4, horizon=2, demand=-np.ones((2, 4))))
    with pytest.raises(ValueError):
        make_taxi_domain(TaxiParams(num_zones=3, zone_adjacency=[(1,), (), (1,)]))


def test_taxi_full_demand_single_zone():
    # demand equals the fleet every step and nobody moves: every taxi earns a trip
    M, H = 7, 4
    m = make_taxi_domain(TaxiParams(num_zones=1, zone_adjacency=[()], horizon=H, population=M,
                                    demand=np.full((H, 1), float(M)), trip_revenue=10.0))
    obs = ObservationModel.for_model(m, "o0")
    b = sample_batch(m, random_policy(m, obs), obs, 3, np.random.default_rng(0))
    step = (b.n_sa * b.rewards).sum(axis=(2, 3))
    assert np.allclose(step, M * 10.0)


def test_taxi_zero_demand_gives_no_positive_reward():
    m = make_taxi_domain(TaxiParams(num_zones=9, horizon=5, population=30,
                                    demand=np.zeros((5, 9)), move_cost=1.0))
    obs = ObservationModel.for_model(m, "oN")
    pol = random_policy(m, obs, 0, scale=1.0, hidden=(18, 18))
    b = sample_batch(m, pol, obs, 5, np.random.default_rng(1))
    assert returns_to_go(b, m)[:, 0].max() <= 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_taxi_rows_and_match_probability(seed):
    rng = np.random.default_rng(seed)
    m = make_taxi_domain(TaxiParams(num_zones=9, horizon=4, population=50, demand_seed=seed % 97))
    n_sa = rng.multinomial(50, np.full(9 * m.num_actions, 1 / (9 * m.num_actions)))
    n_sa = n_sa.reshape(1, 9, m.num_actions)
    n_s = n_sa.sum(axis=2)
    b, i, j = np.nonzero(n_sa)
    rows = m.transition(2, n_s, n_sa, b, i, j)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-9) and (rows >= 0).all()
    r = m.reward(2, n_s, n_sa)[0, :, 0]
    assert np.all((r >= 0) & (r <= 10.0))
    empty = n_s[0] == 0
    assert np.all(r[empty] == 0.0)


def test_taxi_on_features_include_demand():
    m = make_taxi_domain(TaxiParams(num_zones=9, horizon=4, population=10))
    obs = ObservationModel.for_model(m, "oN")
    assert obs.obs_dim == 1 + 8 + 9
    x = obs.input_dim(m)
    assert x == 9 + 1 + obs.obs_dim


def test_synthetic_demand_properties():
    a = generate_synthetic_demand(9, 48, seed=3)
    assert np.array_equal(a, generate_synthetic_demand(9, 48, seed=3))
    flat = generate_synthetic_demand(9, 48, seed=3, peak_amplitude=0.0)
    assert np.allclose(flat, flat[0:1])  # constant over time
    tot = generate_synthetic_demand(9, 48, seed=3, total=1234.0)
    assert abs(tot.sum() - 1234.0) < 0.01 * 1234.0


def test_demand_csv_roundtrip_and_errors(tmp_path):
    d = generate_synthetic_demand(5, 6, seed=1)
    write_demand_csv(tmp_path / "d.csv", d)
    assert np.array_equal(load_demand_csv(tmp_path / "d.csv", 6, 5), d)

    (tmp_path / "e.csv").write_text("")
    assert not load_demand_csv(tmp_path / "e.csv", 2, 4).any()
    (tmp_path / "one.csv").write_text("0,3,12.5\n")
    assert load_demand_csv(tmp_path / "one.csv", 2, 4)[0, 3] == 12.5

    for text, where in [("0,1\n", ":1:"), ("t,zone,demand\n0,1,2\n5,1,2\n", ":3:"),
                        ("0,9,1\n", ":1:"), ("0,1,x\n", ":1:"), ("0,1,-2\n", ":1:")]:
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(ValueError, match=where):
            load_demand_csv(tmp_path / "bad.csv", 2, 4)


def test_build_domain_blocks(tmp_path):
    assert build_domain({"grid": {"horizon": 7}}).horizon == 7
    write_demand_csv(tmp_path / "d.csv", np.ones((3, 4)))
    m = build_domain({"taxi": {"num_zones": 4, "horizon": 3, "population": 5,
                               "demand_csv": str(tmp_path / "d.csv")}})
    assert m.num_states == 4
    with pytest.raises(ValueError):
        build_domain({"grid": {"colour": 1}})
    with pytest.raises(ValueError):
        build_domain({"maze": {}})
