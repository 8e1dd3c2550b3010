import json

import numpy as np
import pytest

from collective_ac.countsim import sample_batch
from collective_ac.model import (
    CountBatch, CountStep, CountTrajectory, ModelSpec, ObservationModel, features,
    load_model_json, observe, tabular_model, validate_trajectory,
)
from collective_ac.validation import random_policy


def _identity_model(S=2, A=2, H=3, M=4):
    P = np.zeros((S, A, S))
    P[:, :, 0] = 1.0
    return tabular_model(P, np.zeros((S, A)), np.full(S, 1.0 / S), H, M)


def test_modelspec_rejects_bad_initial_dist():
    with pytest.raises(ValueError):
        _identity_model().__class__(2, 2, 3, 4, np.array([0.7, 0.7]), None, None)


def test_modelspec_rejects_nonpositive_sizes():
    with pytest.raises(ValueError):
        tabular_model(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 0, 1)
    with pytest.raises(ValueError):
        tabular_model(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 2, 0)


def test_tabular_kernel_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        tabular_model(np.full((2, 2, 2), 0.4), np.zeros((2, 2)), np.ones(2) / 2, 2, 2)


def test_observation_dims():
    m = tabular_model(np.full((3, 2, 3), 1 / 3), np.zeros((3, 2)), np.ones(3) / 3, 4, 5,
                      neighborhoods=[(1,), (0, 2), (1,)])
    assert ObservationModel.for_model(m, "o0").obs_dim == 0
    assert ObservationModel.for_model(m, "o1").obs_dim == 1
    assert ObservationModel.for_model(m, "oN").obs_dim == 1 + 2
    assert ObservationModel.for_model(m, "o1").input_dim(m) == 3 + 1 + 1
    with pytest.raises(ValueError):
        ObservationModel.for_model(m, "o2")


def test_observe_on_neighbor_counts_padded():
    m = tabular_model(np.full((3, 2, 3), 1 / 3), np.zeros((3, 2)), np.ones(3) / 3, 4, 5,
                      neighborhoods=[(1,), (0, 2), (1,)])
    obs = ObservationModel.for_model(m, "oN")
    n_s = np.array([1, 3, 1])
    # layout: one-hot state, t/H, own count, neighbor counts
    o = observe(m, obs, 0, n_s, 2)
    assert np.allclose(o, [1, 0, 0, 0.5, 1 / 5, 3 / 5, 0.0])
    o = observe(m, obs, 1, n_s, 2)
    assert np.allclose(o[4:], [3 / 5, 1 / 5, 1 / 5])


def test_features_layout():
    m = _identity_model(S=3, H=4)
    obs = ObservationModel.for_model(m, "o1")
    n_s = np.array([[1, 0, 3]])
    X = features(m, obs, 2, n_s, np.array([0, 0]), np.array([0, 2]))
    assert np.allclose(X, [[1, 0, 0, 0.5, 0.25], [0, 0, 1, 0.5, 0.75]])


def _traj():
    return CountTrajectory.from_steps([
        CountStep(np.array([3, 1]), np.array([[2, 1], [1, 0]]),
                  np.array([[[2, 0], [1, 0]], [[1, 0], [0, 0]]])),
        CountStep(np.array([4, 0]), np.array([[0, 4], [0, 0]]),
                  np.array([[[0, 0], [4, 0]], [[0, 0], [0, 0]]])),
        CountStep(np.array([4, 0]), np.array([[4, 0], [0, 0]])),
    ])


def test_valid_trajectory_has_no_violations():
    assert validate_trajectory(_traj(), _identity_model()) == []


@pytest.mark.parametrize("mutate, kind", [
    (lambda tr: tr.n_s.__setitem__((1, 0), 3), "population sum"),
    (lambda tr: tr.n_sa.__setitem__((0, 0, 0), 1), "action marginal"),
    (lambda tr: tr.flow_count.__setitem__(0, 1), "transition marginal"),
])
def test_violation_kinds(mutate, kind):
    tr = _traj()
    mutate(tr)
    kinds = {v.kind for v in validate_trajectory(tr, _identity_model())}
    assert kind in kinds


def test_flow_conservation_violation_reported_at_next_step():
    tr = _traj()
    # move one unit of flow to another successor: marginals still match, next counts do not
    k = int(np.flatnonzero((tr.flow_t == 0) & (tr.flow_next == 0))[0])
    tr.flow_next[k] = 1
    bad = [v for v in validate_trajectory(tr, _identity_model()) if v.kind == "flow conservation"]
    assert bad and bad[0].t == 1


def test_records_roundtrip():
    tr = _traj()
    back = CountTrajectory.from_records(json.loads(json.dumps(tr.to_records())))
    assert back.key() == tr.key()


def test_batch_take_and_concat(tiny, rng):
    m, obs, pol, _ = tiny
    b = sample_batch(m, pol, obs, 6, rng)
    sub = b.take([4, 1])
    assert sub[0].key() == b[4].key() and sub[1].key() == b[1].key()
    both = CountBatch.concat([b.take([0]), b.take([5])])
    assert both[1].key() == b[5].key()


def test_load_model_json_tabular(tmp_path):
    doc = {
        "num_states": 2, "num_actions": 1, "horizon": 3, "population": 2,
        "initial_dist": [0.5, 0.5],
        "domain": {"type": "tabular", "transition": [[[0.9, 0.1]], [[0.2, 0.8]]],
                   "reward": [[1.0], [0.0]]},
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    m = load_model_json(path)
    assert (m.num_states, m.num_actions, m.horizon, m.population) == (2, 1, 3, 2)
    assert np.allclose(m.transition_row(1, 0, np.array([1, 1]), np.array([[1], [1]])), [0.2, 0.8])


def test_load_model_json_grid():
    m = load_model_json({"domain": {"type": "grid", "horizon": 10}})
    assert m.num_states == 25 and m.horizon == 10


def test_modelspec_type():
    m = _identity_model()
    assert isinstance(m, ModelSpec)
    assert m.neighbor_table.shape[0] == m.num_states


def test_random_policy_helper_is_seeded(tiny):
    m, obs, _, _ = tiny
    a = random_policy(m, obs, 3)
    b = random_policy(m, obs, 3)
    assert np.array_equal(a.mlp.params, b.mlp.params)
