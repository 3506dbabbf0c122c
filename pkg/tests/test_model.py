import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mzlq import GameModel, ProblemFileError, TimeGrid, model_from_dict, stack, validate
from mzlq.model import load_model

from conftest import random_model, scalar_model


def test_six_model_is_valid(six_model):
    assert validate(six_model) == []


def test_generator_row_sum_violation(six_model):
    Pi = six_model.generator.copy()
    Pi[0, 1] += 0.1
    out = validate(six_model.replace(generator=Pi))
    assert len(out) == 1
    assert out[0].field == "generator" and out[0].regime == 1
    assert "sum" in out[0].message


def test_negative_rate_violation(six_model):
    Pi = six_model.generator.copy()
    Pi[1, 0], Pi[1, 2] = -0.2, 0.6
    out = validate(six_model.replace(generator=Pi))
    assert [v.field for v in out] == ["generator"]
    assert "negative" in out[0].message


def test_asymmetric_r11_single_violation():
    m = random_model(np.random.default_rng(0), L=2, n=2, m1=2, m2=1)
    R11 = np.array(m.R11)
    R11[0, 1, 0, 1] += 1e-6
    out = validate(m.replace(R11=R11))
    assert len(out) == 1
    assert out[0].field == "R11" and out[0].regime == 2 and out[0].cell == 0


def test_nonfinite_and_shape_violations():
    m = scalar_model(L=2)
    Q = np.array(m.Q)
    Q[0, 1, 0, 0] = np.nan
    assert [v.field for v in validate(m.replace(Q=Q))] == ["Q"]
    bad = m.replace(B1=np.zeros((1, 2, 2, 1)))
    assert any(v.field == "B1" for v in validate(bad))


def test_validate_is_idempotent(six_model):
    before = {k: np.array(getattr(six_model, k)) for k in ("A", "Q", "generator")}
    assert validate(six_model) == validate(six_model)
    for k, v in before.items():
        assert np.array_equal(getattr(six_model, k), v)


def test_stack_six_regime_one(six_model):
    v = stack(six_model, 0.3, 1)
    assert np.array_equal(v.B, [[1.0, -1.0]])
    assert np.array_equal(v.D, [[1.0, -1.0]])
    assert np.array_equal(v.R, [[10.0, 8.0], [8.0, -12.0]])


def test_stack_six_regime_three(six_model):
    v = stack(six_model, 1.0, 3)
    assert np.array_equal(v.S, [[0.0], [1.0]])
    assert np.array_equal(v.rho, [0.0, 0.0])


def test_stack_rejects_out_of_range(six_model):
    with pytest.raises(ValueError):
        stack(six_model, 1.5, 1)
    with pytest.raises(ValueError):
        stack(six_model, 0.5, 4)


def test_stack_without_second_player():
    m = random_model(np.random.default_rng(1), m1=2, m2=0)
    v = stack(m, 0.0, 2)
    assert np.array_equal(v.B, m.B1[0, 1])
    assert np.array_equal(v.R, m.R11[0, 1])
    assert np.array_equal(v.S, m.S1[0, 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m1=st.integers(0, 3), m2=st.integers(0, 3), L=st.integers(1, 3))
def test_stack_round_trip_is_exact(seed, m1, m2, L):
    m = random_model(np.random.default_rng(seed), L=L, n=2, m1=m1, m2=m2, inhomogeneous=True)
    for i in range(1, L + 1):
        blocks = stack(m, 0.1, i).player_blocks()
        for name, arr in blocks.items():
            assert np.array_equal(arr, getattr(m, name)[0, i - 1]), name
        R = stack(m, 0.1, i).R
        assert np.array_equal(R, R.T)


def test_json_round_trip(tmp_path):
    m = random_model(np.random.default_rng(2), L=3, n=2, m1=1, m2=2, inhomogeneous=True)
    path = tmp_path / "p.json"
    m.to_json(path)
    back = load_model(path)
    for name in ("generator", "A", "B2", "R12", "R22", "G", "g", "sigma", "rho2"):
        assert np.array_equal(getattr(back, name), getattr(m, name)), name
    assert (back.L, back.n, back.m1, back.m2, back.steps, back.T) == (3, 2, 1, 2, m.steps, m.T)


def _doc(model):
    return json.loads(model.to_json())


def test_parser_rejects_unknown_fields(six_model):
    doc = _doc(six_model)
    doc["extra"] = 1
    with pytest.raises(ProblemFileError, match="unknown"):
        model_from_dict(doc)
    doc = _doc(six_model)
    doc["regimes"][0]["Z"] = [[0.0]]
    with pytest.raises(ProblemFileError, match="unknown"):
        model_from_dict(doc)


def test_parser_rejects_missing_and_misshaped(six_model):
    doc = _doc(six_model)
    del doc["regimes"][1]["R22"]
    with pytest.raises(ProblemFileError, match="missing"):
        model_from_dict(doc)
    doc = _doc(six_model)
    del doc["T"]
    with pytest.raises(ProblemFileError, match="missing"):
        model_from_dict(doc)
    doc = _doc(six_model)
    doc["regimes"][0]["A"] = [[1.0, 2.0]]
    with pytest.raises(ProblemFileError, match="shape"):
        model_from_dict(doc)


def test_parser_optional_vectors_default_to_zero(six_model):
    doc = _doc(six_model)
    for reg in doc["regimes"]:
        for k in ("b", "sigma", "q", "rho1", "rho2", "g"):
            reg.pop(k)
    m = model_from_dict(doc)
    assert m.homogeneous
    assert validate(m) == []


def test_parser_time_varying_coefficients():
    m = scalar_model(L=1, steps=4)
    doc = _doc(m)
    doc["regimes"][0]["A"] = [[[float(k)]] for k in range(4)]
    tv = model_from_dict(doc)
    assert tv.time_varying and tv.A.shape == (4, 1, 1, 1)
    assert stack(tv, 0.0, 1).B.shape == (1, 2)
    assert tv.coeff("A", 2)[0, 0, 0] == 2.0
    assert validate(tv) == []


def test_parser_accepts_empty_blocks():
    m = random_model(np.random.default_rng(3), n=2, m1=1, m2=0)
    doc = _doc(m)
    for reg in doc["regimes"]:
        reg["B2"] = []
        reg["R22"] = []
    back = model_from_dict(doc)
    assert back.m2 == 0 and back.B2.shape == (1, 2, 2, 0)


def test_time_grid_and_cells():
    g = TimeGrid(2.0, 4)
    assert g.h == 0.5 and g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
    m = scalar_model(steps=4, T=2.0)
    assert [m.cell_index(t) for t in (0.0, 0.49, 0.5, 1.99, 2.0)] == [0, 0, 1, 3, 3]


def test_model_arrays_are_read_only(six_model):
    with pytest.raises(ValueError):
        six_model.A[0, 0, 0, 0] = 1.0


def test_time_invariant_rejects_unknown_coefficient():
    with pytest.raises(TypeError):
        GameModel.time_invariant(np.zeros((1, 1)), 1.0, 10, A=np.zeros((1, 1, 1)), B1=np.zeros((1, 1, 1)),
                                 B2=np.zeros((1, 1, 1)), C=0, D1=0, D2=0, Q=0, S1=0, S2=0, R11=1, R12=0,
                                 R22=-1, G=0, W=1)
