import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acoustic_denoise.errors import DataError, NumericError
from acoustic_denoise.selection import (
    METRICS, GAConfig, ModelScoreTable, WeightVector, correlation_matrix, crossover,
    ga_tune_weights, mutate, project_simplex, rank_models, read_score_table, read_weights_csv,
    score, select_best_model, spearman, write_correlation_csv, write_ga_log, write_heatmap_png,
    write_score_table, write_weights_csv,
)
from planted import planted_table


def _table(values, ids=None):
    values = np.asarray(values, dtype=float)
    return ModelScoreTable(ids or [str(i) for i in range(len(values))], values)


def test_rank_cases():
    r = rank_models(np.array([[30, 0.5, 0.5, 10, 10], [40, 0.5, 0.5, 10, 5]]))
    assert r[:, 0].tolist() == [0.0, 1.0]
    r = rank_models(np.array([[1, 1, 1, 7, 10], [2, 2, 2, 7, 5], [3, 3, 3, 7, 20]]))
    assert r[:, 3].tolist() == [0.5, 0.5, 0.5]
    assert r[:, 4].tolist() == [0.5, 1.0, 0.0]


def test_rank_needs_two_and_no_nan():
    with pytest.raises(DataError):
        rank_models(np.ones((1, 5)))
    with pytest.raises(DataError):
        rank_models(np.array([[1, 1, 1, 1, np.nan], [2, 2, 2, 2, 2]]))


def test_weight_vector_validation():
    with pytest.raises(DataError):
        WeightVector(np.array([0.5, 0.5, 0.5, 0, 0]))
    with pytest.raises(DataError):
        WeightVector(np.array([1.5, -0.5, 0, 0, 0]))
    assert WeightVector.uniform().as_dict()["tv"] == pytest.approx(0.2)


def test_score_cases(rng):
    table = _table(rng.random((6, 5)))
    onehot = WeightVector(np.eye(5)[0])
    np.testing.assert_array_equal(score(table, onehot), table.ranks[:, 0])
    ranks = np.array([[1, 0, 0.5, 0.5, 0]])
    assert score(ranks, WeightVector.uniform())[0] == pytest.approx(0.4, abs=1e-15)


def test_dominant_model_wins(rng):
    vals = rng.random((8, 5))
    vals[3, :4] = 2.0
    vals[3, 4] = -1.0
    table = _table(vals)
    assert score(table, WeightVector.uniform())[3] == pytest.approx(1.0)
    for _ in range(10):
        assert select_best_model(table, WeightVector(rng.dirichlet(np.ones(5)))) == "3"


def test_single_model_and_tie_break():
    assert select_best_model(_table([[1, 1, 1, 1, 1]], ["only"]), WeightVector.uniform()) == "only"
    tied = _table([[1, 1, 1, 1, 1]] * 3, ["10", "2", "7"])
    assert select_best_model(tied, WeightVector.uniform()) == "2"


def test_rank_invariance_under_monotone_transforms(rng):
    vals = rng.random((15, 5)) + 0.1
    w = WeightVector(rng.dirichlet(np.ones(5)))
    base = _table(vals)
    moved = vals.copy()
    moved[:, 0] *= 7.5
    moved[:, 3] = np.exp(moved[:, 3])
    moved[:, 4] = moved[:, 4] ** 3
    other = _table(moved)
    np.testing.assert_array_equal(base.ranks, other.ranks)
    np.testing.assert_array_equal(score(base, w), score(other, w))
    assert select_best_model(base, w) == select_best_model(other, w)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=5, max_size=5))
def test_simplex_projection(values):
    p = project_simplex(np.array(values))
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)


def test_operators_stay_on_simplex(rng):
    for _ in range(50):
        a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        for w in (crossover(a, b, rng), mutate(a, 0.3, rng)):
            assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
    w = rng.dirichlet(np.ones(5))
    assert mutate(w, 0.0, rng) is w


def test_spearman():
    assert spearman(np.arange(5), np.arange(5) * 3) == pytest.approx(1.0)
    assert spearman(np.arange(5), -np.arange(5)) == pytest.approx(-1.0)
    assert spearman(np.ones(5), np.arange(5)) == 0.0


def test_ga_recovers_planted_metric():
    result = ga_tune_weights(planted_table(), GAConfig(seed=0))
    assert result.weights.as_dict()["tv"] >= 0.8
    assert result.fitness >= 0.99
    assert np.all(np.diff(result.best_history) >= 0)


def test_ga_fixed_point():
    w = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    cfg = GAConfig(population=10, generations=5, mutation_scale=0.0, initial=np.tile(w, (10, 1)))
    result = ga_tune_weights(planted_table(), cfg)
    np.testing.assert_allclose(result.weights.w, w, atol=1e-15)


def test_ga_is_seeded():
    a = ga_tune_weights(planted_table(), GAConfig(generations=10, seed=3))
    b = ga_tune_weights(planted_table(), GAConfig(generations=10, seed=3))
    np.testing.assert_array_equal(a.weights.w, b.weights.w)


def test_ga_errors():
    t = planted_table()
    flat = ModelScoreTable(t.model_ids, t.values, np.full(20, 0.5), np.full(20, 0.5))
    with pytest.raises(NumericError):
        ga_tune_weights(flat)
    with pytest.raises(DataError):
        ga_tune_weights(_table(np.random.default_rng(0).random((6, 5))))


def test_correlation_cases(rng):
    x = rng.random(12)
    names, m = correlation_matrix({"x": x, "neg": -x, "y": rng.random(12)})
    assert names == ["x", "neg", "y"]
    assert m[0, 0] == 1.0
    assert m[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert np.linalg.eigvalsh(m).min() >= -1e-9
    _, m = correlation_matrix({"a": [1, 2, 3], "b": [2, 4, 6], "c": [1, 3, 2]})
    assert m[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert m[0, 2] == pytest.approx(0.5, abs=1e-12)


def test_correlation_rejects_constant():
    with pytest.raises(DataError, match="flat"):
        correlation_matrix({"x": [1, 2, 3], "flat": [1, 1, 1]})


def test_writers_round_trip(tmp_path):
    t = planted_table()
    w = WeightVector(np.array([0.1, 0.1, 0.1, 0.6, 0.1]))
    write_score_table(t, tmp_path / "t.csv", w)
    back = read_score_table(tmp_path / "t.csv")
    np.testing.assert_allclose(back.values, t.values, rtol=1e-9)
    np.testing.assert_allclose(back.mean_precision, t.mean_precision, rtol=1e-9)
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert header[:8] == ["model", *METRICS, "mean_recall", "mean_precision"] and header[-1] == "score"
    write_weights_csv(w, tmp_path / "w.csv")
    np.testing.assert_allclose(read_weights_csv(tmp_path / "w.csv").w, w.w)
    result = ga_tune_weights(t, GAConfig(generations=3))
    write_ga_log(result, tmp_path / "ga.csv")
    assert len((tmp_path / "ga.csv").read_text().splitlines()) == 1 + 4
    names, m = correlation_matrix({"a": [1, 2, 3], "b": [3, 1, 2]})
    write_correlation_csv(names, m, tmp_path / "c.csv")
    write_heatmap_png(m, tmp_path / "c.png", cell=4)
    assert (tmp_path / "c.png").exists()
