import math

import numpy as np
import pytest

from greenprior.dataset import FeatureTable
from greenprior.errors import ConfigError
from greenprior.ml.tuning import (
    DEFAULT_SPACES,
    Categorical,
    Integer,
    Real,
    cv_objective,
    random_search,
    smbo_tune,
    space_from_config,
    space_to_config,
    tune_model,
)

QUAD = {"x": Real(0.0, 10.0)}


def quadratic(p):
    return (p["x"] - 3.0) ** 2


class TestSmbo:
    def test_deterministic(self):
        a = smbo_tune(QUAD, quadratic, seed=11)
        b = smbo_tune(QUAD, quadratic, seed=11)
        assert a[0] == b[0]
        assert [t.to_dict() for t in a[1]] == [t.to_dict() for t in b[1]]

    def test_history_contract(self):
        best, hist = smbo_tune(QUAD, quadratic, budget=20, seed=1)
        assert [t.iteration for t in hist] == list(range(1, 21))
        assert best == min(hist, key=lambda t: t.score).params
        assert all(0.0 <= t.params["x"] <= 10.0 for t in hist)

    def test_budget_equal_n_init_is_random_search(self):
        best, hist = smbo_tune(QUAD, quadratic, budget=5, n_init=5, seed=4)
        assert len(hist) == 5
        assert quadratic(best) == min(t.score for t in hist)
        rbest, rhist = random_search(QUAD, quadratic, 5, 4)
        assert rbest == best and [t.params for t in rhist] == [t.params for t in hist]

    def test_initial_draws_shared_with_random_search(self):
        _, hist = smbo_tune(QUAD, quadratic, budget=20, n_init=5, seed=8)
        _, rhist = random_search(QUAD, quadratic, 5, 8)
        assert [t.params for t in hist[:5]] == [t.params for t in rhist]

    def test_constant_objective(self):
        _, hist = smbo_tune(QUAD, lambda p: 1.25, budget=20, seed=0)
        assert len(hist) == 20 and {t.score for t in hist} == {1.25}

    def test_failing_trials_scored_inf(self):
        def objective(p):
            if p["x"] > 5:
                raise RuntimeError("boom")
            return float("nan") if p["x"] < 1 else p["x"]

        best, hist = smbo_tune(QUAD, objective, budget=20, seed=3)
        for t in hist:
            if t.params["x"] > 5 or t.params["x"] < 1:
                assert t.score == math.inf
        assert math.isfinite(objective(best))

    def test_improves_on_quadratic(self):
        best, _ = smbo_tune(QUAD, quadratic, budget=20, seed=2)
        assert abs(best["x"] - 3.0) < 0.5

    def test_mixed_space(self):
        space = {"a": Integer(1, 8), "b": Real(1e-3, 1.0, log=True), "c": Categorical(("u", "v", "w"))}

        def objective(p):
            return abs(p["a"] - 4) + abs(math.log10(p["b"]) + 1) + (0 if p["c"] == "v" else 1)

        best, hist = smbo_tune(space, objective, budget=30, seed=5)
        for t in hist:
            assert isinstance(t.params["a"], int) and 1 <= t.params["a"] <= 8
            assert 1e-3 <= t.params["b"] <= 1.0
            assert t.params["c"] in ("u", "v", "w")
        assert objective(best) == min(t.score for t in hist)

    def test_single_choice_categorical(self):
        best, hist = smbo_tune({"k": Categorical(("only",))}, lambda p: 0.0, budget=8, seed=0)
        assert best == {"k": "only"} and len(hist) == 8

    @pytest.mark.parametrize("budget,n_init", [(3, 5), (0, 0), (5, 0)])
    def test_bad_budget(self, budget, n_init):
        with pytest.raises(ConfigError):
            smbo_tune(QUAD, quadratic, budget=budget, n_init=n_init)

    def test_empty_space(self):
        with pytest.raises(ConfigError):
            smbo_tune({}, quadratic)


class TestSpaces:
    def test_dimension_validation(self):
        with pytest.raises(ConfigError):
            Real(1.0, 1.0)
        with pytest.raises(ConfigError):
            Real(0.0, 1.0, log=True)
        with pytest.raises(ConfigError):
            Integer(5, 2)
        with pytest.raises(ConfigError):
            Categorical(())

    def test_config_round_trip(self):
        raw = {
            "n_trees": {"type": "int", "low": 100, "high": 2000, "log": True},
            "eta": {"type": "real", "low": 0.005, "high": 0.3, "log": True},
            "growth": {"type": "cat", "choices": ["a", "b"]},
        }
        space = space_from_config(raw)
        assert space["n_trees"] == Integer(100, 2000, True)
        assert space["growth"] == Categorical(("a", "b"))
        assert space_from_config(space_to_config(space)) == space

    def test_unknown_type(self):
        with pytest.raises(ConfigError):
            space_from_config({"x": {"type": "complex"}})

    def test_default_spaces_cover_reported_optima(self):
        rf = DEFAULT_SPACES["RF"]
        assert rf["n_trees"].low <= 400 <= rf["n_trees"].high
        assert rf["max_depth"].low <= 5 <= rf["max_depth"].high
        gb = DEFAULT_SPACES["GBDT-depthwise"]
        assert gb["eta"].low <= 0.0122 <= gb["eta"].high
        assert gb["gamma"].low <= 7.4644 <= gb["gamma"].high
        assert DEFAULT_SPACES["GBDT-leafwise"]["n_leaves"].low <= 2


class TestModelTuning:
    def blobs(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(-1, 1, (60, 3)), rng.normal(1, 1, (60, 3))])
        y = np.repeat([0, 1], 60)
        return FeatureTable(["a", "b", "c"], X, y)

    def test_cv_objective_finite_and_deterministic(self):
        obj = cv_objective(self.blobs(), "RF", seed=1)
        p = {"n_trees": 5, "max_depth": 3}
        assert obj(p) == obj(p) and 0 < obj(p) < math.inf

    def test_tune_model(self):
        space = {"n_trees": Integer(2, 6), "max_depth": Integer(1, 4)}
        best, hist = tune_model(self.blobs(), "RF", budget=4, seed=2, space=space)
        assert len(hist) == 4 and set(best) == {"n_trees", "max_depth"}

    def test_bad_kind_or_unlabelled(self):
        with pytest.raises(ConfigError):
            cv_objective(self.blobs(), "SVM", 0)
        t = self.blobs()
        with pytest.raises(ConfigError):
            cv_objective(FeatureTable(t.feature_names, t.X), "RF", 0)
