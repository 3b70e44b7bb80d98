import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_grid
from greenprior.dataset import FeatureTable, stack_to_table
from greenprior.errors import ConfigError, MisalignedGrids, SingleClassTraining
from greenprior.io import read_grid, read_json
from greenprior.ml import loads_model, predict_proba
from greenprior.pipeline import (
    ModelConfig,
    config_from_dict,
    fuse_priority,
    load_config,
    report_importance,
    run_binary_stage,
    run_probability_stage,
)
from greenprior.render import read_pgm

ND = -9999.0
FAST = ModelConfig(kind="RF", params={"n_trees": 20})


def with_model(cfg, **kw):
    return dataclasses.replace(cfg, model=dataclasses.replace(FAST, **kw))


class TestFuse:
    def test_examples(self):
        b = make_grid([[0, 1, ND, 1]])
        p = make_grid([[0.9, 0.73, 0.5, ND]])
        out = fuse_priority(b, p).values[0]
        assert out.tolist() == [0.0, 0.73, ND, ND]

    def test_misaligned(self):
        with pytest.raises(MisalignedGrids):
            fuse_priority(make_grid([[0]]), make_grid([[0.5]], cell=2.0))

    def test_non_binary_rejected(self):
        with pytest.raises(ConfigError):
            fuse_priority(make_grid([[0.5]]), make_grid([[0.5]]))

    @given(
        arrays(np.int64, (4, 5), elements=st.integers(-1, 1)),
        arrays(np.float64, (4, 5), elements=st.floats(0, 1)),
        arrays(bool, (4, 5)),
    )
    def test_contract(self, codes, proba, p_missing):
        b = make_grid(np.where(codes < 0, ND, codes))
        p = make_grid(np.where(p_missing, ND, proba))
        out = fuse_priority(b, p)
        assert np.array_equal(~out.valid, ~b.valid | ~p.valid)
        v = out.values
        assert np.all(v[out.valid & (codes == 0)] == 0.0)
        ones = out.valid & (codes == 1)
        assert np.array_equal(v[ones], proba[ones])


class TestStages:
    def test_binary_stage(self, config, layers, table):
        s1, kept, dropped, train, test = run_binary_stage(with_model(config), layers, table)
        assert len(kept) == 24 and sorted(kept + dropped) == sorted(table.feature_names)
        assert s1.features == kept and s1.model.feature_names == kept
        assert set(np.unique(s1.grid.values)) <= {0.0, 1.0, ND}
        assert len(set(train) & set(test)) == 0 and len(train) + len(test) == table.n_rows
        assert s1.metrics.oa >= 0.9

    def test_stage2_features_exact(self, config, layers, table):
        cfg = with_model(config)
        s1, kept, _, train, test = run_binary_stage(cfg, layers, table)
        s2 = run_probability_stage(cfg, layers, table, kept, train, test, s1.params)
        assert s2.features == [n for n in kept if n != "NDVI"]
        pv = s2.grid.values[s2.grid.valid]
        assert np.all((pv >= 0) & (pv <= 1))
        assert s2.metrics.oa < s1.metrics.oa

    def test_empty_drop_list_reproduces_stage1(self, config, layers, table):
        cfg = dataclasses.replace(with_model(config), drop_for_priority=[])
        s1, kept, _, train, test = run_binary_stage(cfg, layers, table)
        s2 = run_probability_stage(cfg, layers, table, kept, train, test, s1.params)
        assert s2.features == kept
        pixels = stack_to_table(layers.stack)
        idx = [pixels.feature_names.index(n) for n in kept]
        expect = predict_proba(s1.model, pixels.X[:, idx])
        assert np.array_equal(s2.grid.values.ravel()[pixels.provenance], expect)

    def test_drop_name_must_survive_pruning(self, config, layers, table):
        cfg = dataclasses.replace(with_model(config), drop_for_priority=["SAVI"])
        with pytest.raises(ConfigError) as exc:
            run_binary_stage(cfg, layers, table)
        assert exc.value.stage == "prune"

    def test_single_class_labels(self, config, layers, table):
        zeros = FeatureTable(table.feature_names, table.X, np.zeros(table.n_rows, dtype=int), table.provenance)
        with pytest.raises(SingleClassTraining) as exc:
            run_binary_stage(with_model(config, kind="GBDT-depthwise", params={"n_trees": 5}), layers, zeros)
        assert exc.value.stage == "train"
        s1, *_ = run_binary_stage(with_model(config), layers, zeros)
        v = s1.grid.values[s1.grid.valid]
        assert v.size and np.all(v == 0.0)

    def test_importance_ranking(self, default_run):
        res, _ = default_run
        ranking = report_importance(res.stage2.model)
        assert len(ranking) == len(res.stage2.features)
        vals = [v for _, v in ranking]
        assert vals == sorted(vals, reverse=True)
        assert sum(vals) == pytest.approx(1.0, abs=1e-9)
        assert ranking[0][0] == "NLST"


class TestRunAll:
    def test_outputs(self, default_run):
        res, out = default_run
        for name in ("binary.asc", "probability.asc", "priority.asc", "priority.pgm", "priority_mask.pgm",
                     "model_binary.json", "model_priority.json", "report.json"):  # fmt: skip
            assert (out / name).exists(), name
        assert np.array_equal(read_grid(out / "priority.asc").values, res.priority.values)
        img = read_pgm(out / "priority.pgm")
        assert img.shape == res.priority.georef.shape

    def test_priority_contract(self, default_run):
        res, _ = default_run
        b, p = res.binary.values, res.priority.values
        valid = res.priority.valid
        assert np.all(p[valid & (b == 0)] == 0.0)
        ones = p[valid & (b == 1)]
        assert np.all((ones >= 0) & (ones <= 1))

    def test_nodata_is_input_union(self, default_run, layers):
        res, _ = default_run
        union = ~layers.stack.valid_mask()
        assert np.array_equal(~res.priority.valid, union)
        assert union.any() and not union.all()

    def test_report(self, default_run):
        res, out = default_run
        rep = read_json(out / "report.json")
        assert rep["pruning"]["kept"] == res.stage1.features
        assert rep["stage2"]["features"] == res.stage2.features
        assert rep["stage1"]["metrics"]["oa"] - rep["stage2"]["metrics"]["oa"] >= 0.05
        assert rep["table"]["class_counts"] == [2788, 2044]
        assert len(rep["kriging"]["PM25"]["excluded_days"]) == 3
        assert rep["validation"][0]["layer"] == "T2"
        v = rep["validation"][0]
        assert v["rmse"] >= v["mae"] and v["rmse"] >= abs(v["bias"])
        assert "total" in rep["timings"] and rep["flags"] == []

    def test_saved_models_reproduce_grids(self, default_run, layers):
        res, out = default_run
        pixels = stack_to_table(layers.stack)
        for fname, grid, feats in (
            ("model_priority.json", res.probability, res.stage2.features),
            ("model_binary.json", res.binary, res.stage1.features),
        ):
            model = loads_model((out / fname).read_text())
            idx = [pixels.feature_names.index(n) for n in feats]
            p = predict_proba(model, pixels.X[:, idx])
            got = grid.values.ravel()[pixels.provenance]
            expect = p if fname == "model_priority.json" else (p >= 0.5).astype(float)
            assert np.array_equal(got, expect)


class TestConfig:
    def base(self, bundle):
        return json.loads((bundle[0] / "config.json").read_text())

    def test_seed_override(self, bundle):
        assert load_config(bundle[0] / "config.json", seed=7).seed == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_config(tmp_path / "nope.json")
        assert "nope.json" in str(exc.value)

    def test_duplicate_keys(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"seed": 1, "seed": 2}')
        with pytest.raises(ConfigError):
            load_config(p)

    @pytest.mark.parametrize(
        "patch",
        [
            {"model": {"kind": "SVM"}},
            {"model": {"kind": "RF", "colour": 1}},
            {"model": {"kind": "RF", "params": {"n_trees": 0}}},
            {"model": {"kind": "RF", "tune_budget": -1}},
            {"split": {"test_fraction": 1.0}},
            {"correlation_threshold": 0},
            {"drop_for_priority": "NDVI"},
            {"target": {"ncols": 3}},
            {"ramp": {"stops": [[0.5, [0, 0, 0]], [1, [1, 1, 1]]]}},
        ],
    )
    def test_rejects(self, bundle, patch):
        raw = {**self.base(bundle), **patch}
        with pytest.raises(ConfigError):
            config_from_dict(raw, bundle[0])

    def test_band_roles_checked(self, bundle):
        manifest = json.loads((bundle[0] / "manifest.json").read_text())
        spectral = next(s for s in manifest["sources"] if s["role"] == "spectral")
        del spectral["scenes"][0]["nir"]
        raw = {**self.base(bundle), "sources": manifest["sources"]}
        raw.pop("manifest")
        with pytest.raises(ConfigError) as exc:
            config_from_dict(raw, bundle[0])
        assert "nir" in str(exc.value)

    def test_unknown_role(self, bundle):
        raw = {**self.base(bundle), "sources": [{"role": "lidar", "path": "x"}]}
        raw.pop("manifest")
        with pytest.raises(ConfigError):
            config_from_dict(raw, bundle[0])
