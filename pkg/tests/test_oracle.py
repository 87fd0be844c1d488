import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtune.logfeat import features_from_result
from simtune.oracle import (
    CVConfig,
    Dataset,
    DatasetRow,
    DatasetSchema,
    EmptyDatasetError,
    KNeighbors,
    PipelineSpec,
    RawMatrix,
    TrainedOracle,
    TreeEnsemble,
    clean_dataset,
    fit_pipeline,
    logo_cv,
    logo_splits,
    make_grid,
    make_row,
    metrics,
    train,
)
from simtune.searchspace import ParameterDef, SearchSpace, builtin_space, lhs_sample, to_controls
from simtune.simkernel import NumericalControls, quarter_five_spot, run_simulation


def toy_dataset(n=60, n_groups=4, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    space = SearchSpace([ParameterDef("a", "real", [0, 1], 0.5), ParameterDef("b", "real", [0, 1], 0.5)])
    schema = DatasetSchema(["f0", "f1"], space.encoded_names(), space.to_json())
    rows = []
    for i in range(n):
        f = rng.random(2)
        c = rng.random(2)
        et = 1.0 + 3 * c[0] + f[0] + 0.5 * c[1] ** 2
        et *= 1 + noise * rng.normal()
        rows.append(DatasetRow(f"g{i % n_groups}", f, c, et, 0.01 * c[1], -0.02, 0.0, timesteps=5))
    return Dataset(schema, rows)


def test_metrics_examples():
    assert metrics([100, 200], [110, 180]) == pytest.approx((10.0, 250.0, 15.0))
    assert metrics([3, 4], [3, 4]) == (0.0, 0.0, 0.0)
    assert metrics([1], [2])[0] == pytest.approx(100.0)
    with pytest.raises(ValueError):
        metrics([0, 1], [1, 1])


def test_clean_dataset_rules():
    d = toy_dataset(3)
    d.rows[1].status = "timeout"
    cleaned = clean_dataset(d)
    assert len(cleaned) == 2 and cleaned.rows[1] is d.rows[2]
    d.rows[0].timesteps = 1
    assert len(clean_dataset(d)) == 1
    full = toy_dataset(10)
    assert clean_dataset(full).rows == full.rows
    d.rows[2].status = "abnormal"
    with pytest.raises(EmptyDatasetError):
        clean_dataset(d)


def test_pipeline_examples():
    X = RawMatrix(np.array([[1.0, 0.0], [3.0, 10.0]]))
    y = np.array([1.0, 2.0])
    std = fit_pipeline(PipelineSpec("standardize", 1.0), X, y).transform(X).values
    assert std[:, 0].tolist() == [-1.0, 1.0]
    r01 = fit_pipeline(PipelineSpec("rescale_01", 1.0), X, y).transform(X).values
    assert r01[:, 1].tolist() == [0.0, 1.0]
    X10 = RawMatrix(np.random.default_rng(0).random((20, 10)))
    fp = fit_pipeline(PipelineSpec("standardize", 0.8), X10, np.arange(20.0))
    assert fp.selected.size == 8 and list(fp.selected) == sorted(fp.selected)
    with pytest.raises(ValueError):
        fit_pipeline(PipelineSpec(), RawMatrix(np.ones((1, 3))), [1.0])


def test_pipeline_constant_column_and_selection():
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.random(50), np.full(50, 7.0), rng.random(50)])
    y = 5 * X[:, 2] + 0.01 * rng.random(50)
    fp = fit_pipeline(PipelineSpec("standardize", 1.0), RawMatrix(X), y)
    assert fp.scores[1] == 0.0
    assert np.all(fp.transform(RawMatrix(X)).values[:, 1] == 0.0)
    assert np.argmax(fp.scores) == 2


def test_pipeline_rejects_transformed_input():
    X = RawMatrix(np.random.default_rng(0).random((5, 3)))
    fp = fit_pipeline(PipelineSpec(), X, np.arange(5.0))
    with pytest.raises(TypeError):
        fp.transform(fp.transform(X))


def test_tree_exact_fit_and_knn_self_prediction():
    rng = np.random.default_rng(2)
    X = rng.random((80, 3))
    y = np.sin(5 * X[:, 0]) + X[:, 1] + 2
    for crit in ("mse", "mae"):
        t = TreeEnsemble("tree", {"criterion": crit}).fit(X, y)
        assert metrics(y, t.predict(X))[0] == 0.0
    k = KNeighbors({"n_neighbors": 1}).fit(X, y)
    assert np.array_equal(k.predict(X), y)


def test_tree_matches_sklearn_on_one_feature():
    from sklearn.tree import DecisionTreeRegressor
    rng = np.random.default_rng(3)
    X = rng.random((120, 1))
    y = np.exp(X[:, 0]) + 0.1 * rng.normal(size=120)
    Xq = rng.random((300, 1))
    for crit, sk_crit in (("mse", "squared_error"), ("mae", "absolute_error")):
        for depth in (None, 4):
            ours = TreeEnsemble("tree", {"criterion": crit, "max_depth": depth}).fit(X, y)
            ref = DecisionTreeRegressor(criterion=sk_crit, max_depth=depth, random_state=0).fit(X, y)
            assert np.allclose(ours.predict(Xq), ref.predict(Xq), rtol=1e-12, atol=1e-12)


def test_knn_matches_sklearn():
    from sklearn.neighbors import KNeighborsRegressor
    rng = np.random.default_rng(4)
    X, y, Xq = rng.random((100, 4)), rng.random(100), rng.random((50, 4))
    for k in (1, 3, 6):
        for p in (1, 2):
            ours = KNeighbors({"n_neighbors": k, "p": p}).fit(X, y).predict(Xq)
            ref = KNeighborsRegressor(n_neighbors=k, p=p, algorithm="brute").fit(X, y).predict(Xq)
            assert np.allclose(ours, ref)


def test_forest_bounds_determinism_and_constant_target():
    rng = np.random.default_rng(5)
    X = rng.random((100, 5))
    y = X @ np.arange(1.0, 6.0)
    Xq = rng.normal(0, 3, (200, 5))
    a = TreeEnsemble("forest", {"n_estimators": 20, "max_features": "sqrt"}, seed=9).fit(X, y)
    b = TreeEnsemble("forest", {"n_estimators": 20, "max_features": "sqrt"}, seed=9).fit(X, y)
    pa = a.predict(Xq)
    assert np.array_equal(pa, b.predict(Xq))
    assert pa.min() >= y.min() and pa.max() <= y.max()
    c = TreeEnsemble("forest", {"n_estimators": 10}).fit(X, np.full(100, 4.5))
    assert np.all(c.predict(Xq) == 4.5)


def test_hyperparameter_grid_enforced():
    with pytest.raises(ValueError):
        TreeEnsemble("forest", {"n_estimators": 7})
    with pytest.raises(ValueError):
        KNeighbors({"n_neighbors": 9})
    with pytest.raises(ValueError):
        train("svm", {}, PipelineSpec(), toy_dataset())


def test_logo_split_example():
    splits = logo_splits(["A", "A", "B", "C"])
    assert len(splits) == 3
    name, tr, va = splits[1]
    assert name == "B" and tr.tolist() == [0, 1, 3] and va.tolist() == [2]
    with pytest.raises(ValueError):
        logo_splits(["A", "A"])


@settings(max_examples=40, deadline=None)
@given(n_groups=st.integers(2, 16), n_rows=st.integers(16, 60), seed=st.integers(0, 10_000))
def test_logo_cv_has_no_leakage(n_groups, n_rows, seed):
    d = toy_dataset(max(n_rows, n_groups), n_groups, seed)
    rng = np.random.default_rng(seed)
    for r in d.rows:  # scramble group membership
        r.group_id = f"g{rng.integers(n_groups)}"
    present = len(set(d.groups.tolist()))
    if present < 2:
        return
    grid = [CVConfig("knn", {"n_neighbors": 1, "p": 2}, PipelineSpec())]
    report, _ = logo_cv(d, grid)
    assert len(report.splits) == present
    assert report.leakage_free()
    for s in report.splits:
        assert s.val_groups == [s.held_out]
        assert s.held_out not in s.train_groups
        assert s.val[0] >= 0


def test_sixteen_groups_give_sixteen_splits():
    d = toy_dataset(64, 16)
    report, _ = logo_cv(d, [CVConfig("tree", {"criterion": "mse", "max_depth": 4}, PipelineSpec())])
    assert len(report.splits) == 16


def test_single_config_grid_is_best_and_refit_on_everything():
    d = toy_dataset(40, 4)
    cfg = CVConfig("forest", {"n_estimators": 10, "max_features": "all", "criterion": "mse", "max_depth": None},
                   PipelineSpec("rescale_01", 0.9))
    report, oracle = logo_cv(d, [cfg])
    assert report.best == cfg and report.best_index == 0
    assert oracle.n_rows == 40 and oracle.dataset_hash == d.content_hash()


def test_grid_search_prefers_the_better_model():
    d = toy_dataset(120, 6, noise=0.02)
    grid = make_grid(("tree", "knn"), scalers=("standardize",), k_fractions=(1.0,),
                     overrides={"tree": {"max_depth": [None], "criterion": ["mse"]}, "knn": {"p": [2]}})
    report, _ = logo_cv(d, grid)
    best_mape = report.mean(report.best_index)[0]
    assert all(best_mape <= report.mean(i)[0] for i in range(len(grid)))
    assert report.to_csv().count("\n") == 1 + len(grid) * 6


def test_workers_do_not_change_the_report():
    d = toy_dataset(40, 4)
    grid = make_grid(("knn",), scalers=("standardize",), k_fractions=(1.0, 0.8), overrides={"knn": {"p": [1]}})
    r1, o1 = logo_cv(d, grid, workers=1)
    r2, o2 = logo_cv(d, grid, workers=2)
    assert r1.to_csv() == r2.to_csv()
    assert o1.to_json() == o2.to_json()


def test_dataset_csv_round_trip(tmp_path):
    d = toy_dataset(12)
    d.save(tmp_path / "d.csv")
    again = Dataset.load(tmp_path / "d.csv")
    assert again.to_csv() == d.to_csv()
    assert again.schema == d.schema


def test_oracle_json_round_trip_and_prediction(tmp_path):
    d = toy_dataset(50)
    for kind, hyper in (("forest", {"n_estimators": 10}), ("knn", {"n_neighbors": 1}), ("tree", {})):
        o = train(kind, hyper, PipelineSpec("standardize", 0.8), d, seed=3)
        o.save(tmp_path / "o.json")
        back = TrainedOracle.load(tmp_path / "o.json")
        X = d.inputs()
        assert np.array_equal(o.predict_raw(X)[0], back.predict_raw(X)[0])
    o = train("knn", {"n_neighbors": 1}, PipelineSpec("standardize", 1.0), d)
    r = d.rows[7]
    space = d.schema.space()
    sample = {"a": float(r.config[0]), "b": float(r.config[1])}
    et, q = o.predict(r.features, sample)
    assert et == pytest.approx(r.elapsed_s) and q == pytest.approx(r.mean_abs_mbe)
    assert space.names == ["a", "b"]


def test_batch_prediction_shape_and_order():
    d = toy_dataset(50)
    o = train("forest", {"n_estimators": 10}, PipelineSpec(), d)
    samples = lhs_sample(d.schema.space(), 10_000, seed=1)
    et, q = o.predict_batch(d.rows[0].features, samples)
    assert et.shape == q.shape == (10_000,)
    assert et[123] == o.predict(d.rows[0].features, samples[123])[0]


def test_rows_from_real_runs():
    space = builtin_space()
    case = quarter_five_spot(nx=4, ny=4, horizon=30, report=10, controls=NumericalControls(solver_kind="direct"))
    base = run_simulation(case)
    ctx = features_from_result(base, case)
    schema = DatasetSchema.for_space(space)
    data = Dataset(schema)
    for s in lhs_sample(space, 3, seed=0):
        res = run_simulation(case.with_controls(to_controls(s)))
        data.append(make_row("m0", ctx, s, space, res))
    assert len(data) == 3
    assert data.inputs().values.shape == (3, schema.n_inputs)
    assert np.all(data.elapsed > 0)
