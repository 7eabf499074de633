import numpy as np
import pytest

from surroshap.grid import generate_scenario, synthesize_system
from surroshap.surrogate import (
    TEST,
    TRAIN,
    VAL,
    Dataset,
    Layout,
    SurrogateEvaluator,
    TrainConfig,
    assign_splits,
    evaluate_metrics,
    feature_matrix,
    generate_dataset,
    init_model,
    load_dataset,
    load_model,
    loss_and_grads,
    metrics_from_predictions,
    predict_batch,
    save_dataset,
    save_model,
    train,
)
from surroshap.surrogate import _predict_features


def linear_dataset(n=20_000, seed=0):
    """Uniform features with a noiseless linear label."""
    layout = Layout(2, 1, 2)
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, layout.n_features))
    X[:, -layout.n_entities:] = rng.random((n, layout.n_entities)) < 0.5
    w = rng.uniform(-1, 1, layout.n_features)
    y = 5 + X @ w
    return Dataset(X, y, assign_splits(n, seed), layout, seed)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    W = [rng.normal(size=(4, 6)), rng.normal(size=(6, 1))]
    b = [rng.normal(size=6), rng.normal(size=1)]
    X, y = rng.normal(size=(16, 4)), rng.normal(size=16)
    _, gW, gb = loss_and_grads(W, b, X, y, weight_decay=0.01)
    h = 1e-5
    worst = 0.0
    for params, grads in ((W, gW), (b, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = loss_and_grads(W, b, X, y, weight_decay=0.01)[0]
                p[idx] = old - h
                down = loss_and_grads(W, b, X, y, weight_decay=0.01)[0]
                p[idx] = old
                num = (up - down) / (2 * h)
                worst = max(worst, abs(num - g[idx]) / max(1e-8, abs(num) + abs(g[idx])))
    assert worst <= 1e-4


def test_learns_linear_function():
    ds = linear_dataset()
    model = train(ds, TrainConfig(hidden=64, layers=2, epochs=20, lr=5e-3, batch_size=64))
    assert evaluate_metrics(model, ds, VAL).r_squared >= 0.999
    losses = [h["train_loss"] for h in model.metadata["history"]]
    assert np.mean(np.diff(losses) <= 0) >= 0.9


def test_untrained_model_predicts_mean():
    ds = linear_dataset(2000)
    model = train(ds, TrainConfig(hidden=16, layers=2, epochs=0))
    assert evaluate_metrics(model, ds, TEST).r_squared == pytest.approx(0, abs=0.05)


@pytest.fixture(scope="module")
def small():
    system = synthesize_system(2, 1, 3, 4, seed=5)
    ds = generate_dataset(system, 1000, seed=2)
    model = train(ds, TrainConfig(hidden=32, layers=2, epochs=3), beta_thermal=system.beta[system.thermal])
    return system, ds, model


def test_split_counts(small):
    _, ds, _ = small
    assert ds.split_counts == {"train": 700, "val": 200, "test": 100}


def test_dataset_generation_is_deterministic(small):
    system, ds, _ = small
    again = generate_dataset(system, 1000, seed=2)
    assert np.array_equal(ds.X, again.X) and np.array_equal(ds.y, again.y)


def test_dataset_file_round_trip(small, tmp_path):
    _, ds, _ = small
    path = tmp_path / "d.ssds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.layout == ds.layout
    assert np.array_equal(back.split, ds.split)
    assert np.array_equal(back.X, ds.X.astype(np.float32))


def test_batch_equals_row_by_row(small):
    system, _, model = small
    oc = generate_scenario(system, 1, 3)[0]
    S = np.random.default_rng(0).random((1000, system.n_entities)) < 0.5
    batch = predict_batch(model, oc, S)
    rows = np.array([predict_batch(model, oc, S[i:i + 1])[0] for i in range(0, 1000, 37)])
    assert np.array_equal(batch[::37], rows)
    assert np.all(batch >= 0)


def test_model_file_round_trip(small, tmp_path):
    system, _, model = small
    path = tmp_path / "m.ssnn"
    save_model(model, path)
    back = load_model(path)
    assert back.dims == model.dims
    oc = generate_scenario(system, 1, 1)[0]
    S = np.random.default_rng(2).random((300, system.n_entities)) < 0.5
    assert np.array_equal(predict_batch(back, oc, S), predict_batch(model, oc, S))
    assert back.metadata["history"] == model.metadata["history"]


def test_shape_mismatch_is_rejected(small):
    system, _, model = small
    oc = generate_scenario(system, 1, 1)[0]
    with pytest.raises(ValueError, match="shape"):
        predict_batch(model, oc, np.ones((3, system.n_entities + 1), bool))
    ev = SurrogateEvaluator(model)
    assert ev(oc, np.ones((2, system.n_entities), bool)).shape == (2,)


def test_perfect_predictions():
    y = np.array([1.0, 2.0, 4.0])
    S = np.array([[1, 0], [1, 1], [0, 1]], bool)
    m = metrics_from_predictions(y, y, S)
    assert (m.rmse, m.mbe, m.r_squared) == (0, 0, 1)
    assert m.conditional_mbe.tolist() == [0, 0]


def test_mean_predictor_has_zero_r_squared():
    y = np.array([1.0, 2.0, 6.0])
    S = np.ones((3, 2), bool)
    m = metrics_from_predictions(np.full(3, y.mean()), y, S)
    assert m.r_squared == pytest.approx(0, abs=1e-12)
    assert m.mbe == pytest.approx(0, abs=1e-12)


def test_conditional_bias_sign_and_undefined_entries():
    y = np.zeros(4)
    pred = np.array([1.0, 3.0, -1.0, 0.0])
    S = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]], bool)
    with pytest.warns(UserWarning, match="never appear"):
        m = metrics_from_predictions(pred, y, S)
    assert m.conditional_mbe[:2].tolist() == [2.0, -0.5]
    assert np.isnan(m.conditional_mbe[2])
    assert m.defined.tolist() == [True, True, False]
    assert abs(m.mbe) <= m.rmse


def test_feature_layout(small):
    system, _, _ = small
    oc = generate_scenario(system, 1, 0)[0]
    S = np.eye(system.n_entities, dtype=bool)[:2]
    X = feature_matrix(oc, system.beta[system.thermal], S)
    assert X.shape == (2, Layout.of(system).n_features)
    assert X[0, :system.n_thermal].tolist() == oc.rho_g.tolist()
    assert X[1, -system.n_entities:].tolist() == S[1].tolist()


def test_init_has_zero_output_layer():
    model = init_model(Layout(1, 1, 1), 8, 3, seed=0)
    assert model.dims == [Layout(1, 1, 1).n_features, 8, 8, 8, 1]
    assert not model.weights[-1].any()


def test_trained_surrogate_tracks_training_labels(model26, dataset26):
    X, y = dataset26.part(TRAIN)
    rmse = evaluate_metrics(model26, dataset26, TEST).rmse
    pred = _predict_features(model26, X[:20_000])
    assert np.mean(np.abs(pred - y[:20_000]) <= 3 * rmse) >= 0.99


def test_empty_coalition_prediction_is_near_zero(model26, dataset26, system26):
    rmse = evaluate_metrics(model26, dataset26, TEST).rmse
    for oc in generate_scenario(system26, 5, 0):
        pred = predict_batch(model26, oc, np.zeros((1, system26.n_entities), bool))[0]
        assert 0 <= pred <= 3 * rmse
