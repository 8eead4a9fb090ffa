import numpy as np
import pytest

from flowatlas import atlas as at
from flowatlas import manifolds as mf
from flowatlas.errors import ConfigError
from flowatlas.flows import ChartFlow

_LOG_2PI = np.log(2.0 * np.pi)


def identity_chart(d=2, D=3, seed=0):
    return ChartFlow(d, D, n_g_layers=2, n_h_layers=2, hidden=(8, 8), seed=seed)


def randomized_chart(d=1, D=2, seed=0, scale=0.3):
    chart = ChartFlow(d, D, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=seed)
    rng = np.random.default_rng(seed + 100)
    chart.set_param_arrays([rng.normal(scale=scale, size=a.shape)
                            for a in chart.param_arrays()])
    return chart


def test_regularized_component_identity_chart():
    a = at.Atlas([identity_chart()], resp_threshold=0.0, lambda_recon=100.0)
    # identity flow: z = (0, 0), standard normal base, unit Gram, residual 1
    val = a.regularized_log_component(np.array([0.0, 0.0, 1.0]), 0)
    assert np.allclose(val, -_LOG_2PI - 100.0)
    a.lambda_recon = 0.0
    val = a.regularized_log_component(np.array([0.0, 0.0, 1.0]), 0)
    assert np.allclose(val, -_LOG_2PI)


def test_mixture_of_identical_charts_matches_component():
    charts = [identity_chart(seed=3), identity_chart(seed=3)]
    a = at.Atlas(charts, resp_threshold=0.0, lambda_recon=10.0)
    x = np.array([0.3, -0.2, 0.5])
    # logsumexp of C equal terms with weight 1/C collapses to the term itself
    assert np.allclose(a.mixture_log_density(x), a.regularized_log_component(x, 0))


def test_mixture_logsumexp_values():
    a = at.Atlas([identity_chart(), identity_chart()], resp_threshold=0.0)
    comp = np.array([[-1.0, -3.0]])
    lse = at._logsumexp(comp + np.log(0.5))
    expected = np.log(0.5 * np.exp(-1.0) + 0.5 * np.exp(-3.0))
    assert np.allclose(lse, expected)
    assert np.isclose(expected, -1.5662, atol=1e-3)


def test_logsumexp_handles_minus_inf_rows():
    a = np.array([[-np.inf, -np.inf], [0.0, -np.inf]])
    out = at._logsumexp(a)
    assert np.isneginf(out[0])
    assert np.isclose(out[1], 0.0)


def test_responsibilities_softmax():
    a = at.Atlas([identity_chart(), identity_chart()], resp_threshold=0.0)
    r = a.responsibilities(None, components=np.array([[-1.0, -3.0]]))
    assert np.allclose(r, [[0.88079708, 0.11920292]], atol=1e-7)
    assert np.allclose(r.sum(axis=-1), 1.0)
    # shift invariance of the softmax
    r2 = a.responsibilities(None, components=np.array([[-1.0, -3.0]]) + 17.3)
    assert np.allclose(r, r2)


def test_filtered_responsibilities():
    a = at.Atlas([identity_chart(), identity_chart()], resp_threshold=0.4)
    r = a.filtered_responsibilities(None, components=np.array([[-1.0, -3.0]]))
    assert np.allclose(r, [[1.0, 0.0]])
    a2 = at.Atlas([identity_chart(), identity_chart()], resp_threshold=0.05)
    r = a2.filtered_responsibilities(None, components=np.array([[0.0, 0.0]]))
    assert np.allclose(r, [[0.5, 0.5]])


def test_em_m_step_loss_manual():
    a = at.Atlas([identity_chart(), identity_chart(seed=1)],
                 resp_threshold=0.0, lambda_recon=5.0)
    X = np.array([[0.2, -0.1, 0.4], [0.0, 0.3, -0.2]])
    R = np.array([[0.7, 0.3], [0.5, 0.5]])
    comp = a.component_matrix(X)
    assert np.isclose(a.em_m_step_loss(X, R), -np.sum(R * comp))
    a.lambda_balance = 2.0
    extra = 2.0 * np.sum((R.mean(axis=0) - 0.5) ** 2)
    assert np.isclose(a.em_m_step_loss(X, R), -np.sum(R * comp) + extra)


def test_em_m_step_loss_threshold_masks():
    a = at.Atlas([identity_chart(), identity_chart(seed=1)],
                 resp_threshold=0.4, lambda_recon=5.0)
    X = np.array([[0.2, -0.1, 0.4]])
    R = np.array([[0.9, 0.1]])
    comp = a.component_matrix(X)
    assert np.isclose(a.em_m_step_loss(X, R), -0.9 * comp[0, 0])


def test_atlas_validation():
    with pytest.raises(ConfigError):
        at.Atlas([])
    with pytest.raises(ConfigError):
        at.Atlas([identity_chart()], resp_threshold=1.5)
    with pytest.raises(ConfigError):
        at.Atlas([identity_chart()], lambda_recon=-1.0)
    from flowatlas.errors import DimensionError
    with pytest.raises(DimensionError):
        at.Atlas([identity_chart(d=2, D=3), identity_chart(d=1, D=3)])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        at.TrainConfig(mode="ADAM")
    with pytest.raises(ConfigError):
        at.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        at.TrainConfig(learning_rate=0.0)
    cfg = at.TrainConfig(mode="SINGLE", pretrain_epochs=200)
    assert cfg.pretrain_epochs == 0


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(0)
    A = rng.normal(loc=(0, 0), scale=0.1, size=(200, 2))
    B = rng.normal(loc=(5, 5), scale=0.1, size=(200, 2))
    X = np.vstack([A, B])
    clusters = at.kmeans_init(X, 2, seed=0)
    sizes = sorted(len(c) for c in clusters)
    assert sizes == [200, 200]
    labels = np.zeros(len(X), dtype=int)
    labels[clusters[1]] = 1
    # each blob lands wholly in one cluster
    assert len(np.unique(labels[:200])) == 1
    assert len(np.unique(labels[200:])) == 1


def test_kmeans_determinism():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 3))
    c1 = at.kmeans_init(X, 4, seed=7)
    c2 = at.kmeans_init(X, 4, seed=7)
    for a, b in zip(c1, c2):
        assert np.array_equal(a, b)


def test_atlas_serialization_round_trip():
    charts = [randomized_chart(seed=s) for s in range(2)]
    a = at.Atlas(charts, resp_threshold=0.07, lambda_recon=42.0, lambda_balance=0.5)
    b = at.Atlas.loads(a.dumps())
    assert b.n_charts == 2
    assert b.resp_threshold == a.resp_threshold
    assert b.lambda_recon == a.lambda_recon
    assert b.lambda_balance == a.lambda_balance
    for ca, cb in zip(a.charts, b.charts):
        for pa, pb in zip(ca.param_arrays(), cb.param_arrays()):
            assert np.array_equal(pa, pb)
    x = np.array([[0.4, -0.3]])
    assert np.allclose(a.mixture_log_density(x), b.mixture_log_density(x))


def _circle_data(n, seed):
    return mf.sample_dataset(mf.ManifoldSpec("circle"),
                             mf.DistributionSpec("uniform"), n, seed=seed)


def test_em_training_smoke():
    charts = [ChartFlow(1, 2, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=s)
              for s in range(2)]
    a = at.Atlas(charts, lambda_recon=100.0)
    X = _circle_data(96, seed=0)
    Xv = _circle_data(32, seed=1)
    cfg = at.TrainConfig(mode="EM", epochs=3, batch_size=32, pretrain_epochs=2,
                         learning_rate=1e-3, seed=0)
    history = at.train(a, X, Xv, cfg)
    phases = [h.phase for h in history]
    assert phases.count("warmup") == 2
    assert phases.count("main") == 3
    assert all(np.isfinite(h.train_loss) for h in history)
    assert all(np.isfinite(h.val_recon) for h in history if h.phase == "main")


def test_em_training_improves_reconstruction():
    charts = [ChartFlow(1, 2, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=s)
              for s in range(2)]
    a = at.Atlas(charts, lambda_recon=100.0)
    X = _circle_data(128, seed=2)
    Xv = _circle_data(64, seed=3)
    before = float(np.mean([c.reconstruct(Xv)[1].mean() for c in a.charts]))
    cfg = at.TrainConfig(mode="EM", epochs=8, batch_size=64, pretrain_epochs=8,
                         learning_rate=3e-3, seed=0)
    history = at.train(a, X, Xv, cfg)
    after = min(h.val_recon for h in history if h.phase == "main")
    assert after < before


def test_identical_charts_stay_identical_under_em():
    # a symmetric initialization gets symmetric gradients
    charts = [ChartFlow(1, 2, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=5)
              for _ in range(2)]
    a = at.Atlas(charts, lambda_recon=100.0)
    X = _circle_data(64, seed=4)
    cfg = at.TrainConfig(mode="EM", epochs=2, batch_size=32, pretrain_epochs=0,
                         learning_rate=1e-3, seed=0)
    at.train(a, X, X, cfg)
    for pa, pb in zip(a.charts[0].param_arrays(), a.charts[1].param_arrays()):
        if pa.size:
            assert np.max(np.abs(pa - pb)) < 1e-10


def test_mle_and_single_modes_run():
    charts = [ChartFlow(1, 2, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=s)
              for s in range(2)]
    a = at.Atlas(charts, lambda_recon=100.0)
    X = _circle_data(64, seed=5)
    history = at.train(a, X, X, at.TrainConfig(mode="MLE", epochs=2, batch_size=32,
                                               pretrain_epochs=0, seed=0))
    assert len(history) == 2

    single = at.Atlas([ChartFlow(1, 2, n_g_layers=2, n_h_layers=3,
                                 hidden=(8, 8), seed=9)], lambda_recon=100.0)
    history = at.train(single, X, X, at.TrainConfig(mode="SINGLE", epochs=2,
                                                    batch_size=32, seed=0))
    assert len(history) == 2
    with pytest.raises(ConfigError):
        at.train(a, X, X, at.TrainConfig(mode="SINGLE", epochs=1))


def test_single_m_mode_runs():
    single = at.Atlas([ChartFlow(1, 2, n_g_layers=2, n_h_layers=3,
                                 hidden=(8, 8), seed=11)], lambda_recon=100.0)
    X = _circle_data(96, seed=6)
    Xv = _circle_data(48, seed=7)
    history = at.train(single, X, Xv,
                       at.TrainConfig(mode="SINGLE_M", epochs=4, batch_size=32, seed=0))
    phases = [h.phase for h in history]
    assert phases.count("reconstruction") == 2
    assert phases.count("density") == 2
    assert all(np.isfinite(h.val_wasserstein) for h in history if h.phase == "density")


def test_training_determinism():
    def run():
        charts = [ChartFlow(1, 2, n_g_layers=2, n_h_layers=3, hidden=(8, 8), seed=s)
                  for s in range(2)]
        a = at.Atlas(charts, lambda_recon=100.0)
        X = _circle_data(64, seed=8)
        at.train(a, X, X, at.TrainConfig(mode="EM", epochs=2, batch_size=32,
                                         pretrain_epochs=1, seed=3))
        return np.concatenate([p.ravel() for c in a.charts for p in c.param_arrays()])

    assert np.array_equal(run(), run())


def test_history_csv():
    recs = [at.EpochRecord(0, "main", 1.5, 0.25)]
    text = at.history_to_csv(recs)
    lines = text.strip().split("\n")
    assert lines[0].startswith("epoch,phase")
    assert lines[1].startswith("0,main,1.5,0.25")
