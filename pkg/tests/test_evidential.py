import numpy as np
import pytest

from ptvlidar import evidential as ev


def test_marginal_nll_fixture():
    # alpha=1, beta=1, delta=0: 0.5 ln 2pi + 1.5 ln 1 + ln(Gamma(1)/Gamma(1.5))
    v = float(ev.marginal_nll(0.0, 1.0, 1.0))
    assert v == pytest.approx(1.0397207708399179, abs=1e-12)


def test_marginal_nll_increasing_in_abs_delta():
    d = np.linspace(0, 5, 40)
    v = ev.marginal_nll(d, 2.0, 1.5)
    assert np.all(np.diff(v) > 0)


def test_marginal_nll_gradients_vs_central_differences():
    rng = np.random.default_rng(3)
    eps = 1e-6
    worst = 0.0
    for _ in range(60):
        d = rng.normal(0, 2)
        a = 1.0 + rng.uniform(0.05, 4)
        b = rng.uniform(0.05, 5)
        gd, ga, gb = ev.marginal_nll_grads(d, a, b)
        for g, lo, hi in (
                (gd, (d - eps, a, b), (d + eps, a, b)),
                (ga, (d, a - eps, b), (d, a + eps, b)),
                (gb, (d, a, b - eps), (d, a, b + eps))):
            fd = (float(ev.marginal_nll(*hi)) - float(ev.marginal_nll(*lo))) \
                / (2 * eps)
            worst = max(worst, abs(g - fd) / max(1.0, abs(fd)))
    assert worst <= 1e-6


def test_regularizer_values():
    assert float(ev.regularizer(0.0, 5.0)) == 0.0
    assert float(ev.regularizer(1.0, 0.0)) == 2.0
    assert float(ev.regularizer(-2.0, 3.0)) == 10.0


def test_variance_formula_and_gamma_path_agree():
    p = ev.EvidentialParams(alpha=np.array([3.0, 2.0]),
                            beta=np.array([4.0, 1.0]))
    direct = ev.variance(p)
    gamma = ev.variance_gamma_form(p)
    assert direct[0] == pytest.approx(2.0, abs=1e-14)
    assert direct[1] == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(direct, gamma, rtol=1e-12)


def test_variance_monotonicity():
    a = np.linspace(1.5, 6, 30)
    v = ev.variance(ev.EvidentialParams(alpha=a, beta=np.full_like(a, 2.0)))
    assert np.all(np.diff(v) < 0)
    b = np.linspace(0.5, 6, 30)
    v = ev.variance(ev.EvidentialParams(alpha=np.full_like(b, 2.0), beta=b))
    assert np.all(np.diff(v) > 0)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        ev.EvidentialParams(alpha=np.array([1.0]), beta=np.array([1.0]))
    with pytest.raises(ValueError):
        ev.EvidentialParams(alpha=np.array([2.0]), beta=np.array([0.0]))


def test_profile_features_vector_masks_invalid():
    f = ev.ProfileFeatures(T=np.array([280.0, np.nan, 270.0]),
                           T_std=np.array([1.0, 1.0, np.inf]),
                           lapse_std=np.array([0.1, 0.1, 0.1]))
    assert f.valid.tolist() == [True, False, False]
    v = f.vector()
    assert v.size == 12
    assert v[1] == 0.0            # masked T zeroed
    assert v[9:12].tolist() == [1.0, 0.0, 0.0]   # validity channel


def test_day_split_disjoint_and_total():
    days = np.repeat(np.arange(10), 5)
    tr, va, te = ev.split_days(days, seed=4)
    assert set(tr) | set(va) | set(te) == set(range(50))
    assert set(np.unique(days[tr])) & set(np.unique(days[va])) == set()
    assert set(np.unique(days[tr])) & set(np.unique(days[te])) == set()
    assert set(np.unique(days[va])) & set(np.unique(days[te])) == set()


def _make_hetero_dataset(n_prof=800, n_range=8, seed=11):
    rng = np.random.default_rng(seed)
    samples, sigmas = [], []
    for i in range(n_prof):
        x = rng.uniform(-1, 1)
        T = 280 + 10 * x + 0.5 * np.linspace(0, 1, n_range)
        s = 0.5 + 1.5 * (x + 1) / 2
        feats = ev.ProfileFeatures(T=T,
                                   T_std=np.full(n_range, s * 0.9 + 0.05),
                                   lapse_std=np.full(n_range, 1e-3))
        samples.append(ev.ProfileSample(features=feats,
                                        delta=rng.normal(0, s, n_range),
                                        day=i // 16))
        sigmas.append(s)
    return samples, np.array(sigmas)


def test_training_zero_epochs_is_noop():
    samples, _ = _make_hetero_dataset(n_prof=40)
    a = ev.train(samples, epochs=0, seed=9)
    b = ev.train(samples, epochs=0, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert np.all(a.feat_mean == 0.0)   # untouched initialization


def test_training_heteroscedastic_calibration():
    samples, sigmas = _make_hetero_dataset()
    net = ev.train(samples, lam=0.01, epochs=60, seed=5)
    rel = []
    for i in range(0, len(samples), 7):
        _, sig = ev.predict(net, samples[i].features)
        rel.append(abs(float(sig[0]) / sigmas[i] - 1.0))
    assert float(np.median(rel)) < 0.2


def test_training_constant_sigma_low_variation():
    rng = np.random.default_rng(8)
    n_range = 8
    samples = []
    for i in range(400):
        T = 280 + rng.normal(0, 3) + np.linspace(0, 5, n_range)
        feats = ev.ProfileFeatures(T=T, T_std=np.full(n_range, 1.0),
                                   lapse_std=np.full(n_range, 1e-3))
        samples.append(ev.ProfileSample(features=feats,
                                        delta=rng.normal(0, 1.0, n_range),
                                        day=i // 16))
    net = ev.train(samples, lam=0.01, epochs=40, seed=6)
    preds = np.array([float(ev.predict(net, s.features)[1][0])
                      for s in samples[::5]])
    assert preds.std() / preds.mean() < 0.15


def test_predict_deterministic_and_alpha_gt_one():
    samples, _ = _make_hetero_dataset(n_prof=30)
    net = ev.train(samples, epochs=2, seed=1)
    p1, s1 = ev.predict(net, samples[0].features)
    p2, s2 = ev.predict(net, samples[0].features)
    assert np.array_equal(s1, s2)
    assert np.all(p1.alpha > 1.0)
    assert np.all(p1.beta > 0.0)


def test_predict_shape_mismatch_rejected():
    samples, _ = _make_hetero_dataset(n_prof=30, n_range=8)
    net = ev.train(samples, epochs=0, seed=1)
    bad = ev.ProfileFeatures(T=np.zeros(5), T_std=np.zeros(5),
                             lapse_std=np.zeros(5))
    with pytest.raises(ValueError):
        ev.predict(net, bad)


def test_per_range_mode_shapes():
    samples, _ = _make_hetero_dataset(n_prof=60)
    net = ev.train(samples, lam=0.01, epochs=2, seed=2, per_range=True)
    params, sig = ev.predict(net, samples[0].features)
    assert params.alpha.shape == (8,)
    assert sig.shape == (8,)


def test_availability_curve_monotone():
    rng = np.random.default_rng(1)
    sig = rng.uniform(0, 3, 500)
    ts = np.linspace(0, 3.5, 30)
    av = ev.availability_curve(sig, ts)
    assert np.all(np.diff(av) >= 0)
    assert av[-1] == 1.0
    assert np.array_equal(ev.qc_mask(sig, 1.0), sig <= 1.0)


def test_net_save_load_roundtrip(tmp_path):
    samples, _ = _make_hetero_dataset(n_prof=40)
    net = ev.train(samples, epochs=2, seed=3)
    p = str(tmp_path / "net.npz")
    ev.save_net(net, p)
    back = ev.load_net(p)
    f = samples[0].features
    assert np.array_equal(ev.predict(net, f)[1], ev.predict(back, f)[1])


def test_training_divergence_aborts_finite(monkeypatch):
    samples, _ = _make_hetero_dataset(n_prof=40)
    calls = {"n": 0}
    orig = ev._batch_loss_and_grad

    def poisoned(net, X, D, V, lam):
        calls["n"] += 1
        loss, gW, gb = orig(net, X, D, V, lam)
        if calls["n"] > 3:
            return np.nan, gW, gb
        return loss, gW, gb

    monkeypatch.setattr(ev, "_batch_loss_and_grad", poisoned)
    net = ev.train(samples, epochs=5, seed=3)
    f = samples[0].features
    _, sig = ev.predict(net, f)
    assert np.all(np.isfinite(sig))
