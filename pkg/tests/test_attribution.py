import numpy as np
import pytest

from asdexplain import attribution as at
from asdexplain import evaluation as ev
from asdexplain import ingest, nn
from asdexplain.ssae import TrainConfig
from asdexplain.svm_rfe import apply_selection, standardize


def _logit(model, x, c):
    return nn.forward(model, x).logits[0, c]


# ---------------------------------------------------------------- linear model

def _linear_case(linear_net, rng):
    x, b = rng.normal(size=6), rng.normal(size=6)
    c = int(at.predicted_class(linear_net, x[None])[0])
    return x, b, c, linear_net.layers[0].weight[c] * (x - b)


def test_linear_methods_agree(linear_net, rng):
    x, b, c, expected = _linear_case(linear_net, rng)
    results = {
        "ig": at.integrated_gradients(linear_net, x, b, steps=3, target=c),
        "dl": at.deep_lift(linear_net, x, b, target=c),
        "dls": at.deep_lift_shap(linear_net, x, b[None], target=c),
        "gs": at.gradient_shap(linear_net, x, b[None], n_samples=5, noise_sd=0.0, target=c),
        "ks": at.kernel_shap(linear_net, x, b, target=c, exhaustive=True),
    }
    for name, vals in results.items():
        assert np.max(np.abs(vals - expected)) < 1e-6, name


def test_deep_lift_shap_linear_background(linear_net, rng):
    x = rng.normal(size=6)
    B = rng.normal(size=(7, 6))
    c = int(at.predicted_class(linear_net, x[None])[0])
    got = at.deep_lift_shap(linear_net, x, B, target=c)
    assert np.allclose(got, linear_net.layers[0].weight[c] * (x - B.mean(axis=0)), atol=1e-12)


def test_guided_equals_gradient_without_relu(rng):
    model = nn.MlpModel([nn.Layer(rng.normal(size=(4, 5)), rng.normal(size=4), "identity"),
                         nn.Layer(rng.normal(size=(2, 4)), np.zeros(2), "softmax")])
    x = rng.normal(size=(3, 5))
    t = at.predicted_class(model, x)
    assert np.allclose(at.guided_backprop(model, x), at.score_gradient(model, x, t))


def test_guided_only_zeroes(rng):
    # identity first layer: the input gradient is the gradient at the ReLU
    model = nn.MlpModel([nn.Layer(np.eye(6), rng.normal(size=6) * 0.1, "relu"),
                         nn.Layer(rng.normal(size=(2, 6)), np.zeros(2), "softmax")])
    x = rng.normal(size=(20, 6))
    t = at.predicted_class(model, x)
    plain = at.score_gradient(model, x, t)
    guided = at.guided_backprop(model, x)
    assert np.all((guided == 0) | (guided == plain))
    assert np.all(guided >= 0)


# ---------------------------------------------------------------- ReLU network

def test_zero_path(small_relu_net, rng):
    x = rng.normal(size=8)
    c = int(at.predicted_class(small_relu_net, x[None])[0])
    for vals in (at.integrated_gradients(small_relu_net, x, x, target=c),
                 at.deep_lift(small_relu_net, x, x, target=c),
                 at.deep_lift_shap(small_relu_net, x, x[None], target=c),
                 at.gradient_shap(small_relu_net, x, x[None], noise_sd=0.0, target=c),
                 at.kernel_shap(small_relu_net, x, x, target=c)):
        assert np.all(vals == 0)


def test_ig_completeness_and_steps(small_relu_net, rng):
    x, b = rng.normal(size=8), np.zeros(8)
    c = int(at.predicted_class(small_relu_net, x[None])[0])
    delta = _logit(small_relu_net, x[None], c) - _logit(small_relu_net, b[None], c)
    # few wide ReLU kinks: midpoint error shrinks like 1/steps
    errs = [abs(at.integrated_gradients(small_relu_net, x, b, steps=m, target=c).sum() - delta)
            for m in (64, 512, 4096)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-3 * abs(delta)
    with pytest.raises(ValueError):
        at.integrated_gradients(small_relu_net, x, b, steps=0)


def test_deep_lift_summation(small_relu_net, rng):
    X, b = rng.normal(size=(10, 8)), rng.normal(size=8)
    t = at.predicted_class(small_relu_net, X)
    vals = at.deep_lift(small_relu_net, X, b, target=t)
    for i in range(10):
        delta = _logit(small_relu_net, X[i:i + 1], t[i]) - _logit(small_relu_net, b[None], t[i])
        assert abs(vals[i].sum() - delta) < 1e-6


def test_deep_lift_shap_degenerate_backgrounds(small_relu_net, rng):
    x, b = rng.normal(size=8), rng.normal(size=8)
    single = at.deep_lift_shap(small_relu_net, x, b[None])
    assert np.allclose(single, at.deep_lift(small_relu_net, x, b))
    assert np.allclose(at.deep_lift_shap(small_relu_net, x, np.tile(b, (4, 1))), single)
    with pytest.raises(ValueError):
        at.deep_lift_shap(small_relu_net, x, np.zeros((0, 8)))


def test_gradient_shap_converges_to_ig(small_relu_net, rng):
    x, b = rng.normal(size=8), rng.normal(size=8)
    c = int(at.predicted_class(small_relu_net, x[None])[0])
    gs = at.gradient_shap(small_relu_net, x, b[None], n_samples=4096, noise_sd=0.0, seed=1,
                          target=c)
    ig = at.integrated_gradients(small_relu_net, x, b, steps=512, target=c)
    assert np.mean(np.abs(gs - ig)) < 0.01
    again = at.gradient_shap(small_relu_net, x, b[None], n_samples=4096, noise_sd=0.0, seed=1,
                             target=c)
    assert np.array_equal(gs, again)


def test_kernel_shap_efficiency_sampled(small_relu_net, rng):
    X = rng.normal(size=(4, 8))
    phi = at.kernel_shap(small_relu_net, X, None, n_coalitions=64, seed=3, exhaustive=False)
    t = at.predicted_class(small_relu_net, X)
    for i in range(4):
        delta = _logit(small_relu_net, X[i:i + 1], t[i]) - _logit(small_relu_net, np.zeros((1, 8)), t[i])
        assert abs(phi[i].sum() - delta) < 1e-9
    with pytest.raises(ValueError, match="coalitions"):
        at.kernel_shap(small_relu_net, X, None, n_coalitions=9, exhaustive=False)


def test_kernel_shap_product_game():
    def f(batch):
        v = batch[:, 0] * batch[:, 1]
        return np.stack([v, -v], axis=1)
    phi = at.kernel_shap(f, np.array([1.0, 1.0]), np.zeros(2), target=0)
    assert np.allclose(phi, [0.5, 0.5], atol=1e-9)


def test_lime_toy_exhaustive():
    def proba(batch):
        p = 0.1 + 0.2 * (batch[:, 3] != 0)
        return np.stack([1 - p, p], axis=1)
    x = np.array([1.0, -2.0, 0.5, 3.0, 1.5])
    coef = at.lime(proba, x, ridge=1e-9, target=1, masks="exhaustive")
    expected = np.array([0, 0, 0, 0.2, 0])
    assert np.max(np.abs(coef - expected)) < 1e-3


def test_lime_degenerate_and_seeded(small_relu_net, rng):
    zero = at.lime(small_relu_net, np.zeros(8), n_samples=200, seed=1)
    assert np.allclose(zero, 0, atol=1e-12)
    x = rng.normal(size=8)
    a = at.lime(small_relu_net, x, n_samples=200, seed=4)
    assert np.array_equal(a, at.lime(small_relu_net, x, n_samples=200, seed=4))
    with pytest.raises(ValueError, match="identical"):
        at.lime(small_relu_net, x, masks=np.ones((20, 8)))
    with pytest.raises(ValueError):
        at.lime(small_relu_net, x, n_samples=5)


def test_methods_do_not_mutate(small_relu_net, rng):
    before = small_relu_net.checksum()
    X = rng.normal(size=(3, 8))
    cfg = at.AttributionConfig(ig_steps=8, gradient_shap_samples=4, lime_samples=50,
                               kernel_shap_coalitions=40)
    for m in at.METHODS:
        vals = at.compute_attribution(m, small_relu_net, X, cfg, background=X)
        assert vals.values.shape == X.shape and np.all(np.isfinite(vals.values))
    assert small_relu_net.checksum() == before
    with pytest.raises(ValueError):
        at.compute_attribution("saliency", small_relu_net, X, cfg)


# ---------------------------------------------------------------- rankings

def test_random_ranking():
    r = at.random_ranking(50, seed=1)
    assert sorted(r.order.tolist()) == list(range(50))
    assert np.array_equal(r.order, at.random_ranking(50, seed=1).order)
    assert not np.array_equal(r.order, at.random_ranking(50, seed=2).order)


def test_rank_features_examples():
    one = at.Attribution("x", np.array([[0.1, -0.5, 0.3]]), np.array([0]))
    assert at.rank_features(one).order.tolist() == [1, 2, 0]
    vals = np.random.default_rng(0).normal(size=(4, 9))
    a = at.rank_features(at.Attribution("x", vals, np.zeros(4, int)))
    b = at.rank_features(at.Attribution("x", np.vstack([vals, vals]), np.zeros(8, int)))
    assert np.array_equal(a.order, b.order)
    flat = at.Attribution("x", np.ones((2, 5)), np.zeros(2, int))
    assert at.rank_features(flat).order.tolist() == [0, 1, 2, 3, 4]


def test_ranking_and_score_files(tmp_path):
    r = at.rank_features(at.Attribution("lime", np.array([[0.2, -0.9, 0.4]]), np.zeros(1, int)), seed=7)
    r.write(tmp_path / "lime.ranking")
    text = (tmp_path / "lime.ranking").read_text().splitlines()
    assert text[0] == "# method=lime seed=7" and text[1:] == ["1", "2", "0"]
    back = at.FeatureRanking.read(tmp_path / "lime.ranking")
    assert back.method == "lime" and back.order.tolist() == [1, 2, 0]
    at.write_attribution_scores(tmp_path / "s.csv", r, [40, 7, 6000])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "feature_index,original_edge_index,score" and lines[2] == "1,7,0.9"
    idx, orig, score = at.read_attribution_scores(tmp_path / "s.csv")
    assert orig.tolist() == [40, 7, 6000] and np.array_equal(score, r.scores)


def test_ig_ranks_planted_features_first():
    ds, truth = ingest.generate_synthetic(ingest.SynthConfig(n_subjects=200, n_planted_edges=15,
                                                             effect_size=0.6, seed=5))
    cfg = ev.PipelineConfig(n_selected=80, hidden_dims=(30, 10),
                            pretrain=TrainConfig(epochs=10, batch_size=32),
                            finetune=TrainConfig(epochs=60, learning_rate=1e-3, batch_size=32))
    split = ev.stratified_kfold(ds.labels, 5, 0.1, seed=0)[0]
    tf = ev.run_fold(ds.X, ds.labels, split, cfg, 0)
    Z = standardize(apply_selection(ds.X[split.train], tf.selection), tf.stats)
    ranking = at.rank_features(at.compute_attribution("integrated_gradients", tf.model, Z,
                                                      at.AttributionConfig(ig_steps=64)))
    rank_of = np.empty(80, dtype=int)
    rank_of[ranking.order] = np.arange(80)
    planted = np.isin(tf.selection.kept, truth.edge_indices)
    assert planted.any()
    assert rank_of[planted].mean() < rank_of[~planted].mean()
