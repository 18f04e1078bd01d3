import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgntk.engine import GntkConfig, compute_gntk
from deepgntk.errors import DataError, NumericalError
from deepgntk.graph import DatasetSplit, FeatureMatrix, Graph, generate_sbm, path_graph
from deepgntk.network import (GcnParams, NetConfig, aggregation_matrix, backward,
                              empirical_ntk, forward, grad_check, init_params,
                              ntk_by_jacobian, ntk_comparison, train_gcn)
from deepgntk.sampling import SampleConfig, er_graph

ONE_NODE = Graph.from_edges(1, [])


def instance(activation="relu", n=6, m=16, R=1, L=2, sb=0.0, seed=0, d=4):
    rng = np.random.default_rng(seed)
    g = er_graph(n, 0.5, rng=rng)
    feats = FeatureMatrix.from_array(rng.standard_normal((n, d)))
    sw = 2.0 if activation == "relu" else 1.5
    cfg = NetConfig(activation, sw, sb, R, L)
    params = init_params(d, m, L, R, rng=rng)
    return g, feats, params, cfg


def test_single_node_hand_value():
    params = GcnParams(np.array([[1.0]]), [np.array([[1.0]])], [np.array([0.0])], 1, 1)
    out = forward(np.array([[1.0]]), np.array([[1.0]]), params, NetConfig()).output
    assert out[0, 0] == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_zero_weights_give_bias_terms():
    g, feats, params, _ = instance("tanh", L=3, sb=0.3)
    cfg = NetConfig("tanh", 1.5, 0.3, 1, 3)
    zero = GcnParams(np.zeros_like(params.embed), [np.zeros_like(w) for w in params.weights],
                     params.biases, params.width, params.R)
    cache = forward(aggregation_matrix(g), feats, zero, cfg)
    for k, z in enumerate(cache.pre[2:], start=1):
        np.testing.assert_allclose(z, np.broadcast_to(np.sqrt(0.3) * params.biases[k],
                                                      z.shape), atol=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_permutation_equivariance(activation):
    g, feats, params, cfg = instance(activation, L=2)
    perm = np.random.default_rng(5).permutation(6)
    pf = np.empty_like(feats.values)
    pf[perm] = feats.values
    a = forward(aggregation_matrix(g), feats, params, cfg).output
    b = forward(aggregation_matrix(g.permuted(perm)), pf, params, cfg).output
    np.testing.assert_allclose(b[perm], a, atol=1e-12)


def test_shape_checks():
    g, feats, params, cfg = instance()
    with pytest.raises(DataError):
        forward(aggregation_matrix(path_graph(3)), feats, params, cfg)
    with pytest.raises(DataError):
        forward(aggregation_matrix(g), np.ones((6, 2)), params, cfg)
    sh = init_params(4, 16, 2, 1, out_dim=3, seed=0)
    assert [w.shape for w in sh.weights] == [(16, 16), (3, 16)]
    assert sh.embed.shape == (16, 4)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("R, L, sb", [(1, 2, 0.0), (2, 2, 0.1), (3, 1, 0.0)])
def test_grad_check_relu(seed, R, L, sb):
    g, feats, params, _ = instance("relu", R=R, L=L, seed=seed)
    cfg = NetConfig("relu", 2.0, sb, R, L)
    assert grad_check(g, feats, params, cfg, num_entries=200) < 1e-5


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("R, L, sb", [(1, 2, 0.05), (2, 2, 0.0), (2, 1, 0.05), (1, 3, 0.2)])
def test_grad_check_tanh(seed, R, L, sb):
    # the difference quotient has ~2e-10 absolute rounding error at step 1e-5,
    # so entries with |grad| ~ 1e-4 can read up to ~1e-6 relative; the 1e-7
    # bound is exercised in the acceptance suite
    g, feats, params, _ = instance("tanh", R=R, L=L, seed=seed)
    cfg = NetConfig("tanh", 1.5, sb, R, L)
    assert grad_check(g, feats, params, cfg, num_entries=200) < 1e-5


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_grad_check_detects_wrong_gradient(monkeypatch, activation):
    import deepgntk.network as net

    g, feats, params, cfg = instance(activation, L=2)
    assert grad_check(g, feats, params, cfg) < 1e-5
    true_backward = net.backward

    def skewed(*args, **kw):
        out = true_backward(*args, **kw)
        return out.with_flat(out.flat() * 1.001)

    monkeypatch.setattr(net, "backward", skewed)
    assert grad_check(g, feats, params, cfg) > 5e-4


def _difference_gradient(g, feats, params, cfg, proj, step):
    m_agg = aggregation_matrix(g)
    theta = params.flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += step
        hi = np.sum(proj * forward(m_agg, feats, params.with_flat(t), cfg).output)
        t[i] -= 2 * step
        lo = np.sum(proj * forward(m_agg, feats, params.with_flat(t), cfg).output)
        out[i] = (hi - lo) / (2 * step)
    return out


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("R, L, sb", [(1, 3, 0.2), (1, 2, 0.2), (2, 2, 0.3)])
def test_tanh_backprop_matches_differences_normwise(seed, R, L, sb):
    # error relative to the largest gradient entry, so entries near zero
    # are not dominated by rounding in the difference quotient
    g, feats, params, _ = instance("tanh", R=R, L=L, seed=seed)
    cfg = NetConfig("tanh", 1.5, sb, R, L)
    m_agg = aggregation_matrix(g)
    cache = forward(m_agg, feats, params, cfg)
    proj = np.random.default_rng(seed + 10).standard_normal(cache.output.shape)
    an = backward(m_agg, feats, params, cfg, cache, proj).flat()
    fd = _difference_gradient(g, feats, params, cfg, proj, 1e-5)
    assert np.max(np.abs(fd - an)) / np.max(np.abs(an)) < 1e-8


def test_grad_check_sym_aggregation():
    g, feats, params, _ = instance("tanh")
    cfg = NetConfig("tanh", 1.5, 0.0, 1, 2, aggregation="sym")
    assert grad_check(g, feats, params, cfg) < 1e-7


def test_dead_relu_path_has_zero_gradient():
    g, feats, params, cfg = instance("relu", L=1)
    # a zero embedding row leaves hidden unit 0 at the ReLU kink for every node
    params.embed[0] = 0.0
    m = aggregation_matrix(g)
    cache = forward(m, feats, params, cfg)
    gr = backward(m, feats, params, cfg, cache, np.ones_like(cache.output))
    assert np.all(cache.act_in[0][:, 0] == 0)
    assert np.all(np.abs(gr.weights[0][:, 0]) < 1e-8)
    assert grad_check(g, feats, params, cfg) < 1e-5


def test_per_unit_aggregation_sequence():
    g, feats, params, cfg = instance("tanh", L=2)
    m = aggregation_matrix(g)
    one = forward(m, feats, params, cfg).output
    seq = forward([m, m], feats, params, cfg).output
    assert np.array_equal(one, seq)
    with pytest.raises(DataError):
        forward([m], feats, params, cfg)


@pytest.mark.parametrize("activation, sb", [("relu", 0.0), ("tanh", 0.1), ("relu", 0.2)])
@pytest.mark.parametrize("R, L", [(1, 1), (1, 2), (2, 2), (3, 1)])
def test_fast_ntk_matches_jacobian(activation, sb, R, L):
    from deepgntk.network import _ntk_single
    g, feats, params, _ = instance(activation, n=5, m=8, R=R, L=L)
    cfg = NetConfig(activation, 2.0 if activation == "relu" else 1.5, sb, R, L)
    m = aggregation_matrix(g)
    a = _ntk_single(m, feats.values, params, cfg)
    b = ntk_by_jacobian(m, feats.values, params, cfg)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * np.abs(b).max())


def test_empirical_ntk_symmetric_psd_and_deterministic():
    g = path_graph(6)
    feats = FeatureMatrix.from_array(np.random.default_rng(2).standard_normal((6, 4)))
    cfg = NetConfig(L=2)
    a = empirical_ntk(g, feats, cfg, 32, 3, seed=1)
    b = empirical_ntk(g, feats, cfg, 32, 3, seed=1)
    assert np.array_equal(a.matrix, a.matrix.T)
    assert np.array_equal(a.matrix, b.matrix)
    assert np.linalg.eigvalsh(a.matrix).min() >= -1e-10 * np.abs(a.matrix).max()
    assert a.coordinates == 32 and len(a.per_init) == 3


def test_empirical_ntk_single_node_wide():
    emp = empirical_ntk(ONE_NODE, np.array([[1.0]]), NetConfig(), 2048, 4, seed=0)
    assert emp.matrix[0, 0] == pytest.approx(2.0, rel=0.05)


def test_more_inits_reduce_error():
    g = path_graph(6)
    feats = FeatureMatrix.from_array(np.random.default_rng(2).standard_normal((6, 4)))
    analytic, _ = compute_gntk(g, feats, GntkConfig(L=2))
    cfg = NetConfig(L=2)
    one, twenty = [], []
    for rep in range(10):
        emp = empirical_ntk(g, feats, cfg, 32, 20, seed=100 + rep)
        one.append(np.linalg.norm(emp.per_init[0] - analytic))
        twenty.append(np.linalg.norm(emp.matrix - analytic))
    assert np.median(twenty) < np.median(one)


def test_ntk_comparison_fields():
    g = path_graph(3)
    emp = empirical_ntk(g, np.eye(3), NetConfig(), 16, 1)
    rep = ntk_comparison(emp, compute_gntk(g, np.eye(3), GntkConfig())[0])
    assert set(rep) == {"width", "inits", "rel_frobenius_error", "max_entry_error"}


def test_width_guards():
    with pytest.raises(DataError):
        empirical_ntk(path_graph(3), np.eye(3), NetConfig(), 4, 1)
    with pytest.raises(DataError):
        empirical_ntk(path_graph(3), np.eye(3), NetConfig(), 16, 0)
    with pytest.raises(DataError, match="allow_wide"):
        init_params(3, 5000, 1)


def _sbm_setup():
    g, labels = generate_sbm(200, 0.1, 0.01, seed=0)
    perm = np.random.default_rng(0).permutation(200)
    split = DatasetSplit(np.sort(perm[:40]), [], np.sort(perm[40:]))
    return g, FeatureMatrix.from_array(np.eye(200)), labels, split


def test_train_shallow_sbm():
    g, feats, labels, split = _sbm_setup()
    curves = train_gcn(g, feats, labels, split, NetConfig(), 256, 2, 300, 0.5, seed=0)
    assert curves.final_train_acc > 0.95
    assert len(curves.loss) == 300
    assert curves.loss[-1] < curves.loss[0]


def test_train_deterministic_and_sampler_counts():
    g, feats, labels, split = _sbm_setup()
    sc = SampleConfig.critical(seed=3)
    a = train_gcn(g, feats, labels, split, NetConfig(), 32, 2, 15, 0.3, sc, seed=1)
    b = train_gcn(g, feats, labels, split, NetConfig(), 32, 2, 15, 0.3, sc, seed=1)
    assert np.array_equal(a.loss, b.loss) and np.array_equal(a.test_acc, b.test_acc)
    assert np.all(a.edges_per_epoch == 100)
    once = train_gcn(g, feats, labels, split, NetConfig(), 32, 2, 5, 0.3,
                     SampleConfig.critical(seed=3, resample_each_epoch=False), seed=1)
    assert np.all(once.edges_per_epoch == 100)


def test_train_divergence_detected():
    g, feats, labels, split = _sbm_setup()
    with pytest.raises(NumericalError, match="diverged"):
        train_gcn(g, feats, labels, split, NetConfig(), 64, 4, 50, 1e3, seed=0)


def test_train_argument_checks():
    g, feats, labels, split = _sbm_setup()
    with pytest.raises(DataError):
        train_gcn(g, feats, labels, split, NetConfig(), 16, 2, 5, 0.0)
    with pytest.raises(DataError):
        train_gcn(g, feats, labels, split, NetConfig(), 16, 0, 5, 0.1)
