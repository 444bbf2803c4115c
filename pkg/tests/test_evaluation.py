import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dekrr.dataset import RawDataset, normalize, partition_balanced, partition_noniid, split_train_test
from dekrr.evaluation import (
    MethodConfig,
    centralized_krr,
    centralized_rff,
    consensus_disagreement,
    cross_validate,
    cv_scores,
    method_specs,
    probe_set,
    rse,
    run_baseline,
)
from dekrr.features import gaussian_kernel, sample_gaussian_features
from dekrr.graph import Topology, ring_lattice
from dekrr.simulator import RunConfig, comm_cost, make_states, setup_exchange, stationary_point
from dekrr.solver import PenaltyConfig

from conftest import synthetic


def test_rse_examples():
    y = np.array([0.3, -1.0, 2.0])
    assert rse(y, y) == 0.0
    assert rse(np.full(3, y.mean()), y) == pytest.approx(1.0)
    assert rse([0, 1], [1, -1]) == pytest.approx(2.5)


def test_rse_errors():
    with pytest.raises(ValueError, match="constant"):
        rse([1, 2], [3, 3])
    with pytest.raises(ValueError):
        rse([1], [1])
    with pytest.raises(ValueError):
        rse([1, 2, 3], [1, 2])


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(2, 50), elements=st.floats(-1e3, 1e3)))
def test_mean_predictor_has_unit_rse(y):
    if np.ptp(y) < 1e-3:
        return
    assert rse(np.full_like(y, y.mean()), y) == pytest.approx(1.0, rel=1e-9)


# --------------------------------------------------------------------------- centralized references


def test_krr_single_point():
    pred = centralized_krr([[0.2, 0.4]], [3.0], lam=0.5, sigma=1.0)
    assert pred.alpha[0] == pytest.approx(3.0 / 1.5)


def test_krr_residual_and_shrinkage():
    rng = np.random.default_rng(0)
    X, y = rng.uniform(size=(30, 2)), rng.normal(size=30)
    norms = []
    for lam in (1.0, 10.0, 100.0):
        p = centralized_krr(X, y, lam, 0.7)
        K = gaussian_kernel(X, X, 0.7)
        assert np.linalg.norm((K + lam * 30 * np.eye(30)) @ p.alpha - y) <= 1e-8
        norms.append(np.linalg.norm(p.alpha))
    assert norms[0] > norms[1] > norms[2]


def test_krr_interpolates():
    rng = np.random.default_rng(1)
    X, y = rng.uniform(size=(40, 3)), rng.normal(size=40)
    p = centralized_krr(X, y, 1e-12, 0.3)
    assert rse(p(X), y) <= 1e-6


def test_krr_memory_guard():
    with pytest.raises(MemoryError, match="subsample"):
        centralized_krr(np.zeros((10_001, 1)), np.zeros(10_001), 1e-3, 1.0)


def test_rff_ridge_normal_equations():
    rng = np.random.default_rng(2)
    X, y = rng.uniform(size=(50, 2)), rng.normal(size=50)
    spec = sample_gaussian_features(2, 7, 1.0, 0)
    p = centralized_rff(X, y, spec, 1e-3)
    from dekrr.features import feature_matrix

    Z = feature_matrix(spec, X)
    oracle = np.linalg.lstsq(np.vstack([Z.T, np.sqrt(1e-3 * 50) * np.eye(7)]), np.concatenate([y, np.zeros(7)]), rcond=None)[0]
    np.testing.assert_allclose(p.theta, oracle, rtol=1e-9)
    assert p.predict(X[:3]).shape == (3,)


# --------------------------------------------------------------------------- baselines


def _noniid(N=600, J=5, seed=0):
    ds = synthetic(N=N, seed=seed)
    return split_train_test(partition_noniid(ds, J, "noniid_abs_y"), ds, seed)


def test_single_node_reduces_to_centralized_rff():
    ds = synthetic(N=300, seed=3)
    shards = split_train_test(partition_balanced(ds, 1, 0), ds, 0)
    mc = MethodConfig(lam=1e-4, sigma=1.0, D_js=(15,), c_nei=1e-3, eps=1e-14, max_rounds=5000)
    res = run_baseline("dkla_rff", mc, Topology.single(), shards, seed=0)
    spec = res.states[0].spec
    ref = centralized_rff(shards[0].X_train, shards[0].y_train, spec, 1e-4)
    assert abs(res.meta["test_rse"] - rse(ref(shards[0].X_test), shards[0].y_test)) <= 1e-6


def test_methods_share_inputs_and_cost():
    shards = _noniid()
    topo = ring_lattice(5, 2)
    mc = MethodConfig(lam=1e-4, sigma=1.0, D_js=(10,) * 5, c_nei=1.0, max_rounds=50)
    results = {m: run_baseline(m, mc, topo, shards, seed=4) for m in ("dkla_rff", "dkla_ddrf", "dekrr_ddrf")}
    assert len({r.meta["inputs_digest"] for r in results.values()}) == 1
    assert len({r.per_round_scalars for r in results.values()}) == 1
    assert results["dkla_rff"].per_round_scalars == comm_cost(topo, mc.D_js, 1)["per_round"]


def test_method_specs_structure():
    shards = _noniid()
    mc = MethodConfig(lam=1e-4, sigma=1.0, D_js=(8, 9, 10, 11, 12), c_nei=1.0)
    shared = method_specs("dkla_rff", mc, shards, 0)
    assert all(s is shared[0] for s in shared) and shared[0].D == 10
    broadcast = method_specs("dkla_ddrf", mc, shards, 0)
    assert all(s is broadcast[0] for s in broadcast)
    own = method_specs("dekrr_ddrf", mc, shards, 0)
    assert [s.D for s in own] == [8, 9, 10, 11, 12]
    with pytest.raises(ValueError, match="unknown method"):
        method_specs("admm", mc, shards, 0)


def test_ddrf_beats_plain_features_on_cosine_target():
    wins = 0
    topo = ring_lattice(4, 2)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(800, 3))
        w = rng.normal(size=3) * 3
        ds = normalize(RawDataset(X, np.cos(X @ w), "cos"))
        shards = split_train_test(partition_balanced(ds, 4, seed), ds, seed)
        mc = MethodConfig(lam=1e-6, sigma=1.0, D_js=(10,) * 4, c_nei=0.1, max_rounds=500)
        plain = run_baseline("dkla_rff", mc, topo, shards, seed).meta["test_rse"]
        ddrf = run_baseline("dekrr_ddrf", mc, topo, shards, seed).meta["test_rse"]
        wins += ddrf <= plain
    assert wins >= 8


# --------------------------------------------------------------------------- consensus diagnostics


def test_disagreement_identical_models():
    shards = _noniid()
    spec = sample_gaussian_features(3, 6, 1.0, 0)
    states = make_states(shards, [spec] * 5)
    theta = np.random.default_rng(0).normal(size=6)
    for s in states:
        s.theta = theta
    probe = probe_set(shards, 100, seed=1)
    assert consensus_disagreement(states, probe, ring_lattice(5, 2)) == 0.0
    assert consensus_disagreement(states[:1], probe, Topology.single()) == 0.0
    with pytest.raises(ValueError):
        consensus_disagreement(states, np.empty((0, 3)), ring_lattice(5, 2))


def test_disagreement_shrinks_with_stronger_coupling():
    shards = _noniid(N=400)
    topo = ring_lattice(5, 2)
    specs = [sample_gaussian_features(3, 8, 1.0, 10 + j) for j in range(5)]
    N = sum(sh.n_train for sh in shards)
    probe = probe_set(shards, 200, seed=0)
    out = []
    for c in (N / 2, 10 * N):
        states = make_states(shards, specs)
        setup_exchange(topo, states, RunConfig(1e-4, PenaltyConfig.uniform(5, c)))
        for s, t in zip(states, stationary_point(states, topo)):
            s.theta = t
        out.append(consensus_disagreement(states, probe, topo))
    assert out[1] <= out[0]


def test_probe_set_deterministic():
    shards = _noniid()
    np.testing.assert_array_equal(probe_set(shards, 50, 3), probe_set(shards, 50, 3))


# --------------------------------------------------------------------------- cross-validation


def test_cv_single_point_and_determinism():
    ds = synthetic(N=200, seed=1)
    assert cross_validate(ds.features, ds.targets, [1e-3], [0.5], folds=3) == (1e-3, 0.5)
    a = cv_scores(ds.features, ds.targets, folds=3, seed=2, D=60)
    b = cv_scores(ds.features, ds.targets, folds=3, seed=2, D=60)
    assert a == b


def test_cv_tie_break_prefers_larger_values(monkeypatch):
    import dekrr.evaluation as ev

    monkeypatch.setattr(ev, "cv_scores", lambda *a, **k: {(1e-3, 1.0): 0.5, (1e-2, 1.0): 0.5, (1e-2, 2.0): 0.5, (1e-4, 4.0): 0.6})
    assert ev.cross_validate(None, None) == (1e-2, 2.0)


def test_cv_recovers_planted_bandwidth():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(600, 2))
    spec = sample_gaussian_features(2, 200, 1.0, 7)
    from dekrr.features import feature_matrix

    y = rng.normal(size=200) @ feature_matrix(spec, X) + 1e-6 * rng.normal(size=600)
    with pytest.raises(ValueError):
        cross_validate(X, y, folds=1)
    _, sigma = cross_validate(X, y, folds=5, seed=0, D=300)
    assert sigma in (0.5, 1.0, 2.0)
