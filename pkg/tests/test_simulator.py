import csv
import io
import json

import numpy as np
import pytest

from dekrr.dataset import Shard
from dekrr.evaluation import network_test_rse
from dekrr.features import sample_gaussian_features
from dekrr.graph import Topology, TopologyError, ring_lattice
from dekrr.simulator import (
    PAYLOAD_KINDS,
    MessageBus,
    NonFiniteError,
    RunConfig,
    allocate_features,
    comm_cost,
    make_states,
    run,
    setup_cost,
    setup_exchange,
    spectral_radius,
    stationary_point,
    train,
)
from dekrr.solver import PenaltyConfig, check_prop1, objective_gradient

from conftest import built_instance, synthetic

IMBALANCED_1000 = [10, 30, 50, 70, 90, 110, 130, 150, 170, 190]


# --------------------------------------------------------------------------- allocation / cost


def test_allocate_equal():
    assert allocate_features([5, 50, 500], 7, "equal") == [7, 7, 7]
    assert allocate_features([40] * 4, 9, "sqrt_proportional") == [9] * 4


def test_allocate_two_nodes():
    assert allocate_features([100, 400], 30, "sqrt_proportional") == [20, 40]


@pytest.mark.parametrize(
    "Dbar,expected",
    [
        # rounded shares plus the residue settled from the largest node down
        (40, [13, 23, 30, 35, 40, 44, 48, 52, 56, 59]),
        (80, [27, 46, 60, 71, 80, 89, 96, 104, 110, 117]),
        (100, [33, 58, 75, 89, 100, 111, 121, 130, 138, 145]),
    ],
)
def test_allocate_imbalanced(Dbar, expected):
    D = allocate_features(IMBALANCED_1000, Dbar, "sqrt_proportional")
    assert D == expected
    assert sum(D) == 10 * Dbar


def test_allocate_budget_errors():
    with pytest.raises(ValueError, match="too small"):
        allocate_features([1, 10**6, 10**6], 0, "sqrt_proportional")
    D = allocate_features([1, 10**6, 10**6], 1, "sqrt_proportional")
    assert sum(D) == 3 and min(D) >= 1


def test_comm_cost():
    t = ring_lattice(10, 4)
    assert comm_cost(t, [100] * 10, 1)["per_round"] == 4000
    assert comm_cost(t, [100] * 10, 7, "paired_cos_sin") == {"per_round": 8000, "total": 56000}
    sq = allocate_features(IMBALANCED_1000, 50, "sqrt_proportional")
    assert comm_cost(t, sq, 1) == comm_cost(t, [50] * 10, 1)


# --------------------------------------------------------------------------- setup


def _states(J, k, D=6, n_per=20, seed=0, kind="cos_with_phase"):
    ds = synthetic(N=2 * n_per * J, seed=seed)
    from dekrr.dataset import partition_balanced, split_train_test

    shards = split_train_test(partition_balanced(ds, J, seed), ds, seed)
    specs = [sample_gaussian_features(ds.d, D, 1.0, 50 + j, kind) for j in range(J)]
    return make_states(shards, specs), shards


def test_setup_single_node():
    states, _ = _states(1, 0)
    bus = MessageBus(1, record=True)
    cfg = RunConfig(1e-3, PenaltyConfig.uniform(1, 1.0))
    setup_exchange(Topology.single(), states, cfg, bus)
    assert bus.trace == [] and states[0].aux is not None


def test_setup_three_payloads_per_direction():
    states, _ = _states(10, 4)
    t = ring_lattice(10, 4)
    bus = MessageBus(10, record=True)
    setup_exchange(t, states, RunConfig(1e-3, PenaltyConfig.uniform(10, 1.0)), bus)
    per_edge = {}
    for m in bus.trace:
        per_edge.setdefault((m.src, m.dst), []).append(m.kind)
    assert set(per_edge) == set(t.directed_edges())
    assert all(sorted(v) == ["feature_spec", "z_block", "z_block"] for v in per_edge.values())
    assert sum(bus.scalars.values()) == setup_cost(t, states)
    for s in states:
        j = s.node
        for p in t.neighbors[j]:
            assert s.Z[(p, j)].shape == (states[p].dim, s.n)
            assert s.Z[(j, p)].shape == (s.dim, states[p].n)
            assert s.Z[(p, p)].shape == (states[p].dim, states[p].n)


def test_setup_rejects_bad_topology():
    states, _ = _states(3, 2)
    with pytest.raises(TopologyError):
        setup_exchange(Topology(3, ((1,), (0,), ())), states, RunConfig(1e-3, PenaltyConfig.uniform(3, 1.0)))


def test_privacy_audit():
    states, shards = _states(5, 2)
    cfg = RunConfig(1e-3, PenaltyConfig.uniform(5, 1.0), max_rounds=3, record_trace=True)
    result = train(shards, [s.spec for s in states], ring_lattice(5, 2), cfg)
    kinds = {m.kind for m in result.bus.trace}
    assert kinds == set(PAYLOAD_KINDS)
    raw_columns = []
    for sh in shards:
        raw_columns += [sh.X_train[:, c] for c in range(sh.X_train.shape[1])] + [sh.y_train]
    for m in result.bus.trace:
        arrays = [m.payload.omega, m.payload.phases] if m.kind == "feature_spec" else [np.asarray(m.payload)]
        for a in arrays:
            for col in raw_columns:
                rows = a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)
                assert not any(r.shape == col.shape and np.array_equal(r, col) for r in rows)
            if m.kind != "feature_spec":
                assert not a.flags.writeable


# --------------------------------------------------------------------------- rounds


def test_zero_rounds():
    states, topo, cfg, _ = built_instance()
    res = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=0), states, topo)
    N = sum(s.n for s in states)
    assert res.rounds == 0 and len(res.logs) == 1
    assert all(not np.any(t) for t in res.thetas)
    assert res.logs[0].objective == pytest.approx(sum(np.sum(s.y**2) for s in states) / N)


def _prop1_config(states, topo, lam, factor=1.05):
    N = sum(s.n for s in states)
    pc = PenaltyConfig.uniform(topo.J, 0.05)
    _, ct_nei = pc.tilde(topo, N)
    req = np.array([v.required for v in check_prop1(states, topo, pc)])
    return PenaltyConfig.from_tilde(factor * req, ct_nei, topo, N)


def test_descent_when_condition_holds():
    states, topo, cfg, _ = built_instance(J=5, k=2, n_per=60, D=8, seed=11)
    pc = _prop1_config(states, topo, cfg.lam)
    setup_exchange(topo, states, RunConfig(cfg.lam, pc))
    assert all(v.satisfied for v in check_prop1(states, topo, pc))
    res = run(RunConfig(cfg.lam, pc, max_rounds=200, safeguard=False), states, topo)
    L = [r.objective for r in res.logs]
    tol = 1e-10 * max(1.0, L[0])
    assert all(b - a <= tol for a, b in zip(L, L[1:]))
    assert res.safeguard_factor == 1.0


def test_logs_and_ledger():
    states, topo, cfg, _ = built_instance(J=6, k=2)
    res = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=25, eps=0.0), states, topo)
    assert [r.round for r in res.logs] == list(range(26))
    per = comm_cost(topo, [s.spec.D for s in states], 1)["per_round"]
    assert res.per_round_scalars == per
    cum = [r.cum_scalars for r in res.logs]
    assert cum == [per * k for k in range(26)]
    assert res.bus.scalars["theta"] == per * 25
    assert res.reason == "max_rounds"


def test_serial_and_threaded_bitwise_identical():
    a, topo, cfg, _ = built_instance(J=5, k=2, seed=4)
    b, _, _, _ = built_instance(J=5, k=2, seed=4)
    ra = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=30), a, topo)
    rb = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=30, workers=4), b, topo)
    assert [r.objective for r in ra.logs] == [r.objective for r in rb.logs]
    for x, y in zip(ra.thetas, rb.thetas):
        assert x.tobytes() == y.tobytes()


def test_relabelling_invariance():
    states, topo, cfg, shards = built_instance(J=5, k=2, seed=6)
    base = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=300), states, topo)
    r0 = network_test_rse(base.states, shards)

    perm = [3, 0, 4, 1, 2]
    new_shards = [None] * 5
    specs = [None] * 5
    for old, sh in enumerate(shards):
        new_shards[perm[old]] = Shard(perm[old], sh.X_train, sh.y_train, sh.X_test, sh.y_test)
        specs[perm[old]] = states[old].spec
    t2 = topo.relabel(perm)
    res = train(new_shards, specs, t2, RunConfig(cfg.lam, cfg.penalty.relabel(perm), max_rounds=300))
    assert res.rounds == base.rounds
    assert abs(network_test_rse(res.states, new_shards) - r0) <= 1e-10


def test_non_finite_detected():
    states, topo, cfg, _ = built_instance(J=4, k=2)
    states[2].aux.d = states[2].aux.d * np.inf
    with pytest.raises(NonFiniteError) as info:
        run(cfg, states, topo)
    assert info.value.node == 2 and info.value.round == 1


def _over_relaxed(monkeypatch, omega=2.5):
    """Replace the exact update by an over-relaxed one, which can raise the objective."""
    import dekrr.simulator as sim

    exact = sim.solver.local_update

    def step(aux, theta, nbrs):
        return theta + omega * (exact(aux, theta, nbrs) - theta)

    monkeypatch.setattr(sim.solver, "local_update", step)


def test_exact_updates_descend_even_with_tiny_self_penalty():
    # each coupling term is a squared difference of two blocks, so Jacobi
    # steps with exact diagonal blocks never raise the objective
    states, topo, cfg, _ = built_instance(J=5, k=4, n_per=6, D=10, seed=2)
    pc = PenaltyConfig(np.full(5, 1e-9), np.full(5, 10.0))
    setup_exchange(topo, states, RunConfig(cfg.lam, pc))
    res = run(RunConfig(cfg.lam, pc, max_rounds=60, eps=0.0, safeguard=False), states, topo)
    L = [r.objective for r in res.logs]
    assert all(b <= a + 1e-12 * L[0] for a, b in zip(L, L[1:]))


def test_safeguard_rejects_increasing_steps(monkeypatch):
    _over_relaxed(monkeypatch)
    states, topo, cfg, _ = built_instance(J=4, k=2, n_per=6, D=10, seed=2)
    free = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=30, eps=0.0, safeguard=False), states, topo)
    L = [r.objective for r in free.logs]
    assert max(b - a for a, b in zip(L, L[1:])) > 0

    states, topo, cfg, _ = built_instance(J=4, k=2, n_per=6, D=10, seed=2)
    res = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=80, eps=0.0), states, topo)
    L = [r.objective for r in res.logs]
    assert all(b <= a + 1e-12 * max(1.0, L[0]) for a, b in zip(L, L[1:]))
    assert res.safeguard_factor > 1.0
    np.testing.assert_allclose(res.penalty.c_self, cfg.penalty.c_self * res.safeguard_factor)


def test_safeguard_cap_stops_run(monkeypatch):
    _over_relaxed(monkeypatch, omega=-1.0)
    states, topo, cfg, _ = built_instance(J=4, k=2)
    res = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=10, safeguard_cap=8.0), states, topo)
    assert res.reason == "safeguard_cap"
    assert res.rounds == 0 and res.safeguard_factor == 8.0


def test_converged_point_is_stationary():
    states, topo, cfg, _ = built_instance(J=4, k=2, n_per=40, D=6, seed=8, c_nei=0.5, lam=1e-3)
    res = run(RunConfig(cfg.lam, cfg.penalty, eps=1e-12, max_rounds=5000), states, topo)
    assert res.reason == "tolerance"
    N = sum(s.n for s in states)
    g = np.concatenate(objective_gradient(states, topo, cfg.penalty, cfg.lam, N, 4))
    assert np.linalg.norm(g) <= 1e-6
    exact = stationary_point(states, topo)
    for a, b in zip(res.thetas, exact):
        np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)


def test_spectral_radius_below_one(instance):
    states, topo, _, _ = instance
    assert 0.0 < spectral_radius(states, topo) < 1.0


def test_round_log_csv_and_save(tmp_path):
    states, topo, cfg, _ = built_instance(J=3, k=2)
    res = run(RunConfig(cfg.lam, cfg.penalty, max_rounds=4, eps=0.0), states, topo)
    text = res.round_log_csv("config_hash=abc")
    lines = text.splitlines()
    assert lines[0] == "# config_hash=abc"
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert [int(r["round"]) for r in rows] == [0, 1, 2, 3, 4]
    assert float(rows[-1]["objective"]) == res.logs[-1].objective
    res.save(tmp_path / "out")
    manifest = json.loads((tmp_path / "out" / "result.json").read_text())
    assert manifest["rounds"] == 4 and manifest["reason"] == "max_rounds"
    assert (tmp_path / "out" / "theta" / "blocks.bin").exists()
