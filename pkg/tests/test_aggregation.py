"""Pseudo-gradient assembly, the closed-form merge, server steps, and
communication accounting."""

import numpy as np
import pytest

from fedsim.nn_core import DivergenceError
from fedsim.local_training import ClientUpdate
from fedsim.aggregation import (AggregatorConfig, BITS_PER_REAL, ServerState,
                                aggregate, closed_form_merge, comm_cost,
                                server_step)


def _update(delta, fisher, weight=1.0, cid=0):
    delta = np.asarray(delta, dtype=np.float64)
    return ClientUpdate(cid, delta, np.asarray(fisher, dtype=np.float64), weight,
                        examples_seen=1)


def _cfg(algo, lr_global=1.0, fisher_eps=0.0, server_opt="sgd"):
    return AggregatorConfig(algo=algo, lr_global=lr_global, fisher_eps=fisher_eps,
                            server_opt=server_opt)


def test_single_client_returns_its_delta():
    delta = np.array([0.3, -1.2, 0.0])
    for algo in ("fedavg", "fedfish"):
        pg, fallback = aggregate([_update(delta, [2.0, 0.5, 1.0])], _cfg(algo))
        assert np.array_equal(pg, delta)
        assert fallback == 0


def test_two_client_worked_example():
    updates = [_update([0.5], [2.0]), _update([-0.3], [1.0], cid=1)]
    pg_avg, _ = aggregate(updates, _cfg("fedavg"))
    assert abs(pg_avg[0] - 0.1) <= 1e-15
    pg_fish, fallback = aggregate(updates, _cfg("fedfish"))
    assert abs(pg_fish[0] - 0.7 / 3.0) <= 1e-15
    assert fallback == 0


def test_identical_fishers_reduce_to_fedavg():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 6))
        p = int(rng.integers(1, 30))
        fisher = rng.uniform(0.1, 3.0, size=p)
        updates = [
            _update(rng.standard_normal(p), fisher,
                    weight=float(rng.uniform(0.5, 4.0)), cid=i)
            for i in range(n)
        ]
        pg_avg, _ = aggregate(updates, _cfg("fedavg"))
        pg_fish, _ = aggregate(updates, _cfg("fedfish"))
        assert np.max(np.abs(pg_fish - pg_avg)) <= 1e-12


def test_global_fisher_rescaling_invariance():
    rng = np.random.default_rng(1)
    for trial in range(20):
        n, p = 3, 8
        updates = [
            _update(rng.standard_normal(p), rng.uniform(0.01, 2.0, size=p), cid=i)
            for i in range(n)
        ]
        scaled = [
            _update(u.delta, 37.0 * u.fisher, weight=u.weight, cid=u.client_id)
            for u in updates
        ]
        pg, _ = aggregate(updates, _cfg("fedfish"))
        pg_scaled, _ = aggregate(scaled, _cfg("fedfish"))
        assert np.max(np.abs(pg - pg_scaled)) <= 1e-12


def test_zero_curvature_coordinates_fall_back_to_fedavg():
    updates = [_update([1.0, 2.0], [0.0, 1.0]),
               _update([3.0, 4.0], [0.0, 3.0], cid=1)]
    pg, fallback = aggregate(updates, _cfg("fedfish"))
    assert fallback == 1
    assert pg[0] == 2.0  # plain average where no client has curvature
    assert abs(pg[1] - (2.0 + 12.0) / 4.0) <= 1e-15

    pg_eps, fallback_eps = aggregate(updates, _cfg("fedfish", fisher_eps=1e-8))
    assert fallback_eps == 0
    assert pg_eps[0] == 0.0  # eps floor keeps the dead coordinate at zero


def test_closed_form_merge_examples():
    theta = [np.array([1.0]), np.array([0.0])]
    fishers = [np.array([3.0]), np.array([1.0])]
    assert closed_form_merge(theta, fishers)[0] == 0.75

    # Two identical clients merge bitwise; odd counts can shift the last ulp.
    same = [np.array([0.4, -2.0])] * 2
    ones = [np.ones(2)] * 2
    assert np.array_equal(closed_form_merge(same, ones), same[0])
    triple = closed_form_merge([np.array([0.4, -2.0])] * 3, [np.ones(2)] * 3)
    assert np.allclose(triple, [0.4, -2.0], rtol=1e-15, atol=0)

    a, b = np.array([1.0, 5.0]), np.array([3.0, 1.0])
    merged = closed_form_merge([a, b], [np.ones(2), np.ones(2)])
    assert np.array_equal(merged, (a + b) / 2.0)


def test_closed_form_merge_stays_in_convex_hull():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n, p = int(rng.integers(2, 6)), int(rng.integers(1, 12))
        thetas = [rng.standard_normal(p) for _ in range(n)]
        fishers = [rng.uniform(1e-3, 5.0, size=p) for _ in range(n)]
        merged = closed_form_merge(thetas, fishers)
        lo = np.min(thetas, axis=0)
        hi = np.max(thetas, axis=0)
        assert np.all(merged >= lo - 1e-12) and np.all(merged <= hi + 1e-12)


def test_closed_form_merge_zero_curvature_mean_fallback():
    thetas = [np.array([1.0, 1.0]), np.array([3.0, 2.0])]
    fishers = [np.array([0.0, 1.0]), np.array([0.0, 1.0])]
    merged = closed_form_merge(thetas, fishers)
    assert merged[0] == 2.0
    assert merged[1] == 1.5


def test_closed_form_merge_minimizes_quadratic_objective():
    # J(theta) = sum_i 0.5 * sum_j F_ij (theta_j - theta_ij)^2
    rng = np.random.default_rng(3)

    def objective(theta, thetas, fishers):
        return sum(0.5 * np.sum(f * (theta - t) ** 2)
                   for t, f in zip(thetas, fishers))

    for trial in range(20):
        n, p = int(rng.integers(1, 6)), int(rng.integers(1, 11))
        thetas = [rng.standard_normal(p) for _ in range(n)]
        fishers = [rng.uniform(0.05, 4.0, size=p) for _ in range(n)]
        merged = closed_form_merge(thetas, fishers)
        grad = sum(f * (merged - t) for t, f in zip(thetas, fishers))
        assert np.max(np.abs(grad)) <= 1e-10
        j_star = objective(merged, thetas, fishers)
        for _ in range(100):
            scale = 10.0 ** rng.uniform(-4, -1)
            probe = merged + scale * rng.standard_normal(p)
            assert objective(probe, thetas, fishers) >= j_star - 1e-15


def test_fed_round_equals_closed_form_merge():
    # One sgd step at lr_global 1 with uniform weights lands exactly on the
    # curvature-weighted average of the client end points.
    rng = np.random.default_rng(4)
    for trial in range(50):
        n, p = int(rng.integers(1, 6)), int(rng.integers(1, 21))
        theta_g = rng.standard_normal(p)
        deltas = [rng.standard_normal(p) for _ in range(n)]
        fishers = [rng.uniform(0.0, 2.0, size=p) for _ in range(n)]
        updates = [_update(d, f, cid=i) for i, (d, f) in enumerate(zip(deltas, fishers))]
        pg, _ = aggregate(updates, _cfg("fedfish"))
        stepped = server_step(ServerState(theta_g), pg, _cfg("fedfish")).params
        merged = closed_form_merge([theta_g - d for d in deltas], fishers)
        assert np.max(np.abs(stepped - merged)) <= 1e-9


def test_closed_form_merge_validation():
    with pytest.raises(ValueError):
        closed_form_merge([], [])
    with pytest.raises(ValueError):
        closed_form_merge([np.ones(2)], [np.ones(2), np.ones(2)])
    with pytest.raises(ValueError):
        closed_form_merge([np.ones(2), np.ones(3)], [np.ones(2), np.ones(3)])


def test_server_step_sgd():
    state = ServerState(np.array([1.0, -2.0]))
    pg = np.array([0.5, 0.5])
    out = server_step(state, pg, _cfg("fedavg", lr_global=0.2))
    assert np.allclose(out.params, [0.9, -2.1], atol=1e-15)
    untouched = server_step(state, np.zeros(2), _cfg("fedavg", lr_global=0.7))
    assert np.array_equal(untouched.params, state.params)
    frozen = server_step(state, pg, _cfg("fedavg", lr_global=0.0))
    assert np.array_equal(frozen.params, state.params)


def test_server_step_adam_first_step():
    params = np.array([0.0, 1.0])
    pg = np.array([0.3, -0.2])
    lr = 0.1
    out = server_step(ServerState(params), pg, _cfg("fedavg", lr_global=lr,
                                                    server_opt="adam"))
    # Bias correction makes the first step lr * pg / (|pg| + eps).
    expected = params - lr * pg / (np.abs(pg) + 1e-8)
    assert np.max(np.abs(out.params - expected)) <= 1e-12
    assert out.step == 1
    assert np.allclose(out.m, 0.1 * pg)
    assert np.allclose(out.v, 0.001 * pg * pg)


def test_server_step_errors():
    state = ServerState(np.zeros(3))
    with pytest.raises(ValueError):
        server_step(state, np.zeros(2), _cfg("fedavg"))
    with pytest.raises(DivergenceError):
        server_step(state, np.array([np.inf, 0.0, 0.0]), _cfg("fedavg"))


def test_server_state_validation():
    with pytest.raises(ValueError):
        ServerState(np.zeros(2), m=np.zeros(3))
    with pytest.raises(ValueError):
        ServerState(np.zeros(2), step=-1)


def test_aggregate_validation():
    with pytest.raises(ValueError):
        aggregate([], _cfg("fedavg"))
    updates = [_update([1.0], [1.0]), _update([1.0, 2.0], [1.0, 1.0], cid=1)]
    with pytest.raises(ValueError):
        aggregate(updates, _cfg("fedavg"))


def test_aggregator_config_validation():
    with pytest.raises(ValueError):
        AggregatorConfig(algo="fedprox", lr_global=1.0)
    with pytest.raises(ValueError):
        AggregatorConfig(algo="fedavg", lr_global=-0.1)
    with pytest.raises(ValueError):
        AggregatorConfig(algo="fedavg", lr_global=1.0, fisher_eps=-1e-9)
    with pytest.raises(ValueError):
        AggregatorConfig(algo="fedavg", lr_global=1.0, server_opt="rmsprop")


def test_comm_cost_values():
    updates = [_update(np.zeros(13), np.ones(13), cid=i) for i in range(2)]
    avg = comm_cost(updates, _cfg("fedavg"))
    fish = comm_cost(updates, _cfg("fedfish"))
    assert avg == (2 * 13 * BITS_PER_REAL, 13 * BITS_PER_REAL)
    assert avg.up_bits == 1664
    assert fish == (3328, 832)
    assert fish.up_bits == 2 * avg.up_bits
    assert comm_cost([], _cfg("fedfish")) == (0, 0)


def test_comm_cost_doubling_holds_across_sizes():
    rng = np.random.default_rng(5)
    for trial in range(20):
        n, p = int(rng.integers(1, 9)), int(rng.integers(1, 200))
        updates = [_update(np.zeros(p), np.ones(p), cid=i) for i in range(n)]
        avg = comm_cost(updates, _cfg("fedavg"))
        fish = comm_cost(updates, _cfg("fedfish"))
        assert fish.up_bits == 2 * avg.up_bits
        assert fish.down_bits == avg.down_bits == p * BITS_PER_REAL
