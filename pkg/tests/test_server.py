import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.client import RoundReport
from fedsim.param_math import SparseUpdate, UsageError, top_fraction_mask
from fedsim.server import (
    AggregationConfig,
    GlobalState,
    ProtocolError,
    Server,
    aggregate,
    dwa_weights,
    fedavg_weights,
    select_best,
)

from oracles import dense_accumulate


def report(cid, rnd, update, loss=1.0, n=10, dice=None):
    return RoundReport(cid, rnd, update, loss, n, dice if dice is not None else {1: 0.5}, 5)


def random_reports(seed, size=40, k=3, rnd=1):
    rng = np.random.default_rng(seed)
    return [report(c, rnd, top_fraction_mask(rng.normal(size=size), 0.25, rnd),
                   float(rng.uniform(0.1, 2)), int(rng.integers(1, 100))) for c in range(k)]


class TestFedAvg:
    def test_benchmark_sizes(self):
        np.testing.assert_allclose(fedavg_weights([48, 165, 18]), [0.2078, 0.7143, 0.0779], atol=1e-4)

    def test_equal_sizes(self):
        assert fedavg_weights([7, 7]) == [0.5, 0.5]

    @pytest.mark.parametrize("bad", [[], [0, 3], [-1, 2]])
    def test_rejects(self, bad):
        with pytest.raises(UsageError):
            fedavg_weights(bad)

    @given(st.lists(st.integers(1, 10_000), min_size=1, max_size=8))
    def test_sums_to_one(self, n):
        assert sum(fedavg_weights(n)) == pytest.approx(1.0, abs=1e-12)


def state_with(history):
    return GlobalState(np.zeros(4), round=3, loss_history=history)


class TestDwa:
    def test_first_round_is_xi_over_k(self):
        state = GlobalState(np.zeros(4))
        assert dwa_weights(state, 2.0, 2, [0, 1, 2]) == [2 / 3] * 3

    def test_hand_example(self):
        # rho = [2, 1], T = 2: softmax([1, 0.5])
        w = dwa_weights(state_with({0: (2.0, 1.0), 1: (1.0, 1.0)}), 2.0, 1)
        np.testing.assert_allclose(w, [0.6225, 0.3775], atol=1e-4)

    def test_high_temperature_is_uniform(self):
        w = dwa_weights(state_with({0: (5.0, 1.0), 1: (0.1, 1.0), 2: (1.0, 3.0)}), 1e6, 2)
        np.testing.assert_allclose(w, [2 / 3] * 3, atol=1e-4)

    def test_normalize_xi(self):
        s = state_with({0: (2.0, 1.0), 1: (1.0, 1.0)})
        assert sum(dwa_weights(s, 2.0, 3, normalize_xi=True)) == pytest.approx(1.0)

    def test_zero_loss_is_floored(self):
        w = dwa_weights(state_with({0: (0.0, 0.0), 1: (1.0, 1.0)}), 2.0, 1)
        assert np.all(np.isfinite(w))

    @given(st.lists(st.tuples(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)), min_size=1, max_size=6),
           st.floats(0.1, 100), st.integers(1, 5))
    @settings(max_examples=100)
    def test_sum_and_order(self, losses, T, xi):
        hist = dict(enumerate(losses))
        w = np.array(dwa_weights(state_with(hist), T, xi))
        assert abs(w.sum() - xi) < 1e-9
        rho = np.array([a / b for a, b in losses])
        # a larger loss ratio never receives a smaller weight
        for i in range(len(w)):
            for j in range(len(w)):
                if rho[i] > rho[j]:
                    assert w[i] >= w[j]

    @given(st.floats(1e-3, 1e3), st.floats(0.1, 1000))
    def test_loss_scale_invariance(self, c, scale):
        base = {0: (2.0, 1.0), 1: (0.5, 1.5), 2: (1.0, 1.0)}
        scaled = {k: (a * scale, b * scale) for k, (a, b) in base.items()}
        np.testing.assert_allclose(dwa_weights(state_with(base), c, 1),
                                   dwa_weights(state_with(scaled), c, 1), rtol=1e-9)


class TestAggregate:
    def test_identity_single_client(self):
        u = top_fraction_mask(np.arange(8.0) - 3, 1.0)
        state = GlobalState(np.ones(8))
        new = aggregate(state, [report(0, 1, u)], [1.0])
        assert new.global_params.tobytes() == (np.ones(8) + u.densify()).tobytes()
        assert new.round == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        reps = random_reports(seed)
        w = [0.2, 0.5, 0.3]
        g = np.random.default_rng(seed + 100).normal(size=40)
        new = aggregate(GlobalState(g.copy()), reps, w)
        want = g + dense_accumulate([r.update for r in reps], w, 40)
        assert np.array_equal(new.global_params, want)

    def test_report_order_irrelevant(self):
        reps = random_reports(1)
        w = [0.1, 0.6, 0.3]
        a = aggregate(GlobalState(np.zeros(40)), reps, w)
        b = aggregate(GlobalState(np.zeros(40)), reps[::-1], w[::-1])
        assert a.global_params.tobytes() == b.global_params.tobytes()

    def test_round_mismatch(self):
        with pytest.raises(ProtocolError):
            aggregate(GlobalState(np.zeros(40)), random_reports(0, rnd=2), [1, 1, 1])

    def test_history_shifts(self):
        reps = random_reports(2)
        s1 = aggregate(GlobalState(np.zeros(40)), reps, [1, 1, 1])
        assert s1.loss_history[0] == (reps[0].avg_loss, 1.0)
        reps2 = [report(r.client_id, 2, SparseUpdate([0], [0.0], 40, 2), 0.3) for r in reps]
        s2 = aggregate(s1, reps2, [1, 1, 1])
        assert s2.loss_history[0] == (0.3, reps[0].avg_loss)

    def test_best_is_pre_update_model(self):
        g0 = np.zeros(4)
        u = SparseUpdate([0], [1.0], 4)
        s1 = aggregate(GlobalState(g0), [report(0, 1, u, dice={1: 0.9})], [1.0])
        s2 = aggregate(s1, [report(0, 2, SparseUpdate([1], [1.0], 4, 2), dice={1: 0.4})], [1.0])
        rnd, params = select_best(s2)
        assert rnd == 1
        assert params.tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_best_tracks_later_improvement(self):
        s = GlobalState(np.zeros(4))
        for r, d in enumerate([0.2, 0.7, 0.5], start=1):
            s = aggregate(s, [report(0, r, SparseUpdate([0], [1.0], 4, r), dice={1: d})], [1.0])
        rnd, params = select_best(s)
        assert rnd == 2 and params[0] == 1.0

    def test_select_best_before_any_round(self):
        with pytest.raises(UsageError):
            select_best(GlobalState(np.zeros(3)))


class TestServer:
    def test_waits_for_min_clients(self):
        srv = Server(AggregationConfig(min_clients=3), np.zeros(40))
        reps = random_reports(0)
        assert not srv.submit(reps[0])
        assert not srv.submit(reps[1])
        assert srv.submit(reps[2])
        assert srv.round == 2

    def test_duplicate_report(self):
        srv = Server(AggregationConfig(min_clients=3), np.zeros(40))
        r = random_reports(0)[0]
        srv.submit(r)
        with pytest.raises(ProtocolError):
            srv.submit(r)

    def test_fedavg_weights_from_report_sizes(self):
        srv = Server(AggregationConfig(min_clients=3), np.zeros(40))
        reps = random_reports(3)
        for r in reps:
            srv.submit(r)
        total = sum(r.n_samples for r in reps)
        assert srv.state.weight_trace[0] == {r.client_id: r.n_samples / total for r in reps}

    def test_bad_config(self):
        with pytest.raises(UsageError):
            AggregationConfig(strategy="median")
        with pytest.raises(UsageError):
            AggregationConfig(strategy="dwa", T=0.0)
