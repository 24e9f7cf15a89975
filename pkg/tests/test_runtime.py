import numpy as np
import pytest

from adept.runtime import (ClientError, ClientUpdate, NumericalError, RoundMessage,
                           aggregate_mean, client_rng, communication_rounds, run_rounds)


class _Noisy:
    """Adds a random draw to its state every step; sends the state."""

    def __init__(self, cid, fail_at=None):
        self.client_id = cid
        self.fail_at = fail_at
        self.steps = 0

    def receive(self, msg):
        self.x = float(msg.mu)

    def local_step(self, t, rng):
        if t == self.fail_at:
            raise RuntimeError("boom")
        self.x += rng.standard_normal()
        self.steps += 1

    def send(self, t, rng):
        return ClientUpdate(self.client_id, np.array(self.x), 0.0)


def _run(clients, T=10, tau=3, workers=1, seed=0):
    return run_rounds(clients, RoundMessage(np.array(0.0), 0.0, 0), T, tau, seed, workers=workers,
                      monitor=lambda t, msg, ups: {"mu": float(msg.mu)}, trace_columns=["mu"])


class TestRunRounds:
    def test_single_round(self):
        c = _Noisy(0)
        msg, trace = _run([c], T=1, tau=1)
        assert c.steps == 1 and len(trace) == 1 and msg.round == 1

    def test_communication_schedule(self):
        _, trace = _run([_Noisy(0), _Noisy(1)])
        comm = [r["iter"] for r in trace.rows if r["communicated"]]
        assert comm == [3, 6, 9] == communication_rounds(10, 3)

    def test_order_independent(self):
        _, a = _run([_Noisy(i) for i in range(5)])
        _, b = _run([_Noisy(i) for i in reversed(range(5))])
        assert a.to_csv() == b.to_csv()

    def test_worker_independent(self):
        _, a = _run([_Noisy(i) for i in range(6)], workers=1)
        _, b = _run([_Noisy(i) for i in range(6)], workers=4)
        assert a.to_csv() == b.to_csv()

    def test_seed_changes_result(self):
        _, a = _run([_Noisy(0)], seed=0)
        _, b = _run([_Noisy(0)], seed=1)
        assert a.to_csv() != b.to_csv()

    def test_client_error_carries_id(self):
        with pytest.raises(ClientError) as info:
            _run([_Noisy(0), _Noisy(1, fail_at=2)])
        assert info.value.client_id == 1 and info.value.round == 2

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            _run([])
        with pytest.raises(ValueError):
            _run([_Noisy(0)], tau=0)


class TestAggregate:
    def test_single(self):
        mu, sigma = aggregate_mean([ClientUpdate(0, np.array([1.5]), 2.0)])
        np.testing.assert_array_equal(mu, [1.5])
        assert sigma == 2.0

    def test_two(self):
        mu, _ = aggregate_mean([ClientUpdate(0, np.array([0.0]), 1.0),
                                ClientUpdate(1, np.array([2.0]), 1.0)])
        np.testing.assert_array_equal(mu, [1.0])

    def test_matches_pairwise_tree(self, rng):
        vals = [rng.standard_normal(7) for _ in range(50)]
        mu, _ = aggregate_mean([ClientUpdate(i, v, 1.0) for i, v in enumerate(vals)])

        def tree(xs):
            if len(xs) == 1:
                return xs[0]
            mid = len(xs) // 2
            return tree(xs[:mid]) + tree(xs[mid:])
        np.testing.assert_allclose(mu, tree(vals) / 50, atol=1e-12)

    def test_order_of_arrival_irrelevant(self, rng):
        ups = [ClientUpdate(i, rng.standard_normal(3), float(i)) for i in range(9)]
        a = aggregate_mean(ups)
        b = aggregate_mean(ups[::-1])
        np.testing.assert_array_equal(a[0], b[0])

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate_mean([])
        with pytest.raises(ValueError):
            aggregate_mean([ClientUpdate(0, np.zeros(2), 1.0), ClientUpdate(1, np.zeros(3), 1.0)])


class TestRng:
    def test_cells_are_distinct_and_repeatable(self):
        a = client_rng(0, 1, 2).standard_normal()
        assert a == client_rng(0, 1, 2).standard_normal()
        assert a != client_rng(0, 2, 1).standard_normal()
        assert a != client_rng(0, 1, 2, stream=1).standard_normal()

    def test_numerical_error_is_floating_point_error(self):
        assert issubclass(NumericalError, FloatingPointError)
