import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cecs.data import Impression
from cecs.errors import ConfigError, DataError, UsageError
from cecs.metrics import EvalReport, MetricWeights, evaluate, format_table, hr, pr, reports_json

import oracles

W = MetricWeights((0.5, 0.3, 0.2))

combos = st.lists(st.integers(0, 4), min_size=3, max_size=3)
raw_weights = st.lists(st.floats(0.01, 10.0), min_size=3, max_size=3)


class TestWeights:
    def test_default(self):
        assert MetricWeights.default().w == pytest.approx((0.5, 0.3, 0.2), abs=1e-15)

    def test_normalized(self):
        assert MetricWeights((5, 3, 2)).w == pytest.approx((0.5, 0.3, 0.2), abs=1e-15)

    @pytest.mark.parametrize("w", [(), (0.0, 0.0), (-1.0, 2.0), (float("nan"), 1.0)])
    def test_invalid(self, w):
        with pytest.raises(ConfigError):
            MetricWeights(w)


class TestHR:
    def test_full(self):
        assert hr([1, 2, 3], [1, 2, 3], W) == 1.0

    def test_none(self):
        assert hr([1, 2, 3], [0, 0, 0], W) == 0.0

    def test_first_only(self):
        assert abs(hr([1, 2, 3], [1, 0, 0], W) - 1 / 3) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            hr([1, 2], [1, 2, 3], W)

    @settings(max_examples=200, deadline=None)
    @given(combos, combos, raw_weights)
    def test_matches_oracle(self, a, b, w):
        assert hr(a, b, MetricWeights(tuple(w))) == pytest.approx(oracles.hr(a, b, w), abs=1e-12)


class TestPR:
    def test_full(self):
        assert pr([1, 2, 3], [1, 2, 3], W) == pytest.approx(1.0, abs=1e-15)

    def test_first_and_third(self):
        assert abs(pr([1, 2, 3], [1, 0, 3], W) - 0.7) <= 1e-12

    def test_first_only(self):
        assert abs(pr([1, 2, 3], [1, 0, 0], W) - 0.5) <= 1e-12

    def test_none(self):
        assert pr([1, 2, 3], [0, 0, 0], W) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(combos, combos, raw_weights)
    def test_matches_oracle(self, a, b, w):
        assert pr(a, b, MetricWeights(tuple(w))) == pytest.approx(oracles.pr(a, b, w), abs=1e-12)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(combos, combos, raw_weights)
    def test_bounds_and_zero_together(self, a, b, w):
        mw = MetricWeights(tuple(w))
        h, p = hr(a, b, mw), pr(a, b, mw)
        assert 0 <= h <= 1 and 0 <= p <= 1 + 1e-15
        assert (h == 0) == (p == 0) == (not any(x == y for x, y in zip(a, b)))
        assert (h == 1.0) == (list(a) == list(b))

    @settings(max_examples=100, deadline=None)
    @given(combos, combos, st.permutations(range(5)))
    def test_relabel_invariance(self, a, b, perm):
        pa, pb = [perm[x] for x in a], [perm[x] for x in b]
        assert hr(a, b, W) == hr(pa, pb, W) and pr(a, b, W) == pr(pa, pb, W)

    @settings(max_examples=100, deadline=None)
    @given(combos, combos, raw_weights, st.floats(0.001, 1000.0))
    def test_weight_scaling(self, a, b, w, c):
        m1, m2 = MetricWeights(tuple(w)), MetricWeights(tuple(c * x for x in w))
        assert hr(a, b, m1) == pytest.approx(hr(a, b, m2), abs=1e-12)
        assert pr(a, b, m1) == pytest.approx(pr(a, b, m2), abs=1e-12)


def make_test_log(n, seed=0, clicked=True):
    rng = np.random.default_rng(seed)
    return [Impression(i, 0, 0, [list(range(5))] * 3, [int(x) for x in rng.integers(5, size=3)],
                       int(clicked or rng.random() < 0.5)) for i in range(n)]


class TestEvaluate:
    def test_truth_selector(self):
        log = make_test_log(50)
        rep = evaluate("truth", lambda imps: np.array([m.shown for m in imps]), log)
        assert (rep.hr, rep.pr, rep.samples) == (1.0, pytest.approx(1.0), 50)
        assert rep.match_rates == [1.0, 1.0, 1.0]

    def test_uniform_random_pr(self):
        log = make_test_log(50_000, seed=1)
        rng = np.random.default_rng(2)
        rep = evaluate("random", lambda imps: rng.integers(5, size=(len(imps), 3)), log)
        assert abs(rep.pr - 0.2) <= 0.01

    def test_only_clicked_scored(self):
        log = make_test_log(200, seed=3, clicked=False)
        rep = evaluate("x", lambda imps: np.zeros((len(imps), 3), dtype=int), log)
        assert rep.samples == sum(m.label for m in log)

    def test_no_clicks(self):
        log = [Impression(0, 0, 0, [[1]] * 3, [0, 0, 0], 0)]
        with pytest.raises(DataError):
            evaluate("x", lambda imps: np.zeros((1, 3), dtype=int), log)

    def test_invalid_selection(self):
        with pytest.raises(UsageError):
            evaluate("x", lambda imps: np.full((len(imps), 3), 7), make_test_log(3))

    def test_oracle_needs_world(self):
        with pytest.raises(UsageError):
            evaluate("x", lambda imps: np.zeros((len(imps), 3), dtype=int), make_test_log(3), oracle=True)

    def test_compensated_mean(self):
        log = make_test_log(1000, seed=4)
        sel = lambda imps: np.array([[m.shown[0], 0, 0] for m in imps])
        rep = evaluate("x", sel, log)
        want = math.fsum(oracles.hr([m.shown[0], 0, 0], m.shown, [0.5, 0.3, 0.2]) for m in log) / len(log)
        assert rep.hr == pytest.approx(want, abs=1e-15)


class TestReport:
    def test_table_layout(self):
        reps = [EvalReport("popularity", 10, 0.5, 0.6, [0.1] * 3), EvalReport("cecs", 10, 0.25, 0.3, [0.1] * 3)]
        lines = format_table(reps).splitlines()
        assert [c.strip() for c in lines[0].split("|")] == ["Model", "HR", "PR"]
        assert lines[2].split("|")[0].strip() == "popularity" and "0.5000" in lines[2]

    def test_oracle_columns(self):
        reps = [EvalReport("a", 1, 0.1, 0.2, [0.0] * 3, 0.3, 0.4, [0.0] * 3)]
        assert "Oracle-HR" in format_table(reps, oracle=True)

    def test_json_excludes_runtime(self):
        rep = EvalReport("a", 1, 0.1, 0.2, [0.0] * 3, runtime=12.5)
        assert "runtime" not in reports_json([rep])
        assert rep.to_dict(include_runtime=True)["runtime"] == 12.5
