import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hatcn.data import DegenerateSeriesError
from hatcn.features import (
    analyse, detect_relaxation_start, hinge_objective, rt90_5, train_margin_classifier,
)

from oracles import hinge_grid_search, relaxation_start_by_rules


def exp_relaxation(tau, level=1.0, hold=40, tail=None):
    tail = tail or int(12 * tau) + 20
    t = np.arange(tail)
    return np.concatenate([np.linspace(0, level, 10), np.full(hold, level), level * np.exp(-t / tau)])


class TestRelaxationStart:
    def test_trapezoid(self):
        x = [0, 2, 4, 6, 8, 10, 10, 10, 10, 10, 8, 6, 4, 2, 0]
        res = detect_relaxation_start(x)
        assert res.eta == 5.0
        assert res.candidate_steps.tolist() == [3, 4, 5, 6, 7, 8, 9, 10, 11]
        assert res.start == 11
        assert relaxation_start_by_rules(x)[2] == 11

    def test_increasing_ramp(self):
        assert detect_relaxation_start(np.arange(20.0)).start == 19

    def test_impulse(self):
        x = np.zeros(30)
        x[12] = 3.0
        res = detect_relaxation_start(x)
        assert res.candidate_steps.tolist() == [12]
        assert res.start == 12

    def test_degenerate(self):
        with pytest.raises(DegenerateSeriesError):
            detect_relaxation_start(np.full(10, 2.0))
        with pytest.raises(DegenerateSeriesError):
            detect_relaxation_start([0.0, 1.0])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 12), min_size=3, max_size=40))
    def test_matches_rule_oracle(self, values):
        x = np.array(values, dtype=float)
        if x.max() == x.min():
            return
        res = detect_relaxation_start(x)
        eta, ts, start = relaxation_start_by_rules(values)
        assert res.eta == eta and res.candidate_steps.tolist() == ts and res.start == start
        assert res.start in ts and all(x[t] > res.eta for t in ts)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=3, max_size=40), st.sampled_from([0.5, 2.0, 4.0, 1024.0]))
    def test_scale_invariance(self, values, scale):
        x = np.array(values)
        if x.max() == x.min():
            return
        assert detect_relaxation_start(x).start == detect_relaxation_start(scale * x).start


class TestRT905:
    @pytest.mark.parametrize("tau", [10.0, 20.0, 40.0, 7.3])
    def test_exponential_closed_form(self, tau):
        x = exp_relaxation(tau)
        res = analyse(x)
        assert not res.censored
        assert abs(res.rt90_5 - tau * math.log(18)) <= 0.02 * tau

    def test_linear_decay(self):
        d = 200
        x = np.concatenate([np.full(20, 1.0), 1.0 - np.arange(1, d + 1) / d])
        dur, censored = rt90_5(x, 19)
        assert not censored
        assert dur == pytest.approx(0.85 * d, abs=1e-9)

    def test_step_drop(self):
        x = np.array([0, 1, 1, 1, 1, 0, 0, 0], dtype=float)
        dur, censored = rt90_5(x, 4)
        assert dur <= 1 and not censored

    def test_censored(self):
        x = np.concatenate([np.full(10, 1.0), np.linspace(1, 0.5, 30)])
        dur, censored = rt90_5(x, 9)
        assert censored and dur == 31

    def test_monotone_in_tau(self):
        vals = [analyse(exp_relaxation(tau)).rt90_5 for tau in (5, 8, 12, 20, 33, 50)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_bad_start(self):
        with pytest.raises(ValueError):
            rt90_5(np.ones(5), 5)


class TestMarginClassifier:
    def test_separable(self, rng):
        f = np.concatenate([rng.uniform(0, 1, 30), rng.uniform(2, 3, 30)])
        y = np.array([0] * 30 + [1] * 30)
        clf = train_margin_classifier(f, y)
        assert np.all(clf.predict(f) == y)

    def test_single_class(self):
        with pytest.raises(ValueError):
            train_margin_classifier([1.0, 2.0], [1, 1])

    def test_symmetric_gaussians_boundary(self):
        rng = np.random.default_rng(7)
        n = 400
        f = np.concatenate([rng.normal(-1, 1, n), rng.normal(1, 1, n)])
        y = np.array([0] * n + [1] * n)
        clf = train_margin_classifier(f, y)
        se = 1.0 / math.sqrt(n)
        assert abs(clf.boundary - 0.0) < 3 * se

    def test_matches_grid_search(self, rng):
        f = np.concatenate([rng.normal(-1, 1, 100), rng.normal(1.5, 1, 100)])
        y = np.array([0] * 100 + [1] * 100)
        l2 = 1e-2
        clf = train_margin_classifier(f, y, l2=l2)
        z = (f - clf.mean) / clf.scale
        s = np.where(y == 1, 1.0, -1.0)
        grid_obj, gw, gb = hinge_grid_search(z, s, l2, np.linspace(-4, 4, 321))
        ours = hinge_objective(clf.weight, clf.bias, z, s, l2)
        assert ours <= grid_obj + 1e-3
        assert np.mean(clf.predict(f) == y) >= np.mean((gw * z + gb > 0) == (y == 1)) - 0.01

    def test_label_flip(self, rng):
        f = np.concatenate([rng.normal(0, 1, 50), rng.normal(2, 1, 50)])
        y = np.array([0] * 50 + [1] * 50)
        a = train_margin_classifier(f, y)
        b = train_margin_classifier(f, 1 - y)
        assert a.weight > 0 > b.weight
        assert b.weight == pytest.approx(-a.weight, abs=1e-12)
        assert b.bias == pytest.approx(-a.bias, abs=1e-12)

    def test_standardization_invariance(self, rng):
        f = np.concatenate([rng.normal(0, 1, 50), rng.normal(2, 1, 50)])
        y = np.array([0] * 50 + [1] * 50)
        a = train_margin_classifier(f, y)
        b = train_margin_classifier(10.0 * f + 3.0, y)
        assert b.boundary == pytest.approx(10.0 * a.boundary + 3.0, rel=1e-9)
        assert np.array_equal(a.predict(f), b.predict(10.0 * f + 3.0))
