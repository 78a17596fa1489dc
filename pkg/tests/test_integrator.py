import math

import numpy as np
import pytest

from floodcal.integrator import (B5, P, IntegrationError, IntegratorConfig, dense_eval,
                                 integrate, step)


def decay(t, y):
    return -y


class TestAccuracy:
    def test_exponential_decay(self):
        cfg = IntegratorConfig(rtol=1e-6, atol=1e-12)
        tr = integrate(decay, [1.0], (0.0, 1.0), [1.0], cfg)
        assert abs(tr.states[-1, 0] - math.exp(-1)) <= 10 * 1e-6

    def test_error_tracks_tolerance(self):
        errs = []
        for rtol in (1e-4, 1e-6, 1e-8):
            tr = integrate(decay, [1.0], (0.0, 1.0), [1.0], IntegratorConfig(rtol=rtol, atol=1e-14))
            errs.append(abs(tr.states[-1, 0] - math.exp(-1)))
        assert errs[0] > errs[1] > errs[2]
        for rtol, e in zip((1e-4, 1e-6, 1e-8), errs):
            assert e <= 10 * rtol

    def test_cosine(self):
        errs = []
        for rtol in (1e-6, 5e-7):
            tr = integrate(lambda t, y: np.cos(t) * np.ones_like(y), [0.0], (0.0, math.pi),
                           [math.pi / 2, math.pi], IntegratorConfig(rtol=rtol, atol=1e-10))
            assert tr.states[0, 0] == pytest.approx(1.0, abs=1e-5)
            errs.append(abs(tr.states[-1, 0]))
        assert errs[0] < 1e-5
        assert errs[1] <= errs[0]

    def test_constant(self):
        tr = integrate(lambda t, y: np.zeros_like(y), [2.0, -1.0], (0.0, 10.0), [1.0, 5.0, 10.0])
        np.testing.assert_array_equal(tr.states, [[2.0, -1.0]] * 3)
        assert tr.stats["rejected"] == 0


class TestSampling:
    def test_times_exact(self):
        s = np.array([0.0, 0.37, 1.0, 2.5])
        tr = integrate(decay, [1.0], (0.0, 2.5), s)
        np.testing.assert_array_equal(tr.times, s)
        assert tr.states[0, 0] == 1.0

    def test_dense_output_matches_step_end(self):
        y = np.array([1.0, 2.0])
        y_new, _, K = step(decay, 0.0, y, 0.1)
        np.testing.assert_array_equal(dense_eval(K, y, 0.1, 1.0), y_new)

    def test_dense_weights_consistent(self):
        np.testing.assert_allclose(P.sum(axis=1), B5, atol=1e-15)

    def test_samples_do_not_change_steps(self):
        a = integrate(decay, [1.0], (0.0, 3.0), [3.0])
        b = integrate(decay, [1.0], (0.0, 3.0), np.linspace(0.1, 3.0, 30))
        assert a.stats == b.stats
        assert a.states[-1, 0] == b.states[-1, 0]

    def test_rejects_unordered_samples(self):
        with pytest.raises(ValueError):
            integrate(decay, [1.0], (0.0, 1.0), [0.5, 0.2])
        with pytest.raises(ValueError):
            integrate(decay, [1.0], (0.0, 1.0), [2.0])


class TestFailures:
    def test_max_steps(self):
        with pytest.raises(IntegrationError, match="max_steps") as exc:
            integrate(decay, [1.0], (0.0, 100.0), [100.0], IntegratorConfig(max_steps=3))
        assert exc.value.t_last > 0

    def test_underflow(self):
        def blowup(t, y):
            return y * y

        with pytest.raises(IntegrationError, match="underflow") as exc:
            integrate(blowup, [1.0], (0.0, 2.0), [2.0])
        assert exc.value.t_last == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("kw", [{"rtol": 0}, {"atol": -1.0}, {"h_init": 2.0, "h_max": 1.0}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            IntegratorConfig(**kw)


def test_uncontrolled_components_do_not_steer():
    def fun(t, y):
        return np.array([-y[0], 50 * np.cos(50 * t)])

    ref = integrate(lambda t, y: -y, [1.0], (0.0, 2.0), [1.0, 2.0], IntegratorConfig())
    both = integrate(fun, [1.0, 0.0], (0.0, 2.0), [1.0, 2.0], IntegratorConfig(),
                     atol=np.array([1e-9, np.inf]))
    np.testing.assert_array_equal(both.states[:, 0], ref.states[:, 0])
    assert both.stats["accepted"] == ref.stats["accepted"]


def test_deterministic():
    a = integrate(lambda t, y: np.sin(t * y), [0.3, 1.7], (0.0, 5.0), [1.0, 5.0])
    b = integrate(lambda t, y: np.sin(t * y), [0.3, 1.7], (0.0, 5.0), [1.0, 5.0])
    np.testing.assert_array_equal(a.states, b.states)
