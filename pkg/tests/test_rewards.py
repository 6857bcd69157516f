import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crdflow.rewards import (
    GaussianMixture,
    GroupBatch,
    RewardFn,
    ToyTask,
    bon_curve,
    bon_select,
    eval_reward,
    expected_best_of_n,
    group_normalize,
    two_modes_1d,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestTasks:
    def test_two_modes_statistics(self):
        x, c = two_modes_1d(0.3).sample(20000, np.random.default_rng(0))
        assert np.all(c == 0)
        assert abs(np.mean(x > 0) - 0.5) < 0.02
        assert abs(np.std(np.abs(x) - 1.0) - 0.3) < 0.01

    def test_mixture_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture([[0.0]], 0.0, [1.0])
        with pytest.raises(ValueError):
            GaussianMixture([[0.0], [1.0]], 0.1, [0.5, 0.6])
        with pytest.raises(ValueError):
            ToyTask(3, [GaussianMixture([[0, 0, 0]], 0.1, [1.0])])


class TestRewardFn:
    def test_mode_preference_midpoint_and_sides(self):
        f = RewardFn("mode_preference", target=[1.0], rival=[-1.0])
        assert f(np.array([[0.0]]))[0] == 0.5
        assert f(np.array([[1.0]]))[0] > 0.9999
        assert f(np.array([[-1.0]]))[0] < 1e-4

    def test_target_region_and_direction(self):
        f = RewardFn("target_region", target=[0.0, 0.0], radius=1.0)
        assert f(np.array([[1.0, 0.0]]))[0] == 0.5
        g = RewardFn("direction", direction=[0.0, 2.0], offset=1.0)
        assert g(np.array([[5.0, 1.0]]))[0] == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            RewardFn("sharpness")
        with pytest.raises(ValueError):
            RewardFn("mode_preference", target=[1.0])
        with pytest.raises(ValueError):
            RewardFn("direction", direction=[0.0])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (8, 2), elements=finite), st.sampled_from(["mode_preference", "target_region", "direction"]))
    def test_bounded(self, x, tag):
        f = RewardFn(tag, target=[1.0, 0.0], rival=[-1.0, 0.0], direction=[1.0, 1.0])
        r = f(x)
        assert np.all((r >= 0) & (r <= 1))

    def test_eval_reward_per_prompt(self):
        fns = [RewardFn("direction", direction=[1.0]), RewardFn("direction", direction=[-1.0])]
        r = eval_reward(fns, [0, 1], np.array([[1.0], [1.0]]))
        assert r[0] > 0.99 and r[1] < 0.01
        assert isinstance(eval_reward(fns[0], 0, np.array([0.0])), float)


class TestGroupNormalize:
    def test_worked_example(self):
        np.testing.assert_allclose(group_normalize([1.0, 2.0, 3.0]), [-1.224744871391589, 0.0, 1.224744871391589])

    def test_constant_group_is_zero(self):
        assert np.array_equal(group_normalize([0.7] * 5), np.zeros(5))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 16), elements=st.floats(0, 1)))
    def test_zero_mean_unit_std(self, r):
        z = group_normalize(r)
        assert abs(z.mean()) < 1e-9
        if np.std(r) > 1e-6:
            assert abs(z.std() - 1.0) < 1e-9

    def test_group_batch_shapes(self):
        g = GroupBatch(0, np.zeros(4), [0.1, 0.2, 0.3, 0.4]).attach_noise(np.random.default_rng(0), 3)
        assert g.samples.shape == (4, 1)
        assert g.x_t.shape == (4, 3, 1) and g.t.shape == (4, 3)
        with pytest.raises(ValueError):
            GroupBatch(0, np.zeros(1), [0.1])


class TestBestOfN:
    def test_select(self):
        r = [0.2, 0.9, 0.9, 0.1]
        assert bon_select(r, r, 1) == 0
        assert bon_select(r, r, 3) == 1
        with pytest.raises(ValueError):
            bon_select(r, r, 0)
        with pytest.raises(ValueError):
            bon_select(r, r, 5)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-10, 10)))
    def test_prefix_max_monotone(self, r):
        best = [r[bon_select(r, r, n)] for n in range(1, len(r) + 1)]
        assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))

    def test_expected_best_of_two_enumeration(self):
        p, r = np.array([0.1, 0.2, 0.3, 0.4]), np.array([3.0, -1.0, 0.5, 2.0])
        brute = sum(p[i] * p[j] * max(r[i], r[j]) for i, j in itertools.product(range(4), repeat=2))
        assert abs(expected_best_of_n(p, r, 2) - brute) < 1e-12
        assert abs(expected_best_of_n(p, r, 1) - p @ r) < 1e-12

    def test_curve(self):
        def model(n, rng):
            return rng.uniform(size=(n, 1)), np.zeros(n, dtype=int)

        curve = bon_curve(model, lambda c, x: x[:, 0], 8, 500, np.random.default_rng(0))
        assert np.all(np.diff(curve.best) >= 0)
        # E[max of n uniforms] = n / (n + 1)
        np.testing.assert_allclose(curve.best, curve.n / (curve.n + 1), atol=0.03)
        assert len(list(curve.rows())) == 8
