import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsleak import metrics


class TestSmape:
    def test_equal_zero(self):
        x = np.array([0.2, 0.8])
        assert metrics.smape(x, x) == 0.0

    def test_upper_bound(self):
        assert metrics.smape(np.ones(4), np.zeros(4)) == 2.0

    def test_direct_formula(self):
        assert metrics.smape(np.array([1.0, 1.0]), np.array([1.0, 3.0])) == pytest.approx(0.5)

    def test_both_zero_convention(self):
        assert metrics.smape(np.zeros(3), np.zeros(3)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(metrics.MetricError):
            metrics.smape(np.zeros(2), np.zeros(3))

    @given(
        st.lists(st.floats(-10, 10), min_size=1, max_size=20),
        st.lists(st.floats(-10, 10), min_size=1, max_size=20),
    )
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_bounded(self, xs, ys):
        n = min(len(xs), len(ys))
        a, b = np.asarray(xs[:n]), np.asarray(ys[:n])
        s = metrics.smape(a, b)
        assert 0.0 <= s <= 2.0
        assert s == metrics.smape(b, a)

    def test_zero_iff_equal_up_to_convention(self):
        a = np.array([0.5, 0.0])
        b = np.array([0.5, 0.0])
        assert metrics.smape(a, b) == 0.0
        assert metrics.smape(a, np.array([0.5, 0.1])) > 0.0


class TestMatchBatch:
    def rand_batch(self, b, h=6, f=3, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(size=(b, h, 1)), rng.uniform(size=(b, f, 1))

    def test_b1_identity_noop(self):
        obs, tar = self.rand_batch(1)
        rep = metrics.match_batch(obs, tar, obs, tar)
        assert rep.permutation == (0,)
        assert rep.matching == "identity"
        assert rep.smape_obs == 0.0

    def test_reversed_batch_recovered(self):
        obs, tar = self.rand_batch(4, seed=3)
        rep = metrics.match_batch(obs[::-1].copy(), tar[::-1].copy(), obs, tar)
        assert rep.permutation == (3, 2, 1, 0)
        assert rep.smape_obs == pytest.approx(0.0, abs=1e-15)
        assert rep.smape_tar == pytest.approx(0.0, abs=1e-15)
        assert rep.identity_smape_obs > 0.0

    def test_exhaustive_no_worse_than_identity(self):
        for seed in range(5):
            t_obs, t_tar = self.rand_batch(5, seed=seed)
            r_obs, r_tar = self.rand_batch(5, seed=seed + 100)
            rep = metrics.match_batch(r_obs, r_tar, t_obs, t_tar)
            joint = 0.5 * (rep.smape_obs + rep.smape_tar)
            identity = 0.5 * (rep.identity_smape_obs + rep.identity_smape_tar)
            assert joint <= identity + 1e-12

    def test_greedy_flagged_beyond_limit(self):
        obs, tar = self.rand_batch(9, seed=1)
        rep = metrics.match_batch(obs, tar, obs, tar)
        assert rep.matching == "greedy"
        assert sorted(rep.permutation) == list(range(9))

    def test_batch_size_mismatch(self):
        obs, tar = self.rand_batch(2)
        with pytest.raises(metrics.MetricError):
            metrics.match_batch(obs[:1], tar[:1], obs, tar)

    def test_per_sample_entries(self):
        obs, tar = self.rand_batch(3, seed=2)
        rep = metrics.match_batch(obs, tar, obs, tar)
        assert len(rep.per_sample) == 3
        assert all(e["smape_obs"] == 0.0 for e in rep.per_sample)

    def test_report_serializes(self):
        import json

        obs, tar = self.rand_batch(2)
        rep = metrics.match_batch(obs, tar, obs, tar)
        json.dumps(rep.to_dict())
