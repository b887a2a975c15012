import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsleak import data


def series(values):
    return data.RawSeries(np.asarray(values, dtype=float))


class TestNormalize:
    def test_basic(self):
        out, bounds = data.minmax_normalize(series([0, 5, 10]))
        assert np.allclose(out.values, [0, 0.5, 1])
        assert bounds == (0, 10)

    def test_identity_on_unit_range(self):
        out, _ = data.minmax_normalize(series([0.0, 0.25, 1.0]))
        assert np.allclose(out.values, [0.0, 0.25, 1.0])

    def test_constant_rejected(self):
        with pytest.raises(data.DataError):
            data.minmax_normalize(series([3, 3, 3]))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_and_argext(self, values):
        arr = np.asarray(values)
        if arr.max() - arr.min() < 1e-6:
            return
        out, bounds = data.minmax_normalize(series(arr))
        assert np.allclose(data.denormalize(out.values, bounds), arr, atol=1e-12 * max(1, np.abs(arr).max()))
        assert np.argmax(out.values) == np.argmax(arr)
        assert np.argmin(out.values) == np.argmin(arr)
        assert out.values.min() >= 0 and out.values.max() <= 1


class TestWindows:
    def test_exact_fit_single_window(self):
        spec = data.WindowingSpec(h=96, f=96, step_attack=96)
        wins = data.rolling_windows(series(np.arange(192.0)), spec, 96)
        assert len(wins) == 1

    def test_count_and_offsets(self):
        spec = data.WindowingSpec(h=96, f=96)
        wins = data.rolling_windows(series(np.arange(384.0)), spec, 96)
        assert [w.origin_index for w in wins] == [0, 96, 192]

    def test_too_short_rejected(self):
        spec = data.WindowingSpec(h=96, f=96)
        with pytest.raises(data.DataError):
            data.rolling_windows(series(np.arange(100.0)), spec, 1)

    def test_windows_are_exact_slices(self):
        src = np.random.default_rng(0).uniform(size=50)
        spec = data.WindowingSpec(h=6, f=4)
        for w in data.rolling_windows(series(src), spec, 3):
            assert np.array_equal(w.full.reshape(-1), src[w.origin_index : w.origin_index + 10])

    def test_tiling_when_step_equals_width(self):
        spec = data.WindowingSpec(h=3, f=2)
        wins = data.rolling_windows(series(np.arange(20.0)), spec, 5)
        cover = np.concatenate([w.full.reshape(-1) for w in wins])
        assert np.array_equal(cover, np.arange(20.0))


class TestSplit:
    def make(self, n):
        spec = data.WindowingSpec(h=2, f=2)
        return data.rolling_windows(series(np.arange(float(n * 4))), spec, 4)

    def test_hundred(self):
        parts = data.split_windows(self.make(100))
        assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == (64, 16, 20)

    def test_five(self):
        parts = data.split_windows(self.make(5))
        assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == (3, 1, 1)

    def test_partition_disjoint_and_complete(self):
        wins = self.make(23)
        parts = data.split_windows(wins)
        joined = parts["train"] + parts["val"] + parts["test"]
        assert [id(w) for w in joined] == [id(w) for w in wins]

    def test_chronological_order(self):
        parts = data.split_windows(self.make(25))
        assert max(w.origin_index for w in parts["train"]) < min(w.origin_index for w in parts["val"])
        assert max(w.origin_index for w in parts["val"]) < min(w.origin_index for w in parts["test"])

    def test_too_few(self):
        with pytest.raises(data.DataError):
            data.split_windows(self.make(4))


class TestSynthetic:
    def test_deterministic(self):
        a = data.synth_series(seed=9, length=480, period_steps=24)
        b = data.synth_series(seed=9, length=480, period_steps=24)
        assert np.array_equal(a.values, b.values)

    def test_noiseless_is_exactly_periodic(self):
        s = data.synth_series(seed=3, length=480, period_steps=24)
        x = s.values
        assert np.max(np.abs(x[:-24] - x[24:])) < 1e-10

    def test_bounds(self):
        s = data.synth_series(seed=5, length=600, period_steps=96, noise_std=0.05)
        assert s.values.min() == 0.0 and s.values.max() == 1.0

    def test_too_short(self):
        with pytest.raises(data.DataError):
            data.synth_series(seed=1, length=30, period_steps=24)


class TestCsv:
    def test_basic_with_gaps(self, tmp_path):
        p = tmp_path / "load.csv"
        p.write_text("timestamp,load\n2024-01-01,1.0\n2024-01-02,\n2024-01-03,3.0\n")
        s = data.load_csv(p)
        assert np.allclose(s.values, [1.0, 2.0, 3.0])

    def test_named_column(self, tmp_path):
        p = tmp_path / "two.csv"
        p.write_text("a,b\n1,10\n2,20\n")
        assert np.allclose(data.load_csv(p, column="b").values, [10, 20])

    def test_no_numeric_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\nx,y\nz,w\n")
        with pytest.raises(data.DataError):
            data.load_csv(p)


class TestPrepared:
    def test_roundtrip(self, tmp_path):
        s = data.synth_series(seed=2, length=24 * 30, period_steps=24)
        spec = data.WindowingSpec(h=24, f=24, step_attack=24, step_aux=4)
        prep = data.prepare_dataset(s, spec, period_steps=24)
        data.save_prepared(prep, tmp_path / "ds")
        back = data.load_prepared(tmp_path / "ds")
        assert back.spec == prep.spec
        assert back.split == prep.split
        assert back.norm_bounds == prep.norm_bounds
        assert len(back.aux_windows) == len(prep.aux_windows)
        for a, b in zip(back.windows, prep.windows):
            assert np.array_equal(a.full, b.full)
            assert a.origin_index == b.origin_index

    def test_aux_windows_stay_inside_val_segment(self):
        s = data.synth_series(seed=2, length=24 * 40, period_steps=24)
        spec = data.WindowingSpec(h=24, f=24, step_attack=24, step_aux=2)
        prep = data.prepare_dataset(s, spec, period_steps=24)
        val = prep.windows_of("val")
        lo = min(w.origin_index for w in val)
        hi = max(w.origin_index for w in val) + spec.w
        assert len(prep.aux_windows) > len(val)
        for w in prep.aux_windows:
            assert lo <= w.origin_index and w.origin_index + spec.w <= hi

    def test_aux_denser_than_attack_step(self):
        s = data.synth_series(seed=7, length=24 * 40, period_steps=24)
        spec = data.WindowingSpec(h=24, f=24, step_attack=24, step_aux=24)
        prep = data.prepare_dataset(s, spec)
        sparse = len(prep.aux_windows)
        spec2 = data.WindowingSpec(h=24, f=24, step_attack=24, step_aux=6)
        dense = len(data.prepare_dataset(s, spec2).aux_windows)
        assert dense > sparse
