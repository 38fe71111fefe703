import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabpref.encoder import QuantileEncoder, decode, decode_row, encode, encode_row, fit_bins
from tabpref.exceptions import DataError
from tabpref.tabular import Schema, Table, categorical, numeric


def one_col(values, is_integer=False):
    return Table(Schema((numeric("x", is_integer),), "x"), np.asarray(values, float)[:, None])


def quantile_oracle(values, b):
    # textbook linear interpolation at position q * (n - 1) of the sorted sample
    v = sorted(values)
    out = []
    for j in range(1, b):
        pos = j / b * (len(v) - 1)
        lo = int(pos)
        frac = pos - lo
        hi = min(lo + 1, len(v) - 1)
        out.append(v[lo] + frac * (v[hi] - v[lo]))
    return out


class TestFitBins:
    def test_uniform_0_99(self):
        spec = fit_bins(one_col(np.arange(100.0)), 4)
        np.testing.assert_allclose(spec.bins[0].edges, [24.75, 49.5, 74.25])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60, unique=True), st.integers(2, 8))
    def test_edges_match_oracle(self, values, b):
        edges = fit_bins(one_col(values), b).bins[0].edges
        want = np.unique(quantile_oracle(values, b))
        want = want[want < max(values)]
        np.testing.assert_allclose(edges, want, rtol=0, atol=1e-9)

    def test_constant_column(self):
        with pytest.warns(UserWarning, match="constant"):
            spec = fit_bins(one_col([5, 5, 5]), 4)
        assert spec.vocab_sizes == (1,)

    def test_two_points_median(self):
        spec = fit_bins(one_col([0.0, 1.0]), 2)
        np.testing.assert_allclose(spec.bins[0].edges, [0.5])

    def test_integer_edges_are_half_integers(self):
        edges = fit_bins(one_col(np.arange(100), is_integer=True), 4).bins[0].edges
        np.testing.assert_array_equal(edges, [24.5, 49.5, 74.5])

    def test_b_below_two(self):
        with pytest.raises(ValueError):
            fit_bins(one_col([1.0, 2.0]), 1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=8, max_size=200, unique=True), st.integers(2, 8))
    def test_occupancy(self, values, b):
        spec = fit_bins(one_col(values), b)
        counts = np.bincount(encode(np.asarray(values)[:, None], spec)[:, 0], minlength=b)
        assert np.all(np.abs(counts - len(values) / b) <= 1)


class TestEncode:
    spec = fit_bins(one_col(np.arange(100.0)), 4)

    @pytest.mark.parametrize("value,token", [(10.0, 0), (24.75, 0), (24.76, 1), (49.5, 1), (99.0, 3)])
    def test_right_closed(self, value, token):
        assert encode_row([value], self.spec)[0] == token

    def test_clamping_counted(self):
        tokens, clamped = encode(np.array([[-5.0], [150.0], [50.0]]), self.spec, return_clamped=True)
        assert list(tokens[:, 0]) == [0, 3, 2] and clamped == 2

    def test_category_index(self):
        schema = Schema((categorical("c", ["a", "b"]),), "c")
        spec = fit_bins(Table(schema, [[0.0], [1.0]]))
        assert encode_row([1.0], spec)[0] == 1

    def test_missing_rejected(self):
        with pytest.raises(DataError):
            encode(np.array([[np.nan]]), self.spec)

    @given(st.floats(-200, 200), st.floats(-200, 200))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert encode_row([lo], self.spec)[0] <= encode_row([hi], self.spec)[0]


class TestDecode:
    def test_round_trip_all_tokens(self, mixed_table):
        spec = fit_bins(mixed_table, 8)
        rng = np.random.default_rng(0)
        tokens = np.column_stack([rng.integers(0, v, 2000) for v in spec.vocab_sizes])
        np.testing.assert_array_equal(encode(decode(tokens, spec, rng), spec), tokens)

    def test_integer_bin_range(self):
        spec = fit_bins(one_col(np.arange(100), is_integer=True), 4)
        vals = decode(np.zeros((500, 1), int), spec, np.random.default_rng(1))[:, 0]
        assert np.all(vals == np.round(vals)) and vals.min() >= 0 and vals.max() <= 24

    def test_uniform_within_bin(self):
        spec = fit_bins(one_col(np.arange(100.0)), 4)
        vals = decode(np.ones((10_000, 1), int), spec, np.random.default_rng(2))[:, 0]
        lo, hi = 24.75, 49.5
        sigma = (hi - lo) / np.sqrt(12) / np.sqrt(len(vals))
        assert abs(vals.mean() - (lo + hi) / 2) < 3 * sigma
        assert vals.min() > lo and vals.max() <= hi

    def test_decode_row_seeded(self, mixed_table):
        spec = fit_bins(mixed_table)
        e = encode_row(mixed_table.data[0], spec)
        np.testing.assert_array_equal(decode_row(e, spec, 3), decode_row(e, spec, 3))


def test_quantile_encoder_estimator(mixed_table):
    enc = QuantileEncoder(n_bins=8, random_state=0).fit(mixed_table)
    tokens = enc.transform(mixed_table)
    back = enc.inverse_transform(tokens)
    np.testing.assert_array_equal(enc.transform(back), tokens)
    assert enc.get_params() == {"n_bins": 8, "random_state": 0}
