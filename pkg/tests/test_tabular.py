import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabpref.exceptions import DataError, SchemaError
from tabpref.tabular import (
    Holdout,
    Imbalance,
    Schema,
    Shift,
    Table,
    categorical,
    downsample_minority,
    infer_schema,
    load_csv,
    numeric,
    split_holdout,
    split_shift,
)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def binary_table(n_neg, n_pos):
    schema = Schema((numeric("x"), categorical("y", ["neg", "pos"])), "y")
    y = np.r_[np.zeros(n_neg), np.ones(n_pos)]
    return Table(schema, np.column_stack([np.arange(len(y)), y]))


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            Schema((numeric("a"), numeric("a")), "a")

    def test_target_must_exist(self):
        with pytest.raises(SchemaError):
            Schema((numeric("a"),), "b")

    @pytest.mark.parametrize("cats", [["x"], ["x", "x"]])
    def test_bad_categories(self, cats):
        with pytest.raises(SchemaError):
            Schema((categorical("c", cats), numeric("y")), "y")

    def test_json_round_trip(self, mixed_table):
        s = mixed_table.schema
        assert Schema.from_json(s.to_json()) == s


class TestTable:
    def test_invalid_category_index(self):
        schema = Schema((categorical("c", ["a", "b"]),), "c")
        with pytest.raises(DataError):
            Table(schema, [[2.0]])

    def test_integer_column_holds_whole_numbers(self):
        schema = Schema((numeric("n", is_integer=True),), "n")
        with pytest.raises(DataError):
            Table(schema, [[1.5]])

    def test_read_only(self, mixed_table):
        with pytest.raises(ValueError):
            mixed_table.data[0, 0] = 1.0

    def test_csv_round_trip(self, tmp_path, mixed_table):
        p = tmp_path / "x.csv"
        mixed_table.to_csv(p)
        back = load_csv(p, schema=mixed_table.schema)
        np.testing.assert_array_equal(back.data, mixed_table.data)


class TestLoadCsv:
    def test_direct_parse(self, tmp_path):
        t = load_csv(write(tmp_path, "a,y\n1,pos\n2,neg\n"), target="y")
        assert t.n_rows == 2 and t.schema.n_columns == 2

    def test_header_only_with_schema(self, tmp_path):
        schema = Schema((numeric("a"), categorical("y", ["neg", "pos"])), "y")
        t = load_csv(write(tmp_path, "a,y\n"), schema=schema)
        assert t.n_rows == 0

    def test_missing_cell(self, tmp_path):
        schema = Schema((numeric("x"), numeric("m"), numeric("z")), "z")
        t = load_csv(write(tmp_path, "x,m,z\n1,,3\n"), schema=schema)
        assert np.isnan(t.data[0, 1]) and t.data[0, 0] == 1 and t.data[0, 2] == 3

    def test_unparseable_numeric_is_missing(self, tmp_path):
        schema = Schema((numeric("x"), numeric("z")), "z")
        t = load_csv(write(tmp_path, "x,z\nabc,3\n"), schema=schema)
        assert np.isnan(t.data[0, 0])

    def test_ragged_row_names_line(self, tmp_path):
        with pytest.raises(DataError, match="line 3"):
            load_csv(write(tmp_path, "a,y\n1,pos\n2\n"), target="y")

    def test_unknown_category(self, tmp_path):
        schema = Schema((numeric("a"), categorical("y", ["neg", "pos"])), "y")
        with pytest.raises(DataError, match="unknown category"):
            load_csv(write(tmp_path, "a,y\n1,maybe\n"), schema=schema)


class TestInferSchema:
    def test_two_string_values(self):
        rows = [["a" if i % 2 else "b", str(i)] for i in range(1000)]
        schema, _ = infer_schema(["c", "x"], rows, "x")
        assert schema.column("c").categories == ("a", "b")

    def test_distinct_reals_numeric(self):
        rows = [[f"{i + 0.5}"] for i in range(1000)]
        schema, _ = infer_schema(["x"], rows, "x")
        col = schema.column("x")
        assert not col.is_categorical and not col.is_integer

    def test_small_integer_range_is_categorical(self):
        rows = [[str(1 + i % 15)] for i in range(1000)]
        schema, _ = infer_schema(["x"], rows, "x")
        assert schema.column("x").n_categories == 15

    def test_lexicographic_order(self):
        schema, _ = infer_schema(["c"], [["b"], ["a"], ["c"], ["10"]], "c")
        assert schema.column("c").categories == ("10", "a", "b", "c")

    def test_zero_rows(self):
        with pytest.raises(DataError):
            infer_schema(["x"], [], "x")

    def test_single_value_flagged(self):
        _, notes = infer_schema(["c", "y"], [["k", "0"], ["k", "1"]], "y")
        assert any("'c'" in n for n in notes)


class TestHoldout:
    @pytest.mark.parametrize("n,ratio,cap,expected", [(100, 0.8, None, (80, 20)), (100, 0.8, 32, (32, 20)), (2, 0.5, None, (1, 1))])
    def test_sizes(self, n, ratio, cap, expected):
        train, test = split_holdout(binary_table(n // 2, n - n // 2), Holdout(ratio, 0, cap))
        assert (train.n_rows, test.n_rows) == expected

    def test_cap_too_large(self):
        with pytest.raises(DataError, match="80"):
            split_holdout(binary_table(50, 50), Holdout(0.8, 0, 90))

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(2, 200), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 2**31))
    def test_partition(self, n, ratio, seed):
        t = binary_table(n // 2, n - n // 2)
        train, test = split_holdout(t, Holdout(ratio, seed))
        ids = np.r_[train.values("x"), test.values("x")]
        assert sorted(ids) == list(range(n))

    def test_deterministic(self):
        t = binary_table(30, 30)
        a = split_holdout(t, Holdout(0.7, 3))
        b = split_holdout(t, Holdout(0.7, 3))
        np.testing.assert_array_equal(a[0].data, b[0].data)


class TestImbalance:
    def test_one_percent(self):
        out = downsample_minority(binary_table(9900, 1000), Imbalance(0.01, 0))
        y = out.values("y")
        assert (y == 0).sum() == 9900 and (y == 1).sum() == 100

    def test_already_at_target(self):
        t = binary_table(99, 1)
        assert downsample_minority(t, Imbalance(0.01, 0)).n_rows == 100

    def test_floor_of_one(self):
        out = downsample_minority(binary_table(10, 10), Imbalance(0.1, 0))
        y = out.values("y")
        assert (y == 1).sum() == 1 and abs(y.mean() - 1 / 11) < 1e-12

    def test_majority_untouched(self):
        t = binary_table(40, 30)
        out = downsample_minority(t, Imbalance(0.2, 5))
        np.testing.assert_array_equal(out.data[out.values("y") == 0], t.data[t.values("y") == 0])

    def test_non_binary_target(self):
        schema = Schema((numeric("x"), categorical("y", ["a", "b", "c"])), "y")
        with pytest.raises(DataError):
            downsample_minority(Table(schema, [[0, 0], [1, 1], [2, 2]]), Imbalance())


class TestShift:
    def table(self):
        schema = Schema((categorical("g", ["F", "M"]), numeric("x"), categorical("y", ["0", "1"])), "y")
        return Table(schema, [[1, 0, 0], [1, 1, 1], [0, 2, 0], [0, 3, 1]])

    def test_partition_drops_column(self):
        train, test = split_shift(self.table(), Shift("g", {"M"}))
        assert (train.n_rows, test.n_rows) == (2, 2)
        assert "g" not in train.schema.names and "g" not in test.schema.names
        assert list(train.values("x")) == [0, 1]

    def test_all_values_is_error(self):
        with pytest.raises(DataError):
            split_shift(self.table(), Shift("g", {"M", "F"}))

    def test_numeric_split_column(self):
        with pytest.raises(SchemaError):
            split_shift(self.table(), Shift("x", {"1"}))
