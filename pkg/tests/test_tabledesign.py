import numpy as np
import pytest

from errors import (
    DataError,
    DuplicateTermError,
    EmptyFormulaError,
    FormulaSyntaxError,
    IngestionError,
    PreconditionError,
    UnknownColumnError,
)
from tabledesign import INTERCEPT_LABEL, DataTable, ProxyGroup, TrialDataset, build_design, parse_formula, read_csv


class TestParseFormula:
    def test_terms_and_labels(self):
        f = parse_formula("1 + X1 + A1*X1")
        assert f.intercept
        assert f.labels == [INTERCEPT_LABEL, "X1", "A1*X1"]
        assert f.column_names == ["X1", "A1"]
        assert f.width == 3

    def test_intercept_defaults_on(self):
        assert parse_formula("X + Z").intercept

    def test_no_intercept(self):
        f = parse_formula("0 + X")
        assert not f.intercept
        assert f.labels == ["X"]

    def test_intercept_only(self):
        f = parse_formula("1")
        assert f.terms == ()
        assert f.width == 1

    @pytest.mark.parametrize("text", ["", "   ", "0"])
    def test_empty(self, text):
        with pytest.raises(EmptyFormulaError):
            parse_formula(text)

    @pytest.mark.parametrize("text", ["1 + X + X", "1 + A*X + X*A"])
    def test_duplicate_terms(self, text):
        with pytest.raises(DuplicateTermError):
            parse_formula(text)

    def test_bad_character_reports_byte_offset(self):
        with pytest.raises(FormulaSyntaxError) as info:
            parse_formula("1 + X $")
        assert info.value.offset == 6

    def test_number_after_start_is_rejected(self):
        with pytest.raises(FormulaSyntaxError):
            parse_formula("1 + 2")

    def test_dangling_operator(self):
        with pytest.raises(FormulaSyntaxError):
            parse_formula("1 + X +")

    def test_render_round_trip(self):
        f = parse_formula("0 + Q2 + S2*P2")
        assert parse_formula(f.render()) == f


class TestDataTable:
    def test_column_and_matrix(self):
        t = DataTable({"a": [1, 2, 3], "b": [4, 5, 6]})
        assert t.n_rows == 3
        np.testing.assert_array_equal(t.matrix(["b", "a"])[0], [4, 1])

    def test_unknown_column_lists_available(self):
        t = DataTable({"a": [1.0]})
        with pytest.raises(UnknownColumnError, match="unknown column 'b'"):
            t.column("b")

    def test_unequal_lengths(self):
        with pytest.raises(DataError):
            DataTable({"a": [1, 2], "b": [1]})

    def test_non_finite(self):
        with pytest.raises(IngestionError):
            DataTable({"a": [1.0, np.nan]})

    def test_columns_are_read_only(self):
        t = DataTable({"a": [1.0, 2.0]})
        with pytest.raises(ValueError):
            t.column("a")[0] = 5.0

    def test_take_and_where(self):
        t = DataTable({"a": [10, 20, 30]})
        np.testing.assert_array_equal(t.take([2, 2, 0]).column("a"), [30, 30, 10])
        np.testing.assert_array_equal(t.where([True, False, True]).column("a"), [10, 30])

    def test_require_binary(self):
        t = DataTable({"A": [0, 1, 2]})
        with pytest.raises(PreconditionError):
            t.require_binary("A")


class TestReadCsv:
    def test_reads_numbers(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("# provenance line\na,b\n1,2.5\n3, -4e-1\n")
        t = read_csv(str(path))
        np.testing.assert_allclose(t.column("b"), [2.5, -0.4])

    def test_missing_value_names_row_and_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n3,\n")
        with pytest.raises(IngestionError) as info:
            read_csv(str(path))
        assert info.value.row == 2
        assert info.value.column == "b"

    def test_unparsable_value(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,x\n")
        with pytest.raises(IngestionError, match="unparsable"):
            read_csv(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            read_csv(str(tmp_path / "nope.csv"))


def test_build_design_products():
    t = DataTable({"A": [0, 1, 1], "X": [2.0, 3.0, -1.0]})
    d = build_design(t, parse_formula("1 + X + A*X"))
    np.testing.assert_array_equal(d.values, [[1, 2, 0], [1, 3, 3], [1, -1, -1]])
    assert d.term_labels == (INTERCEPT_LABEL, "X", "A*X")


def test_build_design_unknown_column():
    t = DataTable({"X": [1.0]})
    with pytest.raises(UnknownColumnError):
        build_design(t, parse_formula("1 + W"))


class TestTrialDataset:
    def _table(self):
        return DataTable({"X1": [0.1, 0.2, 0.3], "X2": [0.0, 0.4, 0.1], "A": [0, 1, 0], "Y": [1, 2, 3], "X_true": [0, 0, 0]})

    def test_analysis_table_drops_oracle(self):
        data = TrialDataset(self._table(), (ProxyGroup.scalar("X", ["X1", "X2"]),), ("A",), "Y", oracle=("X_true",))
        assert "X_true" not in data.analysis_table()
        assert data.take([0, 0]).n_rows == 2

    def test_missing_declared_column(self):
        with pytest.raises(UnknownColumnError):
            TrialDataset(self._table(), (ProxyGroup.scalar("X", ["X1", "X9"]),), ("A",), "Y")

    def test_non_binary_treatment(self):
        with pytest.raises(PreconditionError):
            TrialDataset(self._table(), (), ("Y",), "A")

    def test_covariate_name_collision(self):
        with pytest.raises(DataError, match="collide"):
            TrialDataset(self._table(), (ProxyGroup.scalar("X1", ["X1", "X2"]),), ("A",), "Y")

    def test_proxy_group_shape(self):
        g = ProxyGroup(("Q", "S"), (("Q_c", "S_c"), ("Q_s", "S_s")))
        assert (g.k, g.d, g.name) == (2, 2, "Q+S")
        with pytest.raises(PreconditionError):
            ProxyGroup(("Q", "S"), (("Q_c",),))
