"""
Column tables, the model-formula language and design matrices.

Formulas follow `[1 +|0 +] term (+ term)*` where a term is `name (* name)*`.
`a*b` is the elementwise product of the two columns only; there is no
main-effect expansion and no transformation functions.
"""
import logging
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import (
    DataError,
    DuplicateTermError,
    EmptyFormulaError,
    FormulaSyntaxError,
    IngestionError,
    PreconditionError,
    UnknownColumnError,
)

logger = logging.getLogger(__name__)

INTERCEPT_LABEL = "(Intercept)"

Term = Tuple[str, ...]


class DataTable:
    """Immutable, column-oriented numeric table."""

    __slots__ = ("_columns", "_n_rows")

    def __init__(self, columns: Mapping[str, Iterable[float]]):
        if not columns:
            raise DataError("a table needs at least one column")
        stored: Dict[str, np.ndarray] = {}
        n_rows = None
        for name, values in columns.items():
            arr = np.array(values, dtype=float).reshape(-1)
            if n_rows is None:
                n_rows = arr.shape[0]
            elif arr.shape[0] != n_rows:
                raise DataError(
                    f"column '{name}' has {arr.shape[0]} rows, expected {n_rows}"
                )
            if not np.all(np.isfinite(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise IngestionError("missing or non-finite value", row=bad + 1, column=name)
            arr.setflags(write=False)
            stored[str(name)] = arr
        if n_rows < 1:
            raise DataError("a table needs at least one row")
        self._columns = MappingProxyType(stored)
        self._n_rows = n_rows

    @property
    def n_rows(self) -> int:
        return self._n_rows

    @property
    def names(self) -> List[str]:
        return list(self._columns)

    @property
    def columns(self) -> Mapping[str, np.ndarray]:
        return self._columns

    def __contains__(self, name: str) -> bool:
        return name in self._columns

    def __len__(self) -> int:
        return self._n_rows

    def __repr__(self) -> str:
        return f"DataTable(n_rows={self._n_rows}, columns={self.names})"

    def column(self, name: str) -> np.ndarray:
        try:
            return self._columns[name]
        except KeyError:
            raise UnknownColumnError(name, self.names) from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self._n_rows, 0))

    def with_columns(self, new: Mapping[str, Iterable[float]]) -> "DataTable":
        merged = dict(self._columns)
        merged.update(new)
        return DataTable(merged)

    def drop(self, names: Iterable[str]) -> "DataTable":
        removed = set(names)
        return DataTable({k: v for k, v in self._columns.items() if k not in removed})

    def take(self, indices: Sequence[int]) -> "DataTable":
        idx = np.asarray(indices, dtype=int)
        return DataTable({k: v[idx] for k, v in self._columns.items()})

    def where(self, mask: Sequence[bool]) -> "DataTable":
        keep = np.asarray(mask, dtype=bool)
        if keep.shape[0] != self._n_rows:
            raise DataError("row mask length does not match the table")
        return DataTable({k: v[keep] for k, v in self._columns.items()})

    def require_binary(self, name: str) -> np.ndarray:
        values = self.column(name)
        if not np.all((values == 0.0) | (values == 1.0)):
            raise PreconditionError(f"column '{name}' must contain only 0/1 values")
        return values

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({k: np.array(v) for k, v in self._columns.items()})

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "DataTable":
        return cls({str(c): frame[c].to_numpy(dtype=float) for c in frame.columns})


def read_csv(path: str) -> DataTable:
    """Read a header + decimal-number CSV. Any missing or unparsable field aborts."""
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, comment="#")
    except FileNotFoundError:
        raise IngestionError(f"file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise IngestionError(f"no data in {path}") from None
    except pd.errors.ParserError as e:
        raise IngestionError(f"malformed CSV {path}: {e}") from None

    if raw.shape[0] == 0:
        raise IngestionError(f"no data rows in {path}")

    columns = {}
    for name in raw.columns:
        text = raw[name]
        blank = text.isna() | (text.astype(str).str.strip() == "")
        if blank.any():
            row = int(np.flatnonzero(blank.to_numpy())[0]) + 1
            raise IngestionError("missing value", row=row, column=str(name))
        parsed = pd.to_numeric(text.str.strip(), errors="coerce")
        if parsed.isna().any():
            row = int(np.flatnonzero(parsed.isna().to_numpy())[0])
            raise IngestionError(
                f"unparsable value '{text.iloc[row]}'", row=row + 1, column=str(name)
            )
        columns[str(name)] = parsed.to_numpy(dtype=float)
    table = DataTable(columns)
    logger.info("Loaded %d rows x %d columns from %s", table.n_rows, len(table.names), path)
    return table


# Formulas

@dataclass(frozen=True)
class Formula:
    terms: Tuple[Term, ...]
    intercept: bool = True

    @property
    def labels(self) -> List[str]:
        labels = [INTERCEPT_LABEL] if self.intercept else []
        return labels + ["*".join(t) for t in self.terms]

    @property
    def column_names(self) -> List[str]:
        seen: List[str] = []
        for term in self.terms:
            for name in term:
                if name not in seen:
                    seen.append(name)
        return seen

    @property
    def width(self) -> int:
        return len(self.terms) + (1 if self.intercept else 0)

    def render(self) -> str:
        head = "1" if self.intercept else "0"
        return " + ".join([head] + ["*".join(t) for t in self.terms])

    def __str__(self) -> str:
        return self.render()


_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_.]*)|(?P<num>\d+(?:\.\d*)?)|(?P<op>[+*]))")


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN.match(text, pos)
        if not match:
            offset = len(text[:pos].encode()) + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise FormulaSyntaxError(f"unexpected character '{text[pos:].lstrip()[0]}'", offset)
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), len(text[:start].encode())))
        pos = match.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


def parse_formula(text: str) -> Formula:
    """Parse `1 + Q1 + S1*P1`-style text into a Formula (intercept on by default)."""
    if text is None or text.strip() == "":
        raise EmptyFormulaError("empty formula")
    tokens = _tokenize(text)
    i = 0
    intercept = True

    kind, value, offset = tokens[0]
    if kind == "num":
        if value not in ("0", "1"):
            raise FormulaSyntaxError(f"intercept flag must be 0 or 1, got '{value}'", offset)
        intercept = value == "1"
        i = 1
        if tokens[i][0] == "end":
            if not intercept:
                raise EmptyFormulaError("formula '0' has no terms")
            return Formula((), True)
        if tokens[i][0] != "op" or tokens[i][1] != "+":
            raise FormulaSyntaxError("expected '+' after intercept flag", tokens[i][2])
        i += 1

    terms: List[Term] = []
    seen = set()
    while True:
        kind, value, offset = tokens[i]
        if kind == "num":
            raise FormulaSyntaxError("intercept flag is only allowed at the start", offset)
        if kind != "name":
            raise FormulaSyntaxError("expected a column name", offset)
        factors = [value]
        term_offset = offset
        i += 1
        while tokens[i][0] == "op" and tokens[i][1] == "*":
            i += 1
            kind, value, offset = tokens[i]
            if kind != "name":
                raise FormulaSyntaxError("expected a column name after '*'", offset)
            factors.append(value)
            i += 1
        key = tuple(sorted(factors))
        if key in seen:
            raise DuplicateTermError(f"duplicate term '{'*'.join(factors)}' at byte {term_offset}")
        seen.add(key)
        terms.append(tuple(factors))

        kind, value, offset = tokens[i]
        if kind == "end":
            break
        if kind != "op" or value != "+":
            raise FormulaSyntaxError("expected '+' between terms", offset)
        i += 1

    return Formula(tuple(terms), intercept)


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    term_labels: Tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def build_design(table: DataTable, f: Formula) -> DesignMatrix:
    for name in f.column_names:
        if name not in table:
            raise UnknownColumnError(name, table.names)
    cols = []
    if f.intercept:
        cols.append(np.ones(table.n_rows))
    for term in f.terms:
        product = np.array(table.column(term[0]), dtype=float)
        for name in term[1:]:
            product = product * table.column(name)
        cols.append(product)
    values = np.column_stack(cols) if cols else np.empty((table.n_rows, 0))
    values.setflags(write=False)
    return DesignMatrix(values, tuple(f.labels))


# Trial data

@dataclass(frozen=True)
class ProxyGroup:
    """An error-prone covariate (or block) observed through k unbiased proxies."""

    covariates: Tuple[str, ...]
    proxies: Tuple[Tuple[str, ...], ...]
    z_columns: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.proxies:
            raise PreconditionError(f"proxy group {self.covariates} has no proxies")
        for p in self.proxies:
            if len(p) != len(self.covariates):
                raise PreconditionError(
                    f"proxy {p} does not match the dimension of {self.covariates}"
                )

    @classmethod
    def scalar(cls, name: str, proxy_columns: Sequence[str], z_columns: Sequence[str] = ()) -> "ProxyGroup":
        return cls((name,), tuple((c,) for c in proxy_columns), tuple(z_columns))

    @property
    def k(self) -> int:
        return len(self.proxies)

    @property
    def d(self) -> int:
        return len(self.covariates)

    @property
    def name(self) -> str:
        return "+".join(self.covariates)

    @property
    def proxy_columns(self) -> List[str]:
        return [c for p in self.proxies for c in p]


@dataclass(frozen=True)
class TrialDataset:
    """Per-patient stages of proxies, error-free covariates, treatments and outcome."""

    table: DataTable
    proxy_groups: Tuple[ProxyGroup, ...]
    treatments: Tuple[str, ...]
    outcome: str
    error_free: Tuple[str, ...] = ()
    oracle: Tuple[str, ...] = ()
    column_stage: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        names = [self.outcome, *self.treatments, *self.error_free, *self.oracle]
        for g in self.proxy_groups:
            names.extend(g.proxy_columns)
            names.extend(g.z_columns)
        for name in names:
            if name not in self.table:
                raise UnknownColumnError(name, self.table.names)
        for t in self.treatments:
            self.table.require_binary(t)
        clash = {c for g in self.proxy_groups for c in g.covariates} & set(self.table.names) - set(self.oracle)
        if clash:
            raise DataError(
                f"proxy group covariate names {sorted(clash)} collide with observed columns"
            )

    @property
    def n_rows(self) -> int:
        return self.table.n_rows

    def replace_table(self, table: DataTable) -> "TrialDataset":
        return TrialDataset(
            table, self.proxy_groups, self.treatments, self.outcome,
            self.error_free, self.oracle, self.column_stage,
        )

    def take(self, indices: Sequence[int]) -> "TrialDataset":
        return self.replace_table(self.table.take(indices))

    def where(self, mask: Sequence[bool]) -> "TrialDataset":
        return self.replace_table(self.table.where(mask))

    def analysis_table(self) -> DataTable:
        """Observed columns only; oracle columns never reach a fitted model."""
        return self.table.drop(self.oracle) if self.oracle else self.table

    def proxy_matrices(self, group: ProxyGroup, table: Optional[DataTable] = None) -> List[np.ndarray]:
        source = table if table is not None else self.table
        return [source.matrix(list(p)) for p in group.proxies]
