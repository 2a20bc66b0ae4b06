"""Partitioned columnar record collections.

A :class:`Shards` is an ordered list of :class:`RecordBatch` partitions sharing
one schema. Partitioning is contiguous and balanced: the first ``len % n``
partitions hold one extra row, and concatenating partitions in index order
always reproduces the original row order.
"""

from __future__ import annotations

import csv
import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class Kind(str, enum.Enum):
    FLOAT = "float"
    INT = "int"
    STRING = "string"


_DTYPES = {Kind.FLOAT: np.float64, Kind.INT: np.int64, Kind.STRING: object}


class ShardError(ValueError):
    pass


class ShardTransformError(ShardError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"transform failed on partition {index}: {cause!r}")
        self.index = index
        self.cause = cause


class CsvError(ShardError):
    pass


def _kind_of(values: np.ndarray) -> Kind:
    k = values.dtype.kind
    if k == "f":
        return Kind.FLOAT
    if k in "iub":
        return Kind.INT
    return Kind.STRING


def _column(values, kind: Kind | None = None) -> np.ndarray:
    if kind is not None:
        return np.asarray(values, dtype=_DTYPES[kind])
    arr = np.asarray(values)
    if arr.dtype.kind in "US":
        arr = arr.astype(object)
    kind = _kind_of(arr)
    return arr.astype(_DTYPES[kind], copy=False)


class RecordBatch:
    """Named, equal-length column vectors.

    Supports ``batch[name]`` reads and ``batch[name] = values`` writes so that
    plain dataframe-style partition functions work unchanged.
    """

    def __init__(self, columns: Mapping[str, Iterable] | None = None, schema=None):
        self._cols: dict[str, np.ndarray] = {}
        kinds = dict(schema) if schema is not None else {}
        for name, values in (columns or {}).items():
            self._cols[name] = _column(values, kinds.get(name))
        if schema is not None:
            for name, kind in schema:
                if name not in self._cols:
                    self._cols[name] = np.empty(0, dtype=_DTYPES[Kind(kind)])
        lengths = {len(v) for v in self._cols.values()}
        if len(lengths) > 1:
            raise ShardError(f"columns have unequal lengths: { {k: len(v) for k, v in self._cols.items()} }")

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping], schema=None) -> RecordBatch:
        if not rows:
            return cls({}, schema=schema)
        names = list(rows[0])
        cols = {n: [r[n] for r in rows] for n in names}
        return cls(cols, schema=schema)

    @property
    def num_rows(self) -> int:
        return len(next(iter(self._cols.values()))) if self._cols else 0

    def __len__(self) -> int:
        return self.num_rows

    @property
    def columns(self) -> list[str]:
        return list(self._cols)

    @property
    def schema(self) -> tuple[tuple[str, Kind], ...]:
        return tuple((n, _kind_of(v)) for n, v in self._cols.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._cols[name]

    def __setitem__(self, name: str, values) -> None:
        col = _column(values)
        if self._cols and len(col) != self.num_rows:
            raise ShardError(f"column {name!r} has {len(col)} rows, batch has {self.num_rows}")
        self._cols[name] = col

    def __contains__(self, name: str) -> bool:
        return name in self._cols

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordBatch) or self.schema != other.schema:
            return False
        return all(np.array_equal(self._cols[n], other._cols[n]) for n in self._cols)

    def __repr__(self) -> str:
        return f"RecordBatch(rows={self.num_rows}, schema={[(n, k.value) for n, k in self.schema]})"

    def copy(self) -> RecordBatch:
        out = RecordBatch()
        out._cols = {n: v.copy() for n, v in self._cols.items()}
        return out

    def slice(self, start: int, stop: int) -> RecordBatch:
        out = RecordBatch()
        out._cols = {n: v[start:stop].copy() for n, v in self._cols.items()}
        return out

    def take(self, indices) -> RecordBatch:
        out = RecordBatch()
        out._cols = {n: v[indices] for n, v in self._cols.items()}
        return out

    def rows(self) -> list[dict]:
        return [{n: v[i] for n, v in self._cols.items()} for i in range(self.num_rows)]

    def matrix(self, names: Sequence[str], dtype=np.float32) -> np.ndarray:
        """Stack the named columns into a (rows, len(names)) array."""
        missing = [n for n in names if n not in self._cols]
        if missing:
            raise KeyError(f"missing columns {missing}; available {self.columns}")
        if not names:
            return np.zeros((self.num_rows, 0), dtype=dtype)
        return np.column_stack([self._cols[n].astype(dtype) for n in names]).astype(dtype, copy=False)

    @staticmethod
    def concat(batches: Sequence[RecordBatch], schema=None) -> RecordBatch:
        batches = list(batches)
        if not batches:
            return RecordBatch({}, schema=schema)
        names = batches[0].columns
        out = RecordBatch()
        out._cols = {n: np.concatenate([b[n] for b in batches]) for n in names}
        return out


def _as_batch(rows) -> RecordBatch:
    if isinstance(rows, RecordBatch):
        return rows
    if isinstance(rows, Mapping):
        return RecordBatch(rows)
    return RecordBatch.from_rows(list(rows))


def balanced_sizes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


@dataclass(frozen=True)
class PartitionMeta:
    index: int
    row_count: int
    worker: int | None = None


class Shards:
    """Immutable ordered partitions of a record collection."""

    def __init__(self, partitions: Sequence[RecordBatch], schema=None):
        partitions = list(partitions)
        if not partitions:
            raise ShardError("a Shards needs at least one partition")
        schema = tuple(schema) if schema is not None else partitions[0].schema
        for i, p in enumerate(partitions):
            if p.num_rows and p.schema != schema:
                raise ShardError(f"partition {i} schema {p.schema} differs from {schema}")
        self._parts = [p if p.num_rows else RecordBatch({}, schema=schema) for p in partitions]
        self._schema = schema

    @property
    def schema(self) -> tuple[tuple[str, Kind], ...]:
        return self._schema

    @property
    def partitions(self) -> list[RecordBatch]:
        return [p.copy() for p in self._parts]

    def partition(self, index: int) -> RecordBatch:
        return self._parts[index].copy()

    def num_partitions(self) -> int:
        return len(self._parts)

    def sizes(self) -> list[int]:
        return [p.num_rows for p in self._parts]

    def meta(self, assignment: Sequence[int] | None = None) -> list[PartitionMeta]:
        return [
            PartitionMeta(i, p.num_rows, None if assignment is None else assignment[i])
            for i, p in enumerate(self._parts)
        ]

    def __len__(self) -> int:
        return sum(self.sizes())

    def __repr__(self) -> str:
        return f"Shards(sizes={self.sizes()}, schema={[(n, k.value) for n, k in self.schema]})"

    def collect(self) -> RecordBatch:
        return RecordBatch.concat(self._parts, schema=self._schema)

    def transform_shard(self, func: Callable, *args, parallel: int = 1, **kwargs) -> Shards:
        """Apply ``func(partition, *args, **kwargs)`` to every partition.

        ``func`` receives a private copy of its partition and returns the new
        partition. Any failure aborts the whole transform, naming the partition.
        """

        def run(index: int) -> RecordBatch:
            try:
                out = func(self._parts[index].copy(), *args, **kwargs)
            except Exception as exc:
                raise ShardTransformError(index, exc) from exc
            if not isinstance(out, RecordBatch):
                try:
                    out = _as_batch(out)
                except Exception as exc:
                    raise ShardTransformError(index, TypeError(f"returned {type(out).__name__}")) from exc
            return out

        indices = range(len(self._parts))
        if parallel > 1:
            with ThreadPoolExecutor(max_workers=parallel) as pool:
                futures = [pool.submit(run, i) for i in indices]
                results = [f.result() for f in futures]
        else:
            results = [run(i) for i in indices]
        nonempty = [r for r in results if r.num_rows]
        schema = nonempty[0].schema if nonempty else (results[0].schema or self._schema)
        return Shards(results, schema=schema)

    def repartition(self, n: int) -> Shards:
        return shards_from_rows(self.collect(), n, schema=self._schema)


def shards_from_rows(rows, n_parts: int, schema=None) -> Shards:
    """Split ``rows`` (RecordBatch, column mapping, or list of row dicts) into
    ``n_parts`` contiguous balanced partitions."""
    if n_parts < 1:
        raise ShardError(f"n_parts must be >= 1, got {n_parts}")
    batch = _as_batch(rows)
    if schema is None:
        schema = batch.schema
    parts, start = [], 0
    for size in balanced_sizes(batch.num_rows, n_parts):
        parts.append(batch.slice(start, start + size))
        start += size
    return Shards(parts, schema=schema)


def collect(s: Shards) -> RecordBatch:
    return s.collect()


def num_partitions(s: Shards) -> int:
    return s.num_partitions()


def transform_shard(s: Shards, func: Callable, *args, **kwargs) -> Shards:
    return s.transform_shard(func, *args, **kwargs)


def repartition(s: Shards, n: int) -> Shards:
    return s.repartition(n)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path: str | os.PathLike, n_parts: int = 1) -> Shards:
    """Load a headed, comma-delimited UTF-8 CSV.

    A column is float when every value parses as a number, string otherwise.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise CsvError(f"no such file: {os.fspath(path)}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvError(f"{os.fspath(path)}: missing header line") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise CsvError(f"{os.fspath(path)}: duplicate column names in header")
        raw: list[list[str]] = [[] for _ in header]
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CsvError(
                    f"{os.fspath(path)}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            for col, value in zip(raw, row):
                col.append(value)
    columns, schema = {}, []
    for name, values in zip(header, raw):
        if all(_is_float(v) for v in values):
            columns[name] = np.array([float(v) for v in values], dtype=np.float64)
            schema.append((name, Kind.FLOAT))
        else:
            columns[name] = np.array(values, dtype=object)
            schema.append((name, Kind.STRING))
    return shards_from_rows(RecordBatch(columns, schema=schema), n_parts, schema=tuple(schema))


def write_csv(path: str | os.PathLike, batch: RecordBatch) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(batch.columns)
        cols = [batch[n] for n in batch.columns]
        for i in range(batch.num_rows):
            w.writerow([repr(float(c[i])) if c.dtype.kind == "f" else c[i] for c in cols])
