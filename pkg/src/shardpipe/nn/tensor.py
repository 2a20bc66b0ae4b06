"""Dense 2-D float32 tensors and the row-partitioned matmul kernels.

A tensor here is a plain C-contiguous ``numpy.ndarray`` of dtype float32 with
ndim == 2. Every output element of :func:`matmul` is accumulated in ascending
``k`` order, one float32 rounding per multiply and per add, so the result is
bit-identical to a naive triple loop no matter how rows are split across
threads or how the loops are tiled.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from threading import Lock

import numba
import numpy as np

Tensor = np.ndarray

DEFAULT_BLOCK = 32

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = Lock()


class DimensionError(ValueError):
    pass


def as_tensor(x, rows: int | None = None, cols: int | None = None) -> Tensor:
    """Coerce ``x`` to a contiguous float32 matrix, optionally checking its shape."""
    t = np.ascontiguousarray(x, dtype=np.float32)
    if t.ndim == 1:
        t = t.reshape(1, -1) if t.size else t.reshape(0, 0 if cols is None else cols)
    if t.ndim != 2:
        raise DimensionError(f"tensor must be 2-D, got shape {t.shape}")
    if rows is not None and t.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got shape {t.shape}")
    if cols is not None and t.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got shape {t.shape}")
    return t


def zeros(rows: int, cols: int) -> Tensor:
    return np.zeros((rows, cols), dtype=np.float32)


def detected_cores() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # not on Linux
        return max(1, os.cpu_count() or 1)


@numba.njit(nogil=True, cache=True)
def _gemm_f32_rows(a, b, out, r0, r1, block):
    inner = a.shape[1]
    n = b.shape[1]
    # Thread-local tiles: no aliasing with the operands, so the j loop vectorizes.
    acc = np.empty((block, block), np.float32)
    tile = np.empty((block, block), np.float32)
    for i0 in range(r0, r1, block):
        i1 = min(i0 + block, r1)
        for j0 in range(0, n, block):
            width = min(j0 + block, n) - j0
            acc[:, :] = 0.0
            # k tiles visited in ascending order keep the per-element order fixed
            for k0 in range(0, inner, block):
                k1 = min(k0 + block, inner)
                for k in range(k0, k1):
                    for j in range(width):
                        tile[k - k0, j] = b[k, j0 + j]
                for i in range(i0, i1):
                    for k in range(k0, k1):
                        aik = a[i, k]
                        for j in range(width):
                            acc[i - i0, j] += aik * tile[k - k0, j]
            for i in range(i0, i1):
                for j in range(width):
                    out[i, j0 + j] = acc[i - i0, j]


@numba.njit(nogil=True, cache=True)
def _gemm_i16_rows(a, wt, out, r0, r1, block):
    # a: (m, k) int16 centred activations; wt: (n, k) int16 centred weights, transposed.
    inner = a.shape[1]
    n = wt.shape[0]
    for i0 in range(r0, r1, block):
        i1 = min(i0 + block, r1)
        for j0 in range(0, n, block):
            j1 = min(j0 + block, n)
            for i in range(i0, i1):
                for j in range(j0, j1):
                    acc = np.int32(0)
                    for k in range(inner):
                        acc += np.int32(a[i, k]) * np.int32(wt[j, k])
                    out[i, j] = acc


def _pool(threads: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(threads)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="shardpipe-gemm")
            _pools[threads] = pool
        return pool


def row_ranges(rows: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous balanced split of ``range(rows)``; larger pieces first."""
    parts = max(1, min(parts, rows)) if rows else 1
    base, extra = divmod(rows, parts)
    out, start = [], 0
    for p in range(parts):
        size = base + (1 if p < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def run_rows(kernel, rows: int, threads: int, *args, block: int) -> None:
    """Run ``kernel(*args, r0, r1, block)`` over row ranges, in parallel if asked."""
    if rows == 0:
        return
    if threads <= 1 or rows < 2:
        kernel(*args, 0, rows, block)
        return
    futures = [
        _pool(threads).submit(kernel, *args, r0, r1, block)
        for r0, r1 in row_ranges(rows, threads)
    ]
    for f in futures:
        f.result()


def matmul(a: Tensor, b: Tensor, threads: int = 1, block: int = DEFAULT_BLOCK) -> Tensor:
    """Row-major float32 matrix product with a fixed per-element summation order."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    if block < 1:
        raise ValueError("block must be >= 1")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    if out.size == 0:
        out[...] = 0.0
        return out
    run_rows(_gemm_f32_rows, a.shape[0], threads, a, b, out, block=block)
    return out


def matmul_i16(a: np.ndarray, wt: np.ndarray, threads: int = 1, block: int = DEFAULT_BLOCK) -> np.ndarray:
    """Integer product ``a @ wt.T`` with int32 accumulation."""
    if a.shape[1] != wt.shape[1]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {wt.shape[1]}x{wt.shape[0]}"
        )
    out = np.zeros((a.shape[0], wt.shape[0]), dtype=np.int32)
    run_rows(
        _gemm_i16_rows,
        a.shape[0],
        threads,
        np.ascontiguousarray(a, dtype=np.int16),
        np.ascontiguousarray(wt, dtype=np.int16),
        out,
        block=block,
    )
    return out
