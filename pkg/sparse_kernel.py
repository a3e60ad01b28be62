"""
sparse_kernel.py - Column-major sparse GEMV, fused Top-K GEMV and the kernel micro-benchmark
"""

import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from constants import (
    BENCH_DTYPE, BENCH_MIN_REPS, BENCH_MODES, BENCH_ROWBLOCKED_MODE, BENCH_SPARSITY_LEVELS,
    BENCH_WARMUP_REPS, COLUMN_BLOCK, CSV_HEADERS, MAX_WORKERS,
)
from errors import RejectedInputError
from numeric_core import Mat, accumulate_columns
from sparsifier import SparseVec, top_k_indices, top_k_sparsify

logger = logging.getLogger(__name__)

# ============================================
# WEIGHT STORAGE
# ============================================

class ColMajorWeight:
    """
    D_out x D_in weight kept column-contiguous: `columns[j]` is column j of W.
    """

    def __init__(self, columns: np.ndarray):
        if columns.ndim != 2:
            raise RejectedInputError(f"column storage must be 2-D, got {columns.ndim}-D")
        self.columns = np.ascontiguousarray(columns)

    @classmethod
    def from_dense(cls, w: np.ndarray, dtype=np.float64) -> "ColMajorWeight":
        """From a (D_out, D_in) array"""
        return cls(np.ascontiguousarray(np.asarray(w, dtype=dtype).T))

    @classmethod
    def from_mat(cls, mat: Mat) -> "ColMajorWeight":
        return cls(mat.column_storage())

    @property
    def rows(self) -> int:
        return self.columns.shape[1]

    @property
    def cols(self) -> int:
        return self.columns.shape[0]

    @property
    def dtype(self):
        return self.columns.dtype

    def column(self, j: int) -> np.ndarray:
        return self.columns[j]

    def gather(self, indices: np.ndarray, out: np.ndarray) -> np.ndarray:
        # indices are < cols by the SparseVec invariant; "clip" writes into out unbuffered
        return np.take(self.columns, indices, axis=0, out=out[: indices.size], mode="clip")

    def to_dense(self) -> np.ndarray:
        return self.columns.T.copy()


class InstrumentedColMajorWeight(ColMajorWeight):
    """Counts column reads"""

    def __init__(self, columns: np.ndarray):
        super().__init__(columns)
        self.column_reads = 0

    def gather(self, indices: np.ndarray, out: np.ndarray) -> np.ndarray:
        self.column_reads += int(indices.size)
        return super().gather(indices, out)

    def reset(self) -> None:
        self.column_reads = 0

# ============================================
# KERNELS
# ============================================

def _selected_gemv(w: ColMajorWeight, indices: np.ndarray, values: np.ndarray,
                   block: int = COLUMN_BLOCK) -> np.ndarray:
    # Ascending index blocks; the one summation order every sparse path shares.
    values = np.asarray(values, dtype=w.dtype)
    y = np.zeros(w.rows, dtype=w.dtype)
    if indices.size == 0:
        return y
    buffer = np.empty((min(block, indices.size), w.rows), dtype=w.dtype)
    for start in range(0, indices.size, block):
        stop = min(start + block, indices.size)
        y += values[start:stop] @ w.gather(indices[start:stop], buffer)
    return y


def dense_gemv(w: ColMajorWeight, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=w.dtype)
    if x.ndim != 1 or x.size != w.cols:
        raise RejectedInputError(f"dense_gemv: W has {w.cols} columns, x has {x.size} entries")
    return accumulate_columns(w.columns, x)


def sparse_gemv(w: ColMajorWeight, sx: SparseVec) -> np.ndarray:
    """y = sum over stored j of sx[j] * column_j(W); reads only the stored columns"""
    if sx.dim != w.cols:
        raise RejectedInputError(f"sparse_gemv: W has {w.cols} columns, sx has dim {sx.dim}")
    return _selected_gemv(w, sx.indices, sx.values)


def fused_topk_gemv(w: ColMajorWeight, x: np.ndarray, k: int) -> np.ndarray:
    """Top-K selection by partial partition feeding the column accumulation directly"""
    x = np.asarray(x)
    if x.ndim != 1 or x.size != w.cols:
        raise RejectedInputError(f"fused_topk_gemv: W has {w.cols} columns, x has {x.size} entries")
    indices = top_k_indices(x, k)
    values = x[indices]
    nonzero = values != 0.0
    return _selected_gemv(w, indices[nonzero], values[nonzero])


def sparse_gemv_rowblocked(w: ColMajorWeight, sx: SparseVec, row_blocks: int = MAX_WORKERS) -> np.ndarray:
    """
    Output rows split into blocks, each accumulated by its own worker and written
    back in block order. Matches sparse_gemv to round-off, not bitwise.
    """
    if sx.dim != w.cols:
        raise RejectedInputError(f"sparse_gemv: W has {w.cols} columns, sx has dim {sx.dim}")
    bounds = np.linspace(0, w.rows, max(1, min(row_blocks, w.rows)) + 1).astype(int)
    parts = [ColMajorWeight(w.columns[:, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=len(parts)) as executor:
        pieces = list(executor.map(lambda part: _selected_gemv(part, sx.indices, sx.values), parts))
    return np.concatenate(pieces)

# ============================================
# BENCHMARK
# ============================================

class BenchRow(BaseModel):
    d_in: int
    d_out: int
    sparsity: float
    mode: str
    median_ns: float
    speedup: float


class BenchReport(BaseModel):
    d_in: int
    d_out: int
    repetitions: int = Field(ge=BENCH_MIN_REPS)
    dtype: str
    seed: int
    rows: List[BenchRow] = Field(default_factory=list)

    def speedup(self, mode: str, sparsity: float) -> float:
        for row in self.rows:
            if row.mode == mode and row.sparsity == sparsity:
                return row.speedup
        raise KeyError((mode, sparsity))

    def to_records(self) -> List[Dict]:
        return [row.model_dump(include=set(CSV_HEADERS["bench"])) for row in self.rows]


def median_ns(fn: Callable[[], object], reps: int, warmup: int = BENCH_WARMUP_REPS) -> float:
    """Median wall time of `fn` over `reps` runs after `warmup` discarded runs"""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return float(statistics.median(samples))


def keep_count(d_in: int, sparsity: float) -> int:
    return d_in - int(np.floor(sparsity * d_in + 0.5))


def bench(d_in: int, d_out: int, sparsity_levels: Sequence[float] = BENCH_SPARSITY_LEVELS,
          reps: int = BENCH_MIN_REPS, seed: int = 0, dtype: str = BENCH_DTYPE,
          modes: Optional[Sequence[str]] = None) -> BenchReport:
    """
    Median timings of dense, sparse (pre-sparsified input) and fused GEMV, plus the
    row-blocked sparse variant when "rowblocked" is among `modes`.
    Inputs are derived from `seed`; the timed kernels run one after another.
    """
    if reps < BENCH_MIN_REPS:
        raise RejectedInputError(f"bench needs reps >= {BENCH_MIN_REPS}, got {reps}")
    if d_in < 1 or d_out < 1:
        raise RejectedInputError(f"bench needs positive dims, got {d_in}x{d_out}")
    modes = list(modes or BENCH_MODES)
    rng = np.random.default_rng(seed)
    w = ColMajorWeight.from_dense(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), dtype=dtype)
    x = rng.standard_normal(d_in).astype(dtype)

    report = BenchReport(d_in=d_in, d_out=d_out, repetitions=reps, dtype=str(np.dtype(dtype)), seed=seed)
    dense_ns = median_ns(lambda: dense_gemv(w, x), reps)
    logger.info(f"bench {d_in}x{d_out}: dense median {dense_ns:.0f} ns")
    for sparsity in sparsity_levels:
        k = keep_count(d_in, sparsity)
        sx = top_k_sparsify(x, k)
        timed = {"dense": dense_ns}
        if "sparse" in modes:
            timed["sparse"] = median_ns(lambda: sparse_gemv(w, sx), reps)
        if "fused" in modes:
            timed["fused"] = median_ns(lambda: fused_topk_gemv(w, x, k), reps)
        if BENCH_ROWBLOCKED_MODE in modes:
            timed[BENCH_ROWBLOCKED_MODE] = median_ns(lambda: sparse_gemv_rowblocked(w, sx), reps)
        for mode, ns in timed.items():
            if mode not in modes:
                continue
            report.rows.append(BenchRow(d_in=d_in, d_out=d_out, sparsity=sparsity, mode=mode,
                                        median_ns=ns, speedup=dense_ns / ns if ns > 0 else float("inf")))
        logger.info(f"bench sparsity={sparsity}: " +
                    ", ".join(f"{m}={ns:.0f}ns" for m, ns in timed.items()))
    return report
