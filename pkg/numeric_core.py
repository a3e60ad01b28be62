"""
numeric_core.py - Dense linear algebra and Gaussian special functions
Layout-explicit matrices, the column-block GEMV, a cyclic Jacobi eigensolver,
RMSNorm and the standard normal pdf/cdf/inverse cdf.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple, Union

import numpy as np

from constants import (
    COLUMN_BLOCK,
    JACOBI_MAX_SWEEPS,
    JACOBI_NEGLIGIBLE,
    JACOBI_OFFDIAG_TOLERANCE,
    SYMMETRY_TOLERANCE,
)
from errors import ConvergenceError, RejectedInputError

logger = logging.getLogger(__name__)

# A token activation is a plain float64 vector.
Vec = np.ndarray

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# ============================================
# MATRIX WITH EXPLICIT LAYOUT
# ============================================

class Layout(Enum):
    ROW_MAJOR = "row_major"
    COL_MAJOR = "col_major"

    @property
    def order(self) -> str:
        return "C" if self is Layout.ROW_MAJOR else "F"

    def flipped(self) -> "Layout":
        return Layout.COL_MAJOR if self is Layout.ROW_MAJOR else Layout.ROW_MAJOR


@dataclass(frozen=True, eq=False)
class Mat:
    """Dense matrix over a flat float64 buffer; `layout` says how (i, j) maps into `data`"""

    rows: int
    cols: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 1 or self.data.size != self.rows * self.cols:
            raise RejectedInputError(
                f"Mat buffer holds {self.data.size} values, expected {self.rows}x{self.cols}"
            )

    @classmethod
    def from_array(cls, array, layout: Layout = Layout.ROW_MAJOR) -> "Mat":
        a = np.asarray(array, dtype=np.float64)
        if a.ndim != 2:
            raise RejectedInputError(f"Mat needs a 2-D array, got {a.ndim}-D")
        data = np.array(a.ravel(order=layout.order), dtype=np.float64, copy=True)
        return cls(a.shape[0], a.shape[1], layout, data)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def __getitem__(self, ij: Tuple[int, int]) -> float:
        i, j = ij
        if self.layout is Layout.ROW_MAJOR:
            return float(self.data[i * self.cols + j])
        return float(self.data[j * self.rows + i])

    def to_array(self) -> np.ndarray:
        """2-D view over the buffer (no copy)"""
        return self.data.reshape((self.rows, self.cols), order=self.layout.order)

    def transpose(self) -> "Mat":
        # Same buffer, relabelled: a row-major R x C is a column-major C x R.
        return Mat(self.cols, self.rows, self.layout.flipped(), self.data)

    def with_layout(self, layout: Layout) -> "Mat":
        if layout is self.layout:
            return self
        return Mat.from_array(self.to_array(), layout)

    def column_storage(self) -> np.ndarray:
        """(cols, rows) C-contiguous array whose row j is column j of the matrix"""
        if self.layout is Layout.COL_MAJOR:
            return self.data.reshape(self.cols, self.rows)
        return np.ascontiguousarray(self.to_array().T)


MatLike = Union[Mat, np.ndarray]


def as_array(a: MatLike) -> np.ndarray:
    if isinstance(a, Mat):
        return a.to_array()
    return np.asarray(a, dtype=np.float64)

# ============================================
# GEMV
# ============================================

def accumulate_columns(columns: np.ndarray, values: np.ndarray,
                       block: int = COLUMN_BLOCK) -> np.ndarray:
    """
    y = sum_j values[j] * columns[j], accumulated over ascending blocks of `block` columns.

    `columns` is column storage (one matrix column per row). The block order is fixed,
    so the same inputs always produce the same bits.
    """
    n = columns.shape[0]
    y = np.zeros(columns.shape[1], dtype=np.result_type(columns.dtype, values.dtype))
    for start in range(0, n, block):
        stop = min(start + block, n)
        y += values[start:stop] @ columns[start:stop]
    return y


def gemv_dense(w: MatLike, x: Vec) -> Vec:
    """y = W x with y_i = sum_j W[i, j] x_j; bit-identical for either layout of W"""
    mat = w if isinstance(w, Mat) else Mat.from_array(w)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != mat.cols:
        raise RejectedInputError(f"gemv_dense: W is {mat.rows}x{mat.cols}, x has {x.size} entries")
    return accumulate_columns(mat.column_storage(), x)

# ============================================
# SYMMETRIC EIGENSOLVER
# ============================================

def check_symmetric(a: np.ndarray, name: str = "matrix") -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise RejectedInputError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise RejectedInputError(f"{name} has non-finite entries")
    scale = max(np.linalg.norm(a), np.finfo(np.float64).tiny)
    asym = np.linalg.norm(a - a.T)
    if asym > SYMMETRY_TOLERANCE * scale:
        raise RejectedInputError(f"{name} is not symmetric (||A - A^T|| / ||A|| = {asym / scale:.3e})")


def _round_robin_pairs(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: every (p, q) pair once per sweep, disjoint within a round"""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.intp),
                       np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _rotate_pairs(a: np.ndarray, v: np.ndarray, p: np.ndarray, q: np.ndarray) -> None:
    """Zero a[p, q] for all disjoint pairs of a round at once (A <- P^T A P, V <- V P)"""
    apq = a[p, q]
    active = apq != 0.0
    if not np.any(active):
        return
    p, q, apq = p[active], q[active], apq[active]
    # below round-off against the diagonal: zero in place, no rotation
    negligible = np.abs(apq) <= JACOBI_NEGLIGIBLE * (np.abs(a[p, p]) + np.abs(a[q, q]))
    if np.any(negligible):
        a[p[negligible], q[negligible]] = 0.0
        a[q[negligible], p[negligible]] = 0.0
        p, q, apq = p[~negligible], q[~negligible], apq[~negligible]
        if not p.size:
            return
    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c

    ap, aq = a[:, p], a[:, q]
    a[:, p] = ap * c - aq * s
    a[:, q] = ap * s + aq * c
    ap, aq = a[p, :], a[q, :]
    a[p, :] = c[:, None] * ap - s[:, None] * aq
    a[q, :] = s[:, None] * ap + c[:, None] * aq
    vp, vq = v[:, p], v[:, q]
    v[:, p] = vp * c - vq * s
    v[:, q] = vp * s + vq * c


def jacobi_eigh(matrix: MatLike, max_sweeps: int = JACOBI_MAX_SWEEPS,
                tolerance: float = JACOBI_OFFDIAG_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigvals, eigvecs) with eigvals descending and eigvecs[:, i] the matching
    unit eigenvector. Each eigenvector is signed so its largest-magnitude entry is positive.
    """
    a = np.array(as_array(matrix), dtype=np.float64, copy=True)
    check_symmetric(a)
    n = a.shape[0]
    v = np.eye(n)
    target = tolerance * np.linalg.norm(a)
    rounds = _round_robin_pairs(n)

    off = _off_diagonal_norm(a)
    sweeps = 0
    while off > target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps", residual=off, sweeps=sweeps
            )
        for p, q in rounds:
            if p.size:
                _rotate_pairs(a, v, p, q)
        a = 0.5 * (a + a.T)
        sweeps += 1
        off = _off_diagonal_norm(a)
    logger.debug(f"Jacobi converged: n={n}, sweeps={sweeps}, off={off:.3e}")

    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    eigvals, v = eigvals[order], v[:, order]
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivots, np.arange(n)] < 0.0, -1.0, 1.0)
    return eigvals, v * signs


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR of a Gaussian matrix"""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def orthogonality_error(q: np.ndarray) -> float:
    """max(||Q Q^T - I||_F, ||Q^T Q - I||_F)"""
    eye = np.eye(q.shape[0])
    return float(max(np.linalg.norm(q @ q.T - eye), np.linalg.norm(q.T @ q - eye)))

# ============================================
# NORMALIZATION
# ============================================

def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """gain * x / sqrt(mean(x^2) + eps), applied to the last axis (a token or a batch of tokens)"""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise RejectedInputError(f"rmsnorm: x has dim {x.shape[-1]}, gain has dim {gain.shape[-1]}")
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x / scale)

# ============================================
# GAUSSIAN FUNCTIONS
# ============================================

def std_normal_pdf(t: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * t * t)


def std_normal_cdf(t: float) -> float:
    """Phi(t) through erf/erfc, using erfc away from the center to keep tail precision"""
    z = t / _SQRT2
    if abs(z) < 1.0 / _SQRT2:
        return 0.5 + 0.5 * math.erf(z)
    y = 0.5 * math.erfc(abs(z))
    return 1.0 - y if z > 0 else y


def _upper_tail(t: float) -> float:
    """1 - Phi(t) without cancellation"""
    return 0.5 * math.erfc(t / _SQRT2)


# Rational approximation coefficients (Acklam); about 1e-9 relative before refinement.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _inv_cdf_initial(u: float) -> float:
    if u < _P_LOW:
        q = math.sqrt(-2.0 * math.log(u))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if u > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-u))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = u - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def std_normal_inv_cdf(u: float, newton_steps: int = 2) -> float:
    """Phi^-1(u) for 0 < u < 1: rational initial guess refined by Newton steps on the erf CDF"""
    if not (0.0 < u < 1.0):
        raise RejectedInputError(f"std_normal_inv_cdf needs 0 < u < 1, got {u}")
    if u == 0.5:
        return 0.0
    x = _inv_cdf_initial(u)
    for _ in range(newton_steps):
        if x <= 0.0:
            residual = std_normal_cdf(x) - u
        else:
            residual = (1.0 - u) - _upper_tail(x)
        density = std_normal_pdf(x)
        if density == 0.0:
            break
        x -= residual / density
    return x
