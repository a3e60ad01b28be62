"""
sparsifier.py - Top-K and magnitude-threshold activation sparsification
Includes the sparsity coefficient constraint system and sparsity accounting.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from constants import CONSTRAINT_TOLERANCE, UNIFORM_ALPHA
from errors import InfeasibleCoefficientsError, RejectedInputError

logger = logging.getLogger(__name__)

# ============================================
# SITES
# ============================================

class Site(str, Enum):
    """The four per-layer projection inputs"""
    H1 = "h1"  # Q/K/V input
    H2 = "h2"  # O input
    H3 = "h3"  # Up/Gate input
    H4 = "h4"  # Down input

    @property
    def index(self) -> int:
        return int(self.value[1]) - 1

# ============================================
# SPARSE VECTOR
# ============================================

@dataclass(frozen=True, eq=False)
class SparseVec:
    """
    Retained entries of one token activation.

    `kept` is the number of budget positions the sparsifier reserved. It can exceed
    len(indices) when Top-K selects exact zeros, which are never stored.
    """

    dim: int
    indices: np.ndarray
    values: np.ndarray
    kept: Optional[int] = None

    def __post_init__(self):
        if len(self.indices) != len(self.values) or len(self.indices) > self.dim:
            raise RejectedInputError(
                f"SparseVec: {len(self.indices)} indices, {len(self.values)} values, dim {self.dim}"
            )
        if len(self.indices):
            if np.any(np.diff(self.indices) <= 0) or self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise RejectedInputError("SparseVec indices must be strictly increasing and < dim")
            if np.any(self.values == 0.0):
                raise RejectedInputError("SparseVec must not store exact zeros")
        if self.kept is None:
            object.__setattr__(self, "kept", len(self.indices))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        out[self.indices] = self.values
        return out


def _from_selection(x: np.ndarray, selected: np.ndarray, kept: int) -> SparseVec:
    values = x[selected]
    nonzero = values != 0.0
    return SparseVec(x.size, selected[nonzero].astype(np.int64), values[nonzero].astype(np.float64), kept)

# ============================================
# TOP-K
# ============================================

def top_k_indices(x: np.ndarray, k: int) -> np.ndarray:
    """
    Ascending indices of the k largest |x_i|; among equal magnitudes the lower index wins.

    Partial selection: one np.partition for the k-th largest magnitude, then the strict
    winners plus the lowest-index ties at the cutoff.
    """
    n = x.size
    if k < 0 or k > n:
        raise RejectedInputError(f"top-k needs 0 <= k <= {n}, got k={k}")
    if k == 0:
        return np.empty(0, dtype=np.intp)
    if k == n:
        return np.arange(n, dtype=np.intp)
    magnitude = np.abs(x)
    cutoff = np.partition(magnitude, n - k)[n - k]
    above = np.flatnonzero(magnitude > cutoff)
    ties = np.flatnonzero(magnitude == cutoff)[: k - above.size]
    return np.sort(np.concatenate([above, ties]))


def top_k_sparsify(x: np.ndarray, k: int) -> SparseVec:
    x = np.asarray(x, dtype=np.float64)
    return _from_selection(x, top_k_indices(x, k), k)


def top_k_rows(x: np.ndarray, k: Union[int, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise Top-K over a batch of tokens (N x D), same tie rule as top_k_indices.

    `k` is one budget for every row or a per-row array. Returns the masked batch and
    the per-row kept counts.
    """
    n_rows, dim = x.shape
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n_rows,))
    if np.any(ks < 0) or np.any(ks > dim):
        raise RejectedInputError(f"top-k needs 0 <= k <= {dim}")
    if np.all(ks == dim):
        return x.copy(), ks.copy()
    order = np.argsort(-np.abs(x), axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(dim)[None, :].repeat(n_rows, axis=0), axis=1)
    mask = rank < ks[:, None]
    return np.where(mask, x, 0.0), ks.copy()


def compute_k(alpha: float, p: float, d_in: int) -> int:
    """k = alpha * (1 - p) * d_in, rounded half away from zero and clamped to [0, d_in]"""
    if not (0.0 <= p <= 1.0):
        raise RejectedInputError(f"sparsity p must be in [0, 1], got {p}")
    if alpha <= 0.0:
        raise RejectedInputError(f"alpha must be positive, got {alpha}")
    k = math.floor(alpha * (1.0 - p) * d_in + 0.5)
    return int(min(max(k, 0), d_in))

# ============================================
# SPARSITY COEFFICIENTS
# ============================================

def solve_alpha_constraints(alpha1: float, alpha3: float, m: float) -> Tuple[float, float]:
    """(alpha2, alpha4) from 3*a1 + a2 = 4 and 2*a3 + m*a4 = 2 + m"""
    if m <= 0.0:
        raise RejectedInputError(f"MLP ratio must be positive, got {m}")
    alpha2 = 4.0 - 3.0 * alpha1
    alpha4 = (2.0 + m - 2.0 * alpha3) / m
    if alpha2 <= 0.0 or alpha4 <= 0.0 or alpha1 <= 0.0 or alpha3 <= 0.0:
        raise InfeasibleCoefficientsError(
            f"infeasible coefficients: alpha=({alpha1}, {alpha2}, {alpha3}, {alpha4})",
            alpha=[alpha1, alpha2, alpha3, alpha4],
        )
    return alpha2, alpha4


class SparsityPlan(BaseModel):
    """Target model sparsity, per-site coefficients and the MLP ratio they were solved for"""

    p: float = Field(ge=0.0, le=1.0, description="Target model-level sparsity")
    alpha: Tuple[float, float, float, float] = Field(default=UNIFORM_ALPHA,
                                                     description="Coefficients for h1..h4")
    m: float = Field(gt=0.0, description="Intermediate-to-hidden size ratio")

    @model_validator(mode="after")
    def check_constraints(self) -> "SparsityPlan":
        a1, a2, a3, a4 = self.alpha
        if min(self.alpha) <= 0.0:
            raise InfeasibleCoefficientsError(f"all coefficients must be positive: {self.alpha}")
        if abs(3.0 * a1 + a2 - 4.0) > CONSTRAINT_TOLERANCE:
            raise InfeasibleCoefficientsError(f"3*a1 + a2 = {3.0 * a1 + a2}, expected 4")
        if abs(2.0 * a3 + self.m * a4 - (2.0 + self.m)) > CONSTRAINT_TOLERANCE:
            raise InfeasibleCoefficientsError(
                f"2*a3 + M*a4 = {2.0 * a3 + self.m * a4}, expected {2.0 + self.m}"
            )
        return self

    @classmethod
    def from_coefficients(cls, p: float, alpha1: float, alpha3: float, m: float) -> "SparsityPlan":
        alpha2, alpha4 = solve_alpha_constraints(alpha1, alpha3, m)
        return cls(p=p, alpha=(alpha1, alpha2, alpha3, alpha4), m=m)

    @classmethod
    def uniform(cls, p: float, m: float) -> "SparsityPlan":
        return cls(p=p, alpha=UNIFORM_ALPHA, m=m)

    def k_for(self, site: Site, d_in: int) -> int:
        return compute_k(self.alpha[site.index], self.p, d_in)

    def k_per_site(self, site_dims: Dict[Site, int]) -> Dict[Site, int]:
        return {site: self.k_for(site, d_in) for site, d_in in site_dims.items()}

# ============================================
# MAGNITUDE THRESHOLDS
# ============================================

@dataclass
class ThresholdTable:
    """Cutoff eps per (layer, site); sites without an entry are not sparsified"""

    entries: Dict[Tuple[int, Site], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, eps in self.entries.items():
            if eps < 0.0:
                raise RejectedInputError(f"threshold for {key} is negative: {eps}")

    def get(self, layer: int, site: Site) -> Optional[float]:
        return self.entries.get((layer, site))

    def set(self, layer: int, site: Site, eps: float) -> None:
        if eps < 0.0:
            raise RejectedInputError(f"threshold for {(layer, site)} is negative: {eps}")
        self.entries[(layer, site)] = float(eps)

    def sites(self) -> Iterable[Tuple[int, Site]]:
        return sorted(self.entries, key=lambda key: (key[0], key[1].index))

    def to_records(self) -> list:
        return [{"layer": layer, "site": site.value, "eps": self.entries[(layer, site)]}
                for layer, site in self.sites()]


def calibrate_magnitude_thresholds(samples: Sequence[np.ndarray], p: float) -> float:
    """
    Empirical p-quantile of |x| pooled over every entry of every sample (lower interpolation).
    p = 0 gives 0, so only exact zeros would be dropped.
    """
    if not (0.0 <= p <= 1.0):
        raise RejectedInputError(f"sparsity p must be in [0, 1], got {p}")
    if len(samples) == 0:
        raise RejectedInputError("threshold calibration needs at least one sample")
    pooled = np.concatenate([np.abs(np.ravel(np.asarray(s, dtype=np.float64))) for s in samples])
    if pooled.size == 0:
        raise RejectedInputError("threshold calibration samples are empty")
    if p == 0.0:
        return 0.0
    return float(np.quantile(pooled, p, method="lower"))


def magnitude_sparsify(x: np.ndarray, eps: float) -> SparseVec:
    """Drop entries with |x_i| <= eps (inclusive cutoff)"""
    if eps < 0.0:
        raise RejectedInputError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    selected = np.flatnonzero(np.abs(x) > eps)
    return _from_selection(x, selected, selected.size)


def magnitude_rows(x: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Batched magnitude_sparsify; returns the masked batch and per-row kept counts"""
    mask = np.abs(x) > eps
    return np.where(mask, x, 0.0), mask.sum(axis=1)

# ============================================
# SPARSITY ACCOUNTING
# ============================================

def actual_sparsity(x: Union[np.ndarray, SparseVec]) -> float:
    """Fraction of zero entries; for a SparseVec, of positions outside the kept budget"""
    if isinstance(x, SparseVec):
        if x.dim < 1:
            raise RejectedInputError("actual_sparsity needs dim >= 1")
        return 1.0 - x.kept / x.dim
    x = np.asarray(x)
    if x.size < 1:
        raise RejectedInputError("actual_sparsity needs dim >= 1")
    return float(np.count_nonzero(x == 0.0)) / x.size
