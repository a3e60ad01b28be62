"""
rotation_engine.py - Layerwise PCA rotations and their merge into model weights
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from constants import MAX_WORKERS, NEGATIVE_EIGENVALUE_TOLERANCE
from errors import RejectedInputError
from numeric_core import Mat, MatLike, as_array, check_symmetric, jacobi_eigh, orthogonality_error
from toy_transformer import ForwardTrace, Model, fold_norm_gains, forward_sequences, model_forward

logger = logging.getLogger(__name__)

# ============================================
# COVARIANCE
# ============================================

class CovarianceAccumulator:
    """Running sum of X^T X over calibration sequences (no mean subtraction)"""

    def __init__(self, dim: int):
        if dim < 1:
            raise RejectedInputError(f"covariance dim must be >= 1, got {dim}")
        self.dim = dim
        self.sum = np.zeros((dim, dim), dtype=np.float64)
        self.sequences_seen = 0

    def accumulate(self, x: np.ndarray) -> "CovarianceAccumulator":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise RejectedInputError(f"activation batch has shape {x.shape}, accumulator dim is {self.dim}")
        gram = x.T @ x
        self.sum += 0.5 * (gram + gram.T)
        self.sequences_seen += 1
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if other.dim != self.dim:
            raise RejectedInputError(f"cannot merge accumulators of dims {self.dim} and {other.dim}")
        self.sum += other.sum
        self.sequences_seen += other.sequences_seen
        return self

    def finalize(self) -> np.ndarray:
        if self.sequences_seen < 1:
            raise RejectedInputError("covariance needs at least one sequence")
        return self.sum / self.sequences_seen


def covariance_accumulate(acc: CovarianceAccumulator, x: np.ndarray) -> CovarianceAccumulator:
    return acc.accumulate(x)


def calibration_pass(model: Model, seqs: Sequence[np.ndarray],
                     max_workers: int = MAX_WORKERS) -> List[CovarianceAccumulator]:
    """
    One dense pass over the calibration set; per-layer covariance of the layer input
    residual stream. Per-sequence accumulators are merged in sequence order.
    """
    if len(seqs) == 0:
        raise RejectedInputError("calibration needs at least one sequence")
    d = model.config.d_model

    def per_sequence(tokens: np.ndarray) -> List[CovarianceAccumulator]:
        trace = ForwardTrace(capture_layer_inputs=True)
        model_forward(model, tokens, trace=trace)
        return [CovarianceAccumulator(d).accumulate(trace.layer_inputs[layer][0])
                for layer in range(model.config.n_layers)]

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        per_seq = list(executor.map(per_sequence, seqs))
    accumulators = [CovarianceAccumulator(d) for _ in range(model.config.n_layers)]
    for seq_accs in per_seq:
        for total, part in zip(accumulators, seq_accs):
            total.merge(part)
    logger.info(f"Calibration pass: {len(seqs)} sequences, {model.config.n_layers} layer covariances")
    return accumulators

# ============================================
# ROTATIONS
# ============================================

@dataclass(frozen=True, eq=False)
class RotationMatrix:
    """
    Orthogonal Q whose columns are covariance eigenvectors, largest eigenvalue first.
    `eigenvalues` is kept for energy reporting (None for hand-built rotations).
    """

    q: np.ndarray
    eigenvalues: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.q.ndim != 2 or self.q.shape[0] != self.q.shape[1]:
            raise RejectedInputError(f"rotation must be square, got {self.q.shape}")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @property
    def mat(self) -> Mat:
        return Mat.from_array(self.q)

    @classmethod
    def identity(cls, dim: int) -> "RotationMatrix":
        return cls(np.eye(dim))


def build_rotation(cov: MatLike) -> RotationMatrix:
    """
    Eigenvectors of a PSD covariance, sorted by descending eigenvalue. Small negative
    eigenvalues (round-off, within 1e-8 * trace) are clamped to zero.
    """
    c = as_array(cov)
    check_symmetric(c, "covariance")
    eigvals, eigvecs = jacobi_eigh(c)
    floor = -NEGATIVE_EIGENVALUE_TOLERANCE * max(float(np.trace(c)), 0.0)
    if eigvals[-1] < floor:
        raise RejectedInputError(f"covariance is not PSD: smallest eigenvalue {eigvals[-1]:.3e}")
    if eigvals[-1] < 0.0:
        logger.warning(f"Clamping {int(np.sum(eigvals < 0.0))} slightly negative eigenvalues to 0")
        eigvals = np.maximum(eigvals, 0.0)
    return RotationMatrix(eigvecs, eigvals)


def explained_variance(cov: MatLike, rotation: RotationMatrix) -> np.ndarray:
    """Cumulative fraction of the covariance trace captured by the first c columns of Q"""
    c = as_array(cov)
    energy = np.einsum("ij,ik,kj->j", rotation.q, c, rotation.q)
    total = float(np.trace(c))
    return np.cumsum(energy) / total if total > 0.0 else np.zeros(rotation.dim)


def residual_adapter(q_l: RotationMatrix, q_next: RotationMatrix) -> np.ndarray:
    """Q_l^T Q_next, applied to a layer's residual output to move it into the next basis"""
    if q_l.dim != q_next.dim:
        raise RejectedInputError(f"adapter dims differ: {q_l.dim} vs {q_next.dim}")
    return q_l.q.T @ q_next.q

# ============================================
# MERGE
# ============================================

@dataclass(frozen=True, eq=False)
class RotatedModel:
    """Merged weights plus the L-1 residual adapters; immutable once built"""

    model: Model
    adapters: List[np.ndarray]
    rotations: List[RotationMatrix]
    embed_rotation_applied: bool = True
    head_rotation_applied: bool = True
    gains_folded: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def layers(self):
        return self.model.layers

    def forward(self, seqs: Sequence[np.ndarray], **kwargs) -> List[np.ndarray]:
        return forward_sequences(self.model, seqs, adapters=self.adapters, **kwargs)

    def max_orthogonality_error(self) -> float:
        errors = [orthogonality_error(r.q) for r in self.rotations]
        errors += [orthogonality_error(a) for a in self.adapters]
        return max(errors) if errors else 0.0


def merge_rotations(model: Model, rotations: Sequence[RotationMatrix]) -> RotatedModel:
    """
    Absorb per-layer rotations into the weights.

    Input side (h1, h3 paths): Wq, Wk, Wv, Wup, Wgate <- W Q_l.
    Output side: Wo, Wdown <- Q_l^T W, so the residual stream stays in the Q_l basis
    and the h2/h4 inputs are untouched. Embedding <- E Q_0, head <- Q_{L-1}^T head.
    Gains are folded first so every RMSNorm commutes with the rotation.
    """
    cfg = model.config
    if len(rotations) != cfg.n_layers:
        raise RejectedInputError(f"{len(rotations)} rotations for {cfg.n_layers} layers")
    for index, rotation in enumerate(rotations):
        if rotation.dim != cfg.d_model:
            raise RejectedInputError(f"rotation {index} has dim {rotation.dim}, hidden size is {cfg.d_model}")

    folded = fold_norm_gains(model)
    layers = []
    for lw, rotation in zip(folded.layers, rotations):
        q = rotation.q
        layers.append(replace(
            lw,
            wq=lw.wq @ q, wk=lw.wk @ q, wv=lw.wv @ q,
            wup=lw.wup @ q, wgate=lw.wgate @ q,
            wo=q.T @ lw.wo, wdown=q.T @ lw.wdown,
        ))
    adapters = [residual_adapter(rotations[i], rotations[i + 1]) for i in range(len(rotations) - 1)]
    merged = Model(cfg, folded.embed @ rotations[0].q, layers, folded.final_norm,
                   rotations[-1].q.T @ folded.head, norms_folded=True)

    worst = max([orthogonality_error(a) for a in adapters], default=0.0)
    if worst > 1e-8:
        logger.warning(f"Adapter orthogonality error {worst:.3e} exceeds 1e-8")
    logger.info(f"Merged {len(rotations)} rotations; {len(adapters)} residual adapters")
    return RotatedModel(merged, adapters, list(rotations), gains_folded=True,
                        metadata={"gains_folded_before_merge": not model.norms_folded})


def rotations_from_calibration(model: Model, seqs: Sequence[np.ndarray]) -> List[RotationMatrix]:
    accumulators = calibration_pass(model, seqs)
    return [build_rotation(acc.finalize()) for acc in accumulators]


def build_rotated_model(model: Model, seqs: Sequence[np.ndarray]) -> RotatedModel:
    """Calibrate, build one rotation per layer and merge"""
    return merge_rotations(model, rotations_from_calibration(model, seqs))
