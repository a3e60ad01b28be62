"""
error_theory.py - Closed-form Top-K sparsification error and its empirical checks
Gaussian theory, the Monte-Carlo oracle, and the rotated Top-K vs magnitude-pruning
error tables measured on a model.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from constants import (
    EMPIRICAL_SPARSITY_LEVELS, ERROR_TIE_TOLERANCE, MAX_WORKERS, MC_BLOCK_SIZE,
    MC_MIN_SAMPLES, THEORY_KEEP_FRACTIONS,
)
from errors import RejectedInputError
from numeric_core import std_normal_inv_cdf, std_normal_pdf
from rotation_engine import RotatedModel
from sparsifier import (
    Site, SparsityPlan, calibrate_magnitude_thresholds, compute_k, magnitude_rows, top_k_rows,
)
from toy_transformer import (
    ForwardTrace, Mode, Model, capture_site_inputs, forward_sequences, thresholds_from_trace,
)

logger = logging.getLogger(__name__)

# ============================================
# CLOSED FORM
# ============================================

class TheoryPoint(BaseModel):
    keep_fraction: float = Field(ge=0.0, le=1.0)
    t_k: float = Field(description="Gaussian cutoff with P(|x| >= t_k) = keep_fraction")
    predicted_error: float = Field(ge=0.0, le=1.0)


def theory_point(k: int, d_in: int) -> TheoryPoint:
    """
    Relative error E||y - y_S|| / E||y|| for Top-K of i.i.d. Gaussian activations:
    sqrt(1 - k/D - 2 t phi(t)) with t = Phi^-1(1 - k/2D).
    """
    if d_in < 1 or not (0 <= k <= d_in):
        raise RejectedInputError(f"theory needs 0 <= k <= d_in and d_in >= 1, got k={k}, d_in={d_in}")
    fraction = k / d_in
    if k == 0:
        return TheoryPoint(keep_fraction=0.0, t_k=math.inf, predicted_error=1.0)
    t = std_normal_inv_cdf(1.0 - fraction / 2.0)
    radicand = 1.0 - fraction - 2.0 * t * std_normal_pdf(t)
    return TheoryPoint(keep_fraction=fraction, t_k=t, predicted_error=min(math.sqrt(max(radicand, 0.0)), 1.0))


def theoretical_relative_error(k: int, d_in: int) -> float:
    return theory_point(k, d_in).predicted_error

# ============================================
# MONTE CARLO
# ============================================

class MonteCarloSpec(BaseModel):
    d_in: int = Field(gt=0)
    d_out: int = Field(gt=0)
    k: int = Field(ge=0)
    sigma_x: float = Field(default=1.0, gt=0.0)
    sigma_w: float = Field(default=1.0, gt=0.0)
    samples: int = Field(default=2000, ge=MC_MIN_SAMPLES)
    seed: int = 0
    block_size: int = Field(default=MC_BLOCK_SIZE, gt=0, description="Samples sharing one weight draw")

    @model_validator(mode="after")
    def check_k(self) -> "MonteCarloSpec":
        if self.k > self.d_in:
            raise ValueError(f"k={self.k} exceeds d_in={self.d_in}")
        return self


class MonteCarloResult(BaseModel):
    ratio: float
    standard_error: float
    mean_error_norm: float
    mean_output_norm: float
    samples: int


def _mc_block(spec: MonteCarloSpec, n: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    w = spec.sigma_w * rng.standard_normal((spec.d_out, spec.d_in))
    x = spec.sigma_x * rng.standard_normal((n, spec.d_in))
    dropped = x - top_k_rows(x, spec.k)[0]
    return np.column_stack([np.linalg.norm(dropped @ w.T, axis=1), np.linalg.norm(x @ w.T, axis=1)])


def monte_carlo_estimate(spec: MonteCarloSpec, max_workers: int = MAX_WORKERS) -> MonteCarloResult:
    """
    Ratio of means of ||y - y_S|| and ||y|| over Gaussian draws. Each block of samples
    gets its own weight draw and a seed spawned from `spec.seed`; blocks reduce in order.
    """
    sizes = [min(spec.block_size, spec.samples - start) for start in range(0, spec.samples, spec.block_size)]
    seeds = np.random.SeedSequence(spec.seed).spawn(len(sizes))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        blocks = list(executor.map(lambda args: _mc_block(spec, *args), zip(sizes, seeds)))
    norms = np.vstack(blocks)
    num, den = norms[:, 0], norms[:, 1]
    ratio = float(num.mean() / den.mean())
    # Delta-method standard error of a ratio of means.
    stderr = float(np.std(num - ratio * den, ddof=1) / (den.mean() * math.sqrt(len(num))))
    logger.debug(f"Monte Carlo D={spec.d_in}, k={spec.k}: ratio={ratio:.5f} +/- {stderr:.5f}")
    return MonteCarloResult(ratio=ratio, standard_error=stderr, mean_error_norm=float(num.mean()),
                            mean_output_norm=float(den.mean()), samples=len(num))


def monte_carlo_relative_error(spec: MonteCarloSpec) -> float:
    return monte_carlo_estimate(spec).ratio


def theory_table(d_in: int, d_out: int, keep_fractions: Sequence[float] = THEORY_KEEP_FRACTIONS,
                 samples: int = 2000, seed: int = 0) -> List[Dict]:
    """Theorem vs Monte Carlo at each keep fraction"""
    rows = []
    for index, fraction in enumerate(keep_fractions):
        k = int(math.floor(fraction * d_in + 0.5))
        theory = theoretical_relative_error(k, d_in)
        mc = monte_carlo_relative_error(MonteCarloSpec(d_in=d_in, d_out=d_out, k=k,
                                                       samples=samples, seed=seed + index))
        rel_diff = abs(theory - mc) / theory if theory > 0.0 else abs(mc)
        rows.append({"keep_fraction": fraction, "k": k, "theory": theory,
                     "monte_carlo": mc, "rel_diff": rel_diff})
        logger.info(f"theory k/D={fraction}: theorem={theory:.5f}, monte carlo={mc:.5f}, rel diff={rel_diff:.3%}")
    return rows

# ============================================
# EMPIRICAL ERRORS ON A MODEL
# ============================================

def _ratio_of_means(diff: np.ndarray, ref: np.ndarray) -> float:
    den = float(np.linalg.norm(ref, axis=-1).mean())
    num = float(np.linalg.norm(diff, axis=-1).mean())
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def _down_outputs(model: Model, seqs, probe: int, mode: Mode = Mode.DENSE, adapters=None, **kwargs) -> np.ndarray:
    trace = ForwardTrace(capture_down=True)
    forward_sequences(model, seqs, mode=mode, adapters=adapters, trace=trace, **kwargs)
    return np.vstack(trace.down_outputs[probe])


def empirical_error_table(model: Model, rotated: RotatedModel, calib: Sequence[np.ndarray],
                          sparsity_levels: Sequence[float] = EMPIRICAL_SPARSITY_LEVELS,
                          eval_seqs: Optional[Sequence[np.ndarray]] = None,
                          probe_layer: Optional[int] = None) -> List[Dict]:
    """
    Relative error of the Down-projection output at `probe_layer` (default: middle layer)
    against the dense run: rotated Top-K at uniform sparsity s vs magnitude pruning with
    thresholds calibrated at s on `calib`, next to the theorem's value for D_in = d_inter.
    """
    cfg = model.config
    probe = cfg.n_layers // 2 if probe_layer is None else probe_layer
    if not (0 <= probe < cfg.n_layers):
        raise RejectedInputError(f"probe layer {probe} outside [0, {cfg.n_layers})")
    seqs = calib if eval_seqs is None else eval_seqs
    dense = _down_outputs(model, seqs, probe)
    dense_rotated = _down_outputs(rotated.model, seqs, probe, adapters=rotated.adapters)
    calib_inputs = capture_site_inputs(model, calib)

    rows = []
    for s in sparsity_levels:
        plan = SparsityPlan.uniform(s, cfg.m)
        topk = _down_outputs(rotated.model, seqs, probe, Mode.LAROSA, rotated.adapters, plan=plan)
        thresholds = thresholds_from_trace(calib_inputs, s)
        magnitude = _down_outputs(model, seqs, probe, Mode.TEAL, thresholds=thresholds)
        row = {
            "sparsity": s,
            "theory": theoretical_relative_error(compute_k(1.0, s, cfg.d_inter), cfg.d_inter),
            "rotated_topk": _ratio_of_means(dense_rotated - topk, dense_rotated),
            "magnitude": _ratio_of_means(dense - magnitude, dense),
        }
        logger.info(f"empirical s={s}: theory={row['theory']:.4f}, "
                    f"rotated_topk={row['rotated_topk']:.4f}, magnitude={row['magnitude']:.4f}")
        rows.append(row)
    return rows


def rotated_dominance(rows: Sequence[Dict], tolerance: float = ERROR_TIE_TOLERANCE) -> float:
    """Fraction of rows where the rotated Top-K error is at most the magnitude error"""
    if not rows:
        return 0.0
    wins = sum(1 for row in rows if row["rotated_topk"] <= row["magnitude"] + tolerance)
    return wins / len(rows)


def block_error_comparison(model: Model, rotated: RotatedModel, seqs: Sequence[np.ndarray],
                           sparsity: float) -> List[Dict]:
    """
    Per (layer, site) relative block-output error of magnitude pruning on the unrotated
    input vs Top-K on the rotated input, with the Top-K budget of each token set to the
    number of entries magnitude pruning kept for it.
    """
    plain = capture_site_inputs(model, seqs)
    turned = capture_site_inputs(rotated.model, seqs, adapters=rotated.adapters)
    rows = []
    for layer in range(model.config.n_layers):
        for site in Site:
            x = plain.site_inputs(layer, site)
            xr = turned.site_inputs(layer, site)
            w = model.layers[layer].site_weights(site)
            wr = rotated.layers[layer].site_weights(site)
            eps = calibrate_magnitude_thresholds([x], sparsity)
            pruned, kept = magnitude_rows(x, eps)
            topk, _ = top_k_rows(xr, kept)
            magnitude_error = float(np.linalg.norm((x - pruned) @ w.T) / max(np.linalg.norm(x @ w.T), 1e-300))
            rotated_error = float(np.linalg.norm((xr - topk) @ wr.T) / max(np.linalg.norm(xr @ wr.T), 1e-300))
            rows.append({
                "layer": layer, "site": site.value,
                "magnitude_error": magnitude_error, "rotated_error": rotated_error,
                "magnitude_sparsity": float(np.mean(1.0 - kept / x.shape[1])),
                "rotated_wins": rotated_error <= magnitude_error + ERROR_TIE_TOLERANCE,
            })
    return rows
