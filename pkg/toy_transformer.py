"""
toy_transformer.py - Desk-scale pre-norm decoder stack
Runs dense, LaRoSA (rotated Top-K), plain Top-K, TEAL and CATS forward modes and
provides the calibration, threshold and evaluation passes built on them.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from constants import (
    DEFAULT_D_MODEL, DEFAULT_HEADS, DEFAULT_KV_GROUPS, DEFAULT_LAYERS,
    DEFAULT_MLP_RATIO, DEFAULT_SEED, DEFAULT_VOCAB, MAX_WORKERS, RMSNORM_EPS,
)
from errors import RejectedInputError
from numeric_core import rmsnorm
from sparsifier import (
    Site, SparsityPlan, ThresholdTable, calibrate_magnitude_thresholds,
    magnitude_rows, top_k_rows,
)

logger = logging.getLogger(__name__)

# An activation batch is an N x dim float64 array (one row per token).
ActivationBatch = np.ndarray


class Mode(str, Enum):
    DENSE = "dense"
    LAROSA = "larosa"
    TOPK = "topk"
    TEAL = "teal"
    CATS = "cats"

    @property
    def uses_plan(self) -> bool:
        return self in (Mode.LAROSA, Mode.TOPK)

    @property
    def uses_thresholds(self) -> bool:
        return self in (Mode.TEAL, Mode.CATS)

# ============================================
# MODEL STRUCTURE
# ============================================

class ModelConfig(BaseModel):
    """Dimensions of a decoder stack; kv_groups is the number of shared K/V heads"""

    d_model: int = Field(default=DEFAULT_D_MODEL, gt=0)
    n_layers: int = Field(default=DEFAULT_LAYERS, gt=0)
    n_heads: int = Field(default=DEFAULT_HEADS, gt=0)
    kv_groups: int = Field(default=DEFAULT_KV_GROUPS, gt=0)
    mlp_ratio: float = Field(default=DEFAULT_MLP_RATIO, gt=0.0)
    vocab: int = Field(default=DEFAULT_VOCAB, gt=0)
    seed: int = DEFAULT_SEED
    eps: float = Field(default=RMSNORM_EPS, ge=0.0)

    @model_validator(mode="after")
    def check_couplings(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.kv_groups:
            raise ValueError(f"kv_groups={self.kv_groups} does not divide n_heads={self.n_heads}")
        if self.d_inter < 1:
            raise ValueError(f"mlp_ratio={self.mlp_ratio} gives an empty MLP")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_groups * self.head_dim

    @property
    def d_inter(self) -> int:
        return int(math.floor(self.mlp_ratio * self.d_model + 0.5))

    @property
    def m(self) -> float:
        """Realized intermediate-to-hidden ratio used by the coefficient constraints"""
        return self.d_inter / self.d_model

    def site_dims(self) -> Dict[Site, int]:
        return {Site.H1: self.d_model, Site.H2: self.d_model,
                Site.H3: self.d_model, Site.H4: self.d_inter}


@dataclass(eq=False)
class LayerWeights:
    """Projection weights stored (d_out, d_in): a batch maps as Y = X W^T"""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wup: np.ndarray
    wgate: np.ndarray
    wdown: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    @staticmethod
    def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        d, kv, inter = config.d_model, config.kv_dim, config.d_inter
        return {"wq": (d, d), "wk": (kv, d), "wv": (kv, d), "wo": (d, d),
                "wup": (inter, d), "wgate": (inter, d), "wdown": (d, inter),
                "attn_norm": (d,), "mlp_norm": (d,)}

    def validate(self, config: ModelConfig, prefix: str = "") -> None:
        for name, shape in self.expected_shapes(config).items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise RejectedInputError(f"{prefix}{name} has shape {actual}, expected {shape}",
                                         tensor=f"{prefix}{name}")

    def site_weights(self, site: Site) -> np.ndarray:
        """All projections consuming a site, stacked along d_out"""
        if site is Site.H1:
            return np.vstack([self.wq, self.wk, self.wv])
        if site is Site.H2:
            return self.wo
        if site is Site.H3:
            return np.vstack([self.wup, self.wgate])
        return self.wdown

    def site_params(self) -> Dict[Site, int]:
        return {site: self.site_weights(site).size for site in Site}


@dataclass(eq=False)
class Model:
    config: ModelConfig
    embed: np.ndarray          # vocab x D
    layers: List[LayerWeights]
    final_norm: np.ndarray     # D
    head: np.ndarray           # D x vocab
    norms_folded: bool = False

    def validate(self) -> "Model":
        cfg = self.config
        if self.embed.shape != (cfg.vocab, cfg.d_model):
            raise RejectedInputError(f"embed has shape {self.embed.shape}, expected {(cfg.vocab, cfg.d_model)}")
        if self.head.shape != (cfg.d_model, cfg.vocab):
            raise RejectedInputError(f"head has shape {self.head.shape}, expected {(cfg.d_model, cfg.vocab)}")
        if self.final_norm.shape != (cfg.d_model,):
            raise RejectedInputError(f"final_norm has shape {self.final_norm.shape}")
        if len(self.layers) != cfg.n_layers:
            raise RejectedInputError(f"model has {len(self.layers)} layers, config says {cfg.n_layers}")
        for index, lw in enumerate(self.layers):
            lw.validate(cfg, prefix=f"layers.{index}.")
        return self


def fold_norm_gains(model: Model) -> Model:
    """
    Fold RMSNorm gains into the adjacent projections so every norm is pure.

    Attention/MLP gains scale the input columns of Wq/Wk/Wv and Wup/Wgate; the final
    gain scales the rows of the head. Returned gains are all ones.
    """
    if model.norms_folded:
        return model
    layers = []
    for lw in model.layers:
        a, m = lw.attn_norm[None, :], lw.mlp_norm[None, :]
        layers.append(replace(
            lw,
            wq=lw.wq * a, wk=lw.wk * a, wv=lw.wv * a,
            wup=lw.wup * m, wgate=lw.wgate * m,
            attn_norm=np.ones_like(lw.attn_norm), mlp_norm=np.ones_like(lw.mlp_norm),
        ))
    logger.info(f"Folded RMSNorm gains of {len(layers)} layers into adjacent projections")
    return Model(model.config, model.embed, layers, np.ones_like(model.final_norm),
                 model.head * model.final_norm[:, None], norms_folded=True)

# ============================================
# FORWARD TRACE
# ============================================

@dataclass
class ForwardTrace:
    """
    Per-forward recorder. Lists hold one array per sequence, in sequence order.
    Kept counts are always recorded; larger captures are opt-in.
    """

    capture_inputs: bool = False
    capture_layer_inputs: bool = False
    capture_down: bool = False
    kept: Dict[Tuple[int, Site], List[np.ndarray]] = field(default_factory=dict)
    inputs: Dict[Tuple[int, Site], List[np.ndarray]] = field(default_factory=dict)
    layer_inputs: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    down_outputs: Dict[int, List[np.ndarray]] = field(default_factory=dict)

    def child(self) -> "ForwardTrace":
        return ForwardTrace(self.capture_inputs, self.capture_layer_inputs, self.capture_down)

    def record_site(self, layer: int, site: Site, h: np.ndarray, kept: np.ndarray) -> None:
        self.kept.setdefault((layer, site), []).append(np.asarray(kept))
        if self.capture_inputs:
            self.inputs.setdefault((layer, site), []).append(h)

    def merge(self, other: "ForwardTrace") -> None:
        for target, source in ((self.kept, other.kept), (self.inputs, other.inputs),
                               (self.layer_inputs, other.layer_inputs),
                               (self.down_outputs, other.down_outputs)):
            for key, values in source.items():
                target.setdefault(key, []).extend(values)

    def kept_counts(self, layer: int, site: Site) -> np.ndarray:
        return np.concatenate(self.kept[(layer, site)])

    def site_inputs(self, layer: int, site: Site) -> np.ndarray:
        return np.vstack(self.inputs[(layer, site)])

# ============================================
# FORWARD PASS
# ============================================

def silu(x: np.ndarray) -> np.ndarray:
    return x * np.exp(-np.logaddexp(0.0, -x))


def causal_attention(h1: np.ndarray, lw: LayerWeights, config: ModelConfig) -> np.ndarray:
    """Causal softmax attention with grouped K/V heads; returns the O-projection input"""
    n = h1.shape[0]
    heads, groups, hd = config.n_heads, config.kv_groups, config.head_dim
    q = (h1 @ lw.wq.T).reshape(n, heads, hd)
    k = np.repeat((h1 @ lw.wk.T).reshape(n, groups, hd), heads // groups, axis=1)
    v = np.repeat((h1 @ lw.wv.T).reshape(n, groups, hd), heads // groups, axis=1)
    scores = np.einsum("nhd,mhd->hnm", q, k) / math.sqrt(hd)
    scores = np.where(np.triu(np.ones((n, n), dtype=bool), 1), -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return np.einsum("hnm,mhd->nhd", weights, v).reshape(n, heads * hd)


def _sparsify_site(h: np.ndarray, site: Site, layer: int, mode: Mode,
                   ks: Optional[Dict[Site, int]],
                   thresholds: Optional[ThresholdTable]) -> Tuple[np.ndarray, np.ndarray]:
    dim = h.shape[1]
    if mode.uses_plan:
        if ks[site] > dim:
            raise RejectedInputError(f"plan k={ks[site]} exceeds site {site.value} dim {dim}")
        return top_k_rows(h, ks[site])
    if mode.uses_thresholds and (mode is Mode.TEAL or site is Site.H4):
        eps = thresholds.get(layer, site)
        if eps is not None:
            return magnitude_rows(h, eps)
    return h, np.full(h.shape[0], dim)


def layer_forward(state: ActivationBatch, lw: LayerWeights, config: ModelConfig,
                  mode: Mode = Mode.DENSE, plan: Optional[SparsityPlan] = None,
                  thresholds: Optional[ThresholdTable] = None,
                  adapter: Optional[np.ndarray] = None, layer: int = 0,
                  trace: Optional[ForwardTrace] = None) -> ActivationBatch:
    """
    One pre-norm decoder layer: attention block, SwiGLU MLP block, residual additions.

    Plan modes apply Top-K per token at h1..h4 (rotations are already merged into the
    weights for LaRoSA); TEAL thresholds h1..h4, CATS thresholds h4 only. The residual
    adapter, when given, right-multiplies the layer output.
    """
    if state.ndim != 2 or state.shape[1] != config.d_model:
        raise RejectedInputError(f"layer input has shape {state.shape}, hidden size is {config.d_model}")
    if mode.uses_plan and plan is None:
        raise RejectedInputError(f"mode {mode.value} needs a SparsityPlan")
    if mode.uses_thresholds and thresholds is None:
        raise RejectedInputError(f"mode {mode.value} needs a ThresholdTable")
    ks = plan.k_per_site(config.site_dims()) if mode.uses_plan else None

    def sparsify(h: np.ndarray, site: Site) -> np.ndarray:
        hs, kept = _sparsify_site(h, site, layer, mode, ks, thresholds)
        if trace is not None:
            trace.record_site(layer, site, h, kept)
        return hs

    if trace is not None and trace.capture_layer_inputs:
        trace.layer_inputs.setdefault(layer, []).append(state)

    h1 = sparsify(rmsnorm(state, lw.attn_norm, config.eps), Site.H1)
    h2 = sparsify(causal_attention(h1, lw, config), Site.H2)
    x = state + h2 @ lw.wo.T

    h3 = sparsify(rmsnorm(x, lw.mlp_norm, config.eps), Site.H3)
    h4 = sparsify(silu(h3 @ lw.wgate.T) * (h3 @ lw.wup.T), Site.H4)
    down = h4 @ lw.wdown.T
    if trace is not None and trace.capture_down:
        trace.down_outputs.setdefault(layer, []).append(down)
    x = x + down

    if adapter is not None:
        x = x @ adapter
    return x


def check_tokens(tokens: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size == 0:
        raise RejectedInputError("a token sequence must be a non-empty 1-D array")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise RejectedInputError(f"token ids must be integers, got {tokens.dtype}")
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise RejectedInputError(f"token ids must lie in [0, {vocab})")
    return tokens


def model_forward(model: Model, tokens: np.ndarray, mode: Mode = Mode.DENSE,
                  plan: Optional[SparsityPlan] = None,
                  thresholds: Optional[ThresholdTable] = None,
                  adapters: Optional[Sequence[np.ndarray]] = None,
                  trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """Logits (N x vocab) for one token sequence"""
    cfg = model.config
    x = model.embed[check_tokens(tokens, cfg.vocab)]
    for index, lw in enumerate(model.layers):
        adapter = adapters[index] if adapters is not None and index < len(adapters) else None
        x = layer_forward(x, lw, cfg, mode, plan, thresholds, adapter, index, trace)
    return rmsnorm(x, model.final_norm, cfg.eps) @ model.head


def forward_sequences(model: Model, seqs: Sequence[np.ndarray], mode: Mode = Mode.DENSE,
                      plan: Optional[SparsityPlan] = None,
                      thresholds: Optional[ThresholdTable] = None,
                      adapters: Optional[Sequence[np.ndarray]] = None,
                      trace: Optional[ForwardTrace] = None,
                      max_workers: int = MAX_WORKERS) -> List[np.ndarray]:
    """model_forward over independent sequences; the trace is merged in sequence order"""
    if len(seqs) == 0:
        raise RejectedInputError("no sequences to run")

    def run(tokens: np.ndarray) -> Tuple[np.ndarray, Optional[ForwardTrace]]:
        local = trace.child() if trace is not None else None
        return model_forward(model, tokens, mode, plan, thresholds, adapters, local), local

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(run, seqs))
    if trace is not None:
        for _, local in results:
            trace.merge(local)
    return [logits for logits, _ in results]

# ============================================
# CALIBRATION PASSES
# ============================================

def capture_site_inputs(model: Model, seqs: Sequence[np.ndarray],
                        adapters: Optional[Sequence[np.ndarray]] = None) -> ForwardTrace:
    trace = ForwardTrace(capture_inputs=True)
    forward_sequences(model, seqs, adapters=adapters, trace=trace)
    return trace


def thresholds_from_trace(trace: ForwardTrace, p: float,
                          sites: Sequence[Site] = tuple(Site)) -> ThresholdTable:
    table = ThresholdTable()
    for (layer, site), samples in sorted(trace.inputs.items(), key=lambda kv: (kv[0][0], kv[0][1].index)):
        if site in sites:
            table.set(layer, site, calibrate_magnitude_thresholds(samples, p))
    return table


def calibrate_thresholds(model: Model, seqs: Sequence[np.ndarray], p: float,
                         sites: Sequence[Site] = tuple(Site)) -> ThresholdTable:
    """Per-layer, per-site magnitude cutoffs from dense-pass site inputs"""
    table = thresholds_from_trace(capture_site_inputs(model, seqs), p, sites)
    logger.info(f"Calibrated {len(table.entries)} thresholds at p={p}")
    return table

# ============================================
# METRICS
# ============================================

def _relative_rows(diff: np.ndarray, ref: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(diff, axis=-1)
    den = np.linalg.norm(ref, axis=-1)
    safe = np.where(den > 0.0, den, 1.0)
    return np.where(den > 0.0, num / safe, np.where(num > 0.0, np.inf, 0.0))


def model_output_error(sparse_out: np.ndarray, dense_out: np.ndarray,
                       probes: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None) -> Dict[str, Any]:
    """
    Relative L2 error ||y_dense - y_sparse|| / ||y_dense|| per token, aggregated as mean
    and max; `probes` maps layer -> (sparse, dense) block outputs for per-layer errors.
    """
    sparse_out = np.atleast_2d(np.asarray(sparse_out, dtype=np.float64))
    dense_out = np.atleast_2d(np.asarray(dense_out, dtype=np.float64))
    if sparse_out.shape != dense_out.shape:
        raise RejectedInputError(f"output shapes differ: {sparse_out.shape} vs {dense_out.shape}")
    per_token = _relative_rows(dense_out - sparse_out, dense_out)
    metrics: Dict[str, Any] = {
        "mean": float(per_token.mean()),
        "max": float(per_token.max()),
        "tokens": int(per_token.size),
    }
    if probes:
        per_layer = {}
        for layer, (sparse_block, dense_block) in sorted(probes.items()):
            rows = _relative_rows(dense_block - sparse_block, dense_block)
            per_layer[layer] = {"mean": float(rows.mean()), "max": float(rows.max())}
        metrics["per_layer"] = per_layer
    return metrics


def sequence_output_error(sparse_logits: Sequence[np.ndarray],
                          dense_logits: Sequence[np.ndarray]) -> Dict[str, Any]:
    return model_output_error(np.vstack(sparse_logits), np.vstack(dense_logits))


def site_sparsity_summary(trace: ForwardTrace, model: Model) -> Dict[str, Any]:
    """Per-(layer, site) mean/std of per-token actual sparsity and the model-level figure"""
    dims = model.config.site_dims()
    sites, weighted, total = [], 0.0, 0
    for (layer, site) in sorted(trace.kept, key=lambda key: (key[0], key[1].index)):
        sparsity = 1.0 - trace.kept_counts(layer, site) / dims[site]
        params = model.layers[layer].site_params()[site]
        weighted += params * float(sparsity.mean())
        total += params
        sites.append({
            "layer": layer, "site": site.value, "d_in": dims[site],
            "mean": float(sparsity.mean()), "std": float(sparsity.std()),
            "min": float(sparsity.min()), "max": float(sparsity.max()),
            "token0_mean": float(np.mean([1.0 - kept[0] / dims[site]
                                          for kept in trace.kept[(layer, site)]])),
        })
    return {"sites": sites, "model_level": weighted / total if total else 0.0}


def threshold_motivation(model: Model, seqs: Sequence[np.ndarray],
                         thresholds: ThresholdTable, p: float) -> List[Dict[str, Any]]:
    """
    Calibrated cutoffs against the cutoffs each token actually needs to hit sparsity p
    (the per-token p-quantile of |h|), per thresholded site.
    """
    trace = capture_site_inputs(model, seqs)
    rows = []
    for layer, site in thresholds.sites():
        eps = thresholds.get(layer, site)
        blocks = trace.inputs[(layer, site)]
        if p == 0.0:
            needed = np.zeros(sum(len(b) for b in blocks))
            first = np.zeros(len(blocks))
        else:
            needed = np.quantile(np.abs(np.vstack(blocks)), p, axis=1, method="lower")
            first = np.array([np.quantile(np.abs(b[0]), p, method="lower") for b in blocks])
        rows.append({
            "layer": layer, "site": site.value, "calibrated": eps,
            "needed_mean": float(needed.mean()), "needed_std": float(needed.std()),
            "fraction_needing_lower": float(np.mean(needed < eps)),
            "token0_needed_mean": float(first.mean()),
        })
    return rows
