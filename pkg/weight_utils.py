"""
weight_utils.py - Weight files, synthetic checkpoints and token streams

Weight files use the safetensors layout: an 8-byte little-endian header length, a JSON
header mapping tensor name -> {dtype, shape, data_offsets}, then the raw payload.
Files are written with the safetensors numpy API. Reading goes through a validating
header parser so malformed files fail with a byte position or the offending tensor
before any payload is interpreted.

Tensor names: embed, head, final_norm, layers.{l}.{wq,wk,wv,wo,wup,wgate,wdown,
attn_norm,mlp_norm}; rotated models add adapters.{l} and rotations.{l}.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from safetensors.numpy import save_file

from constants import (
    CONFIG_METADATA_KEY, EMBED_GAIN, EMBED_SPECTRUM_DECAY, NORM_GAIN_JITTER,
    SUPPORTED_DTYPES, ZIPF_EXPONENT,
)
from errors import ParseError, RejectedInputError, SchemaError
from numeric_core import random_orthogonal
from rotation_engine import RotatedModel, RotationMatrix
from toy_transformer import LayerWeights, Model, ModelConfig

logger = logging.getLogger(__name__)

LAYER_TENSORS = ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown", "attn_norm", "mlp_norm")
HEADER_PREFIX_BYTES = 8

# ============================================
# WEIGHT FILE READER
# ============================================

def _check_entry(name: str, entry, payload_size: int) -> Tuple[int, int, str, List[int]]:
    if not isinstance(entry, dict):
        raise SchemaError(f"header entry for {name} is not an object", tensor=name)
    dtype = entry.get("dtype")
    if dtype not in SUPPORTED_DTYPES:
        raise SchemaError(f"{name}: unsupported dtype {dtype!r}; accepted {sorted(SUPPORTED_DTYPES)}", tensor=name)
    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise SchemaError(f"{name}: shape must be a list of non-negative integers, got {shape!r}", tensor=name)
    offsets = entry.get("data_offsets")
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(isinstance(n, int) for n in offsets) or not 0 <= offsets[0] <= offsets[1]):
        raise SchemaError(f"{name}: data_offsets must be [begin, end] with 0 <= begin <= end", tensor=name)
    begin, end = offsets
    expected = math.prod(shape) * np.dtype(SUPPORTED_DTYPES[dtype]).itemsize
    if end - begin != expected:
        raise SchemaError(f"{name}: {end - begin} payload bytes declared, {expected} expected", tensor=name)
    if end > payload_size:
        raise SchemaError(f"{name}: payload holds {max(payload_size - begin, 0)} bytes, {expected} expected",
                          tensor=name)
    return begin, end, dtype, shape


def read_weight_file(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Validated tensors (widened to float64) and the string metadata of a weight file"""
    data = Path(path).read_bytes()
    if len(data) < HEADER_PREFIX_BYTES:
        raise ParseError("file shorter than the 8-byte header length prefix", position=len(data))
    header_len = int.from_bytes(data[:HEADER_PREFIX_BYTES], "little", signed=False)
    if HEADER_PREFIX_BYTES + header_len > len(data):
        raise ParseError(f"header length {header_len} exceeds file size {len(data)}", position=HEADER_PREFIX_BYTES)
    try:
        header = json.loads(data[HEADER_PREFIX_BYTES:HEADER_PREFIX_BYTES + header_len].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError("header is not UTF-8", position=HEADER_PREFIX_BYTES + e.start)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed header JSON: {e.msg}", position=HEADER_PREFIX_BYTES + e.pos)
    if not isinstance(header, dict):
        raise ParseError("header is not a JSON object", position=HEADER_PREFIX_BYTES)

    metadata = header.pop("__metadata__", None) or {}
    payload = memoryview(data)[HEADER_PREFIX_BYTES + header_len:]
    entries = {name: _check_entry(name, entry, len(payload)) for name, entry in header.items()}

    previous_end, previous_name = 0, None
    for name, (begin, end, _, _) in sorted(entries.items(), key=lambda kv: kv[1][:2]):
        if begin < previous_end:
            raise SchemaError(f"{name} overlaps {previous_name} in the payload", tensor=name)
        previous_end, previous_name = end, name

    tensors = {}
    for name, (begin, _, dtype, shape) in entries.items():
        raw = np.frombuffer(payload, dtype=SUPPORTED_DTYPES[dtype], count=math.prod(shape), offset=begin)
        tensors[name] = raw.reshape(shape).astype(np.float64)
    logger.debug(f"Read {len(tensors)} tensors from {path}")
    return tensors, metadata


def write_weight_file(tensors: Dict[str, np.ndarray], path, metadata: Optional[Dict[str, str]] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file({name: np.ascontiguousarray(t, dtype=np.float64) for name, t in tensors.items()},
              str(path), metadata=metadata)
    logger.info(f"Wrote {len(tensors)} tensors to {path}")

# ============================================
# MODEL <-> TENSORS
# ============================================

def model_tensors(model: Model) -> Dict[str, np.ndarray]:
    tensors = {"embed": model.embed, "head": model.head, "final_norm": model.final_norm}
    for index, lw in enumerate(model.layers):
        for name in LAYER_TENSORS:
            tensors[f"layers.{index}.{name}"] = getattr(lw, name)
    return tensors


def _take(tensors: Dict[str, np.ndarray], name: str, shape: Tuple[int, ...]) -> np.ndarray:
    if name not in tensors:
        raise SchemaError(f"missing tensor {name}", tensor=name)
    if tuple(tensors[name].shape) != tuple(shape):
        raise SchemaError(f"{name} has shape {tuple(tensors[name].shape)}, expected {tuple(shape)}", tensor=name)
    return tensors[name]


def _config_from_metadata(metadata: Dict[str, str]) -> ModelConfig:
    if CONFIG_METADATA_KEY not in metadata:
        raise SchemaError(f"weight file has no {CONFIG_METADATA_KEY!r} metadata")
    try:
        return ModelConfig.model_validate_json(metadata[CONFIG_METADATA_KEY])
    except ValidationError as e:
        raise SchemaError(f"invalid model config metadata: {e.errors()[0]['msg']}")


def model_from_tensors(tensors: Dict[str, np.ndarray], config: ModelConfig, norms_folded: bool = False) -> Model:
    d, vocab = config.d_model, config.vocab
    shapes = LayerWeights.expected_shapes(config)
    layers = []
    for index in range(config.n_layers):
        layers.append(LayerWeights(**{name: _take(tensors, f"layers.{index}.{name}", shapes[name])
                                      for name in LAYER_TENSORS}))
    return Model(config, _take(tensors, "embed", (vocab, d)), layers,
                 _take(tensors, "final_norm", (d,)), _take(tensors, "head", (d, vocab)),
                 norms_folded=norms_folded)


def _model_metadata(model: Model, kind: str) -> Dict[str, str]:
    return {CONFIG_METADATA_KEY: model.config.model_dump_json(),
            "norms_folded": json.dumps(model.norms_folded), "kind": kind}


def save_weights(model: Model, path) -> None:
    write_weight_file(model_tensors(model), path, _model_metadata(model, "model"))


def load_weights(path) -> Model:
    tensors, metadata = read_weight_file(path)
    model = model_from_tensors(tensors, _config_from_metadata(metadata),
                               norms_folded=json.loads(metadata.get("norms_folded", "false")))
    logger.info(f"Loaded {model.config.n_layers}-layer model (D={model.config.d_model}) from {path}")
    return model


def rotation_tensors(rotations: Sequence[RotationMatrix]) -> Dict[str, np.ndarray]:
    tensors = {}
    for index, rotation in enumerate(rotations):
        tensors[f"rotations.{index}"] = rotation.q
        if rotation.eigenvalues is not None:
            tensors[f"rotations.{index}.eigenvalues"] = rotation.eigenvalues
    return tensors


def save_rotations(rotations: Sequence[RotationMatrix], path, metadata: Optional[Dict[str, str]] = None) -> None:
    write_weight_file(rotation_tensors(rotations), path, {"kind": "rotations", **(metadata or {})})


def _rotations_from(tensors: Dict[str, np.ndarray]) -> List[RotationMatrix]:
    rotations, index = [], 0
    while f"rotations.{index}" in tensors:
        rotations.append(RotationMatrix(tensors[f"rotations.{index}"],
                                        tensors.get(f"rotations.{index}.eigenvalues")))
        index += 1
    return rotations


def load_rotations(path, dim: Optional[int] = None, count: Optional[int] = None) -> List[RotationMatrix]:
    tensors, _ = read_weight_file(path)
    rotations = _rotations_from(tensors)
    if not rotations:
        raise SchemaError("missing tensor rotations.0", tensor="rotations.0")
    if count is not None and len(rotations) != count:
        raise SchemaError(f"file holds {len(rotations)} rotations, expected {count}", tensor=f"rotations.{len(rotations)}")
    for index, rotation in enumerate(rotations):
        if dim is not None and rotation.dim != dim:
            raise SchemaError(f"rotations.{index} has dim {rotation.dim}, expected {dim}", tensor=f"rotations.{index}")
    return rotations


def save_rotated_model(rotated: RotatedModel, path) -> None:
    tensors = model_tensors(rotated.model)
    tensors.update({f"adapters.{index}": adapter for index, adapter in enumerate(rotated.adapters)})
    tensors.update(rotation_tensors(rotated.rotations))
    write_weight_file(tensors, path, _model_metadata(rotated.model, "rotated_model"))


def load_rotated_model(path) -> RotatedModel:
    tensors, metadata = read_weight_file(path)
    config = _config_from_metadata(metadata)
    model = model_from_tensors(tensors, config, norms_folded=True)
    adapters = [_take(tensors, f"adapters.{index}", (config.d_model, config.d_model))
                for index in range(config.n_layers - 1)]
    return RotatedModel(model, adapters, _rotations_from(tensors))

# ============================================
# SYNTHETIC MODELS
# ============================================

def synth_model(config: ModelConfig) -> Model:
    """
    Deterministic synthetic checkpoint from numpy's PCG64 generator seeded with config.seed.

    Draw order: embedding mixing and rows, then per layer wq, wk, wv, wo, wup, wgate,
    wdown, attn_norm, mlp_norm, then final_norm and head. Projections and the head are
    N(0, 1/D_in); norm gains are 1 + jitter * N(0, 1). Embedding rows have a power-law
    spectrum under a random orthogonal mixing, mean per-coordinate variance EMBED_GAIN.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, inter = config.d_model, config.d_inter

    spectrum = np.arange(1, d + 1, dtype=np.float64) ** -EMBED_SPECTRUM_DECAY
    variances = EMBED_GAIN * d * spectrum / spectrum.sum()
    mixing = random_orthogonal(d, rng)
    embed = (rng.standard_normal((config.vocab, d)) * np.sqrt(variances)) @ mixing.T

    def gaussian(d_out: int, d_in: int) -> np.ndarray:
        return rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)

    def gain() -> np.ndarray:
        return 1.0 + NORM_GAIN_JITTER * rng.standard_normal(d)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=gaussian(d, d), wk=gaussian(config.kv_dim, d), wv=gaussian(config.kv_dim, d),
            wo=gaussian(d, d), wup=gaussian(inter, d), wgate=gaussian(inter, d),
            wdown=gaussian(d, inter), attn_norm=gain(), mlp_norm=gain(),
        ))
    final_norm = gain()
    head = rng.standard_normal((d, config.vocab)) / math.sqrt(d)
    logger.info(f"Synthesized model D={d}, L={config.n_layers}, heads={config.n_heads}, "
                f"kv={config.kv_groups}, inter={inter}, vocab={config.vocab}, seed={config.seed}")
    return Model(config, embed, layers, final_norm, head).validate()


def parse_synth_spec(spec: str, seed: int) -> ModelConfig:
    """'D,L,H,G,M,V' -> ModelConfig"""
    parts = [p.strip() for p in spec.split(",")]
    if len(parts) != 6:
        raise RejectedInputError(f"--synth needs D,L,H,G,M,V, got {spec!r}")
    try:
        d, layers, heads, groups = (int(p) for p in parts[:4])
        ratio, vocab = float(parts[4]), int(parts[5])
    except ValueError:
        raise RejectedInputError(f"--synth values must be numbers, got {spec!r}")
    try:
        return ModelConfig(d_model=d, n_layers=layers, n_heads=heads, kv_groups=groups,
                           mlp_ratio=ratio, vocab=vocab, seed=seed)
    except ValidationError as e:
        raise RejectedInputError(f"invalid --synth dims: {e.errors()[0]['msg']}")

# ============================================
# TOKEN STREAMS
# ============================================

def synth_token_streams(vocab: int, n: int, length: int, seed: int,
                        distribution: str = "uniform") -> List[np.ndarray]:
    """n sequences of token ids; 'zipf' ranks a seeded permutation of the vocabulary"""
    if vocab < 1 or n < 1 or length < 1:
        raise RejectedInputError(f"token streams need positive vocab/n/length, got {vocab}/{n}/{length}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if distribution == "uniform":
        ids = rng.integers(0, vocab, size=(n, length))
    elif distribution == "zipf":
        weights = np.arange(1, vocab + 1, dtype=np.float64) ** -ZIPF_EXPONENT
        ranked = rng.permutation(vocab)
        ids = ranked[rng.choice(vocab, size=(n, length), p=weights / weights.sum())]
    else:
        raise RejectedInputError(f"unknown token distribution {distribution!r}")
    return [row.astype(np.int64) for row in ids]


def write_token_file(seqs: Sequence[np.ndarray], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(np.concatenate(seqs).astype("<u4").tobytes())


def load_token_file(path, seq_len: int, vocab: int) -> List[np.ndarray]:
    """Raw 32-bit little-endian ids split into consecutive sequences of seq_len"""
    if seq_len < 1:
        raise RejectedInputError(f"seq_len must be >= 1, got {seq_len}")
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise ParseError("token file size is not a multiple of 4 bytes", position=len(data) - len(data) % 4)
    ids = np.frombuffer(data, dtype="<u4").astype(np.int64)
    if ids.size and ids.max() >= vocab:
        position = int(np.argmax(ids >= vocab)) * 4
        raise ParseError(f"token id {int(ids.max())} outside vocab {vocab}", position=position)
    n = ids.size // seq_len
    if n == 0:
        raise RejectedInputError(f"token file holds {ids.size} ids, fewer than one sequence of {seq_len}")
    if ids.size % seq_len:
        logger.warning(f"Dropping {ids.size % seq_len} trailing token ids")
    return [ids[i * seq_len:(i + 1) * seq_len] for i in range(n)]
