"""
rosa.py - Command-line entry point for the rotated sparse activation pipeline

Usage:
    python rosa.py <calibrate|merge|eval|search|theory|bench> [options]

Every command writes a JSON report embedding the full run config and seed, plus the
table or weight file named in constants.REPORT_FILES.
"""

import argparse
import json
import logging
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from alpha_search import SearchSpace, grid_search
from constants import (
    BENCH_DEFAULT_DIM, BENCH_MIN_REPS, BENCH_MODES, BENCH_ROWBLOCKED_MODE, BENCH_SPARSITY_LEVELS,
    CALIB_LEN, CALIB_SEQS,
    CSV_HEADERS, DEFAULT_D_MODEL, DEFAULT_HEADS, DEFAULT_KV_GROUPS, DEFAULT_LAYERS,
    DEFAULT_MLP_RATIO, DEFAULT_OUT_DIR, DEFAULT_SEED, DEFAULT_SPARSITY, DEFAULT_VOCAB,
    EMPIRICAL_SPARSITY_LEVELS, EVAL_SEQS, EXIT_INPUT, EXIT_OK, LOG_FORMAT, LOG_LEVEL,
    MC_MIN_SAMPLES, REPORT_FILES, THEORY_D_IN, THEORY_D_OUT, THEORY_KEEP_FRACTIONS,
)
from error_theory import block_error_comparison, empirical_error_table, rotated_dominance, theory_table
from errors import RejectedInputError, RosaError, UsageError
from report_utils import build_report, summarize_frame, write_csv, write_json_report
from rotation_engine import RotatedModel, merge_rotations, rotations_from_calibration
from sparse_kernel import bench
from sparsifier import Site, SparsityPlan
from toy_transformer import (
    ForwardTrace, Mode, Model, calibrate_thresholds, forward_sequences, sequence_output_error,
    site_sparsity_summary, threshold_motivation,
)
from weight_utils import (
    load_rotations, load_token_file, load_weights, parse_synth_spec, save_rotated_model,
    save_rotations, synth_model, synth_token_streams,
)

logger = logging.getLogger(__name__)

DEFAULT_SYNTH = (f"{DEFAULT_D_MODEL},{DEFAULT_LAYERS},{DEFAULT_HEADS},"
                 f"{DEFAULT_KV_GROUPS},{DEFAULT_MLP_RATIO},{DEFAULT_VOCAB}")


class Command(str, Enum):
    CALIBRATE = "calibrate"
    MERGE = "merge"
    EVAL = "eval"
    SEARCH = "search"
    THEORY = "theory"
    BENCH = "bench"

# ============================================
# RUN CONFIG
# ============================================

class RunConfig(BaseModel):
    """Validated CLI input; embedded verbatim in every report"""

    command: Command
    model_path: Optional[str] = Field(default=None, description="Weight file; synthetic model when absent")
    synth: str = Field(default=DEFAULT_SYNTH, description="D,L,H,G,M,V of the synthetic model")
    seed: int = DEFAULT_SEED
    p: float = Field(default=DEFAULT_SPARSITY, ge=0.0, le=1.0)
    mode: Mode = Mode.LAROSA
    alpha: Optional[Tuple[float, float]] = Field(default=None, description="(alpha1, alpha3) override")
    search: bool = False
    calib_seqs: int = Field(default=CALIB_SEQS, gt=0)
    calib_len: int = Field(default=CALIB_LEN, gt=0)
    eval_seqs: int = Field(default=EVAL_SEQS, gt=0)
    tokens: Optional[str] = None
    rotations: Optional[str] = None
    out: str = DEFAULT_OUT_DIR
    reps: int = Field(default=BENCH_MIN_REPS, ge=BENCH_MIN_REPS)
    samples: int = Field(default=2000, ge=MC_MIN_SAMPLES)
    d_in: Optional[int] = Field(default=None, gt=0, description="Kernel or Monte-Carlo input dim")
    d_out: Optional[int] = Field(default=None, gt=0)
    rowblocked: bool = Field(default=False, description="bench also times the row-blocked sparse GEMV")

    @model_validator(mode="after")
    def check_alpha_choice(self) -> "RunConfig":
        if self.alpha is not None and self.search:
            raise ValueError("--alpha and --search are mutually exclusive")
        return self

# ============================================
# ARGUMENT PARSING
# ============================================

class RosaArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_pair(text: str) -> Tuple[float, float]:
    try:
        a1, a3 = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a1,a3, got {text!r}")
    return a1, a3


def build_parser() -> argparse.ArgumentParser:
    common = RosaArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--model", dest="model_path", help="weight file (safetensors layout)")
    source.add_argument("--synth", default=DEFAULT_SYNTH, help="synthetic model dims D,L,H,G,M,V")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--p", type=float, default=DEFAULT_SPARSITY, help="target model-level sparsity")
    common.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.LAROSA.value)
    alpha = common.add_mutually_exclusive_group()
    alpha.add_argument("--alpha", type=_float_pair, help="coefficients a1,a3 (a2, a4 are solved)")
    alpha.add_argument("--search", action="store_true", help="grid-search the coefficients first")
    common.add_argument("--calib-seqs", type=int, default=CALIB_SEQS)
    common.add_argument("--calib-len", type=int, default=CALIB_LEN)
    common.add_argument("--eval-seqs", type=int, default=EVAL_SEQS)
    common.add_argument("--tokens", help="raw 32-bit LE token ids; calibration then evaluation sequences")
    common.add_argument("--rotations", help="rotation file from 'calibrate'")
    common.add_argument("--out", default=DEFAULT_OUT_DIR, help="report directory")
    common.add_argument("--reps", type=int, default=BENCH_MIN_REPS)
    common.add_argument("--samples", type=int, default=2000, help="Monte-Carlo samples")
    common.add_argument("--d-in", type=int, help="bench or Monte-Carlo input dim")
    common.add_argument("--d-out", type=int, help="bench or Monte-Carlo output dim")
    common.add_argument("--rowblocked", action="store_true", help="bench: also time the row-blocked GEMV")
    common.add_argument("--verbose", action="store_true")

    parser = RosaArgumentParser(prog="rosa", description="Rotated Top-K activation sparsification toolkit")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True
    helps = {
        Command.CALIBRATE: "build per-layer rotations from calibration covariances",
        Command.MERGE: "merge rotations into the weights and write the rotated model",
        Command.EVAL: "sparsity and output-error metrics for one mode",
        Command.SEARCH: "grid search over the sparsity coefficients",
        Command.THEORY: "closed-form error vs Monte Carlo, and empirical model errors",
        Command.BENCH: "dense / sparse / fused GEMV micro-benchmark",
    }
    for command, text in helps.items():
        commands.add_parser(command.value, parents=[common], help=text)
    return parser


def parse_config(argv: Optional[Sequence[str]] = None) -> Tuple[RunConfig, bool]:
    args = build_parser().parse_args(argv)
    values = {k: v for k, v in vars(args).items() if k != "verbose" and v is not None}
    try:
        return RunConfig(**values), args.verbose
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise RejectedInputError(f"invalid option {where}: {first['msg']}")

# ============================================
# PIPELINE PIECES
# ============================================

def load_model(config: RunConfig) -> Model:
    if config.model_path:
        return load_weights(config.model_path)
    return synth_model(parse_synth_spec(config.synth, config.seed))


def load_sequences(config: RunConfig, model: Model) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """(calibration, held-out evaluation) sequences; never overlapping"""
    vocab = model.config.vocab
    if config.tokens:
        seqs = load_token_file(config.tokens, config.calib_len, vocab)
        needed = config.calib_seqs + config.eval_seqs
        if len(seqs) < needed:
            raise RejectedInputError(f"token file holds {len(seqs)} sequences, {needed} needed")
        return seqs[:config.calib_seqs], seqs[config.calib_seqs:needed]
    calib = synth_token_streams(vocab, config.calib_seqs, config.calib_len, config.seed, "uniform")
    held_out = synth_token_streams(vocab, config.eval_seqs, config.calib_len, config.seed + 1, "zipf")
    return calib, held_out


def rotated_model(config: RunConfig, model: Model, calib: List[np.ndarray]) -> RotatedModel:
    if config.rotations:
        rotations = load_rotations(config.rotations, dim=model.config.d_model, count=model.config.n_layers)
    else:
        rotations = rotations_from_calibration(model, calib)
    return merge_rotations(model, rotations)


def resolve_plan(config: RunConfig, model: Model, rotated: Optional[RotatedModel],
                 search_seqs: List[np.ndarray]) -> Tuple[SparsityPlan, Optional[Dict[str, Any]]]:
    m = model.config.m
    if config.alpha is not None:
        return SparsityPlan.from_coefficients(config.p, config.alpha[0], config.alpha[1], m), None
    if config.search and rotated is not None and 0.0 < config.p < 1.0:
        result = grid_search(model, rotated, search_seqs, config.p)
        return SparsityPlan(p=config.p, alpha=result.alpha, m=m), {"alpha": result.alpha,
                                                                   "objective": result.objective}
    return SparsityPlan.uniform(config.p, m), None


def out_path(config: RunConfig, key: str) -> Path:
    return Path(config.out) / key

# ============================================
# COMMANDS
# ============================================

def run_calibrate(config: RunConfig) -> Dict[str, Any]:
    model = load_model(config)
    calib, _ = load_sequences(config, model)
    rotations = rotations_from_calibration(model, calib)
    save_rotations(rotations, out_path(config, REPORT_FILES["calibrate"]),
                   {"seed": str(config.seed), "calib_seqs": str(len(calib))})
    layers = []
    for index, rotation in enumerate(rotations):
        total = float(rotation.eigenvalues.sum())
        captured = np.cumsum(rotation.eigenvalues) / total if total > 0 else np.zeros(rotation.dim)
        half = rotation.dim // 2
        layers.append({"layer": index, "top_eigenvalue": rotation.eigenvalues[0],
                       "energy_first_quarter": captured[max(rotation.dim // 4 - 1, 0)],
                       "energy_first_half": captured[max(half - 1, 0)]})
    return {"rotations_file": str(out_path(config, REPORT_FILES["calibrate"])), "layers": layers}


def run_merge(config: RunConfig) -> Dict[str, Any]:
    model = load_model(config)
    calib, held_out = load_sequences(config, model)
    rotated = rotated_model(config, model, calib)
    save_rotated_model(rotated, out_path(config, REPORT_FILES["merge"]))
    error = sequence_output_error(rotated.forward(held_out), forward_sequences(model, held_out))
    logger.info(f"Rotated dense logits vs original: mean rel error {error['mean']:.3e}")
    return {"rotated_model_file": str(out_path(config, REPORT_FILES["merge"])),
            "invariance_error": error, "max_orthogonality_error": rotated.max_orthogonality_error()}


def run_eval(config: RunConfig) -> Dict[str, Any]:
    model = load_model(config)
    calib, held_out = load_sequences(config, model)
    dense = forward_sequences(model, held_out)
    trace = ForwardTrace()
    results: Dict[str, Any] = {"mode": config.mode.value, "p": config.p}

    if config.mode is Mode.LAROSA:
        rotated = rotated_model(config, model, calib)
        plan, searched = resolve_plan(config, model, rotated, held_out)
        logits = rotated.forward(held_out, mode=Mode.LAROSA, plan=plan, trace=trace)
        results.update(alpha=plan.alpha, search=searched)
    elif config.mode is Mode.TOPK:
        plan, _ = resolve_plan(config, model, None, held_out)
        logits = forward_sequences(model, held_out, Mode.TOPK, plan=plan, trace=trace)
        results.update(alpha=plan.alpha)
    elif config.mode.uses_thresholds:
        sites = tuple(Site) if config.mode is Mode.TEAL else (Site.H4,)
        thresholds = calibrate_thresholds(model, calib, config.p, sites)
        logits = forward_sequences(model, held_out, config.mode, thresholds=thresholds, trace=trace)
        results.update(thresholds=thresholds.to_records(),
                       threshold_motivation=threshold_motivation(model, held_out, thresholds, config.p))
    else:
        logits = forward_sequences(model, held_out, trace=trace)

    summary = site_sparsity_summary(trace, model)
    results.update(
        logit_error=sequence_output_error(logits, dense),
        model_sparsity=summary["model_level"],
        sites=summary["sites"],
        per_site=summarize_frame(summary["sites"], "site", "mean"),
    )
    logger.info(f"eval {config.mode.value} p={config.p}: model sparsity {summary['model_level']:.4f}, "
                f"mean rel logit error {results['logit_error']['mean']:.4e}")
    return results


def run_search(config: RunConfig) -> Dict[str, Any]:
    model = load_model(config)
    calib, held_out = load_sequences(config, model)
    rotated = rotated_model(config, model, calib)
    result = grid_search(model, rotated, held_out, config.p, SearchSpace())
    write_csv(result.to_records(), CSV_HEADERS["search"], out_path(config, REPORT_FILES["search"]))
    return {"alpha": result.alpha, "objective": result.objective,
            "points": len(result.trace), "skipped": len(result.skipped)}


def run_theory(config: RunConfig) -> Dict[str, Any]:
    d_in, d_out = config.d_in or THEORY_D_IN, config.d_out or THEORY_D_OUT
    rows = theory_table(d_in, d_out, THEORY_KEEP_FRACTIONS, config.samples, config.seed)
    write_csv(rows, CSV_HEADERS["theory"], out_path(config, REPORT_FILES["theory"]))

    model = load_model(config)
    calib, held_out = load_sequences(config, model)
    rotated = rotated_model(config, model, calib)
    empirical = empirical_error_table(model, rotated, calib, EMPIRICAL_SPARSITY_LEVELS, held_out)
    write_csv(empirical, CSV_HEADERS["empirical"], out_path(config, REPORT_FILES["empirical"]))
    blocks = block_error_comparison(model, rotated, held_out, config.p)
    return {"theory": rows, "empirical": empirical, "rotated_dominance": rotated_dominance(empirical),
            "block_comparison": blocks,
            "block_rotated_wins": float(np.mean([row["rotated_wins"] for row in blocks]))}


def run_bench(config: RunConfig) -> Dict[str, Any]:
    modes = BENCH_MODES + ((BENCH_ROWBLOCKED_MODE,) if config.rowblocked else ())
    report = bench(config.d_in or BENCH_DEFAULT_DIM, config.d_out or BENCH_DEFAULT_DIM,
                   BENCH_SPARSITY_LEVELS, config.reps, config.seed, modes=modes)
    write_csv(report.to_records(), CSV_HEADERS["bench"], out_path(config, REPORT_FILES["bench"]))
    return report.model_dump()


COMMANDS = {
    Command.CALIBRATE: run_calibrate,
    Command.MERGE: run_merge,
    Command.EVAL: run_eval,
    Command.SEARCH: run_search,
    Command.THEORY: run_theory,
    Command.BENCH: run_bench,
}


def run(config: RunConfig) -> Path:
    """Execute one command and write its JSON report; returns the report path"""
    logger.info(f"Running {config.command.value} (seed={config.seed})")
    results = COMMANDS[config.command](config)
    report = build_report(config.command.value, config, config.seed, results)
    return write_json_report(report, out_path(config, f"{config.command.value}_report.json"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    try:
        config, verbose = parse_config(argv)
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        run(config)
    except RosaError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"File not found: {e.filename}")
        print(json.dumps({"error": "FileNotFoundError", "message": str(e)}), file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
