"""
constants.py - Shared constants for the rotated sparse activation toolkit
Numeric tolerances, desk-scale model defaults, sparsity/search settings, kernel and
benchmark knobs, logging and CLI configuration.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# ============================================
# NUMERIC CORE
# ============================================
SYMMETRY_TOLERANCE = 1e-10          # relative, for symmetric-input checks
JACOBI_MAX_SWEEPS = 100
JACOBI_OFFDIAG_TOLERANCE = 1e-12    # off-diagonal Frobenius, relative to ||A||_F
JACOBI_NEGLIGIBLE = 1e-18           # |a_pq| relative to |a_pp| + |a_qq| treated as zero
NEGATIVE_EIGENVALUE_TOLERANCE = 1e-8  # relative to trace; smaller negatives clamp to 0
RMSNORM_EPS = float(os.getenv("RMSNORM_EPS", "1e-6"))

# Columns accumulated per block in every column-major GEMV; the block order is the
# summation order contract shared by the dense and sparse paths.
COLUMN_BLOCK = int(os.getenv("COLUMN_BLOCK", "64"))

# ============================================
# DESK-SCALE MODEL DEFAULTS
# ============================================
DEFAULT_D_MODEL = 64
DEFAULT_LAYERS = 4
DEFAULT_HEADS = 4
DEFAULT_KV_GROUPS = 2
DEFAULT_MLP_RATIO = 2.6875
DEFAULT_VOCAB = 256
DEFAULT_SEED = int(os.getenv("ROSA_SEED", "0"))

# Synthetic embeddings: power-law spectrum under a random orthogonal mixing.
# EMBED_GAIN is the mean per-coordinate variance of an embedding row.
EMBED_SPECTRUM_DECAY = 1.0
EMBED_GAIN = 32.0
NORM_GAIN_JITTER = 0.1  # synthetic RMSNorm gains ~ 1 + jitter * N(0, 1)

# ============================================
# CALIBRATION
# ============================================
CALIB_SEQS = int(os.getenv("CALIB_SEQS", "16"))
CALIB_LEN = int(os.getenv("CALIB_LEN", "128"))
EVAL_SEQS = int(os.getenv("EVAL_SEQS", "8"))
ZIPF_EXPONENT = 1.2  # held-out token stream skew

# ============================================
# SPARSITY
# ============================================
SITES = ("h1", "h2", "h3", "h4")
DEFAULT_SPARSITY = float(os.getenv("ROSA_SPARSITY", "0.5"))
UNIFORM_ALPHA = (1.0, 1.0, 1.0, 1.0)
CONSTRAINT_TOLERANCE = 1e-9
ERROR_TIE_TOLERANCE = 1e-9

# ============================================
# GRID SEARCH
# ============================================
ALPHA_RANGE_LOW = 0.7
ALPHA_RANGE_HIGH = 1.2
ALPHA_STEP = 0.05
GRID_BOUND_SLACK = 1e-9

# ============================================
# ERROR THEORY
# ============================================
MC_MIN_SAMPLES = 1000
MC_BLOCK_SIZE = int(os.getenv("MC_BLOCK_SIZE", "250"))  # samples sharing one W draw
THEORY_KEEP_FRACTIONS = (0.25, 0.5, 0.75)
THEORY_D_IN = 4096
THEORY_D_OUT = 1024
EMPIRICAL_SPARSITY_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# ============================================
# BENCHMARK
# ============================================
BENCH_WARMUP_REPS = 5
BENCH_MIN_REPS = 30
BENCH_DTYPE = os.getenv("BENCH_DTYPE", "float32")
BENCH_SPARSITY_LEVELS = (0.0, 0.25, 0.5, 0.75)
BENCH_MODES = ("dense", "sparse", "fused")
BENCH_ROWBLOCKED_MODE = "rowblocked"   # opt-in, threaded over output rows
BENCH_DEFAULT_DIM = 8192

# ============================================
# PARALLEL PROCESSING
# ============================================
MAX_WORKERS = int(os.getenv("MAX_WORKERS", "4"))

# ============================================
# LOGGING CONFIGURATION
# ============================================
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# ============================================
# CLI / REPORTS
# ============================================
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

DEFAULT_OUT_DIR = os.getenv("ROSA_OUT", "reports")
REPORT_FILES = {
    "calibrate": "rotations.safetensors",
    "merge": "rotated_model.safetensors",
    "search": "alpha_trace.csv",
    "theory": "theory_vs_mc.csv",
    "empirical": "empirical_errors.csv",
    "bench": "bench.csv",
}

CSV_HEADERS = {
    "bench": ["d_in", "d_out", "sparsity", "mode", "median_ns", "speedup"],
    "empirical": ["sparsity", "theory", "rotated_topk", "magnitude"],
    "search": ["alpha1", "alpha2", "alpha3", "alpha4", "objective"],
    "theory": ["keep_fraction", "k", "theory", "monte_carlo", "rel_diff"],
}

# ============================================
# WEIGHT FILES
# ============================================
SUPPORTED_DTYPES = {"F16": "<f2", "F32": "<f4", "F64": "<f8"}
CONFIG_METADATA_KEY = "config"
