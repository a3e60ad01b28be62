"""
generate_checkpoint.py - Writes a tiny synthetic checkpoint and a token file into data/
Both are valid inputs for `rosa.py --model ... --tokens ...`.
"""

import os

from constants import CALIB_LEN, CALIB_SEQS, DEFAULT_SEED, EVAL_SEQS
from toy_transformer import ModelConfig
from weight_utils import save_weights, synth_model, synth_token_streams, write_token_file

DATA_DIR = os.getenv("ROSA_DATA_DIR", "data")

# Two layers keep the checkpoint small enough to commit alongside tests
config = ModelConfig(n_layers=2, seed=DEFAULT_SEED)

if not os.path.exists(DATA_DIR):
    os.makedirs(DATA_DIR)

model = synth_model(config)
save_weights(model, os.path.join(DATA_DIR, "tiny_model.safetensors"))
print(f"Successfully created {DATA_DIR}/tiny_model.safetensors "
      f"(D={config.d_model}, L={config.n_layers}, vocab={config.vocab})")

# Calibration sequences first, then held-out sequences from a different distribution
calib = synth_token_streams(config.vocab, CALIB_SEQS, CALIB_LEN, DEFAULT_SEED, "uniform")
held_out = synth_token_streams(config.vocab, EVAL_SEQS, CALIB_LEN, DEFAULT_SEED + 1, "zipf")
write_token_file(calib + held_out, os.path.join(DATA_DIR, "tokens.bin"))
print(f"Successfully created {DATA_DIR}/tokens.bin ({len(calib) + len(held_out)} x {CALIB_LEN} ids)")
