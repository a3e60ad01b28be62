import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from datetime import datetime, timezone

# --- Configuration ---
ROSA = [sys.executable, os.path.join(os.path.dirname(os.path.abspath(__file__)), "rosa.py")]
TIMESTAMP = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
OUTPUT_FILE = f"acceptance_results_{TIMESTAMP}.json"
SMALL_MODEL = ["--synth", "32,2,4,2,2.6875,128", "--calib-seqs", "8", "--calib-len", "64", "--eval-seqs", "4"]

# --- Setup ---
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
TEST_RESULTS = []
SUCCESS_COUNT = 0
FAILURE_COUNT = 0


def _eval_sparsity_std(report: dict) -> float:
    return max(site["std"] for site in report["results"]["sites"])


def run_step(name: str, tier: str, args: list, check=None, expected_exit: int = 0, timeout: int = 600):
    """
    Runs one CLI command in its own report directory, checks the exit code and,
    when given, a predicate over the JSON report. Stores the outcome for the results file.
    """
    global SUCCESS_COUNT, FAILURE_COUNT
    out_dir = tempfile.mkdtemp(prefix="rosa_")
    command = ROSA + args + ["--out", out_dir]
    logging.info(f"--- [STARTING STEP] Name: '{name}' | Tier: {tier} ---")
    print(f"  - Command    : {' '.join(args)}")

    result_log = {
        "step_name": name,
        "tier": tier,
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "status": "FAILURE",
        "command": args,
    }
    start_time = time.perf_counter()
    try:
        completed = subprocess.run(command, capture_output=True, text=True, timeout=timeout)
        duration_seconds = time.perf_counter() - start_time
        result_log["duration_seconds"] = round(duration_seconds, 2)
        result_log["exit_code"] = completed.returncode

        passed = completed.returncode == expected_exit
        if passed and check is not None:
            report_file = os.path.join(out_dir, f"{args[0]}_report.json")
            with open(report_file) as f:
                report = json.load(f)
            passed = bool(check(report))
            result_log["checked"] = True
        if not passed and completed.stderr:
            result_log["stderr"] = completed.stderr[-2000:]

        if passed:
            result_log["status"] = "SUCCESS"
            SUCCESS_COUNT += 1
            logging.info(f"  - Result     : ✅ SUCCESS (exit {completed.returncode}) in {duration_seconds:.2f}s")
        else:
            FAILURE_COUNT += 1
            logging.error(f"  - Result     : ❌ FAILURE (exit {completed.returncode}) in {duration_seconds:.2f}s")
    except (subprocess.TimeoutExpired, OSError, json.JSONDecodeError) as e:
        FAILURE_COUNT += 1
        result_log["error"] = f"{type(e).__name__}: {e}"
        logging.error(f"  - Result     : ❌ FAILURE ({type(e).__name__})")
    finally:
        TEST_RESULTS.append(result_log)
        print("-" * 60)


def save_results_to_json(results: list, filename: str):
    """Saves the list of step results to a JSON file."""
    logging.info(f"Attempting to save {len(results)} step results to '{filename}'...")
    try:
        with open(filename, 'w') as f:
            json.dump(results, f, indent=4)
        logging.info(f"✅ Successfully saved step results to '{filename}'.")
    except OSError as e:
        logging.error(f"❌ Failed to save results to JSON file: {e}")


if __name__ == "__main__":
    quick_steps = [
        {"name": "Unknown Command", "args": ["frobnicate"], "expected_exit": 1},
        {"name": "Sparsity Out Of Range", "args": ["eval", "--p", "1.5"] + SMALL_MODEL, "expected_exit": 2},
        {"name": "Missing Weight File", "args": ["eval", "--model", "missing.safetensors"], "expected_exit": 2},
        {"name": "Invariance At p=0", "args": ["eval", "--mode", "larosa", "--p", "0"] + SMALL_MODEL,
         "check": lambda r: r["results"]["logit_error"]["mean"] <= 1e-6 and r["results"]["model_sparsity"] == 0.0},
        {"name": "Exact Top-K Sparsity", "args": ["eval", "--mode", "topk", "--p", "0.5"] + SMALL_MODEL,
         "check": lambda r: _eval_sparsity_std(r) == 0.0},
        {"name": "Magnitude Fluctuation", "args": ["eval", "--mode", "teal", "--p", "0.5"] + SMALL_MODEL,
         "check": lambda r: _eval_sparsity_std(r) > 0.0},
    ]
    standard_steps = [
        {"name": "Calibrate", "args": ["calibrate"] + SMALL_MODEL},
        {"name": "Merge", "args": ["merge"] + SMALL_MODEL,
         "check": lambda r: r["results"]["invariance_error"]["mean"] <= 1e-6},
        {"name": "CATS Eval", "args": ["eval", "--mode", "cats", "--p", "0.5"] + SMALL_MODEL},
        {"name": "LaRoSA With Coefficients", "args": ["eval", "--p", "0.5", "--alpha", "0.9,1.0"] + SMALL_MODEL},
    ]
    heavy_steps = [
        {"name": "Theorem vs Monte Carlo", "args": ["theory", "--samples", "2000"] + SMALL_MODEL,
         "check": lambda r: all(row["rel_diff"] <= 0.02 for row in r["results"]["theory"])},
        {"name": "Grid Search", "args": ["search", "--p", "0.5"] + SMALL_MODEL,
         "check": lambda r: r["results"]["points"] == 121},
        {"name": "Kernel Benchmark", "args": ["bench", "--reps", "30"]},
    ]

    print("=" * 60)
    logging.info("🚀 STARTING CLI ACCEPTANCE SUITE 🚀")
    print("=" * 60)

    print("\n--- Running Quick Steps ---")
    for step in quick_steps: run_step(tier="Quick", **step)

    print("\n--- Running Standard Steps ---")
    for step in standard_steps: run_step(tier="Standard", **step)

    if os.getenv("ROSA_RUN_SLOW") == "1":
        print("\n--- Running Heavy Steps ---")
        for step in heavy_steps: run_step(tier="Heavy", **step)

    save_results_to_json(TEST_RESULTS, OUTPUT_FILE)

    print("\n" + "=" * 60)
    logging.info("✨ ACCEPTANCE SUITE COMPLETE ✨")
    print("=" * 60)
    print(f"  TOTAL STEPS : {SUCCESS_COUNT + FAILURE_COUNT}")
    print(f"  ✅ SUCCESS   : {SUCCESS_COUNT}")
    print(f"  ❌ FAILURE   : {FAILURE_COUNT}")
    print(f"  Detailed results saved to: {OUTPUT_FILE}")
    print("=" * 60)
    sys.exit(1 if FAILURE_COUNT else 0)
