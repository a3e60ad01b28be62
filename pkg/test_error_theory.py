import unittest
import sys
import os

import numpy as np

# Add the root directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '.')))

from errors import RejectedInputError
from error_theory import (
    MonteCarloSpec, block_error_comparison, empirical_error_table, monte_carlo_estimate,
    monte_carlo_relative_error, rotated_dominance, theory_point, theory_table,
    theoretical_relative_error,
)
from rotation_engine import build_rotated_model
from toy_transformer import ModelConfig
from weight_utils import synth_model, synth_token_streams

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=4, kv_groups=2, mlp_ratio=2.0, vocab=32, seed=9)
SLOW = os.getenv("ROSA_RUN_SLOW") == "1"


class TestClosedForm(unittest.TestCase):

    def test_known_values(self):
        print("\nTesting: test_known_values")
        self.assertAlmostEqual(theoretical_relative_error(2048, 4096), 0.2671, delta=1e-4)
        self.assertAlmostEqual(theoretical_relative_error(1024, 4096), 0.5258, delta=2e-4)
        point = theory_point(2048, 4096)
        self.assertAlmostEqual(point.t_k, 0.6744897501960817, places=9)
        print("Test Passed.")

    def test_endpoints_are_exact(self):
        print("\nTesting: test_endpoints_are_exact")
        self.assertEqual(theoretical_relative_error(0, 4096), 1.0)
        self.assertEqual(theoretical_relative_error(4096, 4096), 0.0)
        self.assertEqual(theoretical_relative_error(1, 1), 0.0)
        print("Test Passed.")

    def test_error_shrinks_with_budget(self):
        print("\nTesting: test_error_shrinks_with_budget")
        errors = [theoretical_relative_error(k, 256) for k in range(0, 257, 16)]
        self.assertTrue(all(a >= b for a, b in zip(errors, errors[1:])))
        print("Test Passed.")

    def test_rejects_bad_budget(self):
        print("\nTesting: test_rejects_bad_budget")
        with self.assertRaises(RejectedInputError):
            theoretical_relative_error(5, 4)
        with self.assertRaises(RejectedInputError):
            theoretical_relative_error(0, 0)
        print("Test Passed.")


class TestMonteCarlo(unittest.TestCase):

    def test_agrees_with_theory_at_moderate_size(self):
        print("\nTesting: test_agrees_with_theory_at_moderate_size")
        spec = MonteCarloSpec(d_in=1024, d_out=256, k=512, samples=1000, seed=1)
        result = monte_carlo_estimate(spec)
        self.assertEqual(result.samples, 1000)
        self.assertGreater(result.standard_error, 0.0)
        theory = theoretical_relative_error(512, 1024)
        self.assertLess(abs(result.ratio - theory) / theory, 0.05)
        print("Test Passed.")

    def test_seeded_and_endpoints(self):
        print("\nTesting: test_seeded_and_endpoints")
        spec = MonteCarloSpec(d_in=128, d_out=32, k=32, samples=1000, seed=5)
        self.assertEqual(monte_carlo_relative_error(spec), monte_carlo_relative_error(spec))
        full = MonteCarloSpec(d_in=128, d_out=32, k=128, samples=1000)
        self.assertEqual(monte_carlo_relative_error(full), 0.0)
        empty = MonteCarloSpec(d_in=128, d_out=32, k=0, samples=1000)
        self.assertEqual(monte_carlo_relative_error(empty), 1.0)
        print("Test Passed.")

    def test_spec_validation(self):
        print("\nTesting: test_spec_validation")
        with self.assertRaises(ValueError):
            MonteCarloSpec(d_in=16, d_out=4, k=4, samples=10)
        with self.assertRaises(ValueError):
            MonteCarloSpec(d_in=16, d_out=4, k=17)
        print("Test Passed.")

    def test_scale_invariance(self):
        print("\nTesting: test_scale_invariance")
        base = monte_carlo_estimate(MonteCarloSpec(d_in=256, d_out=64, k=128, samples=1000, seed=2))
        scaled = monte_carlo_estimate(MonteCarloSpec(d_in=256, d_out=64, k=128, samples=1000, seed=2,
                                                     sigma_x=5.0, sigma_w=0.2))
        self.assertAlmostEqual(scaled.ratio / base.ratio, 1.0, places=12)
        for seed, (sigma_x, sigma_w) in enumerate([(0.1, 3.0), (5.0, 0.2), (2.0, 2.0)], start=3):
            other = monte_carlo_estimate(MonteCarloSpec(d_in=256, d_out=64, k=128, samples=1000, seed=seed,
                                                        sigma_x=sigma_x, sigma_w=sigma_w))
            bound = 3.0 * np.hypot(base.standard_error, other.standard_error)
            self.assertLess(abs(other.ratio - base.ratio), bound, f"sigma=({sigma_x}, {sigma_w})")
        print("Test Passed.")

    def test_standard_error_shrinks_with_samples(self):
        print("\nTesting: test_standard_error_shrinks_with_samples")
        low, high = np.sqrt(2.0) / 1.5, np.sqrt(2.0) * 1.5
        runs = {}
        for samples in (1000, 2000):
            runs[samples] = [monte_carlo_estimate(MonteCarloSpec(d_in=64, d_out=16, k=32, samples=samples,
                                                                 seed=seed))
                             for seed in range(60)]
        spread = {n: np.std([r.ratio for r in rs], ddof=1) for n, rs in runs.items()}
        reported = {n: np.mean([r.standard_error for r in rs]) for n, rs in runs.items()}
        self.assertTrue(low <= spread[1000] / spread[2000] <= high, spread)
        self.assertTrue(low <= reported[1000] / reported[2000] <= high, reported)
        for n in runs:
            self.assertTrue(1.0 / 1.5 <= spread[n] / reported[n] <= 1.5, (n, spread[n], reported[n]))
        print("Test Passed.")

    @unittest.skipUnless(SLOW, "set ROSA_RUN_SLOW=1 for the full-size theorem check")
    def test_theorem_table_full_size(self):
        print("\nTesting: test_theorem_table_full_size")
        rows = theory_table(4096, 1024, (0.25, 0.5, 0.75), samples=2000, seed=0)
        self.assertEqual([row["k"] for row in rows], [1024, 2048, 3072])
        for row in rows:
            self.assertLessEqual(row["rel_diff"], 0.02)
        print("Test Passed.")


class TestEmpiricalErrors(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = synth_model(TINY)
        cls.calib = synth_token_streams(32, 4, 24, seed=1)
        cls.held_out = synth_token_streams(32, 2, 24, seed=2, distribution="zipf")
        cls.rotated = build_rotated_model(cls.model, cls.calib)

    def test_empirical_table(self):
        print("\nTesting: test_empirical_table")
        rows = empirical_error_table(self.model, self.rotated, self.calib, (0.0, 0.5), self.held_out)
        self.assertEqual([row["sparsity"] for row in rows], [0.0, 0.5])
        self.assertEqual(rows[0]["rotated_topk"], 0.0)
        self.assertEqual(rows[0]["magnitude"], 0.0)
        self.assertEqual(rows[0]["theory"], 0.0)
        self.assertGreater(rows[1]["rotated_topk"], 0.0)
        self.assertGreater(rows[1]["magnitude"], 0.0)
        with self.assertRaises(RejectedInputError):
            empirical_error_table(self.model, self.rotated, self.calib, (0.5,), probe_layer=2)
        print("Test Passed.")

    def test_block_comparison_at_zero_sparsity(self):
        print("\nTesting: test_block_comparison_at_zero_sparsity")
        rows = block_error_comparison(self.model, self.rotated, self.held_out, 0.0)
        self.assertEqual(len(rows), TINY.n_layers * 4)
        for row in rows:
            self.assertEqual(row["magnitude_error"], 0.0)
            self.assertEqual(row["rotated_error"], 0.0)
            self.assertTrue(row["rotated_wins"])
        half = block_error_comparison(self.model, self.rotated, self.held_out, 0.5)
        for row in half:
            self.assertGreater(row["magnitude_sparsity"], 0.0)
            self.assertLess(row["magnitude_sparsity"], 1.0)
        print("Test Passed.")

    def test_dominance_fraction(self):
        print("\nTesting: test_dominance_fraction")
        rows = [{"rotated_topk": 0.1, "magnitude": 0.2}, {"rotated_topk": 0.3, "magnitude": 0.2},
                {"rotated_topk": 0.2, "magnitude": 0.2}, {"rotated_topk": 0.0, "magnitude": 0.5}]
        self.assertEqual(rotated_dominance(rows), 0.75)
        self.assertEqual(rotated_dominance([]), 0.0)
        print("Test Passed.")

    @unittest.skipUnless(SLOW, "set ROSA_RUN_SLOW=1 for the multi-seed dominance check")
    def test_rotated_topk_beats_magnitude_pruning(self):
        print("\nTesting: test_rotated_topk_beats_magnitude_pruning")
        wins, total = 0, 0
        for seed in range(5):
            model = synth_model(ModelConfig(seed=seed))
            calib = synth_token_streams(model.config.vocab, 16, 64, seed=seed)
            rotated = build_rotated_model(model, calib)
            for sparsity in (0.25, 0.5):
                rows = block_error_comparison(model, rotated, calib, sparsity)
                wins += sum(row["rotated_wins"] for row in rows)
                total += len(rows)
        self.assertGreaterEqual(wins / total, 0.9)
        print("Test Passed.")


if __name__ == '__main__':
    unittest.main()
