import unittest
import sys
import os
from dataclasses import FrozenInstanceError

import numpy as np

# Add the root directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '.')))

from constants import CALIB_LEN, CALIB_SEQS
from errors import RejectedInputError
from rotation_engine import (
    CovarianceAccumulator, RotationMatrix, build_rotated_model, build_rotation, calibration_pass,
    covariance_accumulate, explained_variance, merge_rotations, residual_adapter,
)
from numeric_core import jacobi_eigh, random_orthogonal
from sparsifier import SparsityPlan
from toy_transformer import (
    ForwardTrace, ModelConfig, Mode, fold_norm_gains, forward_sequences, sequence_output_error,
)
from weight_utils import synth_model, synth_token_streams

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=4, kv_groups=2, mlp_ratio=2.0, vocab=32, seed=4)


class TestCovariance(unittest.TestCase):

    def test_accumulate_and_merge(self):
        print("\nTesting: test_accumulate_and_merge")
        rng = np.random.default_rng(1)
        batches = [rng.standard_normal((n, 6)) for n in (3, 9, 1)]
        whole = CovarianceAccumulator(6)
        for x in batches:
            covariance_accumulate(whole, x)
        left = CovarianceAccumulator(6).accumulate(batches[0])
        right = CovarianceAccumulator(6).accumulate(batches[1]).accumulate(batches[2])
        merged = left.merge(right).finalize()
        oracle = sum(x.T @ x for x in batches) / 3
        np.testing.assert_allclose(whole.finalize(), oracle, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(merged, oracle, rtol=1e-13, atol=1e-13)
        np.testing.assert_array_equal(whole.finalize(), whole.finalize().T)
        print("Test Passed.")

    def test_rejects_bad_batches(self):
        print("\nTesting: test_rejects_bad_batches")
        with self.assertRaises(RejectedInputError):
            CovarianceAccumulator(4).finalize()
        with self.assertRaises(RejectedInputError):
            CovarianceAccumulator(4).accumulate(np.ones((2, 5)))
        with self.assertRaises(RejectedInputError):
            CovarianceAccumulator(4).merge(CovarianceAccumulator(3))
        print("Test Passed.")


class TestCalibrationPass(unittest.TestCase):

    def test_single_token_covariance(self):
        print("\nTesting: test_single_token_covariance")
        model = synth_model(TINY)
        accs = calibration_pass(model, [np.array([7])])
        row = model.embed[7]
        np.testing.assert_allclose(accs[0].finalize(), np.outer(row, row), rtol=1e-14, atol=1e-14)
        self.assertEqual(len(accs), TINY.n_layers)
        print("Test Passed.")

    def test_duplicates_and_store_all_oracle(self):
        print("\nTesting: test_duplicates_and_store_all_oracle")
        model = synth_model(TINY)
        seqs = synth_token_streams(32, 4, 12, seed=2)
        accs = calibration_pass(model, seqs)
        doubled = calibration_pass(model, seqs + seqs)
        trace = ForwardTrace(capture_layer_inputs=True)
        forward_sequences(model, seqs, trace=trace)
        for layer in range(TINY.n_layers):
            oracle = sum(x.T @ x for x in trace.layer_inputs[layer]) / len(seqs)
            np.testing.assert_allclose(accs[layer].finalize(), oracle, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(doubled[layer].finalize(), accs[layer].finalize(), rtol=1e-12, atol=1e-12)
        with self.assertRaises(RejectedInputError):
            calibration_pass(model, [])
        print("Test Passed.")

    def test_default_model_covariances_converge(self):
        print("\nTesting: test_default_model_covariances_converge")
        for seed in range(5):
            config = ModelConfig(seed=seed)
            model = synth_model(config)
            calib = synth_token_streams(config.vocab, CALIB_SEQS, CALIB_LEN, seed=seed)
            for layer, acc in enumerate(calibration_pass(model, calib)):
                cov = acc.finalize()
                vals, vecs = jacobi_eigh(cov)
                residual = np.linalg.norm(vecs @ np.diag(vals) @ vecs.T - cov) / np.linalg.norm(cov)
                self.assertLess(residual, 1e-10, f"seed {seed} layer {layer}")
                self.assertTrue(np.all(np.diff(vals) <= 0.0))
        print("Test Passed.")


class TestRotation(unittest.TestCase):

    def test_diagonal_covariance(self):
        print("\nTesting: test_diagonal_covariance")
        rotation = build_rotation(np.diag([1.0, 3.0, 2.0]))
        np.testing.assert_array_equal(rotation.eigenvalues, [3.0, 2.0, 1.0])
        np.testing.assert_array_equal(rotation.q, np.eye(3)[:, [1, 2, 0]])
        np.testing.assert_allclose(explained_variance(np.diag([1.0, 3.0, 2.0]), rotation),
                                   [0.5, 5.0 / 6.0, 1.0], rtol=1e-15)
        print("Test Passed.")

    def test_negative_eigenvalues(self):
        print("\nTesting: test_negative_eigenvalues")
        clamped = build_rotation(np.diag([1.0, -1e-12]))
        np.testing.assert_array_equal(clamped.eigenvalues, [1.0, 0.0])
        with self.assertRaises(RejectedInputError):
            build_rotation(np.diag([1.0, -0.5]))
        with self.assertRaises(RejectedInputError):
            build_rotation(np.array([[1.0, 0.2], [0.0, 1.0]]))
        print("Test Passed.")

    def test_adapter_is_orthogonal(self):
        print("\nTesting: test_adapter_is_orthogonal")
        rng = np.random.default_rng(6)
        a = RotationMatrix(random_orthogonal(8, rng))
        b = RotationMatrix(random_orthogonal(8, rng))
        adapter = residual_adapter(a, b)
        np.testing.assert_allclose(adapter.T @ adapter, np.eye(8), atol=1e-12)
        np.testing.assert_allclose(a.q @ adapter, b.q, atol=1e-12)
        with self.assertRaises(RejectedInputError):
            residual_adapter(a, RotationMatrix.identity(4))
        with self.assertRaises(RejectedInputError):
            RotationMatrix(np.ones((2, 3)))
        print("Test Passed.")


class TestMerge(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = synth_model(TINY)
        cls.calib = synth_token_streams(32, 4, 24, seed=11)
        cls.held_out = synth_token_streams(32, 3, 20, seed=12, distribution="zipf")
        cls.dense = forward_sequences(cls.model, cls.held_out)

    def test_identity_rotations_leave_folded_weights(self):
        print("\nTesting: test_identity_rotations_leave_folded_weights")
        rotated = merge_rotations(self.model, [RotationMatrix.identity(16)] * TINY.n_layers)
        folded = fold_norm_gains(self.model)
        for merged, reference in zip(rotated.layers, folded.layers):
            for name in ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown"):
                np.testing.assert_array_equal(getattr(merged, name), getattr(reference, name))
        np.testing.assert_array_equal(rotated.model.embed, folded.embed)
        np.testing.assert_array_equal(rotated.model.head, folded.head)
        np.testing.assert_array_equal(rotated.adapters[0], np.eye(16))
        print("Test Passed.")

    def test_rotated_model_is_invariant(self):
        print("\nTesting: test_rotated_model_is_invariant")
        rotated = build_rotated_model(self.model, self.calib)
        self.assertEqual(len(rotated.adapters), TINY.n_layers - 1)
        self.assertLess(rotated.max_orthogonality_error(), 1e-10)
        self.assertTrue(rotated.metadata["gains_folded_before_merge"])
        err = sequence_output_error(rotated.forward(self.held_out), self.dense)
        self.assertLess(err["max"], 1e-6)
        plan = SparsityPlan.uniform(0.0, TINY.m)
        full_budget = rotated.forward(self.held_out, mode=Mode.LAROSA, plan=plan)
        self.assertLess(sequence_output_error(full_budget, self.dense)["max"], 1e-6)
        with self.assertRaises(FrozenInstanceError):
            rotated.adapters = []
        print("Test Passed.")

    def test_random_rotations_are_invariant(self):
        print("\nTesting: test_random_rotations_are_invariant")
        rng = np.random.default_rng(21)
        shapes = [(8, 1, 2, 1), (16, 2, 4, 2), (24, 3, 6, 3), (32, 2, 8, 8), (12, 1, 3, 1)]
        for seed in range(10):
            d, layers, heads, groups = shapes[seed % len(shapes)]
            config = ModelConfig(d_model=d, n_layers=layers, n_heads=heads, kv_groups=groups,
                                 mlp_ratio=2.6875, vocab=32, seed=seed)
            model = synth_model(config)
            rotations = [RotationMatrix(random_orthogonal(d, rng)) for _ in range(layers)]
            rotated = merge_rotations(model, rotations)
            err = sequence_output_error(rotated.forward(self.held_out), forward_sequences(model, self.held_out))
            self.assertLess(err["max"], 1e-6)
        print("Test Passed.")

    def test_rotated_basis_orders_variance(self):
        print("\nTesting: test_rotated_basis_orders_variance")
        trace = ForwardTrace(capture_layer_inputs=True)
        forward_sequences(self.model, self.calib, trace=trace)
        x = np.vstack(trace.layer_inputs[0])
        acc = CovarianceAccumulator(16)
        for block in trace.layer_inputs[0]:
            acc.accumulate(block)
        rotation = build_rotation(acc.finalize())
        energy = (x @ rotation.q) ** 2
        second_moment = energy.sum(axis=0) / len(self.calib)
        np.testing.assert_allclose(second_moment, rotation.eigenvalues, rtol=1e-8, atol=1e-10)
        self.assertTrue(np.all(np.diff(second_moment) <= 1e-9 * second_moment[0]))
        print("Test Passed.")

    def test_larosa_error_grows_with_sparsity(self):
        print("\nTesting: test_larosa_error_grows_with_sparsity")
        for seed in range(5):
            model = synth_model(TINY.model_copy(update={"seed": seed}))
            calib = synth_token_streams(32, 4, 24, seed=100 + seed)
            rotated = build_rotated_model(model, calib)
            dense = forward_sequences(model, self.held_out)
            errors = [sequence_output_error(rotated.forward(self.held_out, mode=Mode.LAROSA,
                                                            plan=SparsityPlan.uniform(p, TINY.m)), dense)["mean"]
                      for p in (0.0, 0.25, 0.5, 0.75)]
            self.assertLess(errors[0], 1e-6)
            self.assertTrue(all(a <= b for a, b in zip(errors, errors[1:])))
        print("Test Passed.")

    def test_merge_rejects_mismatched_rotations(self):
        print("\nTesting: test_merge_rejects_mismatched_rotations")
        with self.assertRaises(RejectedInputError):
            merge_rotations(self.model, [RotationMatrix.identity(16)])
        with self.assertRaises(RejectedInputError):
            merge_rotations(self.model, [RotationMatrix.identity(8)] * TINY.n_layers)
        print("Test Passed.")


if __name__ == '__main__':
    unittest.main()
