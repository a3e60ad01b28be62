import unittest
import sys
import os
import json
import tempfile

import numpy as np

# Add the root directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '.')))

from errors import ParseError, RejectedInputError, SchemaError
from rotation_engine import build_rotated_model
from toy_transformer import ModelConfig
from weight_utils import (
    load_rotated_model, load_rotations, load_token_file, load_weights, model_tensors,
    parse_synth_spec, read_weight_file, save_rotated_model, save_rotations, save_weights,
    synth_model, synth_token_streams, write_token_file, write_weight_file,
)

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=4, kv_groups=2, mlp_ratio=2.0, vocab=32, seed=6)


def write_raw(path, header: dict, payload: bytes) -> None:
    """Hand-built weight file: length prefix, JSON header, payload"""
    encoded = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(encoded).to_bytes(8, "little") + encoded + payload)


class TestWeightFileReader(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "w.safetensors")

    def tearDown(self):
        self.tmp.cleanup()

    def test_widens_supported_dtypes(self):
        print("\nTesting: test_widens_supported_dtypes")
        half = np.array([1.5, -2.0], dtype="<f2")
        single = np.array([[0.25, 3.0]], dtype="<f4")
        write_raw(self.path, {
            "a": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]},
            "b": {"dtype": "F32", "shape": [1, 2], "data_offsets": [4, 12]},
            "__metadata__": {"kind": "test"},
        }, half.tobytes() + single.tobytes())
        tensors, metadata = read_weight_file(self.path)
        self.assertEqual(metadata, {"kind": "test"})
        self.assertEqual(tensors["a"].dtype, np.float64)
        np.testing.assert_array_equal(tensors["a"], [1.5, -2.0])
        np.testing.assert_array_equal(tensors["b"], [[0.25, 3.0]])
        print("Test Passed.")

    def test_byte_count_mismatch(self):
        print("\nTesting: test_byte_count_mismatch")
        write_raw(self.path, {"w": {"dtype": "F64", "shape": [3, 4], "data_offsets": [0, 80]}}, bytes(80))
        with self.assertRaises(SchemaError) as ctx:
            read_weight_file(self.path)
        self.assertIn("96 expected", str(ctx.exception))
        self.assertEqual(ctx.exception.tensor, "w")
        write_raw(self.path, {"w": {"dtype": "F64", "shape": [3, 4], "data_offsets": [0, 96]}}, bytes(80))
        with self.assertRaises(SchemaError) as ctx:
            read_weight_file(self.path)
        self.assertIn("96 expected", str(ctx.exception))
        print("Test Passed.")

    def test_truncated_and_malformed_headers(self):
        print("\nTesting: test_truncated_and_malformed_headers")
        with open(self.path, "wb") as f:
            f.write(b"\x01\x02\x03")
        with self.assertRaises(ParseError) as ctx:
            read_weight_file(self.path)
        self.assertEqual(ctx.exception.position, 3)
        with open(self.path, "wb") as f:
            f.write((1000).to_bytes(8, "little") + b"{}")
        with self.assertRaises(ParseError) as ctx:
            read_weight_file(self.path)
        self.assertEqual(ctx.exception.position, 8)
        self.assertEqual(ctx.exception.exit_code, 2)
        with open(self.path, "wb") as f:
            f.write((5).to_bytes(8, "little") + b'{"a":')
        with self.assertRaises(ParseError) as ctx:
            read_weight_file(self.path)
        self.assertGreaterEqual(ctx.exception.position, 8)
        print("Test Passed.")

    def test_schema_errors(self):
        print("\nTesting: test_schema_errors")
        write_raw(self.path, {"w": {"dtype": "I32", "shape": [2], "data_offsets": [0, 8]}}, bytes(8))
        with self.assertRaises(SchemaError):
            read_weight_file(self.path)
        write_raw(self.path, {
            "a": {"dtype": "F64", "shape": [2], "data_offsets": [0, 16]},
            "b": {"dtype": "F64", "shape": [2], "data_offsets": [8, 24]},
        }, bytes(24))
        with self.assertRaises(SchemaError) as ctx:
            read_weight_file(self.path)
        self.assertEqual(ctx.exception.tensor, "b")
        print("Test Passed.")


class TestModelFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.safetensors")
        self.model = synth_model(TINY)

    def tearDown(self):
        self.tmp.cleanup()

    def test_model_round_trip(self):
        print("\nTesting: test_model_round_trip")
        save_weights(self.model, self.path)
        loaded = load_weights(self.path)
        self.assertEqual(loaded.config, TINY)
        self.assertFalse(loaded.norms_folded)
        original = model_tensors(self.model)
        for name, tensor in model_tensors(loaded).items():
            np.testing.assert_array_equal(tensor, original[name])
        print("Test Passed.")

    def test_missing_and_misshaped_tensors(self):
        print("\nTesting: test_missing_and_misshaped_tensors")
        metadata = {"config": TINY.model_dump_json()}
        tensors = model_tensors(self.model)
        del tensors["head"]
        write_weight_file(tensors, self.path, metadata)
        with self.assertRaises(SchemaError) as ctx:
            load_weights(self.path)
        self.assertEqual(ctx.exception.tensor, "head")
        tensors = model_tensors(self.model)
        tensors["layers.1.wq"] = np.zeros((16, 15))
        write_weight_file(tensors, self.path, metadata)
        with self.assertRaises(SchemaError) as ctx:
            load_weights(self.path)
        self.assertEqual(ctx.exception.tensor, "layers.1.wq")
        write_weight_file(model_tensors(self.model), self.path)
        with self.assertRaises(SchemaError):
            load_weights(self.path)
        print("Test Passed.")

    def test_rotated_model_round_trip(self):
        print("\nTesting: test_rotated_model_round_trip")
        calib = synth_token_streams(32, 4, 24, seed=1)
        rotated = build_rotated_model(self.model, calib)
        save_rotated_model(rotated, self.path)
        loaded = load_rotated_model(self.path)
        self.assertEqual(len(loaded.adapters), 1)
        np.testing.assert_array_equal(loaded.rotations[1].eigenvalues, rotated.rotations[1].eigenvalues)
        for a, b in zip(loaded.forward(calib), rotated.forward(calib)):
            np.testing.assert_array_equal(a, b)

        rotation_path = os.path.join(self.tmp.name, "rotations.safetensors")
        save_rotations(rotated.rotations, rotation_path)
        self.assertEqual(len(load_rotations(rotation_path, dim=16, count=2)), 2)
        with self.assertRaises(SchemaError):
            load_rotations(rotation_path, count=3)
        with self.assertRaises(SchemaError):
            load_rotations(rotation_path, dim=8)
        print("Test Passed.")


class TestSynthetic(unittest.TestCase):

    def test_seeded_models(self):
        print("\nTesting: test_seeded_models")
        a, b = synth_model(TINY), synth_model(TINY)
        c = synth_model(TINY.model_copy(update={"seed": 7}))
        for name, tensor in model_tensors(a).items():
            np.testing.assert_array_equal(tensor, model_tensors(b)[name])
        self.assertFalse(np.array_equal(a.layers[0].wq, c.layers[0].wq))
        print("Test Passed.")

    def test_weight_variance(self):
        print("\nTesting: test_weight_variance")
        model = synth_model(ModelConfig(seed=3))
        for name in ("wq", "wup", "wgate"):
            variance = getattr(model.layers[0], name).var()
            self.assertLess(abs(variance * 64 - 1.0), 0.1)
        print("Test Passed.")

    def test_parse_synth_spec(self):
        print("\nTesting: test_parse_synth_spec")
        config = parse_synth_spec("32,2,4,2,2.6875,128", seed=5)
        self.assertEqual((config.d_model, config.n_layers, config.vocab, config.seed), (32, 2, 128, 5))
        self.assertEqual(config.d_inter, 86)
        for bad in ("32,2,4", "32,2,4,2,x,128", "30,2,4,2,2.0,128"):
            with self.assertRaises(RejectedInputError):
                parse_synth_spec(bad, seed=0)
        print("Test Passed.")


class TestTokenStreams(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "tokens.bin")

    def tearDown(self):
        self.tmp.cleanup()

    def test_streams_and_files(self):
        print("\nTesting: test_streams_and_files")
        seqs = synth_token_streams(50, 3, 10, seed=2, distribution="zipf")
        self.assertEqual(len(seqs), 3)
        for a, b in zip(seqs, synth_token_streams(50, 3, 10, seed=2, distribution="zipf")):
            np.testing.assert_array_equal(a, b)
        write_token_file(seqs, self.path)
        loaded = load_token_file(self.path, seq_len=7, vocab=50)
        self.assertEqual(len(loaded), 4)
        np.testing.assert_array_equal(np.concatenate(loaded), np.concatenate(seqs)[:28])
        with self.assertRaises(RejectedInputError):
            synth_token_streams(50, 1, 10, seed=0, distribution="normal")
        print("Test Passed.")

    def test_bad_token_files(self):
        print("\nTesting: test_bad_token_files")
        with open(self.path, "wb") as f:
            f.write(np.array([1, 2, 99], dtype="<u4").tobytes())
        with self.assertRaises(ParseError) as ctx:
            load_token_file(self.path, seq_len=2, vocab=50)
        self.assertEqual(ctx.exception.position, 8)
        with open(self.path, "wb") as f:
            f.write(bytes(6))
        with self.assertRaises(ParseError):
            load_token_file(self.path, seq_len=1, vocab=50)
        with self.assertRaises(RejectedInputError):
            load_token_file(self.path, seq_len=0, vocab=50)
        print("Test Passed.")


if __name__ == '__main__':
    unittest.main()
