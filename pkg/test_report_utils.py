import unittest
import sys
import os
import json
import math
import tempfile

import numpy as np

# Add the root directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '.')))

from report_utils import build_report, read_csv, summarize_frame, to_json, write_csv, write_json_report
from sparsifier import Site, SparsityPlan


class TestReports(unittest.TestCase):

    def test_json_handles_numpy_and_models(self):
        print("\nTesting: test_json_handles_numpy_and_models")
        plan = SparsityPlan.uniform(0.5, 2.0)
        report = build_report("eval", plan, 7, {
            "count": np.int64(3), "value": np.float64(0.25), "flag": np.bool_(True),
            "vector": np.arange(3), "site": Site.H2, "worst": math.inf, "missing": math.nan,
        })
        parsed = json.loads(to_json(report))
        self.assertEqual(parsed["seed"], 7)
        self.assertEqual(parsed["config"]["p"], 0.5)
        results = parsed["results"]
        self.assertEqual(results["count"], 3)
        self.assertIs(results["flag"], True)
        self.assertEqual(results["vector"], [0, 1, 2])
        self.assertEqual(results["site"], "h2")
        self.assertEqual(results["worst"], "inf")
        self.assertIsNone(results["missing"])
        print("Test Passed.")

    def test_files(self):
        print("\nTesting: test_files")
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json_report({"a": 1}, os.path.join(tmp, "nested", "r.json"))
            self.assertEqual(json.loads(path.read_text()), {"a": 1})
            csv_path = write_csv([{"b": 2, "a": 1, "extra": 9}, {"a": 3}], ["a", "b"], os.path.join(tmp, "t.csv"))
            frame = read_csv(csv_path)
            self.assertEqual(list(frame.columns), ["a", "b"])
            self.assertEqual(frame["a"].tolist(), [1, 3])
            self.assertTrue(math.isnan(frame["b"][1]))
        print("Test Passed.")

    def test_summarize_frame(self):
        print("\nTesting: test_summarize_frame")
        records = [{"site": "h1", "mean": 0.5}, {"site": "h1", "mean": 0.7}, {"site": "h4", "mean": 0.2}]
        summary = summarize_frame(records, "site", "mean")
        self.assertAlmostEqual(summary["h1"]["mean"], 0.6, places=12)
        self.assertEqual(summary["h4"]["std"], 0.0)
        self.assertIsNone(summarize_frame([], "site", "mean"))
        print("Test Passed.")


if __name__ == '__main__':
    unittest.main()
