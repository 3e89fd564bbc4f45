import unittest, sys, os, csv, tempfile
from pathlib import Path

# Get the parent directory
parent_dir = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
from modules.errors import UnsupportedAlgorithm
from modules.bench import *


class TestBench(unittest.TestCase):
    def test_valid_accepted_invalid_rejected(self):
        report = run_bench(sol_config.ECDSA_P256, repetitions=2, valid=20, invalid=5, quiet=True)
        self.assertEqual(report.repetitions, 2)
        self.assertEqual(report.valid_verified, 40)
        self.assertEqual(report.invalid_rejected, 10)
        self.assertTrue(report.correct)
        self.assertEqual(len(report.keygen_samples), 4)
        self.assertGreater(report.sign_ms, 0.0)
        self.assertGreater(report.verify_ms, 0.0)

    def test_rsa(self):
        report = run_bench(sol_config.RSA2048, repetitions=1, valid=3, invalid=2, quiet=True)
        self.assertTrue(report.correct)

    def test_unknown_algorithm(self):
        with self.assertRaises(UnsupportedAlgorithm):
            run_bench("DSA", repetitions=1, quiet=True)

    def test_empty_report_is_not_correct(self):
        self.assertFalse(BenchReport(sol_config.ECDSA_P256).correct)

    def test_export(self):
        report = run_bench(sol_config.ECDSA_P256, repetitions=1, valid=4, invalid=1, quiet=True)
        with tempfile.TemporaryDirectory() as tmp:
            path = export_bench([report], Path(tmp) / "bench.csv")
            with open(path, newline="") as file:
                rows = list(csv.reader(file))
        self.assertEqual(rows[0], BENCH_COLUMNS)
        self.assertEqual(rows[1][0], sol_config.ECDSA_P256)
        self.assertEqual(rows[1][5:], ["4", "1"])


class TestCalibration(unittest.TestCase):
    def test_measured_lengths(self):
        calibration = measure_calibration(samples=5, algorithms=[sol_config.ECDSA_P256])
        sizes = calibration.for_algorithm(sol_config.ECDSA_P256)
        self.assertEqual(sizes.public_key_bytes, 92)
        self.assertIn(sizes.signature_bytes, range(68, 73))

    def test_saved_calibration_loads(self):
        calibration = measure_calibration(samples=3, algorithms=[sol_config.ECDSA_P256])
        with tempfile.TemporaryDirectory() as tmp:
            path = sizemodel.save_calibration(calibration, Path(tmp) / "calibration.yml")
            self.assertEqual(sizemodel.load_calibration(path), calibration)


if __name__ == "__main__":
    unittest.main()
