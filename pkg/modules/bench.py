"""Signature benchmark: two key pairs per repetition, kp1 signs the valid
payloads, kp2 signs the invalid ones, every signature is checked against
kp1's public key. Also measures the lengths SizeModel is calibrated with."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from tqdm import tqdm

import modules.keystore as keystore
import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
from modules.errors import UnsupportedAlgorithm

BENCH_COLUMNS = [
    "algorithm",
    "repetitions",
    "keygen_ms",
    "sign_ms",
    "verify_ms",
    "valid_verified",
    "invalid_rejected",
]


@dataclass
class BenchReport:
    algorithm: str
    repetitions: int = 0
    keygen_samples: List[float] = field(default_factory=list, repr=False)
    sign_samples: List[float] = field(default_factory=list, repr=False)
    verify_samples: List[float] = field(default_factory=list, repr=False)
    valid_verified: int = 0
    invalid_rejected: int = 0
    valid_signed: int = 0
    invalid_signed: int = 0

    @property
    def keygen_ms(self) -> float:
        """Mean milliseconds per generated key pair."""
        return float(np.mean(self.keygen_samples)) if self.keygen_samples else 0.0

    @property
    def sign_ms(self) -> float:
        return float(np.mean(self.sign_samples)) if self.sign_samples else 0.0

    @property
    def verify_ms(self) -> float:
        return float(np.mean(self.verify_samples)) if self.verify_samples else 0.0

    @property
    def correct(self) -> bool:
        return (
            self.repetitions > 0
            and self.valid_verified == self.valid_signed
            and self.invalid_rejected == self.invalid_signed
        )

    def row(self) -> list:
        return [
            self.algorithm,
            self.repetitions,
            round(self.keygen_ms, 4),
            round(self.sign_ms, 4),
            round(self.verify_ms, 4),
            self.valid_verified,
            self.invalid_rejected,
        ]


def _timed(fn, *args):
    start = time.perf_counter()
    result = fn(*args)
    return result, (time.perf_counter() - start) * 1000.0


def run_repetition(report: BenchReport, valid: int, invalid: int):
    kp1, t1 = _timed(keystore.generate_keypair, report.algorithm)
    kp2, t2 = _timed(keystore.generate_keypair, report.algorithm)
    report.keygen_samples += [t1, t2]

    payloads = [os.urandom(sol_config.BENCH_PAYLOAD_BYTES) for _ in range(valid + invalid)]
    signers = [kp1.private_handle] * valid + [kp2.private_handle] * invalid
    start = time.perf_counter()
    signatures = [signer.sign(p) for signer, p in zip(signers, payloads)]
    report.sign_samples.append((time.perf_counter() - start) * 1000.0 / len(payloads))

    start = time.perf_counter()
    verdicts = [keystore.verify(kp1.public, p, s) for p, s in zip(payloads, signatures)]
    report.verify_samples.append((time.perf_counter() - start) * 1000.0 / len(payloads))

    report.valid_verified += sum(verdicts[:valid])
    report.invalid_rejected += sum(1 for ok in verdicts[valid:] if not ok)
    report.valid_signed += valid
    report.invalid_signed += invalid
    report.repetitions += 1


def run_bench(
    algorithm: str,
    repetitions: int = sol_config.BENCH_REPETITIONS,
    valid: int = sol_config.BENCH_VALID_SIGNATURES,
    invalid: int = sol_config.BENCH_INVALID_SIGNATURES,
    quiet: bool = False,
) -> BenchReport:
    if algorithm not in sol_config.ALGORITHMS:
        raise UnsupportedAlgorithm(f"unsupported signature algorithm {algorithm!r}")
    report = BenchReport(algorithm)
    for _ in tqdm(range(repetitions), desc=f"Benchmarking {algorithm}", leave=False, disable=quiet):
        run_repetition(report, valid, invalid)
    return report


def export_bench(reports: List[BenchReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        writer.writerows(r.row() for r in reports)
    return path


def measure_calibration(samples: int = 50, algorithms: Optional[List[str]] = None) -> sizemodel.Calibration:
    """Key and (mean, rounded) signature lengths of real key pairs."""
    sizes = {}
    for algorithm in algorithms or sol_config.ALGORITHMS:
        keypair = keystore.generate_keypair(algorithm)
        lengths = [len(keypair.private_handle.sign(os.urandom(sol_config.BENCH_PAYLOAD_BYTES))) for _ in range(samples)]
        sizes[algorithm] = sizemodel.AlgorithmSizes(
            public_key_bytes=len(keypair.public.encoded),
            signature_bytes=int(round(float(np.mean(lengths)))),
        )
    return sizemodel.Calibration(sizes)
