"""SizeModel crypto: deterministic placeholder keys and signatures whose
lengths come from a calibration file measured once in Real mode.

Placeholder signatures are SHAKE-256 over their length, key and payload, so
they verify by recomputation and any tampering is still detected."""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import yaml

import modules.sol_config as sol_config
from modules.errors import MissingCalibration
from modules.model import PublicKeyBytes


@dataclass(frozen=True)
class AlgorithmSizes:
    public_key_bytes: int
    signature_bytes: int


@dataclass(frozen=True)
class Calibration:
    sizes: Dict[str, AlgorithmSizes]

    def for_algorithm(self, algorithm: str) -> AlgorithmSizes:
        if algorithm not in self.sizes:
            raise MissingCalibration(f"calibration has no entry for {algorithm}")
        return self.sizes[algorithm]

    def to_mapping(self) -> dict:
        return {
            alg: {
                "public_key_bytes": s.public_key_bytes,
                "signature_bytes": s.signature_bytes,
            }
            for alg, s in sorted(self.sizes.items())
        }


def default_calibration_path() -> Path:
    env = os.environ.get(sol_config.ENV_CALIBRATION)
    if env:
        return Path(env)
    return Path(__file__).resolve().parent.parent / sol_config.DEFAULT_CALIBRATION_FILE


def load_calibration(path=None) -> Calibration:
    path = Path(path) if path else default_calibration_path()
    if not path.is_file():
        raise MissingCalibration(f"calibration file {path} not found (run `sealights.py calibrate`)")
    with open(path, "r") as file:
        data = yaml.safe_load(file) or {}
    sizes = {}
    try:
        for alg, entry in data.items():
            if alg not in sol_config.ALGORITHMS:
                continue
            sizes[alg] = AlgorithmSizes(
                public_key_bytes=int(entry["public_key_bytes"]),
                signature_bytes=int(entry["signature_bytes"]),
            )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise MissingCalibration(f"calibration file {path} is malformed: {e}") from e
    if not sizes:
        raise MissingCalibration(f"calibration file {path} has no algorithm entries")
    for alg, s in sizes.items():
        if s.public_key_bytes <= 9 or s.signature_bytes <= 0:
            raise MissingCalibration(f"calibration for {alg} has implausible lengths")
    return Calibration(sizes)


def save_calibration(calibration: Calibration, path) -> Path:
    path = Path(path)
    with open(path, "w") as file:
        yaml.safe_dump(calibration.to_mapping(), file, sort_keys=True)
    return path


def modeled_public_key(algorithm: str, seed: int, calibration: Calibration) -> PublicKeyBytes:
    sizes = calibration.for_algorithm(algorithm)
    tag = sol_config.ALGORITHM_TAGS[algorithm] | sol_config.MODELED_TAG_BIT
    body = hashlib.shake_256(f"sol-model-key/{algorithm}/{seed}".encode()).digest(
        sizes.public_key_bytes - 1
    )
    return PublicKeyBytes(algorithm, bytes([tag]) + body)


def _model_signature(key: PublicKeyBytes, payload: bytes, length: int) -> bytes:
    # the length is hashed in, so a truncated signature does not verify
    return hashlib.shake_256(length.to_bytes(2, "big") + key.encoded + payload).digest(length)


def size_model_sign(key: PublicKeyBytes, payload: bytes, calibration: Calibration) -> bytes:
    length = calibration.for_algorithm(key.algorithm).signature_bytes
    return _model_signature(key, payload, length)


def size_model_verify(key: PublicKeyBytes, payload: bytes, sig: bytes) -> bool:
    if not key.modeled or not sig:
        return False
    return hmac.compare_digest(_model_signature(key, payload, len(sig)), sig)
