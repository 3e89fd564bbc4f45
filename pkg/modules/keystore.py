"""Key Management Layer: generation, sealed storage and use of the device
authentication key, plus sub-key registration."""

from __future__ import annotations

import hmac
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

from Crypto.PublicKey import RSA as CryptoRSA
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.exceptions import UnsupportedAlgorithm as CryptoUnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC

import modules.helpers as helpers
import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
from modules.errors import (
    MalformedEncoding,
    SelfCertificateRejected,
    StoreCorrupt,
    StoreLocked,
    SubkeyLimitReached,
    UnsupportedAlgorithm,
    WrongPin,
)
from modules.model import (
    Certificate,
    PublicKeyBytes,
    SubKeyCertificate,
    certificate_payload,
    decode_public_key,
    fingerprint,
    key_id,
    subkey_payload,
    validate_app_tag,
)

# Order of the P-256 base point
P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
RSA_KEY_BITS = 2048
RSA_PUBLIC_EXPONENT = 65537


@dataclass
class OpCounter:
    sign_ops: int = 0
    verify_ops: int = 0


class RealSigner:
    def __init__(self, private_key):
        self._key = private_key

    def sign(self, payload: bytes) -> bytes:
        if isinstance(self._key, rsa.RSAPrivateKey):
            return self._key.sign(payload, padding.PKCS1v15(), hashes.SHA256())
        return self._key.sign(payload, ec.ECDSA(hashes.SHA256()))

    def private_der(self) -> bytes:
        return self._key.private_bytes(
            encoding=serialization.Encoding.DER,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )


class ModeledSigner:
    def __init__(self, public: PublicKeyBytes, calibration: sizemodel.Calibration):
        self._public = public
        self._calibration = calibration

    def sign(self, payload: bytes) -> bytes:
        return sizemodel.size_model_sign(self._public, payload, self._calibration)

    def private_der(self) -> bytes:
        raise StoreCorrupt("SizeModel keys have no private key material to seal")


@dataclass(frozen=True)
class DeviceKeyPair:
    public: PublicKeyBytes
    private_handle: object = field(repr=False, compare=False)

    @property
    def fingerprint(self):
        return fingerprint(self.public)


def encode_cryptography_public(public_key, algorithm: str) -> PublicKeyBytes:
    der = public_key.public_bytes(
        encoding=serialization.Encoding.DER,
        format=serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return PublicKeyBytes(algorithm, bytes([sol_config.ALGORITHM_TAGS[algorithm]]) + der)


def _generate_private_key(algorithm: str, rng_seed: Optional[int]):
    if algorithm == sol_config.RSA2048:
        if rng_seed is None:
            return rsa.generate_private_key(public_exponent=RSA_PUBLIC_EXPONENT, key_size=RSA_KEY_BITS)
        seeded = CryptoRSA.generate(
            RSA_KEY_BITS, randfunc=helpers.seeded_randfunc(rng_seed), e=RSA_PUBLIC_EXPONENT
        )
        return serialization.load_der_private_key(seeded.export_key(format="DER", pkcs=8), password=None)
    if rng_seed is None:
        return ec.generate_private_key(ec.SECP256R1())
    material = helpers.seeded_randfunc(rng_seed)(40)
    scalar = int.from_bytes(material, "big") % (P256_ORDER - 1) + 1
    return ec.derive_private_key(scalar, ec.SECP256R1())


def generate_keypair(
    algorithm: str,
    rng_seed: Optional[int] = None,
    crypto_mode: str = "Real",
    calibration: Optional[sizemodel.Calibration] = None,
) -> DeviceKeyPair:
    """Fresh key pair; deterministic whenever `rng_seed` is given."""
    if algorithm not in sol_config.ALGORITHMS:
        raise UnsupportedAlgorithm(f"unsupported signature algorithm {algorithm!r}")
    if crypto_mode == "SizeModel":
        calibration = calibration or sizemodel.load_calibration()
        seed = rng_seed if rng_seed is not None else int.from_bytes(os.urandom(8), "big")
        public = sizemodel.modeled_public_key(algorithm, seed, calibration)
        return DeviceKeyPair(public, ModeledSigner(public, calibration))
    private_key = _generate_private_key(algorithm, rng_seed)
    public = encode_cryptography_public(private_key.public_key(), algorithm)
    return DeviceKeyPair(public, RealSigner(private_key))


@lru_cache(maxsize=4096)
def _load_public(encoded: bytes):
    try:
        key = decode_public_key(encoded)
        loaded = serialization.load_der_public_key(key.body)
    except (MalformedEncoding, ValueError, TypeError, CryptoUnsupportedAlgorithm):
        return None
    if key.algorithm == sol_config.RSA2048 and isinstance(loaded, rsa.RSAPublicKey):
        return loaded
    if key.algorithm == sol_config.ECDSA_P256 and isinstance(loaded, ec.EllipticCurvePublicKey):
        return loaded
    return None


def verify(key: PublicKeyBytes, payload: bytes, sig: bytes, counter: Optional[OpCounter] = None) -> bool:
    """True iff `sig` is a valid signature of `payload` under `key`. Never raises."""
    if counter is not None:
        counter.verify_ops += 1
    try:
        if not key.encoded or not sig:
            return False
        if key.modeled:
            return sizemodel.size_model_verify(key, bytes(payload), bytes(sig))
        loaded = _load_public(bytes(key.encoded))
        if loaded is None:
            return False
        if isinstance(loaded, rsa.RSAPublicKey):
            loaded.verify(bytes(sig), bytes(payload), padding.PKCS1v15(), hashes.SHA256())
        else:
            loaded.verify(bytes(sig), bytes(payload), ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError, TypeError, IndexError, AttributeError):
        return False


class KeyManager(ABC):
    """Backend holding the device authentication key."""

    name = "abstract"
    priority = 0

    @property
    @abstractmethod
    def public_key(self) -> PublicKeyBytes:
        ...

    @property
    @abstractmethod
    def is_locked(self) -> bool:
        ...

    @abstractmethod
    def lock(self):
        ...

    @abstractmethod
    def unlock(self, pin: str):
        ...

    @abstractmethod
    def sign(self, payload: bytes) -> bytes:
        ...

    @property
    def fingerprint(self):
        return fingerprint(self.public_key)


def _derive_seal_key(pin: str, salt: bytes, iterations: int) -> bytes:
    kdf = PBKDF2HMAC(algorithm=hashes.SHA256(), length=32, salt=salt, iterations=iterations)
    return kdf.derive(pin.encode("utf-8"))


class SoftwareKeystore(KeyManager):
    """PIN-protected software keystore.

    On disk: Base64 of header (magic, version, algorithm tag, KDF iterations,
    salt, issued sub-key count, public key) followed by the AES-GCM nonce and
    the sealed PKCS#8 private key. The header is authenticated as AAD."""

    name = "software"
    priority = 10

    def __init__(self, public: PublicKeyBytes, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self._public = public
        self.salt = b""
        self.iterations = 0
        self.sealed_blob = b""
        self.subkeys_issued = 0
        self.counter = OpCounter()
        self._signer = None
        self._seal_key = None
        self._ephemeral_pin = None
        self._ephemeral_handle = None

    @classmethod
    def create(
        cls,
        path,
        pin: str,
        algorithm: str = sol_config.ECDSA_P256,
        rng_seed: Optional[int] = None,
        iterations: int = sol_config.KDF_ITERATIONS,
        keypair: Optional[DeviceKeyPair] = None,
    ) -> "SoftwareKeystore":
        """Generate (or adopt) a key pair, seal it under `pin` and write the
        store. The returned store is unlocked."""
        keypair = keypair or generate_keypair(algorithm, rng_seed)
        store = cls(keypair.public, path)
        store.salt = os.urandom(sol_config.KDF_SALT_BYTES)
        store.iterations = iterations
        store._seal_key = _derive_seal_key(pin, store.salt, iterations)
        store._signer = keypair.private_handle
        store._reseal()
        store.save()
        return store

    @classmethod
    def ephemeral(cls, keypair: DeviceKeyPair, pin: str = "") -> "SoftwareKeystore":
        """Unlocked in-memory store for simulations; never sealed or written."""
        store = cls(keypair.public)
        store._signer = keypair.private_handle
        store._ephemeral_pin = pin
        store._ephemeral_handle = keypair.private_handle
        return store

    @classmethod
    def open(cls, path) -> "SoftwareKeystore":
        """Read a store from disk. The returned store is locked."""
        path = Path(path)
        try:
            raw = helpers.b64_decode(path.read_bytes())
            reader = helpers.Reader(raw)
            if reader.take(4) != sol_config.KEYSTORE_MAGIC:
                raise StoreCorrupt(f"{path}: bad keystore magic")
            version = reader.u8()
            if version != sol_config.KEYSTORE_VERSION:
                raise StoreCorrupt(f"{path}: unsupported keystore version {version}")
            reader.u8()  # algorithm tag, repeated in the public key
            iterations = reader.u32()
            salt = reader.blob()
            subkeys_issued = reader.u16()
            public = decode_public_key(reader.blob())
            sealed = reader.rest()
        except MalformedEncoding as e:
            raise StoreCorrupt(f"{path}: {e}") from e
        if len(sealed) <= sol_config.AEAD_NONCE_BYTES:
            raise StoreCorrupt(f"{path}: sealed blob is truncated")
        store = cls(public, path)
        store.iterations = iterations
        store.salt = salt
        store.subkeys_issued = subkeys_issued
        store.sealed_blob = sealed
        return store

    def _header(self) -> bytes:
        return (
            sol_config.KEYSTORE_MAGIC
            + helpers.pack_u8(sol_config.KEYSTORE_VERSION)
            + helpers.pack_u8(self._public.encoded[0])
            + helpers.pack_u32(self.iterations)
            + helpers.pack_blob(self.salt)
            + helpers.pack_u16(self.subkeys_issued)
            + helpers.pack_blob(self._public.encoded)
        )

    def _reseal(self):
        nonce = os.urandom(sol_config.AEAD_NONCE_BYTES)
        sealed = AESGCM(self._seal_key).encrypt(nonce, self._signer.private_der(), self._header())
        self.sealed_blob = nonce + sealed

    def serialize(self) -> bytes:
        return helpers.b64_encode(self._header() + self.sealed_blob)

    def save(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_bytes(self.serialize())

    @property
    def public_key(self) -> PublicKeyBytes:
        return self._public

    @property
    def is_locked(self) -> bool:
        return self._signer is None

    def lock(self):
        self._signer = None
        self._seal_key = None

    def unlock(self, pin: str):
        if self._ephemeral_pin is not None:
            if not hmac.compare_digest(pin.encode(), self._ephemeral_pin.encode()):
                raise WrongPin("wrong PIN")
            self._signer = self._ephemeral_handle
            return
        seal_key = _derive_seal_key(pin, self.salt, self.iterations)
        nonce = self.sealed_blob[: sol_config.AEAD_NONCE_BYTES]
        try:
            private_der = AESGCM(seal_key).decrypt(
                nonce, self.sealed_blob[sol_config.AEAD_NONCE_BYTES :], self._header()
            )
        except InvalidTag:
            raise WrongPin("wrong PIN") from None
        try:
            private_key = serialization.load_der_private_key(private_der, password=None)
        except (ValueError, TypeError, CryptoUnsupportedAlgorithm) as e:
            raise StoreCorrupt(f"sealed key material is unreadable: {e}") from e
        if encode_cryptography_public(private_key.public_key(), self._public.algorithm) != self._public:
            raise StoreCorrupt("sealed private key does not match the stored public key")
        self._signer = RealSigner(private_key)
        self._seal_key = seal_key

    def sign(self, payload: bytes) -> bytes:
        if self._signer is None:
            raise StoreLocked("keystore is locked")
        sig = self._signer.sign(payload)
        self.counter.sign_ops += 1
        return sig

    def record_subkey_issued(self):
        self.subkeys_issued += 1
        if self._seal_key is not None:
            self._reseal()
            self.save()


# Known key managers, highest priority first. Hardware backends would register
# here with a higher priority than the software store.
KEY_MANAGERS = {SoftwareKeystore.name: SoftwareKeystore}


def select_key_manager(available=None):
    """Pick the highest-priority manager among `available` names (all
    registered managers when None)."""
    names = list(KEY_MANAGERS) if available is None else [n for n in available if n in KEY_MANAGERS]
    if not names:
        return SoftwareKeystore
    return max((KEY_MANAGERS[n] for n in names), key=lambda m: m.priority)


def issue_certificate(store: KeyManager, subject_key: PublicKeyBytes, now: int) -> Certificate:
    if store.is_locked:
        raise StoreLocked("keystore is locked")
    issuer_fp = store.fingerprint
    subject_fp = fingerprint(subject_key)
    if subject_fp == issuer_fp:
        raise SelfCertificateRejected("refusing to certify the device's own key")
    sig = store.sign(certificate_payload(subject_key, issuer_fp, int(now)))
    return Certificate(
        issuer_fp=issuer_fp,
        subject_fp=subject_fp,
        subject_keyid=key_id(subject_key),
        issued_at=int(now),
        sig=sig,
    )


def verify_certificate(
    cert: Certificate,
    subject_key: PublicKeyBytes,
    issuer_key: PublicKeyBytes,
    counter: Optional[OpCounter] = None,
) -> bool:
    if cert.issuer_fp == cert.subject_fp:
        return False
    if fingerprint(subject_key) != cert.subject_fp or fingerprint(issuer_key) != cert.issuer_fp:
        return False
    if key_id(subject_key) != cert.subject_keyid:
        return False
    payload = certificate_payload(subject_key, cert.issuer_fp, cert.issued_at)
    return verify(issuer_key, payload, cert.sig, counter)


def register_subkey(
    store: SoftwareKeystore,
    subkey_public: PublicKeyBytes,
    app_tag: str,
    now: int,
    maxsubkeys: int = sol_config.TRUST_DEFAULTS["maxsubkeys"],
) -> SubKeyCertificate:
    """Certify an application sub-key with the device authentication key.
    Lifetime issuances are counted against `maxsubkeys`."""
    if store.is_locked:
        raise StoreLocked("keystore is locked")
    validate_app_tag(app_tag)
    if store.subkeys_issued >= maxsubkeys:
        raise SubkeyLimitReached(f"device already issued {store.subkeys_issued} of {maxsubkeys} sub-keys")
    sig = store.sign(subkey_payload(subkey_public, app_tag, int(now)))
    store.record_subkey_issued()
    return SubKeyCertificate(
        device_fp=store.fingerprint,
        subkey=subkey_public,
        app_tag=app_tag,
        issued_at=int(now),
        sig=sig,
    )


def verify_subkey_certificate(
    cert: SubKeyCertificate, device_key: PublicKeyBytes, counter: Optional[OpCounter] = None
) -> bool:
    if fingerprint(device_key) != cert.device_fp:
        return False
    return verify(device_key, subkey_payload(cert.subkey, cert.app_tag, cert.issued_at), cert.sig, counter)
