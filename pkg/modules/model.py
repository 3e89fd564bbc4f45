"""Core domain types shared by every layer: keys, fingerprints, trust levels,
certificates, sub-key certificates and the trust configuration, together with
their canonical byte encodings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from enum import IntEnum
from typing import Union

import modules.helpers as helpers
import modules.sol_config as sol_config
from modules.errors import EncodingTooShort, InvalidConfig, MalformedEncoding

TAG_TO_ALGORITHM = {tag: alg for alg, tag in sol_config.ALGORITHM_TAGS.items()}
FINGERPRINT_BYTES = 32
KEY_ID_BYTES = 8


@dataclass(frozen=True)
class PublicKeyBytes:
    """Canonical public key: one algorithm tag byte followed by the
    SubjectPublicKeyInfo DER body (or placeholder bytes for SizeModel keys)."""

    algorithm: str
    encoded: bytes

    @property
    def modeled(self) -> bool:
        return bool(self.encoded[0] & sol_config.MODELED_TAG_BIT)

    @property
    def body(self) -> bytes:
        return self.encoded[1:]

    def __len__(self):
        return len(self.encoded)


@dataclass(frozen=True, order=True)
class Fingerprint:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != FINGERPRINT_BYTES:
            raise MalformedEncoding(f"fingerprint must be 32 bytes, got {len(self.digest)}")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Fingerprint":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as e:
            raise MalformedEncoding(f"bad fingerprint hex {text!r}") from e

    def short(self) -> str:
        return self.hex[:16]

    def __str__(self):
        return self.hex


@dataclass(frozen=True, order=True)
class KeyId:
    id: bytes

    @property
    def hex(self) -> str:
        return self.id.hex()

    def __str__(self):
        return self.hex


class TrustLevel(IntEnum):
    UNKNOWN = 0
    KNOWN = 1
    TRUSTED = 2
    ULTIMATE = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class Certificate:
    """signature[issuer, subject] over the subject public key."""

    issuer_fp: Fingerprint
    subject_fp: Fingerprint
    subject_keyid: KeyId
    issued_at: int
    sig: bytes


@dataclass(frozen=True)
class SubKeyCertificate:
    device_fp: Fingerprint
    subkey: PublicKeyBytes
    app_tag: str
    issued_at: int
    sig: bytes

    @property
    def subkey_fp(self) -> Fingerprint:
        return fingerprint(self.subkey)


@dataclass(frozen=True)
class TrustConfig:
    maxdegree: int = sol_config.TRUST_DEFAULTS["maxdegree"]
    numknown: int = sol_config.TRUST_DEFAULTS["numknown"]
    maxsubkeys: int = sol_config.TRUST_DEFAULTS["maxsubkeys"]
    signaturealgorithm: str = sol_config.TRUST_DEFAULTS["signaturealgorithm"]

    def __post_init__(self):
        for name in ("maxdegree", "numknown", "maxsubkeys"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidConfig(f"{name} must be an integer, got {value!r}")
        if self.maxdegree < 1:
            raise InvalidConfig(f"maxdegree must be >= 1, got {self.maxdegree}")
        if self.numknown < 1:
            raise InvalidConfig(f"numknown must be >= 1, got {self.numknown}")
        if self.maxsubkeys < 0:
            raise InvalidConfig(f"maxsubkeys must be >= 0, got {self.maxsubkeys}")
        if self.signaturealgorithm not in sol_config.ALGORITHMS:
            raise InvalidConfig(
                f"signaturealgorithm must be one of {sol_config.ALGORITHMS}, got {self.signaturealgorithm!r}"
            )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrustConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping or {}) - known
        if unknown:
            raise InvalidConfig(f"unknown trust settings: {', '.join(sorted(unknown))}")
        return cls(**(mapping or {}))

    def to_mapping(self) -> dict:
        return asdict(self)


def encode_public_key(key: PublicKeyBytes) -> bytes:
    return key.encoded


def decode_public_key(data: bytes) -> PublicKeyBytes:
    if len(data) <= KEY_ID_BYTES:
        raise MalformedEncoding(f"public key encoding of {len(data)} bytes is too short")
    tag = data[0] & ~sol_config.MODELED_TAG_BIT
    if tag not in TAG_TO_ALGORITHM:
        raise MalformedEncoding(f"unknown public key tag 0x{data[0]:02x}")
    return PublicKeyBytes(TAG_TO_ALGORITHM[tag], bytes(data))


def fingerprint(key: PublicKeyBytes) -> Fingerprint:
    return Fingerprint(helpers.sha256(key.encoded))


def key_id(key: Union[PublicKeyBytes, bytes]) -> KeyId:
    """Trailing 8 bytes (64 LSBs) of the canonical encoding."""
    encoded = key.encoded if isinstance(key, PublicKeyBytes) else bytes(key)
    if len(encoded) < KEY_ID_BYTES:
        raise EncodingTooShort(f"need at least 8 bytes to derive a key ID, got {len(encoded)}")
    return KeyId(encoded[-KEY_ID_BYTES:])


def certificate_payload(subject_key: PublicKeyBytes, issuer_fp: Fingerprint, issued_at: int) -> bytes:
    return (
        helpers.pack_blob(subject_key.encoded)
        + helpers.pack_blob(issuer_fp.digest)
        + helpers.pack_u64(issued_at)
    )


def subkey_payload(subkey: PublicKeyBytes, app_tag: str, issued_at: int) -> bytes:
    return (
        helpers.pack_blob(subkey.encoded)
        + helpers.pack_blob(app_tag.encode("utf-8"))
        + helpers.pack_u64(issued_at)
    )


def validate_app_tag(app_tag: str) -> str:
    if len(app_tag.encode("utf-8")) > sol_config.MAX_APP_TAG_BYTES:
        raise MalformedEncoding(f"app tag longer than {sol_config.MAX_APP_TAG_BYTES} bytes")
    return app_tag


def encode_certificate(c: Certificate) -> bytes:
    return (
        sol_config.CERT_MAGIC
        + helpers.pack_u8(sol_config.ENCODING_VERSION)
        + c.issuer_fp.digest
        + c.subject_fp.digest
        + c.subject_keyid.id
        + helpers.pack_u64(c.issued_at)
        + helpers.pack_blob(c.sig)
    )


def decode_certificate(data: bytes) -> Certificate:
    reader = helpers.Reader(data)
    if reader.take(4) != sol_config.CERT_MAGIC:
        raise MalformedEncoding("bad certificate magic")
    version = reader.u8()
    if version != sol_config.ENCODING_VERSION:
        raise MalformedEncoding(f"unsupported certificate version {version}")
    cert = Certificate(
        issuer_fp=Fingerprint(reader.take(FINGERPRINT_BYTES)),
        subject_fp=Fingerprint(reader.take(FINGERPRINT_BYTES)),
        subject_keyid=KeyId(reader.take(KEY_ID_BYTES)),
        issued_at=reader.u64(),
        sig=reader.blob(),
    )
    reader.finish()
    return cert


def encode_subkey_certificate(c: SubKeyCertificate) -> bytes:
    return (
        sol_config.SUBKEY_CERT_MAGIC
        + helpers.pack_u8(sol_config.ENCODING_VERSION)
        + c.device_fp.digest
        + helpers.pack_blob(c.subkey.encoded)
        + helpers.pack_blob(c.app_tag.encode("utf-8"))
        + helpers.pack_u64(c.issued_at)
        + helpers.pack_blob(c.sig)
    )


def decode_subkey_certificate(data: bytes) -> SubKeyCertificate:
    reader = helpers.Reader(data)
    if reader.take(4) != sol_config.SUBKEY_CERT_MAGIC:
        raise MalformedEncoding("bad sub-key certificate magic")
    version = reader.u8()
    if version != sol_config.ENCODING_VERSION:
        raise MalformedEncoding(f"unsupported sub-key certificate version {version}")
    device_fp = Fingerprint(reader.take(FINGERPRINT_BYTES))
    subkey = decode_public_key(reader.blob())
    try:
        app_tag = reader.blob().decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedEncoding("app tag is not UTF-8") from e
    cert = SubKeyCertificate(
        device_fp=device_fp,
        subkey=subkey,
        app_tag=validate_app_tag(app_tag),
        issued_at=reader.u64(),
        sig=reader.blob(),
    )
    reader.finish()
    return cert


@lru_cache(maxsize=1 << 16)
def item_digest(item) -> bytes:
    """Stable digest of a key, certificate or sub-key certificate."""
    if isinstance(item, PublicKeyBytes):
        return helpers.sha256(b"K" + item.encoded)
    if isinstance(item, Certificate):
        return helpers.sha256(b"C" + encode_certificate(item))
    if isinstance(item, SubKeyCertificate):
        return helpers.sha256(b"S" + encode_subkey_certificate(item))
    raise TypeError(f"not a repository item: {type(item).__name__}")
