import base64
import binascii
import hashlib
import math
import random
import struct
from typing import Iterable, List

from modules.errors import MalformedEncoding


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def b64_encode(data: bytes) -> bytes:
    return base64.b64encode(data)


def b64_decode(text: bytes) -> bytes:
    """Strict standard-alphabet Base64 decoding. Only the canonical encoding
    is accepted: non-zero padding bits are rejected."""
    text = text.strip()
    try:
        decoded = base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as e:
        raise MalformedEncoding(f"bad Base64: {e}") from e
    if base64.b64encode(decoded) != text:
        raise MalformedEncoding("non-canonical Base64")
    return decoded


def b64_len(nbytes: int) -> int:
    # Padded Base64 length
    return 4 * math.ceil(nbytes / 3)


def pack_u8(value: int) -> bytes:
    return struct.pack(">B", value)


def pack_u16(value: int) -> bytes:
    return struct.pack(">H", value)


def pack_u32(value: int) -> bytes:
    return struct.pack(">I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def pack_blob(data: bytes) -> bytes:
    """u16 length prefix followed by the bytes."""
    if len(data) > 0xFFFF:
        raise MalformedEncoding(f"field of {len(data)} bytes does not fit a u16 prefix")
    return pack_u16(len(data)) + data


def pack_items(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return pack_u16(len(items)) + b"".join(pack_blob(i) for i in items)


class Reader:
    """Cursor over a byte buffer. Every short read raises MalformedEncoding."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedEncoding(
                f"truncated input: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def _unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack(">B")

    def u16(self) -> int:
        return self._unpack(">H")

    def u32(self) -> int:
        return self._unpack(">I")

    def u64(self) -> int:
        return self._unpack(">Q")

    def blob(self) -> bytes:
        return self.take(self.u16())

    def items(self) -> List[bytes]:
        return [self.blob() for _ in range(self.u16())]

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def rest(self) -> bytes:
        return self.take(self.remaining())

    def finish(self):
        if self.remaining():
            raise MalformedEncoding(f"{self.remaining()} trailing bytes")


def seeded_randfunc(seed: int):
    """Deterministic byte source usable as a `randfunc` for key generation."""
    rng = random.Random(seed)

    def randfunc(n: int) -> bytes:
        return rng.randbytes(n)

    return randfunc


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    text = "/".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(sha256(text)[:8], "big")


def parse_seed_range(text: str) -> List[int]:
    """Parse `5`, `1..5` or `1,3,7` into a list of seeds."""
    text = text.strip()
    if ".." in text:
        start, end = text.split("..", 1)
        return list(range(int(start), int(end) + 1))
    return [int(s) for s in text.split(",") if s.strip()]
