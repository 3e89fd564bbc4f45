"""Handshake and synchronization protocols.

Wire format (big endian), one frame per message:

    +---------+----------+----------------+-----------------+
    | version | type tag | payload length | payload         |
    | 1 byte  | 1 byte   | 4 bytes (u32)  | length bytes    |
    +---------+----------+----------------+-----------------+

Payloads (u16 prefixes on every variable field):
    KEY_OFFER      sender_fp[32] | key blob
    CERT_EXCHANGE  certificate encoding
    SYNC_QUERY     fp[32] * k
    SYNC_RESPONSE  u32 record count | per record: key blob,
                   u16 n + n certificate blobs, u16 m + m sub-key certificate blobs
"""

from __future__ import annotations

import random
import socket
import struct
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple, Union

import click

import modules.helpers as helpers
import modules.keystore as keystore
import modules.sol_config as sol_config
import modules.trustgraph as trustgraph
from modules.errors import (
    MalformedEncoding,
    NoPriorRelationship,
    OoBRejected,
    ProtocolViolation,
)
from modules.model import (
    Certificate,
    Fingerprint,
    PublicKeyBytes,
    SubKeyCertificate,
    TrustConfig,
    TrustLevel,
    decode_certificate,
    decode_public_key,
    decode_subkey_certificate,
    encode_certificate,
    encode_subkey_certificate,
    fingerprint,
    item_digest,
)

# Messages


@dataclass(frozen=True)
class KeyOffer:
    sender_fp: Fingerprint
    sender_key: PublicKeyBytes


@dataclass(frozen=True)
class CertExchange:
    certificate: Certificate


@dataclass(frozen=True)
class SyncQuery:
    known_fps: Tuple[Fingerprint, ...]


@dataclass(frozen=True)
class SyncRecord:
    subject_key: PublicKeyBytes
    certificates: Tuple[Certificate, ...] = ()
    subkey_certs: Tuple[SubKeyCertificate, ...] = ()

    def items(self) -> list:
        return [self.subject_key, *self.certificates, *self.subkey_certs]


@dataclass(frozen=True)
class SyncResponse:
    records: Tuple[SyncRecord, ...]


Message = Union[KeyOffer, CertExchange, SyncQuery, SyncResponse]

MESSAGE_TAGS = {
    KeyOffer: sol_config.MSG_KEY_OFFER,
    CertExchange: sol_config.MSG_CERT_EXCHANGE,
    SyncQuery: sol_config.MSG_SYNC_QUERY,
    SyncResponse: sol_config.MSG_SYNC_RESPONSE,
}


def _encode_payload(m: Message) -> bytes:
    if isinstance(m, KeyOffer):
        return m.sender_fp.digest + helpers.pack_blob(m.sender_key.encoded)
    if isinstance(m, CertExchange):
        return encode_certificate(m.certificate)
    if isinstance(m, SyncQuery):
        return b"".join(fp.digest for fp in m.known_fps)
    if isinstance(m, SyncResponse):
        parts = [helpers.pack_u32(len(m.records))]
        for record in m.records:
            parts.append(helpers.pack_blob(record.subject_key.encoded))
            parts.append(helpers.pack_items(encode_certificate(c) for c in record.certificates))
            parts.append(helpers.pack_items(encode_subkey_certificate(s) for s in record.subkey_certs))
        return b"".join(parts)
    raise TypeError(f"not a protocol message: {type(m).__name__}")


def encode_message(m: Message) -> bytes:
    payload = _encode_payload(m)
    return struct.pack(sol_config.MSG_HEADER_FORMAT, sol_config.WIRE_VERSION, MESSAGE_TAGS[type(m)], len(payload)) + payload


def _decode_payload(tag: int, payload: bytes) -> Message:
    reader = helpers.Reader(payload)
    if tag == sol_config.MSG_KEY_OFFER:
        message = KeyOffer(Fingerprint(reader.take(32)), decode_public_key(reader.blob()))
    elif tag == sol_config.MSG_CERT_EXCHANGE:
        message = CertExchange(decode_certificate(reader.rest()))
    elif tag == sol_config.MSG_SYNC_QUERY:
        if len(payload) % 32:
            raise MalformedEncoding("SYNC_QUERY payload is not a whole number of fingerprints")
        message = SyncQuery(tuple(Fingerprint(reader.take(32)) for _ in range(len(payload) // 32)))
    elif tag == sol_config.MSG_SYNC_RESPONSE:
        records = []
        for _ in range(reader.u32()):
            key = decode_public_key(reader.blob())
            certs = tuple(decode_certificate(c) for c in reader.items())
            subkeys = tuple(decode_subkey_certificate(s) for s in reader.items())
            records.append(SyncRecord(key, certs, subkeys))
        message = SyncResponse(tuple(records))
    else:
        raise MalformedEncoding(f"unknown message type 0x{tag:02x}")
    reader.finish()
    return message


def split_frame(buffer: bytes) -> Tuple[Message, bytes]:
    """Decode the first frame of `buffer`; return it with the remaining bytes."""
    if len(buffer) < sol_config.MSG_HEADER_BYTES:
        raise MalformedEncoding("truncated frame header")
    version, tag, length = struct.unpack(sol_config.MSG_HEADER_FORMAT, buffer[: sol_config.MSG_HEADER_BYTES])
    if version != sol_config.WIRE_VERSION:
        raise MalformedEncoding(f"unsupported wire version {version}")
    end = sol_config.MSG_HEADER_BYTES + length
    if len(buffer) < end:
        raise MalformedEncoding(f"truncated frame: need {end} bytes, have {len(buffer)}")
    return _decode_payload(tag, bytes(buffer[sol_config.MSG_HEADER_BYTES : end])), bytes(buffer[end:])


def decode_message(data: bytes) -> Message:
    message, rest = split_frame(data)
    if rest:
        raise MalformedEncoding(f"{len(rest)} bytes after the frame")
    return message


def decode_stream(data: bytes) -> List[Message]:
    messages = []
    while data:
        message, data = split_frame(data)
        messages.append(message)
    return messages


# Channels


class Channel(ABC):
    """Duplex message channel that tallies the bytes it puts on the wire."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, message: Message) -> int:
        frame = encode_message(message)
        self._send_frame(frame)
        self.bytes_sent += len(frame)
        return len(frame)

    def receive(self) -> Message:
        frame = self._receive_frame()
        self.bytes_received += len(frame)
        return decode_message(frame)

    @abstractmethod
    def _send_frame(self, frame: bytes):
        ...

    @abstractmethod
    def _receive_frame(self) -> bytes:
        ...

    def close(self):
        pass


class InMemoryChannel(Channel):
    def __init__(self, interceptor: Optional[Callable[[bytes], bytes]] = None):
        super().__init__()
        self.peer: Optional["InMemoryChannel"] = None
        self.inbox: deque = deque()
        self.interceptor = interceptor

    @classmethod
    def pair(cls, interceptor=None) -> Tuple["InMemoryChannel", "InMemoryChannel"]:
        """Two connected endpoints; `interceptor` rewrites frames in flight."""
        a, b = cls(interceptor), cls(interceptor)
        a.peer, b.peer = b, a
        return a, b

    def _send_frame(self, frame: bytes):
        if self.interceptor is not None:
            frame = self.interceptor(frame)
        self.peer.inbox.append(frame)

    def _receive_frame(self) -> bytes:
        if not self.inbox:
            raise ProtocolViolation("no message waiting on the channel")
        return self.inbox.popleft()


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "TcpChannel":
        """Connect, retrying refused attempts until `timeout` runs out."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                break
            except ConnectionRefusedError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.2)
        sock.settimeout(None)
        return cls(sock)

    @classmethod
    def accept(cls, host: str, port: int, timeout: Optional[float] = None) -> "TcpChannel":
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            server.bind((host, port))
            server.listen(1)
            server.settimeout(timeout)
            conn, _ = server.accept()
        return cls(conn)

    def _send_frame(self, frame: bytes):
        self.sock.sendall(frame)

    def _read_exact(self, n: int) -> bytes:
        buffer = b""
        while len(buffer) < n:
            chunk = self.sock.recv(n - len(buffer))
            if not chunk:
                raise ProtocolViolation("peer closed the connection")
            buffer += chunk
        return buffer

    def _receive_frame(self) -> bytes:
        header = self._read_exact(sol_config.MSG_HEADER_BYTES)
        _, _, length = struct.unpack(sol_config.MSG_HEADER_FORMAT, header)
        return header + self._read_exact(length)

    def close(self):
        self.sock.close()


# Out-of-band verification

FINGERPRINT_COLORS = ["red", "green", "yellow", "blue", "magenta", "cyan", "white", "bright_red"]


def render_fingerprint(fp: Fingerprint, color: bool = True) -> str:
    """Fingerprint in 4-hex blocks, each block coloured by its value."""
    blocks = [fp.hex[i : i + 4] for i in range(0, len(fp.hex), 4)]
    if color:
        blocks = [click.style(b, fg=FINGERPRINT_COLORS[int(b, 16) % len(FINGERPRINT_COLORS)]) for b in blocks]
    return " ".join(blocks)


class OoBVerifier(ABC):
    @abstractmethod
    def verify(
        self,
        local_fp: Fingerprint,
        remote_fp_presented: Optional[Fingerprint],
        remote_fp_received: Fingerprint,
    ) -> bool:
        ...


class HonestComparator(OoBVerifier):
    """Compares the fingerprint shown by the peer with the one received."""

    def verify(self, local_fp, remote_fp_presented, remote_fp_received) -> bool:
        return remote_fp_presented is not None and remote_fp_presented == remote_fp_received


class FaultInjectingComparator(OoBVerifier):
    """Honest comparison that additionally rejects with probability `reject_rate`,
    or always for fingerprints in `reject`."""

    def __init__(self, reject_rate: float = 0.0, seed: int = 0, reject=()):
        self.reject_rate = reject_rate
        self.reject = set(reject)
        self.rng = random.Random(seed)

    def verify(self, local_fp, remote_fp_presented, remote_fp_received) -> bool:
        if remote_fp_received in self.reject or local_fp in self.reject:
            return False
        if self.reject_rate and self.rng.random() < self.reject_rate:
            return False
        return HonestComparator().verify(local_fp, remote_fp_presented, remote_fp_received)


class PromptComparator(OoBVerifier):
    """Operator compares the fingerprints printed on both terminals."""

    def __init__(self, confirm: Callable[[str], bool] = None, color: bool = True):
        self.confirm = confirm or (lambda text: click.confirm(text, default=False))
        self.color = color

    def verify(self, local_fp, remote_fp_presented, remote_fp_received) -> bool:
        click.echo(click.style("\nFingerprint verification\n", fg="white", bold=True))
        click.echo(f"  this device : {render_fingerprint(local_fp, self.color)}")
        click.echo(f"  peer device : {render_fingerprint(remote_fp_received, self.color)}\n")
        return bool(self.confirm("Does the peer terminal show the same two fingerprints (swapped)?"))


# Node context


@dataclass
class NodeContext:
    name: str
    store: keystore.KeyManager
    repo: trustgraph.TrustRepository
    capacity_bytes: Optional[int] = None
    # peer -> catalog digests of offered items the peer did not store
    declined: Dict[Fingerprint, Set[bytes]] = field(default_factory=dict)

    @property
    def fp(self) -> Fingerprint:
        return self.repo.owner_fp

    @property
    def public_key(self) -> PublicKeyBytes:
        return self.repo.owner_key

    @property
    def counter(self) -> keystore.OpCounter:
        return self.store.counter

    def declined_for(self, peer_fp: Fingerprint) -> Set[bytes]:
        return self.declined.setdefault(peer_fp, set())

    def merge(self, items) -> trustgraph.MergeReport:
        return trustgraph.merge(self.repo, items, self.counter, self.capacity_bytes)

    def register_subkey(self, subkey_public: PublicKeyBytes, app_tag: str, now: int) -> SubKeyCertificate:
        """Certify an application sub-key and record it against the own identity."""
        cert = keystore.register_subkey(self.store, subkey_public, app_tag, now, self.repo.config.maxsubkeys)
        self.merge([cert])
        return cert


def make_node(
    name: str,
    keypair: keystore.DeviceKeyPair,
    config: TrustConfig,
    capacity_bytes: Optional[int] = None,
) -> NodeContext:
    """Unlocked in-memory node, as used by the simulator and the tests."""
    store = keystore.SoftwareKeystore.ephemeral(keypair)
    return NodeContext(name, store, trustgraph.TrustRepository(keypair.public, config), capacity_bytes=capacity_bytes)


def load_node(home, pin: str, config: TrustConfig, rng_seed: Optional[int] = None) -> NodeContext:
    """Open (or create) the keystore and repository kept under `home`."""
    home = Path(home)
    store_path = home / sol_config.KEYSTORE_FILE
    if store_path.is_file():
        store = keystore.SoftwareKeystore.open(store_path)
        store.unlock(pin)
    else:
        store = keystore.select_key_manager().create(
            store_path, pin, config.signaturealgorithm, rng_seed=rng_seed
        )
    repo_dir = home / "repository"
    if (repo_dir / sol_config.REPO_HEADER_FILE).is_file():
        repo = trustgraph.load(repo_dir, config)
        if repo.owner_fp != store.fingerprint:
            raise ProtocolViolation(f"repository in {repo_dir} belongs to another device")
    else:
        repo = trustgraph.TrustRepository(store.public_key, config)
    return NodeContext(home.name or "node", store, repo)


# Handshake


class HandshakePhase(Enum):
    IDLE = "Idle"
    SENT_KEY = "SentKey"
    AWAIT_OOB = "AwaitOoB"
    AWAIT_CERT = "AwaitCert"
    DONE = "Done"
    FAILED = "Failed"


@dataclass
class HandshakeState:
    phase: HandshakePhase = HandshakePhase.IDLE
    peer_key: Optional[PublicKeyBytes] = None
    peer_fp: Optional[Fingerprint] = None


class HandshakeSession:
    """One side of the handshake: Idle -> SentKey -> AwaitOoB -> AwaitCert -> Done."""

    def __init__(self, node: NodeContext, channel: Channel):
        self.node = node
        self.channel = channel
        self.state = HandshakeState()
        self.issued: Optional[Certificate] = None
        self.received: Optional[Certificate] = None
        self.oob_ok = False

    def _expect(self, phase: HandshakePhase):
        if self.state.phase != phase:
            current = self.state.phase
            self.state.phase = HandshakePhase.FAILED
            raise ProtocolViolation(f"handshake step needs phase {phase.value}, session is {current.value}")

    def _fail(self, error):
        self.state.phase = HandshakePhase.FAILED
        raise error

    def send_key(self):
        self._expect(HandshakePhase.IDLE)
        self.channel.send(KeyOffer(self.node.fp, self.node.public_key))
        self.state.phase = HandshakePhase.SENT_KEY

    def receive_key(self):
        self._expect(HandshakePhase.SENT_KEY)
        message = self.channel.receive()
        if not isinstance(message, KeyOffer):
            self._fail(ProtocolViolation(f"expected KEY_OFFER, got {type(message).__name__}"))
        if fingerprint(message.sender_key) != message.sender_fp:
            self._fail(ProtocolViolation("KEY_OFFER fingerprint does not match the offered key"))
        if message.sender_fp == self.node.fp:
            self._fail(ProtocolViolation("peer offered our own key"))
        self.state.peer_key = message.sender_key
        self.state.peer_fp = message.sender_fp
        self.state.phase = HandshakePhase.AWAIT_OOB

    def confirm_oob(self, oob: OoBVerifier, presented: Optional[Fingerprint]) -> bool:
        self._expect(HandshakePhase.AWAIT_OOB)
        self.oob_ok = bool(oob.verify(self.node.fp, presented, self.state.peer_fp))
        if not self.oob_ok:
            self.state.phase = HandshakePhase.FAILED
        return self.oob_ok

    def send_certificate(self, now: int):
        self._expect(HandshakePhase.AWAIT_OOB)
        if not self.oob_ok:
            self._fail(OoBRejected("out-of-band verification did not pass"))
        self.issued = keystore.issue_certificate(self.node.store, self.state.peer_key, now)
        self.channel.send(CertExchange(self.issued))
        self.state.phase = HandshakePhase.AWAIT_CERT

    def receive_certificate(self):
        self._expect(HandshakePhase.AWAIT_CERT)
        message = self.channel.receive()
        if not isinstance(message, CertExchange):
            self._fail(ProtocolViolation(f"expected CERT_EXCHANGE, got {type(message).__name__}"))
        cert = message.certificate
        if cert.issuer_fp != self.state.peer_fp or cert.subject_fp != self.node.fp:
            self._fail(ProtocolViolation("certificate does not bind the peer to this device"))
        if not keystore.verify_certificate(cert, self.node.public_key, self.state.peer_key, self.node.counter):
            self._fail(ProtocolViolation("peer certificate signature does not verify"))
        self.received = cert
        self.state.phase = HandshakePhase.DONE

    def items(self) -> list:
        return [self.state.peer_key, self.issued, self.received]

    def commit(self) -> trustgraph.MergeReport:
        """Store the peer key and both certificates."""
        if self.state.phase != HandshakePhase.DONE:
            raise ProtocolViolation("cannot commit an unfinished handshake")
        return self.node.merge(self.items())


@dataclass
class HandshakeOutcome:
    certificates: Tuple[Certificate, Certificate]
    bytes_sent: Dict[str, int]
    stored: bool = True


@dataclass
class PendingExchange:
    """Messages already produced; `commit` applies their effects."""

    bytes_sent: Dict[str, int]
    commit: Callable[[], object]

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_sent.values())


def plan_handshake(
    local: NodeContext,
    remote: NodeContext,
    oob: OoBVerifier,
    now: int,
    interceptor: Optional[Callable[[bytes], bytes]] = None,
) -> PendingExchange:
    """Run the handshake messages between two co-located nodes. Nothing is
    stored until the returned exchange is committed."""
    chan_a, chan_b = InMemoryChannel.pair(interceptor)
    side_a, side_b = HandshakeSession(local, chan_a), HandshakeSession(remote, chan_b)
    side_a.send_key()
    side_b.send_key()
    side_a.receive_key()
    side_b.receive_key()
    ok_a = side_a.confirm_oob(oob, remote.fp)
    ok_b = side_b.confirm_oob(oob, local.fp)
    if not (ok_a and ok_b):
        raise OoBRejected(f"fingerprint comparison failed between {local.name} and {remote.name}")
    side_a.send_certificate(now)
    side_b.send_certificate(now)
    side_a.receive_certificate()
    side_b.receive_certificate()

    def commit() -> HandshakeOutcome:
        # both sides store, or neither does
        stored = not any(
            trustgraph.merge(s.node.repo, s.items(), None, s.node.capacity_bytes, dry_run=True).over_capacity
            for s in (side_a, side_b)
        )
        if stored:
            side_a.commit()
            side_b.commit()
        return HandshakeOutcome(
            certificates=(side_a.issued, side_b.issued),
            bytes_sent={local.name: chan_a.bytes_sent, remote.name: chan_b.bytes_sent},
            stored=stored,
        )

    return PendingExchange({local.name: chan_a.bytes_sent, remote.name: chan_b.bytes_sent}, commit)


def handshake_run(local, remote, oob: OoBVerifier, now: int, interceptor=None) -> HandshakeOutcome:
    return plan_handshake(local, remote, oob, now, interceptor).commit()


# Synchronization


def has_relationship(node: NodeContext, peer_fp: Fingerprint) -> bool:
    record = node.repo.records.get(peer_fp)
    return record is not None and node.fp in record.certificates


def build_sync_query(requester: NodeContext) -> SyncQuery:
    """Fingerprints of everything the requester stores: device fingerprints
    for keys, item digests for certificates and sub-key certificates."""
    return SyncQuery(tuple(Fingerprint(d) for d in sorted(requester.repo.catalog())))


def within_horizon(node: NodeContext, fp: Fingerprint) -> bool:
    """True if `node` may forward material about `fp`: the device is the
    owner or is trusted at a depth below maxdegree."""
    assessment = node.repo.assessment()
    depth = assessment.depth.get(fp)
    return (
        assessment.level_of(fp) != TrustLevel.UNKNOWN
        and depth is not None
        and depth < node.repo.config.maxdegree
    )


def answer_sync_query(responder: NodeContext, requester_fp: Fingerprint, query: SyncQuery) -> SyncResponse:
    """Items the requester neither lists nor declined before, about devices
    within the responder's horizon. Issuer keys missing on the requester's
    side follow as bare records."""
    listed = {fp.digest for fp in query.known_fps}
    skip = listed | responder.declined_for(requester_fp)
    records, carried, issuers = [], set(), set()
    for fp, record in sorted(responder.repo.records.items()):
        if not within_horizon(responder, fp):
            continue
        certs = sorted(record.certificates.values(), key=lambda c: c.issuer_fp)
        subkeys = sorted(record.subkeys.values(), key=lambda s: s.subkey_fp)
        certs = [c for c in certs if item_digest(c) not in skip]
        subkeys = [s for s in subkeys if item_digest(s) not in skip]
        if fp.digest not in skip or certs or subkeys:
            records.append(SyncRecord(record.subject_key, tuple(certs), tuple(subkeys)))
            carried.add(fp)
            issuers.update(c.issuer_fp for c in certs)
    for fp in sorted(issuers - carried):
        if fp.digest not in listed and fp in responder.repo.records:
            records.append(SyncRecord(responder.repo.records[fp].subject_key))
    return SyncResponse(tuple(records))


@dataclass
class SyncOutcome:
    query_bytes: int
    response_bytes: int
    items_merged: int
    records_sent: int = 0
    report: Optional[trustgraph.MergeReport] = None


def plan_sync(requester: NodeContext, responder: NodeContext, now: int) -> PendingExchange:
    """One unidirectional synchronization: the requester announces what it
    holds, the responder answers with what is missing."""
    if not has_relationship(requester, responder.fp) or not has_relationship(responder, requester.fp):
        raise NoPriorRelationship(f"{requester.name} and {responder.name} never completed a handshake")
    chan_q, chan_r = InMemoryChannel.pair()
    chan_q.send(build_sync_query(requester))
    query = chan_r.receive()
    response = answer_sync_query(responder, requester.fp, query)
    chan_r.send(response)
    received = chan_q.receive()
    query_bytes, response_bytes = chan_q.bytes_sent, chan_r.bytes_sent

    def commit() -> SyncOutcome:
        return apply_sync_response(requester, responder, received, query_bytes, response_bytes)

    return PendingExchange({requester.name: query_bytes, responder.name: response_bytes}, commit)


def apply_sync_response(
    requester: NodeContext,
    responder: NodeContext,
    response: SyncResponse,
    query_bytes: int = 0,
    response_bytes: int = 0,
) -> SyncOutcome:
    """Merge a response. Whatever the requester did not end up storing is
    remembered by the responder and never offered to it again; a batch
    refused for capacity is not remembered."""
    items = [item for record in response.records for item in record.items()]
    report = requester.merge(items)
    if not report.over_capacity:
        stored = requester.repo.catalog()
        offered = {trustgraph.catalog_digest(i) for i in items}
        responder.declined_for(requester.fp).update(d for d in offered if d not in stored)
    return SyncOutcome(query_bytes, response_bytes, report.accepted, len(response.records), report)


def sync_run(requester: NodeContext, responder: NodeContext, now: int) -> SyncOutcome:
    return plan_sync(requester, responder, now).commit()


# Two-process session (demo)


@dataclass
class PeerOutcome:
    peer_fp: Fingerprint
    handshake_report: trustgraph.MergeReport
    sync: SyncOutcome
    answered_records: int
    bytes_sent: int
    bytes_received: int


def run_peer(
    node: NodeContext,
    channel: Channel,
    initiator: bool,
    oob: OoBVerifier,
    now: int,
    subkey: Optional[Tuple[PublicKeyBytes, str]] = None,
    presented: Optional[Fingerprint] = None,
) -> PeerOutcome:
    """Drive one side of handshake, optional sub-key registration, and one
    sync in each direction over `channel`. The initiator requests first."""
    session = HandshakeSession(node, channel)
    session.send_key()
    session.receive_key()
    if not session.confirm_oob(oob, presented):
        channel.close()
        raise OoBRejected("operator rejected the fingerprint comparison")
    session.send_certificate(now)
    session.receive_certificate()
    handshake_report = session.commit()
    peer_fp = session.state.peer_fp

    if subkey is not None:
        node.register_subkey(subkey[0], subkey[1], now)

    def request() -> SyncOutcome:
        sent_before, received_before = channel.bytes_sent, channel.bytes_received
        channel.send(build_sync_query(node))
        response = channel.receive()
        if not isinstance(response, SyncResponse):
            raise ProtocolViolation(f"expected SYNC_RESPONSE, got {type(response).__name__}")
        items = [item for record in response.records for item in record.items()]
        report = node.merge(items)
        return SyncOutcome(
            channel.bytes_sent - sent_before,
            channel.bytes_received - received_before,
            report.accepted,
            len(response.records),
            report,
        )

    def answer() -> int:
        query = channel.receive()
        if not isinstance(query, SyncQuery):
            raise ProtocolViolation(f"expected SYNC_QUERY, got {type(query).__name__}")
        # what the peer stores is unknown here; its next query lists it
        response = answer_sync_query(node, peer_fp, query)
        channel.send(response)
        return len(response.records)

    if initiator:
        sync = request()
        answered = answer()
    else:
        answered = answer()
        sync = request()
    return PeerOutcome(peer_fp, handshake_report, sync, answered, channel.bytes_sent, channel.bytes_received)
