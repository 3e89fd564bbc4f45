import unittest, sys, os, random, socket, threading

# Get the parent directory
parent_dir = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

import modules.keystore as keystore
import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
import modules.trustgraph as trustgraph
from modules.errors import MalformedEncoding, NoPriorRelationship, OoBRejected, ProtocolViolation
from modules.model import TrustConfig, TrustLevel, encode_certificate, item_digest
from modules.protocol import *

CALIBRATION = sizemodel.load_calibration()


def node(name, seed, config=None):
    pair = keystore.generate_keypair(
        sol_config.ECDSA_P256, rng_seed=seed, crypto_mode="SizeModel", calibration=CALIBRATION
    )
    return make_node(name, pair, config or TrustConfig())


def frame_overhead():
    return sol_config.MSG_HEADER_BYTES


class TestCodec(unittest.TestCase):
    def setUp(self):
        self.a, self.b = node("a", 1), node("b", 2)
        self.cert = keystore.issue_certificate(self.a.store, self.b.public_key, 10)

    def test_messages_decode_to_themselves(self):
        sub = keystore.register_subkey(self.b.store, self.a.public_key, "chat", 3)
        messages = [
            KeyOffer(self.a.fp, self.a.public_key),
            CertExchange(self.cert),
            SyncQuery((self.a.fp, self.b.fp)),
            SyncQuery(()),
            SyncResponse(()),
            SyncResponse((SyncRecord(self.b.public_key, (self.cert,), (sub,)), SyncRecord(self.a.public_key))),
        ]
        for message in messages:
            self.assertEqual(decode_message(encode_message(message)), message)

    def test_header_layout(self):
        frame = encode_message(CertExchange(self.cert))
        self.assertEqual(frame[0], sol_config.WIRE_VERSION)
        self.assertEqual(frame[1], sol_config.MSG_CERT_EXCHANGE)
        self.assertEqual(int.from_bytes(frame[2:6], "big"), len(encode_certificate(self.cert)))

    def test_sync_query_size(self):
        for k in (0, 1, 5):
            query = SyncQuery(tuple(self.a.fp for _ in range(k)))
            self.assertEqual(len(encode_message(query)), frame_overhead() + 32 * k)

    def test_key_offer_size(self):
        frame = encode_message(KeyOffer(self.a.fp, self.a.public_key))
        self.assertEqual(len(frame), frame_overhead() + 32 + 2 + len(self.a.public_key))

    def test_every_truncation_rejected(self):
        frame = encode_message(SyncResponse((SyncRecord(self.b.public_key, (self.cert,)),)))
        for cut in range(len(frame)):
            with self.assertRaises(MalformedEncoding):
                decode_message(frame[:cut])

    def test_trailing_bytes_rejected(self):
        with self.assertRaises(MalformedEncoding):
            decode_message(encode_message(SyncQuery(())) + b"\x00")

    def test_unknown_type_and_version(self):
        frame = bytearray(encode_message(SyncQuery(())))
        frame[1] = 0x7F
        with self.assertRaises(MalformedEncoding):
            decode_message(bytes(frame))
        frame[1], frame[0] = sol_config.MSG_SYNC_QUERY, 9
        with self.assertRaises(MalformedEncoding):
            decode_message(bytes(frame))

    def test_partial_fingerprint_in_query(self):
        payload = b"\x00" * 33
        frame = bytes([sol_config.WIRE_VERSION, sol_config.MSG_SYNC_QUERY]) + len(payload).to_bytes(4, "big") + payload
        with self.assertRaises(MalformedEncoding):
            decode_message(frame)

    def test_stream_of_frames(self):
        first, second = SyncQuery((self.a.fp,)), CertExchange(self.cert)
        self.assertEqual(decode_stream(encode_message(first) + encode_message(second)), [first, second])

    def test_channel_counts_bytes(self):
        left, right = InMemoryChannel.pair()
        sent = left.send(SyncQuery((self.a.fp,)))
        right.receive()
        self.assertEqual((left.bytes_sent, right.bytes_received), (sent, sent))
        with self.assertRaises(ProtocolViolation):
            right.receive()


class TestFingerprintDisplay(unittest.TestCase):
    def test_plain_blocks(self):
        fp = node("a", 1).fp
        text = render_fingerprint(fp, color=False)
        self.assertEqual(text.replace(" ", ""), fp.hex)
        self.assertEqual(len(text.split(" ")), 16)

    def test_coloured_blocks_keep_digits(self):
        fp = node("a", 1).fp
        self.assertIn(fp.hex[:4], render_fingerprint(fp))


class TestComparators(unittest.TestCase):
    def setUp(self):
        self.a, self.b = node("a", 1).fp, node("b", 2).fp

    def test_honest(self):
        self.assertTrue(HonestComparator().verify(self.a, self.b, self.b))
        self.assertFalse(HonestComparator().verify(self.a, self.a, self.b))
        self.assertFalse(HonestComparator().verify(self.a, None, self.b))

    def test_fault_injection(self):
        self.assertFalse(FaultInjectingComparator(reject=[self.b]).verify(self.a, self.b, self.b))
        self.assertFalse(FaultInjectingComparator(reject_rate=1.0).verify(self.a, self.b, self.b))
        self.assertTrue(FaultInjectingComparator(reject_rate=0.0).verify(self.a, self.b, self.b))

    def test_prompt_uses_operator_answer(self):
        asked = []
        comparator = PromptComparator(confirm=lambda text: asked.append(text) or True, color=False)
        self.assertTrue(comparator.verify(self.a, None, self.b))
        self.assertEqual(len(asked), 1)


class TestHandshake(unittest.TestCase):
    def setUp(self):
        self.a, self.b, self.m = node("a", 1), node("b", 2), node("mallory", 3)

    def assert_untouched(self, *nodes):
        for n in nodes:
            self.assertEqual(list(n.repo.records), [n.fp])

    def test_honest_handshake(self):
        outcome = handshake_run(self.a, self.b, HonestComparator(), now=5)
        self.assertTrue(outcome.stored)
        self.assertEqual(trustgraph.trust_of(self.a.repo, self.b.fp), (TrustLevel.TRUSTED, 1))
        self.assertEqual(trustgraph.trust_of(self.b.repo, self.a.fp), (TrustLevel.TRUSTED, 1))
        self.assertTrue(has_relationship(self.a, self.b.fp))
        self.assertTrue(has_relationship(self.b, self.a.fp))
        self.assertEqual(self.a.counter.sign_ops, 1)
        self.assertEqual(self.b.counter.sign_ops, 1)

    def test_handshake_bytes(self):
        outcome = handshake_run(self.a, self.b, HonestComparator(), now=5)
        cert_len = len(encode_certificate(outcome.certificates[0]))
        expected = 2 * frame_overhead() + 32 + 2 + len(self.a.public_key) + cert_len
        self.assertEqual(outcome.bytes_sent, {"a": expected, "b": expected})
        other = handshake_run(node("c", 4), node("d", 5), HonestComparator(), now=9)
        self.assertEqual(sorted(other.bytes_sent.values()), [expected, expected])

    def test_substituted_key_offer(self):
        def swap_key(frame):
            message = decode_message(frame)
            if isinstance(message, KeyOffer):
                return encode_message(KeyOffer(self.m.fp, self.m.public_key))
            return frame

        with self.assertRaises(OoBRejected):
            handshake_run(self.a, self.b, HonestComparator(), now=5, interceptor=swap_key)
        self.assert_untouched(self.a, self.b)

    def test_tampered_certificate(self):
        def flip_signature(frame):
            if frame[1] == sol_config.MSG_CERT_EXCHANGE:
                return frame[:-1] + bytes([frame[-1] ^ 0x01])
            return frame

        with self.assertRaises(ProtocolViolation):
            handshake_run(self.a, self.b, HonestComparator(), now=5, interceptor=flip_signature)
        self.assert_untouched(self.a, self.b)

    def test_mismatched_fingerprint_in_offer(self):
        def lie_about_fp(frame):
            message = decode_message(frame)
            if isinstance(message, KeyOffer):
                return encode_message(KeyOffer(self.m.fp, message.sender_key))
            return frame

        with self.assertRaises(ProtocolViolation):
            handshake_run(self.a, self.b, HonestComparator(), now=5, interceptor=lie_about_fp)

    def test_rejected_comparison_stores_nothing(self):
        with self.assertRaises(OoBRejected):
            handshake_run(self.a, self.b, FaultInjectingComparator(reject=[self.b.fp]), now=5)
        self.assert_untouched(self.a, self.b)
        self.assertEqual(self.a.counter.sign_ops, 0)

    def test_capacity_on_one_side_stores_neither(self):
        self.b.capacity_bytes = self.b.repo.stored_bytes
        outcome = handshake_run(self.a, self.b, HonestComparator(), now=5)
        self.assertFalse(outcome.stored)
        self.assert_untouched(self.a, self.b)

    def test_session_phases(self):
        left, _ = InMemoryChannel.pair()
        session = HandshakeSession(self.a, left)
        with self.assertRaises(ProtocolViolation):
            session.receive_certificate()
        self.assertEqual(session.state.phase, HandshakePhase.FAILED)

    def test_repeat_handshake_keeps_single_certificates(self):
        handshake_run(self.a, self.b, HonestComparator(), now=5)
        handshake_run(self.a, self.b, HonestComparator(), now=6)
        certs = self.a.repo.records[self.b.fp].certificates
        self.assertEqual(list(certs), [self.a.fp])
        self.assertEqual(certs[self.a.fp].issued_at, 6)


class TestSync(unittest.TestCase):
    def setUp(self):
        self.a, self.b, self.c = node("a", 1), node("b", 2), node("c", 3)
        handshake_run(self.a, self.b, HonestComparator(), now=1)
        handshake_run(self.b, self.c, HonestComparator(), now=2)

    def test_requires_relationship(self):
        with self.assertRaises(NoPriorRelationship):
            sync_run(self.a, self.c, now=3)

    def test_two_hop_becomes_known(self):
        outcome = sync_run(self.a, self.b, now=3)
        self.assertEqual(outcome.items_merged, 3)
        self.assertEqual(trustgraph.trust_of(self.a.repo, self.c.fp), (TrustLevel.KNOWN, 2))
        self.assertEqual(trustgraph.trust_of(self.b.repo, self.c.fp), (TrustLevel.TRUSTED, 1))

    def test_second_sync_sends_nothing(self):
        sync_run(self.a, self.b, now=3)
        outcome = sync_run(self.a, self.b, now=4)
        self.assertEqual((outcome.items_merged, outcome.records_sent), (0, 0))
        # keys of a, b and c plus the four certificates among them
        self.assertEqual(outcome.query_bytes, frame_overhead() + 32 * 7)
        self.assertEqual(outcome.response_bytes, frame_overhead() + 4)

    def test_identical_repositories(self):
        outcome = sync_run(self.b, self.a, now=3)
        # b already holds everything a has
        self.assertEqual(outcome.items_merged, 0)
        x, y = node("x", 8), node("y", 9)
        handshake_run(x, y, HonestComparator(), now=1)
        outcome = sync_run(x, y, now=2)
        self.assertEqual(outcome.records_sent, 0)
        self.assertEqual(outcome.query_bytes, frame_overhead() + 32 * 4)

    def test_bytes_match_frames(self):
        expected_query = len(encode_message(build_sync_query(self.a)))
        expected_response = len(encode_message(answer_sync_query(self.b, self.a.fp, build_sync_query(self.a))))
        outcome = sync_run(self.a, self.b, now=3)
        self.assertEqual(outcome.query_bytes, expected_query)
        self.assertEqual(outcome.response_bytes, expected_response)

    def test_forged_response_changes_nothing(self):
        good = self.b.repo.records[self.c.fp].certificates[self.b.fp]
        forged = type(good)(good.issuer_fp, good.subject_fp, good.subject_keyid, good.issued_at + 1, good.sig)
        before = trustgraph.evaluate(self.a.repo)
        apply_sync_response(self.a, self.b, SyncResponse((SyncRecord(self.c.public_key, (forged,)),)))
        self.assertEqual(trustgraph.evaluate(self.a.repo), before)
        self.assertNotIn(self.c.fp, self.a.repo.records)

    def test_subkeys_travel_with_sync(self):
        sub = keystore.generate_keypair(
            sol_config.ECDSA_P256, rng_seed=40, crypto_mode="SizeModel", calibration=CALIBRATION
        ).public
        self.c.register_subkey(sub, "chat", 5)
        sync_run(self.b, self.c, now=6)
        sync_run(self.a, self.b, now=7)
        self.assertEqual([s.subkey for s in trustgraph.subkeys_for(self.a.repo, self.c.fp)], [sub])

    def test_declined_material_not_offered_again(self):
        a = node("a", 11, TrustConfig(maxdegree=2))
        b, c, d, e = node("b", 12), node("c", 13), node("d", 14), node("e", 15)
        handshake_run(a, b, HonestComparator(), now=1)
        handshake_run(b, c, HonestComparator(), now=2)
        handshake_run(c, d, HonestComparator(), now=3)
        sync_run(b, c, now=4)

        first = sync_run(a, b, now=5)
        self.assertEqual(first.report.reasons["beyond maxdegree"], 1)
        declined = b.repo.records[d.fp].certificates[c.fp]
        self.assertEqual(b.declined_for(a.fp), {item_digest(declined)})
        second = sync_run(a, b, now=6)
        self.assertEqual((second.records_sent, second.items_merged), (0, 0))
        # a new relation changes a's query but not what b remembers
        handshake_run(a, e, HonestComparator(), now=7)
        third = sync_run(a, b, now=8)
        self.assertEqual((third.records_sent, third.items_merged), (0, 0))

    def test_material_already_held_is_not_sent(self):
        sync_run(self.a, self.b, now=3)
        handshake_run(self.a, self.c, HonestComparator(), now=4)
        outcome = sync_run(self.a, self.c, now=5)
        self.assertEqual(outcome.records_sent, 0)
        self.assertEqual(outcome.response_bytes, frame_overhead() + 4)

    def test_responder_forwards_only_within_its_horizon(self):
        a, b = node("a", 21), node("b", 22, TrustConfig(maxdegree=1))
        c, d = node("c", 23), node("d", 24)
        handshake_run(a, b, HonestComparator(), now=1)
        handshake_run(b, c, HonestComparator(), now=2)
        handshake_run(c, d, HonestComparator(), now=3)
        sync_run(b, c, now=4)
        self.assertIn(d.fp, b.repo.records)

        outcome = sync_run(a, b, now=5)
        # c's certificate over b, with c's key as a bare record
        self.assertEqual(outcome.records_sent, 2)
        self.assertIn(c.fp, a.repo.records)
        self.assertEqual(trustgraph.trust_of(a.repo, c.fp), (TrustLevel.UNKNOWN, None))
        self.assertNotIn(d.fp, a.repo.records)

    def test_query_lists_every_stored_item(self):
        query = build_sync_query(self.b)
        self.assertEqual({fp.digest for fp in query.known_fps}, set(self.b.repo.catalog()))
        self.assertEqual(len(query.known_fps), 3 + 4)
        self.assertIn(self.c.fp, query.known_fps)


class TestConvergence(unittest.TestCase):
    def distances(self, count, edges, start):
        dist = {start: 0}
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for x, y in edges:
                    for v in ((y,) if x == u else (x,) if y == u else ()):
                        if v not in dist:
                            dist[v] = dist[u] + 1
                            nxt.append(v)
            frontier = nxt
        return dist

    def sync_round(self, nodes, edges, now):
        outcomes = []
        for x, y in edges:
            outcomes.append(sync_run(nodes[x], nodes[y], now))
            outcomes.append(sync_run(nodes[y], nodes[x], now))
        return outcomes

    def test_random_topologies_reach_fixed_point(self):
        rng = random.Random(31)
        for trial in range(30):
            count = rng.randint(3, 5)
            pairs = [(x, y) for x in range(count) for y in range(x + 1, count)]
            edges = rng.sample(pairs, rng.randint(1, len(pairs)))
            nodes = [node(f"n{i}", 1000 + trial * 10 + i) for i in range(count)]
            for x, y in edges:
                handshake_run(nodes[x], nodes[y], HonestComparator(), now=1)

            for r in range(len(edges)):
                self.sync_round(nodes, edges, now=2 + r)
            settle = self.sync_round(nodes, edges, now=100)
            self.assertEqual(sum(o.items_merged for o in settle), 0, edges)
            quiet = self.sync_round(nodes, edges, now=101)
            self.assertEqual(sum(o.records_sent for o in quiet), 0, edges)

            for i, owner in enumerate(nodes):
                dist = self.distances(count, edges, i)
                for j, other in enumerate(nodes):
                    d = dist.get(j)
                    if j == i:
                        expected = (TrustLevel.ULTIMATE, 0)
                    elif d == 1:
                        expected = (TrustLevel.TRUSTED, 1)
                    elif d is not None and d <= 3:
                        expected = (TrustLevel.KNOWN, d)
                    else:
                        expected = (TrustLevel.UNKNOWN, None)
                    self.assertEqual(trustgraph.trust_of(owner.repo, other.fp), expected, (edges, i, j))


class TestRunPeer(unittest.TestCase):
    def session(self, a, b, **kwargs):
        sock_a, sock_b = socket.socketpair()
        chan_a, chan_b = TcpChannel(sock_a), TcpChannel(sock_b)
        results = {}

        def responder():
            results["b"] = run_peer(b, chan_b, False, HonestComparator(), 10, presented=a.fp)

        thread = threading.Thread(target=responder)
        thread.start()
        try:
            results["a"] = run_peer(a, chan_a, True, HonestComparator(), 10, presented=b.fp, **kwargs)
        finally:
            thread.join(timeout=30)
            chan_a.close()
            chan_b.close()
        return results

    def test_session_over_socket(self):
        a, b, c = node("a", 1), node("b", 2), node("c", 3)
        handshake_run(b, c, HonestComparator(), now=1)
        sub = keystore.generate_keypair(
            sol_config.ECDSA_P256, rng_seed=41, crypto_mode="SizeModel", calibration=CALIBRATION
        ).public
        results = self.session(a, b, subkey=(sub, "chat"))

        self.assertEqual(results["a"].peer_fp, b.fp)
        self.assertEqual(results["b"].peer_fp, a.fp)
        self.assertEqual(trustgraph.trust_of(a.repo, c.fp), (TrustLevel.KNOWN, 2))
        self.assertEqual(len(trustgraph.subkeys_for(b.repo, a.fp)), 1)
        self.assertEqual(results["a"].bytes_sent, results["b"].bytes_received)
        self.assertEqual(results["b"].bytes_sent, results["a"].bytes_received)

    def test_answering_side_does_not_assume_delivery(self):
        a = node("a", 31, TrustConfig(maxdegree=1))
        b, c = node("b", 32), node("c", 33)
        handshake_run(b, c, HonestComparator(), now=1)
        self.session(a, b)
        # a stored c's key for the certificate over b but turned down b's over c
        self.assertIn(c.fp, a.repo.records)
        self.assertNotIn(b.fp, a.repo.records[c.fp].certificates)
        self.assertFalse(any(b.declined.values()))

        again = sync_run(a, b, now=11)
        self.assertEqual((again.records_sent, again.items_merged), (1, 0))
        quiet = sync_run(a, b, now=12)
        self.assertEqual(quiet.records_sent, 0)


if __name__ == "__main__":
    unittest.main()
