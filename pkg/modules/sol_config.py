# Algorithm identifiers, as used in configuration files and on the CLI
RSA2048 = "RSA2048"
ECDSA_P256 = "ECDSA_P256"
ALGORITHMS = [RSA2048, ECDSA_P256]

# Leading tag byte of the canonical public-key encoding.
# The high bit marks SizeModel placeholder keys.
ALGORITHM_TAGS = {RSA2048: 0x01, ECDSA_P256: 0x02}
MODELED_TAG_BIT = 0x80

# Trust properties and their defaults
TRUST_DEFAULTS = {
    "maxdegree": 3,
    "numknown": 1,
    "maxsubkeys": 3,
    "signaturealgorithm": ECDSA_P256,
}

# Simulation scenario defaults (experiment settings of the evaluation)
SIM_DEFAULTS = {
    "width_m": 3000.0,
    "height_m": 3000.0,
    "num_nodes": 120,
    "duration_s": 43200,
    "speed_min_mps": 0.5,
    "speed_max_mps": 1.5,
    "tx_range_m": 10.0,
    "tx_rate_bps": 2_000_000,
    "buffer_bytes": 20 * 1024 * 1024,
    "sync_interval_s": 10,
    "step_s": 1.0,
    "seed": 1,
    "crypto_mode": "SizeModel",
}
CRYPTO_MODES = ["Real", "SizeModel"]
METRICS_INTERVAL_S = 60

# Application tag used by simulated nodes when registering sub-keys
SIM_SUBKEY_APP_TAG = "sim.app"

# Keystore
KEYSTORE_MAGIC = b"SOLK"
KEYSTORE_VERSION = 1
KDF_ITERATIONS = 200_000
KDF_SALT_BYTES = 16
AEAD_NONCE_BYTES = 12
KEYSTORE_FILE = "keystore.b64"

# Certificate encodings
CERT_MAGIC = b"SOLC"
SUBKEY_CERT_MAGIC = b"SOLS"
ENCODING_VERSION = 1
MAX_APP_TAG_BYTES = 64

# Wire protocol
WIRE_VERSION = 1
MSG_KEY_OFFER = 0x01
MSG_CERT_EXCHANGE = 0x02
MSG_SYNC_QUERY = 0x03
MSG_SYNC_RESPONSE = 0x04
MSG_HEADER_FORMAT = ">BBI"
MSG_HEADER_BYTES = 6

# Repository persistence
REPO_HEADER_FILE = "repo.yml"
REPO_FORMAT_VERSION = 1
PUBKEY_FILE = "pubkey.b64"
CERT_PREFIX = "cert_"
SUBKEY_PREFIX = "subkey_"
SUBKEY_CERT_PREFIX = "subkeycert_"

# Benchmark procedure
BENCH_VALID_SIGNATURES = 1000
BENCH_INVALID_SIGNATURES = 200
BENCH_REPETITIONS = 15
BENCH_PAYLOAD_BYTES = 32

# Environment variables
ENV_OUTDIR = "SEALIGHTS_OUTDIR"
ENV_HOME = "SEALIGHTS_HOME"
ENV_CALIBRATION = "SEALIGHTS_CALIBRATION"
DEFAULT_CALIBRATION_FILE = "calibration.yml"
DEFAULT_DEMO_PORT = 47474
DEMO_SUBKEY_APP_TAG = "demo.chat"

# Metrics CSV: fixed leading columns, one known_depth_<d> column per depth
# 2..max(3, maxdegree), then the trailing columns
METRIC_LEAD_COLUMNS = ["time_s", "direct_relations_total"]
METRIC_TRAIL_COLUMNS = [
    "known_relations_total",
    "handshakes",
    "syncs",
    "aborted_transfers",
    "over_capacity_rejections",
    "handshake_bytes_cum",
    "sync_query_bytes_cum",
    "sync_response_bytes_cum",
    "total_bytes",
    "sign_ops_cum",
    "verify_ops_cum",
    "repo_bytes_mean",
    "repo_bytes_max",
]
MIN_DEPTH_COLUMNS = 3
