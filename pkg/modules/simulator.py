"""Mobility simulation of trust propagation: random-waypoint nodes meet,
handshake on first contact, then synchronize every sync interval while in
range. Metrics are sampled on a fixed cadence and exported as CSV."""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import yaml
from tqdm import tqdm

import modules.helpers as helpers
import modules.keystore as keystore
import modules.mobility as mobility
import modules.protocol as protocol
import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
import modules.trustgraph as trustgraph
from modules.errors import InvalidConfig, InvariantViolation
from modules.model import TrustConfig, TrustLevel

Pair = Tuple[int, int]


@dataclass(frozen=True)
class SimConfig:
    width_m: float = sol_config.SIM_DEFAULTS["width_m"]
    height_m: float = sol_config.SIM_DEFAULTS["height_m"]
    num_nodes: int = sol_config.SIM_DEFAULTS["num_nodes"]
    duration_s: int = sol_config.SIM_DEFAULTS["duration_s"]
    speed_min_mps: float = sol_config.SIM_DEFAULTS["speed_min_mps"]
    speed_max_mps: float = sol_config.SIM_DEFAULTS["speed_max_mps"]
    tx_range_m: float = sol_config.SIM_DEFAULTS["tx_range_m"]
    tx_rate_bps: int = sol_config.SIM_DEFAULTS["tx_rate_bps"]
    buffer_bytes: int = sol_config.SIM_DEFAULTS["buffer_bytes"]
    sync_interval_s: float = sol_config.SIM_DEFAULTS["sync_interval_s"]
    trust: TrustConfig = field(default_factory=TrustConfig)
    seed: int = sol_config.SIM_DEFAULTS["seed"]
    crypto_mode: str = sol_config.SIM_DEFAULTS["crypto_mode"]
    step_s: float = sol_config.SIM_DEFAULTS["step_s"]
    subkeys_per_node: int = 0

    def __post_init__(self):
        positive = ["width_m", "height_m", "num_nodes", "duration_s", "tx_range_m", "tx_rate_bps",
                    "buffer_bytes", "sync_interval_s", "step_s"]
        for name in positive:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
                raise InvalidConfig(f"{name} must be a positive number, got {value!r}")
        for name in ("num_nodes", "seed", "subkeys_per_node"):
            if isinstance(getattr(self, name), bool) or not isinstance(getattr(self, name), int):
                raise InvalidConfig(f"{name} must be an integer, got {getattr(self, name)!r}")
        if self.speed_min_mps < 0 or self.speed_max_mps < self.speed_min_mps:
            raise InvalidConfig(
                f"need 0 <= speed_min_mps <= speed_max_mps, got {self.speed_min_mps}, {self.speed_max_mps}"
            )
        if self.crypto_mode not in sol_config.CRYPTO_MODES:
            raise InvalidConfig(f"crypto_mode must be one of {sol_config.CRYPTO_MODES}, got {self.crypto_mode!r}")
        if not isinstance(self.trust, TrustConfig):
            raise InvalidConfig("trust must be a TrustConfig")
        if not 0 <= self.subkeys_per_node <= self.trust.maxsubkeys:
            raise InvalidConfig(
                f"subkeys_per_node must be between 0 and maxsubkeys ({self.trust.maxsubkeys})"
            )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SimConfig":
        mapping = dict(mapping or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise InvalidConfig(f"unknown scenario settings: {', '.join(sorted(unknown))}")
        trust = mapping.pop("trust", None)
        if not isinstance(trust, TrustConfig):
            if trust is not None and not isinstance(trust, dict):
                raise InvalidConfig("trust must be a mapping")
            trust = TrustConfig.from_mapping(trust or {})
        return cls(trust=trust, **mapping)

    def to_mapping(self) -> dict:
        data = dataclasses.asdict(self)
        data["trust"] = self.trust.to_mapping()
        return data

    def with_overrides(self, trust: Optional[dict] = None, **overrides) -> "SimConfig":
        """Copy with every non-None override applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        trust_changes = {k: v for k, v in (trust or {}).items() if v is not None}
        if trust_changes:
            changes["trust"] = TrustConfig.from_mapping({**self.trust.to_mapping(), **trust_changes})
        return SimConfig.from_mapping({**self.to_mapping(), **changes})

    @property
    def depth_columns(self) -> List[int]:
        return list(range(2, max(sol_config.MIN_DEPTH_COLUMNS, self.trust.maxdegree) + 1))


def load_scenario(path) -> SimConfig:
    with open(path, "r") as file:
        data = yaml.safe_load(file) or {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"scenario {path} must be a mapping of SimConfig fields")
    return SimConfig.from_mapping(data)


@dataclass
class NodeState:
    context: protocol.NodeContext
    motion: mobility.MotionState
    next_sync_at: Dict[int, float] = field(default_factory=dict)
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def position(self):
        return self.motion.position


@dataclass
class Transfer:
    kind: str
    exchanges: List[protocol.PendingExchange]
    started_at: float
    finish_at: float


@dataclass
class MetricsLog:
    columns: List[str]
    rows: List[list] = field(default_factory=list)

    def series(self, column: str) -> list:
        index = self.columns.index(column)
        return [row[index] for row in self.rows]

    def final(self, column: str):
        return self.series(column)[-1] if self.rows else None

    def as_dicts(self) -> List[dict]:
        return [dict(zip(self.columns, row)) for row in self.rows]


def metric_columns(config: SimConfig) -> List[str]:
    return (
        sol_config.METRIC_LEAD_COLUMNS
        + [f"known_depth_{d}" for d in config.depth_columns]
        + sol_config.METRIC_TRAIL_COLUMNS
    )


class Simulation:
    """One deterministic run. Construct, then call run()."""

    def __init__(self, config: SimConfig, calibration: Optional[sizemodel.Calibration] = None):
        self.config = config
        self.world = mobility.World(config.width_m, config.height_m, config.speed_min_mps, config.speed_max_mps)
        self.rng = np.random.default_rng(config.seed)
        if config.crypto_mode == "SizeModel":
            calibration = calibration or sizemodel.load_calibration()
        self.calibration = calibration
        self.oob = protocol.HonestComparator()
        self.nodes = [self._make_node(i) for i in range(config.num_nodes)]
        self.pending: Dict[Pair, Transfer] = {}
        self.totals = dict.fromkeys(
            ["handshakes", "syncs", "aborted_transfers", "over_capacity_rejections",
             "handshake_bytes", "sync_query_bytes", "sync_response_bytes"],
            0,
        )
        self.log = MetricsLog(metric_columns(config))
        self.now = 0.0

    def _keypair(self, *parts) -> keystore.DeviceKeyPair:
        return keystore.generate_keypair(
            self.config.trust.signaturealgorithm,
            rng_seed=helpers.derive_seed(self.config.seed, *parts),
            crypto_mode=self.config.crypto_mode,
            calibration=self.calibration,
        )

    def _make_node(self, index: int) -> NodeState:
        context = protocol.make_node(
            f"node{index}", self._keypair("device", index), self.config.trust, self.config.buffer_bytes
        )
        for k in range(self.config.subkeys_per_node):
            context.register_subkey(self._keypair("subkey", index, k).public, sol_config.SIM_SUBKEY_APP_TAG, 0)
        return NodeState(context, mobility.place(self.world, self.rng))

    # Exchanges

    def _related(self, a: NodeState, b: NodeState) -> bool:
        return protocol.has_relationship(a.context, b.context.fp) and protocol.has_relationship(
            b.context, a.context.fp
        )

    def _start(self, pair: Pair) -> Optional[Transfer]:
        a, b = self.nodes[pair[0]], self.nodes[pair[1]]
        if not self._related(a, b):
            exchanges = [protocol.plan_handshake(a.context, b.context, self.oob, int(self.now))]
            kind = "handshake"
        elif self.now >= a.next_sync_at.get(pair[1], 0.0):
            exchanges = [
                protocol.plan_sync(a.context, b.context, int(self.now)),
                protocol.plan_sync(b.context, a.context, int(self.now)),
            ]
            kind = "sync"
        else:
            return None
        total = 0
        for exchange in exchanges:
            for name, n in exchange.bytes_sent.items():
                sender, receiver = (a, b) if name == a.context.name else (b, a)
                sender.bytes_sent += n
                receiver.bytes_received += n
                total += n
        if kind == "handshake":
            self.totals["handshake_bytes"] += total
        else:
            for exchange, requester in zip(exchanges, (a, b)):
                query = exchange.bytes_sent[requester.context.name]
                self.totals["sync_query_bytes"] += query
                self.totals["sync_response_bytes"] += exchange.total_bytes - query
        duration = total * 8 / self.config.tx_rate_bps
        return Transfer(kind, exchanges, self.now, self.now + duration)

    def _finish(self, pair: Pair, transfer: Transfer):
        a, b = self.nodes[pair[0]], self.nodes[pair[1]]
        outcomes = [exchange.commit() for exchange in transfer.exchanges]
        if transfer.kind == "handshake":
            self.totals["handshakes"] += 1
            if not outcomes[0].stored:
                self.totals["over_capacity_rejections"] += 1
                return
            next_at = transfer.finish_at
        else:
            self.totals["syncs"] += 1
            self.totals["over_capacity_rejections"] += sum(1 for o in outcomes if o.report.over_capacity)
            next_at = transfer.started_at + self.config.sync_interval_s
        a.next_sync_at[pair[1]] = next_at
        b.next_sync_at[pair[0]] = next_at

    def step(self, in_contact):
        """Advance pending transfers and open new ones for the current contacts.
        A transfer completes if the contact survives until it ends; positions
        only change at step boundaries."""
        horizon = self.now + self.config.step_s
        for pair in sorted(self.pending):
            transfer = self.pending[pair]
            if pair not in in_contact:
                self.totals["aborted_transfers"] += 1
                del self.pending[pair]
            elif transfer.finish_at <= horizon:
                del self.pending[pair]
                self._finish(pair, transfer)
        for pair in sorted(in_contact):
            if pair in self.pending:
                continue
            transfer = self._start(pair)
            if transfer is None:
                continue
            if transfer.finish_at <= horizon:
                self._finish(pair, transfer)
            else:
                self.pending[pair] = transfer

    # Metrics

    def sample(self, time_s: float) -> list:
        depths = self.config.depth_columns
        direct = 0
        known = dict.fromkeys(depths, 0)
        repo_bytes = []
        sign_ops = verify_ops = 0
        for node in self.nodes:
            assessment = node.context.repo.assessment()
            direct += assessment.count(TrustLevel.TRUSTED)
            for d, n in assessment.known_by_depth().items():
                known[d] = known.get(d, 0) + n
            repo_bytes.append(node.context.repo.stored_bytes)
            sign_ops += node.context.counter.sign_ops
            verify_ops += node.context.counter.verify_ops
        t = self.totals
        total_bytes = t["handshake_bytes"] + t["sync_query_bytes"] + t["sync_response_bytes"]
        row = (
            [int(time_s), direct]
            + [known[d] for d in depths]
            + [
                sum(known.values()),
                t["handshakes"],
                t["syncs"],
                t["aborted_transfers"],
                t["over_capacity_rejections"],
                t["handshake_bytes"],
                t["sync_query_bytes"],
                t["sync_response_bytes"],
                total_bytes,
                sign_ops,
                verify_ops,
                round(float(np.mean(repo_bytes)), 3) if repo_bytes else 0.0,
                int(np.max(repo_bytes)) if repo_bytes else 0,
            ]
        )
        self.log.rows.append(row)
        return row

    def direct_relations_symmetric(self) -> bool:
        for node in self.nodes:
            for other in self.nodes:
                if other is node:
                    continue
                if protocol.has_relationship(node.context, other.context.fp) != protocol.has_relationship(
                    other.context, node.context.fp
                ):
                    return False
        return True

    def spot_check_depths(self, count: int = 3) -> List[str]:
        """Compare the evaluation of `count` random nodes with the slow reference."""
        failures = []
        picker = np.random.default_rng(helpers.derive_seed(self.config.seed, "spot-check"))
        chosen = picker.choice(len(self.nodes), size=min(count, len(self.nodes)), replace=False)
        for index in sorted(int(i) for i in chosen):
            repo = self.nodes[index].context.repo
            fast = repo.assessment()
            slow = trustgraph.reference_assessment(
                repo.owner_fp, repo.records, repo.certificates(), repo.config
            )
            for fp in repo.records:
                if fast.level_of(fp) != slow.level_of(fp) or fast.depth.get(fp) != slow.depth.get(fp):
                    failures.append(f"{self.nodes[index].context.name}: {fp.short()}")
        return failures

    def check_invariants(self):
        problems = []
        # Per-depth counts dip when a Known device turns Trusted or shallower;
        # direct plus known never does.
        monotone = {
            column: self.log.series(column)
            for column in ["direct_relations_total", "total_bytes", "sign_ops_cum", "verify_ops_cum"]
        }
        monotone["relations_total"] = [
            d + k
            for d, k in zip(self.log.series("direct_relations_total"), self.log.series("known_relations_total"))
        ]
        if self.config.crypto_mode == "SizeModel":
            monotone["repo_bytes_max"] = self.log.series("repo_bytes_max")
        for column, series in monotone.items():
            if any(b < a for a, b in zip(series, series[1:])):
                problems.append(f"{column} decreased")
        if any(v < s for s, v in zip(self.log.series("sign_ops_cum"), self.log.series("verify_ops_cum"))):
            problems.append("verify_ops fell below sign_ops")
        if sum(n.bytes_sent for n in self.nodes) != sum(n.bytes_received for n in self.nodes):
            problems.append("bytes sent and received disagree")
        if not self.direct_relations_symmetric():
            problems.append("direct relations are not symmetric")
        problems += [f"depth mismatch at {f}" for f in self.spot_check_depths()]
        if problems:
            raise InvariantViolation("; ".join(problems))

    def run(self, progress: Optional[Callable[[int], None]] = None) -> MetricsLog:
        config = self.config
        steps = int(round(config.duration_s / config.step_s))
        next_sample = 0.0
        for k in range(steps + 1):
            self.now = k * config.step_s
            if k:
                for node in self.nodes:
                    node.motion = mobility.rwp_step(node.motion, config.step_s, self.rng, self.world)
            self.step(mobility.contacts([n.position for n in self.nodes], config.tx_range_m))
            while next_sample <= self.now + 1e-9 and next_sample <= config.duration_s:
                self.sample(next_sample)
                next_sample += sol_config.METRICS_INTERVAL_S
            if progress is not None:
                progress(k)
        self.check_invariants()
        return self.log


def run(config: SimConfig, calibration: Optional[sizemodel.Calibration] = None) -> MetricsLog:
    return Simulation(config, calibration).run()


def summary(log: MetricsLog) -> str:
    return (
        f"direct={log.final('direct_relations_total')} "
        f"known={log.final('known_relations_total')} "
        f"total_bytes={log.final('total_bytes')} "
        f"sign_ops={log.final('sign_ops_cum')} verify_ops={log.final('verify_ops_cum')}"
    )


def export_metrics(log: MetricsLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(log.columns)
        writer.writerows(log.rows)
    return path


def run_batch(
    config: SimConfig,
    seeds: List[int],
    workers: Optional[int] = None,
    quiet: bool = False,
) -> Dict[int, MetricsLog]:
    """Independent runs of `config` for each seed on a thread pool."""
    calibration = sizemodel.load_calibration() if config.crypto_mode == "SizeModel" else None
    configs = {seed: dataclasses.replace(config, seed=seed) for seed in seeds}
    results: Dict[int, MetricsLog] = {}
    with ThreadPoolExecutor(max_workers=workers or min(len(seeds), 5) or 1) as pool:
        futures = {seed: pool.submit(run, c, calibration) for seed, c in configs.items()}
        for seed in tqdm(sorted(futures), desc="Simulating seeds", leave=False, disable=quiet):
            results[seed] = futures[seed].result()
    return results
