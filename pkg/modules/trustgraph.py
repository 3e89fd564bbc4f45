"""Trust Management Layer: the trust repository, verified merging of incoming
material, trust-level evaluation and the per-subject on-disk layout."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import click
import yaml

import modules.helpers as helpers
import modules.keystore as keystore
import modules.sol_config as sol_config
from modules.errors import CorruptRepository, MalformedEncoding
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


@dataclass
class SubjectRecord:
    subject_key: PublicKeyBytes
    certificates: Dict[Fingerprint, Certificate] = field(default_factory=dict)
    subkeys: Dict[Fingerprint, SubKeyCertificate] = field(default_factory=dict)

    @property
    def fp(self) -> Fingerprint:
        return fingerprint(self.subject_key)


@dataclass
class TrustRepository:
    owner_key: PublicKeyBytes
    config: TrustConfig = field(default_factory=TrustConfig)
    records: Dict[Fingerprint, SubjectRecord] = field(default_factory=dict)
    revision: int = 0

    def __post_init__(self):
        self.owner_fp = fingerprint(self.owner_key)
        if self.owner_fp not in self.records:
            self.records[self.owner_fp] = SubjectRecord(self.owner_key)
        self._assessment = None
        self._assessment_revision = -1
        self._catalog: Dict[bytes, object] = {}
        self._catalog_revision = -1
        self.stored_bytes = sum(
            helpers.b64_len(len(content))
            for record in self.records.values()
            for content in record_files(record).values()
        )

    def key_of(self, fp: Fingerprint) -> Optional[PublicKeyBytes]:
        record = self.records.get(fp)
        return record.subject_key if record else None

    def certificates(self) -> List[Certificate]:
        return [c for r in self.records.values() for c in r.certificates.values()]

    def subkey_certificates(self) -> List[SubKeyCertificate]:
        return [s for r in self.records.values() for s in r.subkeys.values()]

    def touch(self):
        self.revision += 1

    def catalog(self) -> Dict[bytes, object]:
        """Every stored item under its sync fingerprint (see catalog_digest)."""
        if self._catalog_revision != self.revision:
            items = [r.subject_key for r in self.records.values()]
            items += self.certificates() + self.subkey_certificates()
            self._catalog = {catalog_digest(i): i for i in items}
            self._catalog_revision = self.revision
        return self._catalog

    def assessment(self) -> "TrustAssessment":
        """Cached evaluate(); recomputed whenever the repository changed."""
        if self._assessment is None or self._assessment_revision != self.revision:
            self._assessment = evaluate(self)
            self._assessment_revision = self.revision
        return self._assessment

    # Unchecked insertion, used by load() and by merge() once an item has
    # passed every check.
    def add_subject(self, key: PublicKeyBytes) -> SubjectRecord:
        fp = fingerprint(key)
        if fp not in self.records:
            self.records[fp] = SubjectRecord(key)
            self.stored_bytes += _item_size(key)
            self.touch()
        return self.records[fp]

    def add_certificate(self, cert: Certificate) -> bool:
        record = self.records[cert.subject_fp]
        current = record.certificates.get(cert.issuer_fp)
        if current is not None and not _newer(cert, current):
            return False
        if current is not None:
            self.stored_bytes -= _item_size(current)
        record.certificates[cert.issuer_fp] = cert
        self.stored_bytes += _item_size(cert)
        self.touch()
        return True

    def add_subkey(self, cert: SubKeyCertificate) -> bool:
        record = self.records[cert.device_fp]
        current = record.subkeys.get(cert.subkey_fp)
        if current is not None and not _newer(cert, current):
            return False
        if current is not None:
            self.stored_bytes -= _item_size(current)
        record.subkeys[cert.subkey_fp] = cert
        self.stored_bytes += _item_size(cert)
        self.touch()
        return True


def catalog_digest(item) -> bytes:
    """Keys are listed by device fingerprint, everything else by item digest."""
    if isinstance(item, PublicKeyBytes):
        return fingerprint(item).digest
    return item_digest(item)


def _newer(candidate, current) -> bool:
    """Newest issued_at wins; equal timestamps keep the smaller signature."""
    if candidate.issued_at != current.issued_at:
        return candidate.issued_at > current.issued_at
    return candidate.sig < current.sig


@dataclass
class TrustAssessment:
    levels: Dict[Fingerprint, TrustLevel]
    depth: Dict[Fingerprint, int]

    def level_of(self, fp: Fingerprint) -> TrustLevel:
        return self.levels.get(fp, TrustLevel.UNKNOWN)

    def count(self, level: TrustLevel) -> int:
        return sum(1 for lv in self.levels.values() if lv == level)

    def known_by_depth(self) -> Dict[int, int]:
        counts: Dict[int, int] = Counter()
        for fp, lv in self.levels.items():
            if lv == TrustLevel.KNOWN:
                counts[self.depth[fp]] += 1
        return dict(counts)


def _issuers_by_subject(certs: Iterable[Certificate]) -> Dict[Fingerprint, set]:
    issuers: Dict[Fingerprint, set] = {}
    for cert in certs:
        if cert.issuer_fp != cert.subject_fp:
            issuers.setdefault(cert.subject_fp, set()).add(cert.issuer_fp)
    return issuers


def evaluate_graph(
    owner_fp: Fingerprint,
    subjects: Iterable[Fingerprint],
    certs: Iterable[Certificate],
    config: TrustConfig,
) -> TrustAssessment:
    """Least fixed point of the trust rules over a certificate set.

    owner is Ultimate at depth 0; a subject signed by the owner is Trusted at
    depth 1; otherwise it is Known when a Trusted issuer signed it (depth 2) or
    when at least `numknown` Known issuers signed it (depth = the shallowest
    such issuer + 1), provided the depth stays within maxdegree."""
    issuers = _issuers_by_subject(certs)
    levels = {fp: TrustLevel.UNKNOWN for fp in subjects}
    depth: Dict[Fingerprint, int] = {}
    levels[owner_fp] = TrustLevel.ULTIMATE
    depth[owner_fp] = 0
    for subject, signers in issuers.items():
        if subject != owner_fp and owner_fp in signers:
            levels[subject] = TrustLevel.TRUSTED
            depth[subject] = 1
    candidates = [
        s for s in sorted(issuers) if levels.get(s, TrustLevel.UNKNOWN) < TrustLevel.TRUSTED
    ]
    changed = True
    while changed:
        changed = False
        for subject in candidates:
            signers = issuers[subject]
            best = None
            if config.maxdegree >= 2 and any(levels.get(i) == TrustLevel.TRUSTED for i in signers):
                best = 2
            known = [i for i in signers if levels.get(i) == TrustLevel.KNOWN]
            if len(known) >= config.numknown:
                via_known = min(depth[i] for i in known) + 1
                best = via_known if best is None else min(best, via_known)
            if best is None or best > config.maxdegree:
                continue
            if levels.get(subject) != TrustLevel.KNOWN or best < depth[subject]:
                levels[subject] = TrustLevel.KNOWN
                depth[subject] = best
                changed = True
    return TrustAssessment(levels, depth)


def reference_assessment(
    owner_fp: Fingerprint,
    subjects: Iterable[Fingerprint],
    certs: Iterable[Certificate],
    config: TrustConfig,
) -> TrustAssessment:
    """Slow evaluation used to cross-check evaluate_graph(): every round
    recomputes all subjects from the previous round's snapshot."""
    certs = list(certs)
    subjects = set(subjects) | {c.subject_fp for c in certs} | {owner_fp}
    levels = {fp: TrustLevel.UNKNOWN for fp in subjects}
    depth: Dict[Fingerprint, int] = {}
    levels[owner_fp], depth[owner_fp] = TrustLevel.ULTIMATE, 0
    for cert in certs:
        if cert.issuer_fp == owner_fp and cert.subject_fp != owner_fp:
            levels[cert.subject_fp], depth[cert.subject_fp] = TrustLevel.TRUSTED, 1
    while True:
        snapshot_levels, snapshot_depth = dict(levels), dict(depth)
        for subject in subjects:
            if snapshot_levels.get(subject, TrustLevel.UNKNOWN) >= TrustLevel.TRUSTED:
                continue
            signers = {c.issuer_fp for c in certs if c.subject_fp == subject and c.issuer_fp != subject}
            options = []
            if config.maxdegree >= 2 and any(snapshot_levels.get(s) == TrustLevel.TRUSTED for s in signers):
                options.append(2)
            known = [s for s in signers if snapshot_levels.get(s) == TrustLevel.KNOWN]
            if len(known) >= config.numknown:
                options.append(min(snapshot_depth[s] for s in known) + 1)
            options = [d for d in options if d <= config.maxdegree]
            if options:
                levels[subject], depth[subject] = TrustLevel.KNOWN, min(options)
        if levels == snapshot_levels and depth == snapshot_depth:
            break
    return TrustAssessment(levels, depth)


def evaluate(repo: TrustRepository) -> TrustAssessment:
    return evaluate_graph(repo.owner_fp, repo.records.keys(), repo.certificates(), repo.config)


def trust_of(repo: TrustRepository, fp: Fingerprint) -> Tuple[TrustLevel, Optional[int]]:
    """Trust level and certification depth of a device, as seen by the owner."""
    assessment = repo.assessment()
    return assessment.level_of(fp), assessment.depth.get(fp)


def subkeys_for(
    repo: TrustRepository, fp: Fingerprint, assessment: Optional[TrustAssessment] = None
) -> List[SubKeyCertificate]:
    """Sub-key certificates of a device, only when that device is at least Known."""
    assessment = assessment or repo.assessment()
    if assessment.level_of(fp) == TrustLevel.UNKNOWN or fp not in repo.records:
        return []
    return sorted(repo.records[fp].subkeys.values(), key=lambda s: (s.app_tag, s.subkey_fp))


@dataclass
class MergeReport:
    accepted: int = 0
    rejected: int = 0
    duplicates: int = 0
    reasons: Counter = field(default_factory=Counter)
    over_capacity: bool = False

    def reject(self, reason: str, count: int = 1):
        self.rejected += count
        self.reasons[reason] += count

    def duplicate(self):
        self.duplicates += 1
        self.reasons["duplicate"] += 1


def _item_size(item) -> int:
    if isinstance(item, PublicKeyBytes):
        return helpers.b64_len(len(item.encoded))
    if isinstance(item, Certificate):
        return helpers.b64_len(len(encode_certificate(item)))
    return helpers.b64_len(len(item.subkey.encoded)) + helpers.b64_len(
        len(encode_subkey_certificate(item))
    )


def merge(
    repo: TrustRepository,
    incoming: Iterable,
    counter: Optional[keystore.OpCounter] = None,
    capacity_bytes: Optional[int] = None,
    dry_run: bool = False,
) -> MergeReport:
    """Merge keys, certificates and sub-key certificates into `repo`.

    Keys are staged first. A certificate is accepted when both keys are
    present, its signature verifies, and it can contribute within maxdegree:
    the subject is not Unknown once the batch is applied, or the issuer is
    at least Known below maxdegree. Certificates over the owner are kept as
    inbound reputation. New keys left without any accepted certificate are
    dropped. With `capacity_bytes`, a batch that would grow the repository
    past the cap is rejected as a whole. `dry_run` reports without storing."""
    report = MergeReport()
    keys: Dict[Fingerprint, PublicKeyBytes] = {}
    certs: List[Certificate] = []
    subkeys: List[SubKeyCertificate] = []
    for item in incoming:
        if isinstance(item, PublicKeyBytes):
            fp = fingerprint(item)
            if fp in repo.records or fp in keys:
                report.duplicate()
            else:
                keys[fp] = item
        elif isinstance(item, Certificate):
            certs.append(item)
        elif isinstance(item, SubKeyCertificate):
            subkeys.append(item)
        else:
            report.reject("unsupported item")

    def key_for(fp):
        return repo.key_of(fp) or keys.get(fp)

    # Verified, non-stale certificates; the newest per (issuer, subject) wins.
    staged: Dict[Tuple[Fingerprint, Fingerprint], Certificate] = {}
    for cert in sorted(certs, key=lambda c: (c.subject_fp, c.issuer_fp, c.issued_at, c.sig)):
        slot = (cert.issuer_fp, cert.subject_fp)
        existing = repo.records.get(cert.subject_fp)
        current = existing.certificates.get(cert.issuer_fp) if existing else None
        if current is not None and not _newer(cert, current):
            report.duplicate()
            continue
        if slot in staged and not _newer(cert, staged[slot]):
            report.duplicate()
            continue
        if cert.issuer_fp == cert.subject_fp:
            report.reject("self-certificate")
            continue
        subject_key, issuer_key = key_for(cert.subject_fp), key_for(cert.issuer_fp)
        if subject_key is None or issuer_key is None:
            report.reject("missing key")
            continue
        if not keystore.verify_certificate(cert, subject_key, issuer_key, counter):
            report.reject("bad signature")
            continue
        if slot in staged:
            report.duplicate()
        staged[slot] = cert

    # Reachability on the union of stored and staged material
    union = {(c.issuer_fp, c.subject_fp): c for c in repo.certificates()}
    union.update(staged)
    projected = evaluate_graph(
        repo.owner_fp, list(repo.records) + list(keys), union.values(), repo.config
    )
    accepted_certs = []
    for slot, cert in sorted(staged.items()):
        issuer_fp, subject_fp = slot
        issuer_contributes = (
            projected.level_of(issuer_fp) >= TrustLevel.KNOWN
            and projected.depth[issuer_fp] < repo.config.maxdegree
        )
        if (
            subject_fp == repo.owner_fp
            or projected.level_of(subject_fp) != TrustLevel.UNKNOWN
            or issuer_contributes
        ):
            accepted_certs.append(cert)
        else:
            report.reject("beyond maxdegree")

    used = {c.subject_fp for c in accepted_certs} | {c.issuer_fp for c in accepted_certs}
    accepted_keys = {fp: k for fp, k in keys.items() if fp in used}
    report.reject("unreachable key", len(keys) - len(accepted_keys))

    accepted_subkeys = []
    seen_subkeys = set()
    for cert in sorted(subkeys, key=lambda s: (s.device_fp, s.subkey_fp, -s.issued_at, s.sig)):
        slot = (cert.device_fp, cert.subkey_fp)
        record = repo.records.get(cert.device_fp)
        current = record.subkeys.get(cert.subkey_fp) if record else None
        if slot in seen_subkeys or (current is not None and not _newer(cert, current)):
            report.duplicate()
            continue
        device_key = repo.key_of(cert.device_fp) or accepted_keys.get(cert.device_fp)
        if device_key is None:
            report.reject("missing device key")
            continue
        if not keystore.verify_subkey_certificate(cert, device_key, counter):
            report.reject("bad signature")
            continue
        seen_subkeys.add(slot)
        accepted_subkeys.append(cert)

    if capacity_bytes is not None:
        growth = sum(_item_size(i) for i in list(accepted_keys.values()) + accepted_certs + accepted_subkeys)
        if growth and repo.stored_bytes + growth > capacity_bytes:
            report.over_capacity = True
            report.reject("over capacity", len(accepted_keys) + len(accepted_certs) + len(accepted_subkeys))
            return report

    report.accepted = len(accepted_keys) + len(accepted_certs) + len(accepted_subkeys)
    if dry_run:
        return report
    for key in accepted_keys.values():
        repo.add_subject(key)
    for cert in accepted_certs:
        repo.add_certificate(cert)
    for cert in accepted_subkeys:
        repo.add_subkey(cert)
    return report


def record_files(record: SubjectRecord) -> Dict[str, bytes]:
    """File name -> raw (not yet Base64) content for one subject directory."""
    files = {sol_config.PUBKEY_FILE: record.subject_key.encoded}
    for issuer_fp, cert in sorted(record.certificates.items()):
        files[f"{sol_config.CERT_PREFIX}{issuer_fp.hex}.b64"] = encode_certificate(cert)
    for subkey_fp, cert in sorted(record.subkeys.items()):
        files[f"{sol_config.SUBKEY_PREFIX}{subkey_fp.hex}.b64"] = cert.subkey.encoded
        files[f"{sol_config.SUBKEY_CERT_PREFIX}{subkey_fp.hex}.b64"] = encode_subkey_certificate(cert)
    return files


def repo_size_bytes(repo: TrustRepository) -> int:
    """Sum of the Base64 file sizes persist() would write (header excluded)."""
    return sum(
        helpers.b64_len(len(content))
        for record in repo.records.values()
        for content in record_files(record).values()
    )


def persist(repo: TrustRepository, root_dir) -> Path:
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": sol_config.REPO_FORMAT_VERSION,
        "owner_fp": repo.owner_fp.hex,
        "config": repo.config.to_mapping(),
    }
    with open(root / sol_config.REPO_HEADER_FILE, "w") as file:
        yaml.safe_dump(header, file, sort_keys=True)
    for fp, record in repo.records.items():
        subject_dir = root / fp.hex
        subject_dir.mkdir(exist_ok=True)
        wanted = record_files(record)
        for stale in subject_dir.glob("*.b64"):
            if stale.name not in wanted:
                stale.unlink()
        for name, content in wanted.items():
            (subject_dir / name).write_bytes(helpers.b64_encode(content))
    return root


@dataclass
class LoadReport:
    dropped: List[Tuple[str, str]] = field(default_factory=list)

    def drop(self, path: Path, reason: str):
        self.dropped.append((str(path), reason))


def _read_b64(path: Path) -> bytes:
    return helpers.b64_decode(path.read_bytes())


def read_header(root_dir) -> dict:
    header_path = Path(root_dir) / sol_config.REPO_HEADER_FILE
    if not header_path.is_file():
        raise CorruptRepository(f"{root_dir} has no {sol_config.REPO_HEADER_FILE}")
    with open(header_path, "r") as file:
        header = yaml.safe_load(file) or {}
    if "owner_fp" not in header:
        raise CorruptRepository(f"{header_path} does not name the owner fingerprint")
    return header


def load_with_report(
    root_dir, config: Optional[TrustConfig] = None, warn: bool = True
) -> Tuple[TrustRepository, LoadReport]:
    """Load a persisted repository, re-verifying every file. Files that fail
    to decode or verify are dropped and listed in the report."""
    root = Path(root_dir)
    header = read_header(root)
    owner_fp = Fingerprint.from_hex(str(header["owner_fp"]))
    if config is None:
        config = TrustConfig.from_mapping(header.get("config") or {})
    report = LoadReport()

    subjects: Dict[Fingerprint, PublicKeyBytes] = {}
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        key_path = subject_dir / sol_config.PUBKEY_FILE
        try:
            key = decode_public_key(_read_b64(key_path))
        except (OSError, MalformedEncoding) as e:
            key, reason = None, str(e)
        else:
            reason = "public key does not match directory fingerprint"
        if key is None or fingerprint(key).hex != subject_dir.name:
            report.drop(key_path, reason)
            for orphan in sorted(subject_dir.glob("*.b64")):
                if orphan != key_path:
                    report.drop(orphan, "subject key unreadable")
            continue
        subjects[fingerprint(key)] = key
    if owner_fp not in subjects:
        raise CorruptRepository(f"{root} has no readable owner record {owner_fp.hex}")

    repo = TrustRepository(subjects[owner_fp], config)
    for fp, key in subjects.items():
        repo.add_subject(key)
    for fp in sorted(subjects):
        subject_dir = root / fp.hex
        for cert_path in sorted(subject_dir.glob(f"{sol_config.CERT_PREFIX}*.b64")):
            try:
                cert = decode_certificate(_read_b64(cert_path))
            except MalformedEncoding as e:
                report.drop(cert_path, str(e))
                continue
            issuer_key = subjects.get(cert.issuer_fp)
            if cert.subject_fp != fp or cert_path.name != f"{sol_config.CERT_PREFIX}{cert.issuer_fp.hex}.b64":
                report.drop(cert_path, "certificate filed under the wrong subject or issuer")
            elif issuer_key is None:
                report.drop(cert_path, "issuer key missing")
            elif not keystore.verify_certificate(cert, subjects[fp], issuer_key):
                report.drop(cert_path, "signature does not verify")
            else:
                repo.add_certificate(cert)
        for cert_path in sorted(subject_dir.glob(f"{sol_config.SUBKEY_CERT_PREFIX}*.b64")):
            subkey_hex = cert_path.name[len(sol_config.SUBKEY_CERT_PREFIX) : -len(".b64")]
            subkey_path = subject_dir / f"{sol_config.SUBKEY_PREFIX}{subkey_hex}.b64"
            try:
                cert = decode_subkey_certificate(_read_b64(cert_path))
                subkey = decode_public_key(_read_b64(subkey_path))
            except (OSError, MalformedEncoding) as e:
                report.drop(cert_path, str(e))
                continue
            if subkey != cert.subkey or cert.subkey_fp.hex != subkey_hex or cert.device_fp != fp:
                report.drop(cert_path, "sub-key files disagree")
            elif not keystore.verify_subkey_certificate(cert, subjects[fp]):
                report.drop(cert_path, "signature does not verify")
            else:
                repo.add_subkey(cert)

    if warn:
        for path, reason in report.dropped:
            click.echo(
                click.style(f"WARNING: dropped {path}: {reason}", fg="yellow"),
                err=True,
            )
    return repo, report


def load(root_dir, config: Optional[TrustConfig] = None) -> TrustRepository:
    repo, _ = load_with_report(root_dir, config)
    return repo


def verify_repository(root_dir) -> List[Tuple[str, bool, str]]:
    """(file, ok, reason) for every stored file of a persisted repository."""
    root = Path(root_dir)
    _, report = load_with_report(root, warn=False)
    failed = dict(report.dropped)
    results = []
    for path in sorted(root.glob("*/*.b64")):
        if path.name.startswith(sol_config.SUBKEY_PREFIX):
            # checked together with its sub-key certificate
            twin = path.parent / path.name.replace(sol_config.SUBKEY_PREFIX, sol_config.SUBKEY_CERT_PREFIX, 1)
            reason = failed.get(str(twin))
            results.append((str(path), reason is None, reason or "ok"))
            continue
        reason = failed.get(str(path))
        results.append((str(path), reason is None, reason or "ok"))
    return results
