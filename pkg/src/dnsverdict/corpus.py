"""Snapshot parsing, resolver noise filtering, and control-set construction."""
from __future__ import annotations

import enum
import ipaddress
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

logger = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10

_PRIVATE_NETS = [
    ipaddress.ip_network(n)
    for n in (
        "10.0.0.0/8",
        "172.16.0.0/12",
        "192.168.0.0/16",
        "127.0.0.0/8",
        "169.254.0.0/16",
        "100.64.0.0/10",
        "0.0.0.0/8",
        "::1/128",
        "fc00::/7",
        "fe80::/10",
    )
]


class SnapshotError(Exception):
    """Raised when a snapshot stream cannot be read or is mostly garbage."""


def normalize_ip(value: str) -> str:
    return str(ipaddress.ip_address(value.strip()))


def normalize_domain(value: str) -> str:
    return value.strip().lower().rstrip(".")


def is_private_ip(ip: str) -> bool:
    addr = ipaddress.ip_address(ip)
    return any(addr.version == net.version and addr in net for net in _PRIVATE_NETS)


@dataclass(frozen=True)
class DnsResponse:
    resolver_ip: str
    resolver_country: str
    domain: str
    rcode: int
    answers: tuple[str, ...]
    error: str | None
    timestamp: int
    is_control: bool

    def to_record(self) -> dict:
        return {
            "resolver_ip": self.resolver_ip,
            "resolver_country": self.resolver_country,
            "domain": self.domain,
            "rcode": self.rcode,
            "answers": list(self.answers),
            "error": self.error,
            "timestamp": self.timestamp,
            "is_control": self.is_control,
        }


@dataclass(frozen=True, order=True)
class ResolutionPair:
    domain: str
    ip: str


class ExclusionReason(str, enum.Enum):
    ALL_TIMEOUT = "ALL_TIMEOUT"
    ALL_NONZERO_RCODE = "ALL_NONZERO_RCODE"
    ALL_EMPTY = "ALL_EMPTY"
    ALL_PRIVATE = "ALL_PRIVATE"
    SAME_IP_SET = "SAME_IP_SET"


@dataclass(frozen=True)
class ExclusionRecord:
    resolver_ip: str
    reason: ExclusionReason


@dataclass(frozen=True)
class IpMetadata:
    asn: int | None = None
    as_name: str | None = None
    ptr: str | None = None
    cdn: str | None = None
    http_hash: str | None = None
    cert_hash: str | None = None


IpMetadataTable = dict  # str ip -> IpMetadata


@dataclass
class ParseStats:
    lines: int = 0
    malformed: int = 0
    first_malformed_line: int | None = None


@dataclass
class ControlSet:
    control_ips: dict[str, set[str]] = field(default_factory=dict)
    control_http_hashes: dict[str, set[str]] = field(default_factory=dict)
    control_cert_hashes: dict[str, set[str]] = field(default_factory=dict)
    control_asns: dict[str, set[int]] = field(default_factory=dict)
    control_as_names: dict[str, set[str]] = field(default_factory=dict)
    control_cdns: dict[str, set[str]] = field(default_factory=dict)
    invalid_control_certs: dict[str, set] = field(default_factory=dict)
    # domains with at least one rcode-0 control answer
    resolvable: set[str] = field(default_factory=set)
    missing_domains: list[str] = field(default_factory=list)
    control_cert_count: int = 0

    def domains(self) -> set[str]:
        return set(self.control_ips)


def _parse_record(obj: dict) -> DnsResponse:
    domain = obj["domain"]
    if not isinstance(domain, str):
        raise ValueError("domain must be a string")
    domain = normalize_domain(domain)
    if not domain or "." not in domain:
        raise ValueError(f"bad domain {domain!r}")
    rcode = obj["rcode"]
    if isinstance(rcode, bool) or not isinstance(rcode, int) or not -1 <= rcode <= 23:
        raise ValueError(f"bad rcode {rcode!r}")
    raw_answers = obj.get("answers") or []
    if not isinstance(raw_answers, list):
        raise ValueError("answers must be a list")
    answers: list[str] = []
    for a in raw_answers:
        ip = normalize_ip(a)
        if ip not in answers:
            answers.append(ip)
    error = obj.get("error")
    if error is not None and not isinstance(error, str):
        raise ValueError("error must be a string or null")
    if rcode == -1 and (answers or not error):
        raise ValueError("timeout records carry an error and no answers")
    is_control = obj.get("is_control", False)
    if not isinstance(is_control, bool):
        raise ValueError("is_control must be boolean")
    return DnsResponse(
        resolver_ip=normalize_ip(obj["resolver_ip"]),
        resolver_country=str(obj.get("resolver_country") or "ZZ").upper(),
        domain=domain,
        rcode=rcode,
        answers=tuple(answers),
        error=error,
        timestamp=int(obj.get("timestamp", 0)),
        is_control=is_control,
    )


def parse_snapshot(stream: IO[bytes] | Iterable[bytes], stats: ParseStats | None = None) -> list[DnsResponse]:
    """Parse newline-delimited JSON snapshot records.

    Malformed lines are skipped and counted in ``stats``. More than 10%
    malformed lines aborts with :class:`SnapshotError`.
    """
    stats = stats if stats is not None else ParseStats()
    out: list[DnsResponse] = []
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.decode("utf-8", errors="replace") if isinstance(raw, bytes) else raw
            if not line.strip():
                continue
            stats.lines += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not an object")
                out.append(_parse_record(obj))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                stats.malformed += 1
                if stats.first_malformed_line is None:
                    stats.first_malformed_line = lineno
                logger.debug("snapshot line %d skipped: %s", lineno, exc)
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot: {exc}") from exc
    if stats.lines and stats.malformed / stats.lines > MAX_MALFORMED_FRACTION:
        raise SnapshotError(
            f"{stats.malformed}/{stats.lines} malformed snapshot lines "
            f"(first at line {stats.first_malformed_line})"
        )
    if stats.malformed:
        logger.warning("skipped %d malformed snapshot lines", stats.malformed)
    return out


def write_snapshot(responses: Iterable[DnsResponse], stream: IO[str]) -> None:
    for r in responses:
        stream.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def _exclusion_reason(responses: list[DnsResponse]) -> ExclusionReason | None:
    if all(r.rcode == -1 for r in responses):
        return ExclusionReason.ALL_TIMEOUT
    if all(r.rcode != 0 for r in responses):
        return ExclusionReason.ALL_NONZERO_RCODE
    if all(not r.answers for r in responses):
        return ExclusionReason.ALL_EMPTY
    answers = [ip for r in responses for ip in r.answers]
    if answers and all(is_private_ip(ip) for ip in answers):
        return ExclusionReason.ALL_PRIVATE
    domains = {r.domain for r in responses}
    if len(domains) >= 2 and all(r.answers for r in responses):
        sets = {frozenset(r.answers) for r in responses}
        if len(sets) == 1:
            return ExclusionReason.SAME_IP_SET
    return None


def filter_resolvers(responses: list[DnsResponse]) -> tuple[list[DnsResponse], list[ExclusionRecord]]:
    """Drop test resolvers whose answers are uniformly erroneous.

    Control responses always pass through. Rules are checked in
    :class:`ExclusionReason` order and the first hit is reported.
    """
    by_resolver: dict[str, list[DnsResponse]] = defaultdict(list)
    for r in responses:
        if not r.is_control:
            by_resolver[r.resolver_ip].append(r)
    excluded: dict[str, ExclusionReason] = {}
    for resolver, rs in by_resolver.items():
        reason = _exclusion_reason(rs)
        if reason is not None:
            excluded[resolver] = reason
    kept = [r for r in responses if r.is_control or r.resolver_ip not in excluded]
    records = [ExclusionRecord(ip, reason) for ip, reason in excluded.items()]
    return kept, records


def dedup_pairs(responses: Iterable[DnsResponse]) -> list[ResolutionPair]:
    seen: dict[ResolutionPair, None] = {}
    for r in responses:
        for ip in r.answers:
            seen.setdefault(ResolutionPair(r.domain, ip), None)
    return list(seen)


def tested_pairs(responses: Iterable[DnsResponse]) -> list[ResolutionPair]:
    return dedup_pairs(r for r in responses if not r.is_control)


def control_pairs(responses: Iterable[DnsResponse]) -> list[ResolutionPair]:
    return dedup_pairs(r for r in responses if r.is_control)


def build_control_set(responses, metadata, control_fetches=(), policy=None) -> ControlSet:
    """Collect per-domain control values from control resolutions.

    ``control_fetches`` are fetches of control (domain, ip) pairs; with a
    ``policy`` their chains are assessed and every invalid certificate is
    recorded in ``invalid_control_certs``.
    """
    from . import certval

    cs = ControlSet()
    test_domains: list[str] = []
    for r in responses:
        if not r.is_control:
            test_domains.append(r.domain)
            continue
        d = r.domain
        for attr in (
            "control_ips",
            "control_http_hashes",
            "control_cert_hashes",
            "control_asns",
            "control_as_names",
            "control_cdns",
            "invalid_control_certs",
        ):
            getattr(cs, attr).setdefault(d, set())
        if r.rcode == 0 and r.answers:
            cs.resolvable.add(d)
        for ip in r.answers:
            cs.control_ips[d].add(ip)
            meta = metadata.get(ip)
            if meta is None:
                continue
            if meta.http_hash:
                cs.control_http_hashes[d].add(meta.http_hash)
            if meta.cert_hash:
                cs.control_cert_hashes[d].add(meta.cert_hash)
            if meta.asn is not None:
                cs.control_asns[d].add(meta.asn)
            if meta.as_name:
                cs.control_as_names[d].add(meta.as_name)
            if meta.cdn:
                cs.control_cdns[d].add(meta.cdn)

    seen_leaves: set[str] = set()
    for fetch in control_fetches:
        d = fetch.pair.domain
        if d not in cs.control_ips or not fetch.chain or policy is None:
            continue
        assessment = certval.assess(fetch.chain, d, policy, reference_time=fetch.fetched_at)
        leaf_key = certval.raw_fingerprint(fetch.chain[0])
        if leaf_key not in seen_leaves:
            seen_leaves.add(leaf_key)
            cs.control_cert_count += 1
        if assessment.case is not certval.CertCase.VALID:
            cs.invalid_control_certs[d].add(certval.signature_of(assessment, fetch.chain[0]))

    missing = sorted({d for d in test_domains if d not in cs.control_ips})
    if missing:
        logger.warning("%d tested domains have no control responses: %s", len(missing), ", ".join(missing[:10]))
    cs.missing_domains = missing
    return cs


def iter_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def load_metadata(path) -> dict[str, IpMetadata]:
    table: dict[str, IpMetadata] = {}
    for rec in iter_jsonl(path):
        ip = normalize_ip(rec["ip"])
        table[ip] = IpMetadata(
            asn=rec.get("asn"),
            as_name=rec.get("as_name"),
            ptr=rec.get("ptr"),
            cdn=rec.get("cdn"),
            http_hash=rec.get("http_hash"),
            cert_hash=rec.get("cert_hash"),
        )
    return table


def write_metadata(table: dict[str, IpMetadata], stream: IO[str]) -> None:
    for ip in sorted(table, key=lambda s: ipaddress.ip_address(s)):
        m = table[ip]
        rec = {"ip": ip, "asn": m.asn, "as_name": m.as_name, "ptr": m.ptr, "cdn": m.cdn,
               "http_hash": m.http_hash, "cert_hash": m.cert_hash}
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
