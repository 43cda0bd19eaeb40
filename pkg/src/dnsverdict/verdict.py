"""Combine control matching, certificate cases, fingerprints, and RCODE signals into verdicts."""
from __future__ import annotations

import enum
import ipaddress
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from . import blockpage, certval
from .certval import CertAssessment, CertCase, ParsedCert
from .corpus import ControlSet, DnsResponse, ResolutionPair, is_private_ip


class Label(str, enum.Enum):
    UNMANIPULATED_CONTROL_IP = "UNMANIPULATED_CONTROL_IP"
    UNMANIPULATED_VALID_CERT = "UNMANIPULATED_VALID_CERT"
    UNMANIPULATED_MALFORMED_DOMAIN = "UNMANIPULATED_MALFORMED_DOMAIN"
    UNMANIPULATED_MIXED = "UNMANIPULATED_MIXED"
    MANIPULATED_BLOCKPAGE = "MANIPULATED_BLOCKPAGE"
    MANIPULATED_INVALID_CERT = "MANIPULATED_INVALID_CERT"
    MANIPULATED_PRIVATE_IP = "MANIPULATED_PRIVATE_IP"
    MANIPULATED_RCODE = "MANIPULATED_RCODE"
    UNKNOWN_HTTP_ONLY = "UNKNOWN_HTTP_ONLY"
    UNKNOWN_CONNECTION_ERROR = "UNKNOWN_CONNECTION_ERROR"
    UNKNOWN_NO_ANSWER = "UNKNOWN_NO_ANSWER"

    @property
    def manipulated(self) -> bool:
        return self.value.startswith("MANIPULATED_")

    @property
    def unmanipulated(self) -> bool:
        return self.value.startswith("UNMANIPULATED_")

    @property
    def severity(self) -> int:
        return 2 if self.manipulated else 1 if self.value.startswith("UNKNOWN_") else 0


class ControlMatch(str, enum.Enum):
    IP = "IP"
    HTTP_HASH = "HTTP_HASH"
    CERT_HASH = "CERT_HASH"
    ASN = "ASN"
    AS_NAME = "AS_NAME"
    CDN = "CDN"


class ActorKind(str, enum.Enum):
    VENDOR = "VENDOR"
    ISP = "ISP"
    NATIONAL = "NATIONAL"
    CORPORATION = "CORPORATION"
    UNKNOWN = "UNKNOWN"


class ActorBasis(str, enum.Enum):
    FINGERPRINT = "FINGERPRINT"
    CERT_ISSUER = "CERT_ISSUER"
    CERT_CN = "CERT_CN"
    IP_POOL = "IP_POOL"


@dataclass(frozen=True)
class Actor:
    kind: ActorKind
    name: str | None = None
    basis: ActorBasis | None = None
    detail: str | None = None
    country: str | None = None

    def __post_init__(self):
        if self.kind is not ActorKind.UNKNOWN and not self.name:
            raise ValueError("named actor kinds need a name")

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "basis": self.basis.value if self.basis else None,
            "detail": self.detail,
            "country": self.country,
        }


@dataclass(frozen=True)
class Evidence:
    cert_case: CertCase | None = None
    fingerprint_id: str | None = None
    tolerances: frozenset = frozenset()
    matched_control: frozenset = frozenset()
    rcode: int | None = None
    private_ip: bool = False

    def is_empty(self) -> bool:
        return (self.cert_case is None and self.fingerprint_id is None and not self.matched_control
                and self.rcode is None and not self.private_ip)

    def to_record(self) -> dict:
        return {
            "cert_case": self.cert_case.value if self.cert_case else None,
            "fingerprint_id": self.fingerprint_id,
            "tolerances": sorted(t.value for t in self.tolerances),
            "matched_control": sorted(m.value for m in self.matched_control),
            "rcode": self.rcode,
            "private_ip": self.private_ip,
        }


@dataclass(frozen=True)
class Verdict:
    resolver_ip: str | None
    domain: str
    ip: str | None
    label: Label
    evidence: Evidence = field(default_factory=Evidence)
    actor: Actor | None = None

    def to_record(self, snapshot_id: str = "") -> dict:
        return {
            "resolver_ip": self.resolver_ip,
            "domain": self.domain,
            "ip": self.ip,
            "label": self.label.value,
            "evidence": self.evidence.to_record(),
            "actor": self.actor.to_record() if self.actor else None,
            "snapshot_id": snapshot_id,
        }


class ContractViolation(Exception):
    pass


def classify_pair(pair: ResolutionPair, fetch, assessment: CertAssessment | None,
                  control: ControlSet, db: Sequence[blockpage.Fingerprint]) -> Verdict:
    """Label one (domain, ip) pair; the first matching rule wins."""

    def verdict(label, **ev):
        return Verdict(None, pair.domain, pair.ip, label, Evidence(**ev))

    case = assessment.case if assessment else None
    tolerances = assessment.tolerances_applied if assessment else frozenset()

    if pair.ip in control.control_ips.get(pair.domain, ()):
        return verdict(Label.UNMANIPULATED_CONTROL_IP, cert_case=case, matched_control=frozenset({ControlMatch.IP}))
    if is_private_ip(pair.ip):
        return verdict(Label.MANIPULATED_PRIVATE_IP, private_ip=True)
    if case is CertCase.VALID:
        return verdict(Label.UNMANIPULATED_VALID_CERT, cert_case=case, tolerances=tolerances)
    if case in certval.INVALID_CASES and fetch is not None and fetch.chain:
        sig = certval.signature_of(assessment, fetch.chain[0])
        if sig in control.invalid_control_certs.get(pair.domain, ()):
            return verdict(Label.UNMANIPULATED_MALFORMED_DOMAIN, cert_case=case, tolerances=tolerances)
    pages = fetch.pages if fetch is not None else []
    for page in pages:
        hit = blockpage.match_page(page, db)
        if hit is not None:
            return verdict(Label.MANIPULATED_BLOCKPAGE, cert_case=case, fingerprint_id=hit[0].id, tolerances=tolerances)
    if case in certval.INVALID_CASES:
        return verdict(Label.MANIPULATED_INVALID_CERT, cert_case=case, tolerances=tolerances)
    if pages or (fetch is not None and fetch.chain):
        return verdict(Label.UNKNOWN_HTTP_ONLY, cert_case=case)
    return verdict(Label.UNKNOWN_CONNECTION_ERROR)


def classify_response(response: DnsResponse, pair_verdicts: Mapping[str, Verdict], control: ControlSet) -> Verdict:
    """Fold per-IP verdicts into one verdict for a DNS response."""
    r = response
    if r.rcode > 0:
        if r.domain in control.resolvable:
            return Verdict(r.resolver_ip, r.domain, None, Label.MANIPULATED_RCODE, Evidence(rcode=r.rcode))
        return Verdict(r.resolver_ip, r.domain, None, Label.UNKNOWN_NO_ANSWER, Evidence(rcode=r.rcode))
    if r.rcode == -1 or not r.answers:
        return Verdict(r.resolver_ip, r.domain, None, Label.UNKNOWN_NO_ANSWER)
    answers = []
    for ip in r.answers:
        if ip not in pair_verdicts:
            raise ContractViolation(f"no pair verdict for {r.domain} at {ip}")
        answers.append(pair_verdicts[ip])
    if any(v.label.unmanipulated for v in answers) and any(v.label.manipulated for v in answers):
        return Verdict(r.resolver_ip, r.domain, None, Label.UNMANIPULATED_MIXED)
    worst = answers[0]
    for v in answers[1:]:
        if v.label.severity > worst.label.severity:
            worst = v
    return Verdict(r.resolver_ip, r.domain, worst.ip, worst.label, worst.evidence, worst.actor)


# Pools -------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class IpPool:
    actor: Actor
    networks: tuple
    details: Mapping[str, str] = field(default_factory=dict)
    default_detail: str | None = None

    def lookup(self, ip: str) -> tuple[bool, str | None]:
        addr = ipaddress.ip_address(ip)
        for net in self.networks:
            if addr.version == net.version and addr in net:
                return True, self.details.get(str(addr), self.default_detail)
        return False, None


def read_pools(lines: Iterable[str]) -> list[IpPool]:
    pools = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        actor = Actor(ActorKind(rec["kind"]), rec["name"], ActorBasis.IP_POOL, country=rec.get("country"))
        nets = tuple(ipaddress.ip_network(n, strict=False) for n in rec["networks"])
        pools.append(IpPool(actor, nets, dict(rec.get("details", {})), rec.get("default_detail")))
    return pools


def load_pools(path) -> list[IpPool]:
    with open(path, encoding="utf-8") as fh:
        return read_pools(fh)


def default_pools() -> list[IpPool]:
    text = resources.files("dnsverdict.data").joinpath("actor_pools.jsonl").read_text(encoding="utf-8")
    return read_pools(text.splitlines())


# Attribution -------------------------------------------------------------------------------------

CERT_KEYWORDS = ("blockpage", "allownet", "illegal", "forbidden", "block")

_CATEGORY_KIND = {
    blockpage.Category.PRODUCT: ActorKind.VENDOR,
    blockpage.Category.NATIONAL: ActorKind.NATIONAL,
    blockpage.Category.ISP: ActorKind.ISP,
    blockpage.Category.CORPORATION: ActorKind.CORPORATION,
}


def _keyword_owner(name: str | None) -> str | None:
    """Strip keyword-bearing labels: ``forbidden.citytelecom.ru`` names ``citytelecom.ru``."""
    if not name:
        return None
    labels = name.lower().strip(".").split(".")
    hits = [i for i, label in enumerate(labels) if any(k in label for k in CERT_KEYWORDS)]
    if not hits:
        return None
    rest = [label for label in labels[hits[-1] + 1:] if label != "*"]
    return ".".join(rest) if len(rest) >= 2 else name.lower()


def attribute(verdict: Verdict, leaf: ParsedCert | None = None, fingerprint: blockpage.Fingerprint | None = None,
              pools: Sequence[IpPool] = (), country: str | None = None) -> Actor | None:
    if not verdict.label.manipulated:
        return None
    if fingerprint is not None and fingerprint.actor and fingerprint.category in _CATEGORY_KIND:
        return Actor(_CATEGORY_KIND[fingerprint.category], fingerprint.actor, ActorBasis.FINGERPRINT,
                     country=fingerprint.country)
    if verdict.ip is not None:
        for pool in pools:
            hit, detail = pool.lookup(verdict.ip)
            if hit:
                a = pool.actor
                return Actor(a.kind, a.name, ActorBasis.IP_POOL, detail, a.country)
    if leaf is not None:
        owner = _keyword_owner(leaf.subject_cn) or next(filter(None, map(_keyword_owner, leaf.sans)), None)
        if owner:
            return Actor(ActorKind.ISP, owner, ActorBasis.CERT_CN, leaf.subject_cn)
        owner = _keyword_owner(leaf.issuer_cn)
        if owner:
            return Actor(ActorKind.ISP, owner, ActorBasis.CERT_ISSUER, leaf.issuer_cn)
        if verdict.evidence.cert_case is CertCase.UNTRUSTED_MATCHED and leaf.issuer_org:
            return Actor(ActorKind.VENDOR, leaf.issuer_org, ActorBasis.CERT_ISSUER)
    fallback_country = country or (fingerprint.country if fingerprint is not None else None)
    return Actor(ActorKind.UNKNOWN, None, None, country=fallback_country)
