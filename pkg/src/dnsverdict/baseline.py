"""Consistency heuristics from earlier platforms, and a comparison against verdicts."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import ControlSet, DnsResponse, IpMetadata, ResolutionPair
from .verdict import ControlMatch, Label, Verdict

DEFINITIVE_LABELS = frozenset(
    {Label.UNMANIPULATED_VALID_CERT, Label.MANIPULATED_INVALID_CERT, Label.MANIPULATED_BLOCKPAGE}
)


@dataclass(frozen=True)
class ConsistencyVerdict:
    pair: ResolutionPair
    matched: frozenset

    @property
    def flagged_manipulated(self) -> bool:
        return not self.matched


@dataclass(frozen=True)
class ThresholdConfig:
    theta: int = 1

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError("theta must be >= 1")


def consistency_check(pair: ResolutionPair, control: ControlSet,
                      metadata: Mapping[str, IpMetadata]) -> ConsistencyVerdict:
    d = pair.domain
    matched = set()
    if pair.ip in control.control_ips.get(d, ()):
        matched.add(ControlMatch.IP)
    meta = metadata.get(pair.ip)
    if meta is not None:
        checks = (
            (ControlMatch.HTTP_HASH, meta.http_hash, control.control_http_hashes),
            (ControlMatch.CERT_HASH, meta.cert_hash, control.control_cert_hashes),
            (ControlMatch.ASN, meta.asn, control.control_asns),
            (ControlMatch.AS_NAME, meta.as_name, control.control_as_names),
            (ControlMatch.CDN, meta.cdn, control.control_cdns),
        )
        for heuristic, value, table in checks:
            if value is not None and value in table.get(d, ()):
                matched.add(heuristic)
    return ConsistencyVerdict(pair, frozenset(matched))


def as_threshold(domain_resolutions: Mapping[str, tuple[Iterable[str], int]], config: ThresholdConfig) -> set[str]:
    """Flag domains that share one test IP with another domain yet span more than theta control ASes."""
    domains_by_ip: dict[str, set[str]] = defaultdict(set)
    for domain, (ips, _) in domain_resolutions.items():
        for ip in ips:
            domains_by_ip[ip].add(domain)
    flagged = set()
    for domain, (ips, control_as_count) in domain_resolutions.items():
        if control_as_count > config.theta and any(len(domains_by_ip[ip]) >= 2 for ip in ips):
            flagged.add(domain)
    return flagged


def threshold_inputs(responses: Iterable[DnsResponse], control: ControlSet) -> dict[str, tuple[set[str], int]]:
    ips: dict[str, set[str]] = defaultdict(set)
    for r in responses:
        if not r.is_control:
            ips[r.domain].update(r.answers)
    return {d: (s, len(control.control_asns.get(d, ()))) for d, s in ips.items()}


def shared_ip_pairs(domain_resolutions: Mapping[str, tuple[Iterable[str], int]], flagged: set[str]) -> set[ResolutionPair]:
    domains_by_ip: dict[str, set[str]] = defaultdict(set)
    for domain, (ips, _) in domain_resolutions.items():
        for ip in ips:
            domains_by_ip[ip].add(domain)
    return {
        ResolutionPair(d, ip)
        for d in flagged
        for ip in domain_resolutions[d][0]
        if len(domains_by_ip[ip]) >= 2
    }


class ComparisonError(Exception):
    pass


@dataclass
class ComparisonReport:
    total: int = 0
    agreement_count: int = 0
    false_positive_count: int = 0
    false_negative_count: int = 0
    unconfirmed_count: int = 0
    flagged_count: int = 0
    manipulated_count: int = 0
    fn_breakdown: dict = field(default_factory=lambda: {m.value: 0 for m in ControlMatch if m is not ControlMatch.IP})
    unconfirmed_by_label: dict = field(default_factory=dict)

    @property
    def false_positive_rate(self) -> float:
        return self.false_positive_count / self.flagged_count if self.flagged_count else 0.0

    @property
    def false_negative_rate(self) -> float:
        return self.false_negative_count / self.manipulated_count if self.manipulated_count else 0.0

    def to_record(self) -> dict:
        fn = self.false_negative_count
        return {
            "total": self.total,
            "agreement": self.agreement_count,
            "unconfirmed": self.unconfirmed_count,
            "unconfirmed_by_label": dict(sorted(self.unconfirmed_by_label.items())),
            "consistency_flagged": self.flagged_count,
            "certificate_manipulated": self.manipulated_count,
            "false_positive": {"count": self.false_positive_count, "rate": self.false_positive_rate},
            "false_negative": {"count": fn, "rate": self.false_negative_rate},
            "false_negative_breakdown": {
                k: {"count": v, "fraction": v / fn if fn else 0.0} for k, v in self.fn_breakdown.items()
            },
        }


def compare(consistency: Sequence[ConsistencyVerdict], verdicts: Sequence[Verdict]) -> ComparisonReport:
    """Cross-check consistency determinations against pair verdicts.

    Only valid-cert, invalid-cert, and blockpage verdicts are comparable;
    everything else counts as unconfirmed.
    """
    by_pair = {ResolutionPair(v.domain, v.ip): v for v in verdicts}
    cons_pairs = {c.pair for c in consistency}
    missing = sorted(cons_pairs ^ set(by_pair))
    if missing:
        shown = ", ".join(f"{p.domain}@{p.ip}" for p in missing[:20])
        raise ComparisonError(f"{len(missing)} pairs missing from one side: {shown}")
    report = ComparisonReport()
    for c in consistency:
        v = by_pair[c.pair]
        report.total += 1
        if v.label not in DEFINITIVE_LABELS:
            report.unconfirmed_count += 1
            report.unconfirmed_by_label[v.label.value] = report.unconfirmed_by_label.get(v.label.value, 0) + 1
            continue
        if c.flagged_manipulated:
            report.flagged_count += 1
        if v.label.manipulated:
            report.manipulated_count += 1
        if c.flagged_manipulated and v.label is Label.UNMANIPULATED_VALID_CERT:
            report.false_positive_count += 1
        elif not c.flagged_manipulated and v.label.manipulated:
            report.false_negative_count += 1
            for m in c.matched:
                if m is not ControlMatch.IP:
                    report.fn_breakdown[m.value] += 1
        else:
            report.agreement_count += 1
    return report


@dataclass
class SweepRow:
    theta: int
    flagged_domains: int
    flagged_pairs: int
    false_positive: int
    false_negative: int
    manipulated: int
    unmanipulated: int

    def to_record(self) -> dict:
        fp, fn = self.false_positive, self.false_negative
        return {
            "theta": self.theta,
            "flagged_domains": self.flagged_domains,
            "flagged_pairs": self.flagged_pairs,
            "false_positive": fp,
            "false_negative": fn,
            # two readings of the FP/FN axes, both emitted
            "fp_per_flagged": fp / self.flagged_pairs if self.flagged_pairs else 0.0,
            "fp_per_unmanipulated": fp / self.unmanipulated if self.unmanipulated else 0.0,
            "fn_per_manipulated": fn / self.manipulated if self.manipulated else 0.0,
            "fn_per_total": fn / (self.manipulated + self.unmanipulated) if (self.manipulated + self.unmanipulated) else 0.0,
        }


def theta_sweep(domain_resolutions, pair_verdicts: Sequence[Verdict], thetas=range(1, 11)) -> list[SweepRow]:
    definitive = {ResolutionPair(v.domain, v.ip): v for v in pair_verdicts if v.label in DEFINITIVE_LABELS}
    manipulated = sum(1 for v in definitive.values() if v.label.manipulated)
    unmanipulated = len(definitive) - manipulated
    rows = []
    for theta in thetas:
        flagged = as_threshold(domain_resolutions, ThresholdConfig(theta))
        pairs = shared_ip_pairs(domain_resolutions, flagged)
        fp = sum(1 for p in pairs if p in definitive and not definitive[p].label.manipulated)
        fn = sum(1 for p, v in definitive.items() if v.label.manipulated and p not in pairs)
        rows.append(SweepRow(theta, len(flagged), len(pairs), fp, fn, manipulated, unmanipulated))
    return rows
