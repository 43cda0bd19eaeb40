"""The end-to-end classification run and its summary report."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

from . import baseline, blockpage, certval, corpus, probe, verdict
from .corpus import ControlSet, DnsResponse, ExclusionRecord, IpMetadata, ResolutionPair
from .probe import FetchLimits, FetchResult, Transport
from .verdict import Verdict

logger = logging.getLogger(__name__)

STAGES = ("parse", "filter", "control set", "dedup", "fetch", "assess", "match", "classify", "attribute")


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    responses: list[DnsResponse]
    exclusions: list[ExclusionRecord]
    control: ControlSet
    pairs: list[ResolutionPair]
    fetches: dict[ResolutionPair, FetchResult]
    control_fetches: list[FetchResult]
    assessments: dict[ResolutionPair, certval.CertAssessment]
    pair_verdicts: dict[ResolutionPair, Verdict]
    verdicts: list[Verdict]
    fetch_stats: probe.FetchStats = field(default_factory=probe.FetchStats)


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_pipeline(responses: Sequence[DnsResponse], metadata: Mapping[str, IpMetadata], policy: certval.CertPolicy,
                 db: Sequence[blockpage.Fingerprint], pools: Sequence[verdict.IpPool], transport: Transport,
                 limits: FetchLimits = FetchLimits()) -> PipelineResult:
    """Run every stage after parsing; any failure surfaces as :class:`StageError`."""
    with _Stage("filter"):
        kept, exclusions = corpus.filter_resolvers(list(responses))
    stats = probe.FetchStats()
    with _Stage("control set"):
        control_fetches = probe.fetch_all(corpus.control_pairs(kept), transport, limits)
        control = corpus.build_control_set(kept, metadata, control_fetches, policy)
    with _Stage("dedup"):
        pairs = corpus.tested_pairs(kept)
    with _Stage("fetch"):
        fetchable = [p for p in pairs if p.ip not in control.control_ips.get(p.domain, ())]
        fetches = {f.pair: f for f in probe.fetch_all(fetchable, transport, limits, stats)}
    with _Stage("assess"):
        assessments = {
            p: certval.assess(f.chain, p.domain, policy, reference_time=f.fetched_at)
            for p, f in fetches.items()
            if f.chain
        }
    with _Stage("match"):
        fp_by_id = {fp.id: fp for fp in db}
        pair_verdicts = {
            p: verdict.classify_pair(p, fetches.get(p), assessments.get(p), control, db) for p in pairs
        }
    with _Stage("classify"):
        verdicts = []
        for r in kept:
            if r.is_control:
                continue
            by_ip = {ip: pair_verdicts[ResolutionPair(r.domain, ip)] for ip in r.answers}
            v = verdict.classify_response(r, by_ip, control)
            verdicts.append(Verdict(r.resolver_ip, v.domain, v.ip, v.label, v.evidence, v.actor))
    with _Stage("attribute"):
        leaves: dict[ResolutionPair, certval.ParsedCert | None] = {}
        attributed = []
        for r, v in zip((r for r in kept if not r.is_control), verdicts):
            leaf = None
            if v.ip is not None:
                p = ResolutionPair(v.domain, v.ip)
                if p not in leaves:
                    f = fetches.get(p)
                    try:
                        leaves[p] = certval.parse_cert(f.chain[0]) if f is not None and f.chain else None
                    except certval.CertParseError:
                        leaves[p] = None
                leaf = leaves[p]
            fp = fp_by_id.get(v.evidence.fingerprint_id) if v.evidence.fingerprint_id else None
            actor = verdict.attribute(v, leaf, fp, pools, r.resolver_country)
            attributed.append(Verdict(v.resolver_ip, v.domain, v.ip, v.label, v.evidence, actor))
    return PipelineResult(kept, exclusions, control, pairs, fetches, control_fetches, assessments,
                          pair_verdicts, attributed, stats)


# Reports ----------------------------------------------------------------------------------------

def summarize(result: PipelineResult, comparison: baseline.ComparisonReport | None = None) -> dict:
    by_label = Counter(v.label.value for v in result.verdicts)
    country_of = {r.resolver_ip: r.resolver_country for r in result.responses}
    by_country: dict[str, Counter] = {}
    by_actor = Counter()
    fingerprints = Counter()
    for v in result.verdicts:
        c = country_of.get(v.resolver_ip, "")
        by_country.setdefault(c, Counter())[v.label.value] += 1
        if v.actor is not None:
            by_actor[f"{v.actor.kind.value}:{v.actor.name or v.actor.country or '-'}"] += 1
        if v.evidence.fingerprint_id:
            fingerprints[v.evidence.fingerprint_id] += 1
    report = {
        "responses": len(result.verdicts),
        "pairs": len(result.pairs),
        "by_label": dict(sorted(by_label.items())),
        "by_country": {c: dict(sorted(cnt.items())) for c, cnt in sorted(by_country.items())},
        "by_actor": dict(sorted(by_actor.items())),
        "fingerprint_hits": dict(sorted(fingerprints.items())),
        "exclusions": dict(sorted(Counter(e.reason.value for e in result.exclusions).items())),
        "missing_control_domains": result.control.missing_domains,
        "control_certificates": result.control.control_cert_count,
        "fetch_errors": dict(sorted(result.fetch_stats.errors.items())),
    }
    if comparison is not None:
        report["baseline"] = comparison.to_record()
    return report


def human_summary(report: dict) -> str:
    lines = [f"{report['responses']} responses over {report['pairs']} unique pairs"]
    for label, n in report["by_label"].items():
        lines.append(f"  {label:<34} {n}")
    if report["exclusions"]:
        lines.append("excluded resolvers: " + ", ".join(f"{k}={v}" for k, v in report["exclusions"].items()))
    if report["fingerprint_hits"]:
        lines.append("fingerprint hits: " + ", ".join(f"{k}={v}" for k, v in report["fingerprint_hits"].items()))
    if "baseline" in report:
        b = report["baseline"]
        lines.append(
            f"baseline: FP {b['false_positive']['count']} ({b['false_positive']['rate']:.2%} of flagged), "
            f"FN {b['false_negative']['count']} ({b['false_negative']['rate']:.2%} of manipulated)"
        )
    return "\n".join(lines) + "\n"


def write_verdicts(verdicts: Sequence[Verdict], stream: IO[str], snapshot_id: str = "") -> None:
    for v in sorted(verdicts, key=lambda v: (v.resolver_ip or "", v.domain)):
        stream.write(json.dumps(v.to_record(snapshot_id), sort_keys=True) + "\n")


def baseline_for(result: PipelineResult, metadata: Mapping[str, IpMetadata]):
    """Consistency verdicts for every tested pair plus the pair-level comparison."""
    consistency = [baseline.consistency_check(p, result.control, metadata) for p in result.pairs]
    comparison = baseline.compare(consistency, [result.pair_verdicts[p] for p in result.pairs])
    return consistency, comparison


def theta_sweep_for(result: PipelineResult, thetas=range(1, 11)) -> list[baseline.SweepRow]:
    inputs = baseline.threshold_inputs(result.responses, result.control)
    return baseline.theta_sweep(inputs, list(result.pair_verdicts.values()), thetas)
