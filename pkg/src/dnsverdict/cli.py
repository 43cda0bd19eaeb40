"""Command-line entry point: simulate, fetch, classify, compare, cluster, report.

Exit codes: 0 on success, 1 when a pipeline stage fails, 2 for bad
configuration or missing inputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from . import __version__, baseline, blockpage, certval, corpus, pipeline, probe, simnet, verdict

log = logging.getLogger("dnsverdict")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


@dataclass
class Inputs:
    responses: list
    metadata: dict
    policy: certval.CertPolicy
    db: list
    pools: list
    transport: object
    snapshot_id: str


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _spec_from(args) -> simnet.ScenarioSpec:
    if args.spec is None:
        spec = simnet.PRESETS["mixed"]
    elif args.spec in simnet.PRESETS:
        spec = simnet.PRESETS[args.spec]
    else:
        try:
            spec = simnet.load_spec(_need(args.spec, "spec"))
        except simnet.ConfigError as exc:
            raise UsageError(str(exc)) from exc
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    try:
        spec.validate()
    except simnet.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return spec


def _limits(args) -> probe.FetchLimits:
    return probe.FetchLimits(timeout_secs=args.timeout, max_concurrency=args.max_concurrency,
                             per_ip_rate=args.rate)


def _load_inputs(args) -> Inputs:
    """Resolve the transport and every input file for the chosen mode."""
    scenario = None
    if args.mode == "live" and not args.i_understand_active_probing:
        raise UsageError("live mode sends traffic to third-party hosts; pass --i-understand-active-probing")
    if args.mode == "simulated":
        scenario = simnet.generate(_spec_from(args))

    try:
        if args.snapshot is not None:
            snap_path = _need(args.snapshot, "snapshot")
            raw = snap_path.read_bytes()
            try:
                responses = corpus.parse_snapshot(io.BytesIO(raw).readlines())
            except corpus.SnapshotError as exc:
                raise pipeline.StageError("parse", exc) from exc
        elif scenario is not None:
            buf = io.StringIO()
            corpus.write_snapshot(scenario.snapshot, buf)
            raw = buf.getvalue().encode()
            responses = list(scenario.snapshot)
        else:
            raise UsageError("--snapshot is required")

        if args.metadata is not None:
            metadata = corpus.load_metadata(_need(args.metadata, "metadata"))
        elif scenario is not None:
            metadata = scenario.metadata
        else:
            metadata = {}
            log.warning("no --metadata given; consistency heuristics will only see IPs")

        if args.roots is not None:
            roots = certval.load_root_store(_need(args.roots, "roots"))
        elif scenario is not None:
            roots = scenario.ca.root_store()
        else:
            raise UsageError("--roots is required outside simulated mode")
        policy = certval.CertPolicy(
            tuple(roots),
            expiry_tolerance_secs=args.expiry_tolerance,
            deprecated_root_tolerance=not args.no_deprecated_root_tolerance,
        )

        if args.fingerprints is not None:
            db = blockpage.load_db(_need(args.fingerprints, "fingerprints"))
        elif scenario is not None:
            db = scenario.fingerprints
        else:
            db = blockpage.default_db()
        pools = verdict.load_pools(_need(args.pools, "pools")) if args.pools is not None else verdict.default_pools()
    except UsageError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load inputs: {exc}") from exc

    if args.mode == "replay":
        with open(_need(args.archive, "archive"), encoding="utf-8") as fh:
            transport = probe.ReplayTransport(probe.read_archive(fh))
    elif args.mode == "simulated":
        transport = scenario.transport
    else:
        transport = probe.LiveTransport()
    snapshot_id = hashlib.sha256(raw).hexdigest()[:16]
    return Inputs(responses, metadata, policy, db, pools, transport, snapshot_id)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run(args, inputs: Inputs) -> pipeline.PipelineResult:
    return pipeline.run_pipeline(inputs.responses, inputs.metadata, inputs.policy, inputs.db, inputs.pools,
                                 inputs.transport, _limits(args))


# Commands ---------------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = _spec_from(args)
    out = _out_dir(args)
    manifest = simnet.emit_fixture(spec, out)
    for name, digest in sorted(manifest["files"].items()):
        print(f"{digest[:16]}  {out / name}")
    return EXIT_OK


def cmd_fetch(args) -> int:
    inputs = _load_inputs(args)
    kept, _ = corpus.filter_resolvers(inputs.responses)
    pairs = corpus.dedup_pairs(kept)
    stats = probe.FetchStats()
    try:
        results = probe.fetch_all(pairs, inputs.transport, _limits(args), stats)
    except Exception as exc:  # noqa: BLE001 - reported as a stage failure
        raise pipeline.StageError("fetch", exc) from exc
    out = _out_dir(args)
    with open(out / "fetches.jsonl", "w", encoding="utf-8") as fh:
        probe.write_archive(sorted(results, key=lambda r: (r.pair.domain, r.pair.ip)), fh)
    print(f"fetched {len(results)} pairs; errors: {dict(sorted(stats.errors.items())) or 'none'}")
    return EXIT_OK


def cmd_classify(args) -> int:
    inputs = _load_inputs(args)
    result = _run(args, inputs)
    out = _out_dir(args)
    with open(out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
        pipeline.write_verdicts(result.verdicts, fh, inputs.snapshot_id)
    report = pipeline.summarize(result)
    _write_json(out / "summary.json", report)
    text = pipeline.human_summary(report)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    inputs = _load_inputs(args)
    result = _run(args, inputs)
    try:
        consistency, comparison = pipeline.baseline_for(result, inputs.metadata)
        sweep = pipeline.theta_sweep_for(result)
        flagged = baseline.as_threshold(
            baseline.threshold_inputs(result.responses, result.control), baseline.ThresholdConfig(args.theta))
    except (baseline.ComparisonError, ValueError) as exc:
        raise pipeline.StageError("compare", exc) from exc
    out = _out_dir(args)
    record = comparison.to_record()
    record["as_threshold"] = {"theta": args.theta, "flagged_domains": sorted(flagged)}
    _write_json(out / "comparison.json", record)
    _write_json(out / "theta_sweep.json", [row.to_record() for row in sweep])
    report = pipeline.summarize(result, comparison)
    _write_json(out / "summary.json", report)
    text = pipeline.human_summary(report)
    text += "theta  flagged_pairs  FP  FN\n"
    text += "".join(f"{r.theta:>5}  {r.flagged_pairs:>13}  {r.false_positive:>2}  {r.false_negative:>2}\n" for r in sweep)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_cluster(args) -> int:
    path = _need(args.archive, "archive")
    try:
        with open(path, encoding="utf-8") as fh:
            fetches = probe.read_archive(fh)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read archive {path}: {exc}") from exc
    pages = []
    for f in fetches:
        for port, page in (("http", f.http), ("https", f.https_page)):
            if page is not None:
                pages.append((f"{port}://{f.pair.domain}@{f.pair.ip}", page))
    try:
        report = blockpage.cluster_pages(pages, args.length_tolerance, args.min_cluster_size)
        drafts = blockpage.export_candidates(report, args.country)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    _write_json(out / "clusters.json", report.to_record())
    with open(out / "draft_fingerprints.jsonl", "w", encoding="utf-8") as fh:
        blockpage.write_db(drafts, fh)
    print(f"{len(pages)} pages, {len(report.clusters)} clusters, {report.dropped_pages} pages in small clusters; "
          f"{sum(d.needs_human for d in drafts)} drafts need a human")
    return EXIT_OK


def cmd_report(args) -> int:
    path = _need(args.verdicts, "verdicts")
    try:
        records = list(corpus.iter_jsonl(path))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read verdicts {path}: {exc}") from exc
    country_of = {}
    if args.snapshot is not None:
        with open(_need(args.snapshot, "snapshot"), "rb") as fh:
            country_of = {r.resolver_ip: r.resolver_country for r in corpus.parse_snapshot(fh)}
    by_label, by_actor, by_fp = Counter(), Counter(), Counter()
    by_country: dict[str, Counter] = {}
    for rec in records:
        by_label[rec["label"]] += 1
        c = country_of.get(rec["resolver_ip"], "")
        by_country.setdefault(c, Counter())[rec["label"]] += 1
        if rec.get("actor"):
            a = rec["actor"]
            by_actor[f"{a['kind']}:{a['name'] or a['country'] or '-'}"] += 1
        if rec["evidence"].get("fingerprint_id"):
            by_fp[rec["evidence"]["fingerprint_id"]] += 1
    report = {
        "responses": len(records),
        "by_label": dict(sorted(by_label.items())),
        "by_country": {c: dict(sorted(v.items())) for c, v in sorted(by_country.items())},
        "by_actor": dict(sorted(by_actor.items())),
        "fingerprint_hits": dict(sorted(by_fp.items())),
    }
    if args.out:
        _write_json(_out_dir(args) / "report.json", report)
    print(f"{len(records)} verdicts")
    for label, n in report["by_label"].items():
        print(f"  {label:<34} {n}")
    for actor, n in sorted(by_actor.items(), key=lambda kv: (-kv[1], kv[0]))[:15]:
        print(f"  {actor:<34} {n}")
    return EXIT_OK


# Parser -----------------------------------------------------------------------------------------

def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--snapshot", help="DNS snapshot (JSONL)")
    p.add_argument("--metadata", help="IP metadata table (JSONL)")
    p.add_argument("--fingerprints", help="fingerprint database (JSONL); defaults to the bundled one")
    p.add_argument("--roots", help="root store (PEM)")
    p.add_argument("--pools", help="actor IP pools (JSONL); defaults to the bundled one")
    p.add_argument("--mode", choices=("live", "replay", "simulated"), default="replay")
    p.add_argument("--archive", help="fetch archive for replay mode")
    p.add_argument("--spec", help="scenario spec file or preset name for simulated mode")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--i-understand-active-probing", action="store_true",
                   help="required for live mode, which connects to every answered IP")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--max-concurrency", type=int, default=16)
    p.add_argument("--rate", type=float, default=None, help="max requests per second per IP (live mode)")
    p.add_argument("--expiry-tolerance", type=int, default=certval.FIVE_DAYS, metavar="SECS")
    p.add_argument("--no-deprecated-root-tolerance", action="store_true")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnsverdict", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic scenario fixture")
    p.add_argument("--spec", help="spec file or preset: " + ", ".join(simnet.PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, help_ in (
        ("fetch", cmd_fetch, "fetch every resolved pair and write an archive"),
        ("classify", cmd_classify, "run the pipeline and write verdicts plus a summary"),
        ("compare", cmd_compare, "classify, then compare against consistency heuristics"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_inputs(p)
        if name == "compare":
            p.add_argument("--theta", type=int, default=3, help="AS-count threshold")
        p.set_defaults(func=func)

    p = sub.add_parser("cluster", help="cluster archived pages and draft fingerprints")
    p.add_argument("--archive", required=True)
    p.add_argument("--length-tolerance", type=float, default=blockpage.DEFAULT_LENGTH_TOLERANCE)
    p.add_argument("--min-cluster-size", type=int, default=blockpage.DEFAULT_MIN_CLUSTER_SIZE)
    p.add_argument("--country", default="ZZ", help="country code for drafted fingerprints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("report", help="aggregate a verdict file")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--snapshot", help="snapshot for per-country grouping")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "theta", 1) < 1:
        print("error: --theta must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
