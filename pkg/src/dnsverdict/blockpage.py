"""Blockpage fingerprint matching and page clustering by length and tag structure."""
from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from importlib import resources
from typing import IO, Hashable, Iterable, Sequence

DEFAULT_LENGTH_TOLERANCE = 0.05
DEFAULT_MIN_CLUSTER_SIZE = 5
MIN_PATTERN_LENGTH = 12
# drafting only looks at the head of each member
DRAFT_SCAN_CHARS = 8192


class Category(str, enum.Enum):
    PRODUCT = "PRODUCT"
    NATIONAL = "NATIONAL"
    ISP = "ISP"
    CORPORATION = "CORPORATION"
    UNKNOWN = "UNKNOWN"
    GENERAL = "GENERAL"


class Where(str, enum.Enum):
    BODY = "BODY"
    HEADER = "HEADER"
    TITLE = "TITLE"


class PatternKind(str, enum.Enum):
    SUBSTRING = "SUBSTRING"
    REGEX = "REGEX"


class FingerprintError(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    id: str
    category: Category
    where: Where
    pattern: str
    pattern_kind: PatternKind = PatternKind.SUBSTRING
    country: str | None = None
    actor: str | None = None
    source: str = "curated"
    needs_human: bool = False

    def __post_init__(self):
        if self.pattern_kind is PatternKind.REGEX:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise FingerprintError(f"{self.id}: bad regex: {exc}") from exc
        if self.category is Category.UNKNOWN and not self.country:
            raise FingerprintError(f"{self.id}: UNKNOWN fingerprints need a country")

    def search(self, text: str) -> str | None:
        if not self.pattern:
            return None
        if self.pattern_kind is PatternKind.SUBSTRING:
            return self.pattern if self.pattern in text else None
        m = re.search(self.pattern, text)
        return m.group(0) if m else None

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "category": self.category.value,
            "where": self.where.value,
            "pattern": self.pattern,
            "pattern_kind": self.pattern_kind.value,
            "country": self.country,
            "actor": self.actor,
            "source": self.source,
        }
        if self.needs_human:
            rec["needs_human"] = True
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Fingerprint":
        try:
            return cls(
                id=rec["id"],
                category=Category(rec["category"]),
                where=Where(rec["where"]),
                pattern=rec["pattern"],
                pattern_kind=PatternKind(rec.get("pattern_kind", "SUBSTRING")),
                country=rec.get("country"),
                actor=rec.get("actor"),
                source=rec.get("source", "curated"),
                needs_human=bool(rec.get("needs_human", False)),
            )
        except (KeyError, ValueError) as exc:
            raise FingerprintError(f"bad fingerprint record {rec!r}: {exc}") from exc


def validate_db(db: Sequence[Fingerprint]) -> None:
    seen = set()
    for fp in db:
        if fp.id in seen:
            raise FingerprintError(f"duplicate fingerprint id {fp.id}")
        seen.add(fp.id)


def read_db(stream: IO[str]) -> list[Fingerprint]:
    db = [Fingerprint.from_record(json.loads(line)) for line in stream if line.strip()]
    validate_db(db)
    return db


def load_db(path) -> list[Fingerprint]:
    with open(path, encoding="utf-8") as fh:
        return read_db(fh)


def write_db(db: Iterable[Fingerprint], stream: IO[str]) -> None:
    for fp in db:
        stream.write(json.dumps(fp.to_record(), sort_keys=True) + "\n")


def default_db() -> list[Fingerprint]:
    text = resources.files("dnsverdict.data").joinpath("fingerprints.jsonl").read_text(encoding="utf-8")
    return read_db(text.splitlines())


_TITLE_RE = re.compile(r"<title[^>]*>(.*?)</title", re.IGNORECASE | re.DOTALL)


def page_title(text: str) -> str:
    m = _TITLE_RE.search(text)
    return " ".join(m.group(1).split()) if m else ""


def header_text(headers: Iterable[tuple[str, str]]) -> str:
    return "\n".join(f"{name}: {value}" for name, value in headers)


def match_page(page, db: Sequence[Fingerprint]) -> tuple[Fingerprint, str] | None:
    """Return the first fingerprint in ``db`` order that matches, with the matched text."""
    if page is None:
        return None
    body = page.body.decode("utf-8", errors="replace")
    title = None
    headers = None
    for fp in db:
        if fp.where is Where.BODY:
            text = body
        elif fp.where is Where.TITLE:
            title = page_title(body) if title is None else title
            text = title
        else:
            headers = header_text(page.headers) if headers is None else headers
            text = headers
        hit = fp.search(text)
        if hit is not None:
            return fp, hit
    return None


def all_matches(page, db: Sequence[Fingerprint]) -> list[Fingerprint]:
    return [fp for fp in db if match_page(page, [fp]) is not None]


class _TagCollector(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.tags: list[str] = []

    def handle_starttag(self, tag, attrs):
        self.tags.append(tag.lower())

    def handle_startendtag(self, tag, attrs):
        self.tags.append(tag.lower())


def _looks_binary(body: bytes) -> bool:
    return b"\x00" in body[:4096]


def tag_sequence(body: bytes) -> list[str]:
    if not body or _looks_binary(body):
        return []
    parser = _TagCollector()
    try:
        parser.feed(body.decode("utf-8", errors="replace"))
        parser.close()
    except AssertionError:
        # html.parser gives up on some malformed declarations; keep what it saw
        pass
    return parser.tags


@dataclass(frozen=True)
class PageSignature:
    length_bytes: int
    tag_sequence_hash: str
    title: str


def signature_of_page(page) -> PageSignature:
    tags = tag_sequence(page.body)
    digest = hashlib.sha256(",".join(tags).encode()).hexdigest() if tags else ""
    title = "" if _looks_binary(page.body) else page_title(page.body.decode("utf-8", errors="replace"))
    return PageSignature(len(page.body), digest, title)


@dataclass
class Cluster:
    representative: PageSignature
    members: list[Hashable]
    size: int
    pages: list = field(default_factory=list, repr=False)


@dataclass
class ClusterReport:
    clusters: list[Cluster]
    length_tolerance: float
    min_cluster_size: int
    dropped_clusters: int = 0
    dropped_pages: int = 0

    def to_record(self) -> dict:
        return {
            "params": {"length_tolerance": self.length_tolerance, "min_cluster_size": self.min_cluster_size},
            "dropped_clusters": self.dropped_clusters,
            "dropped_pages": self.dropped_pages,
            "clusters": [
                {
                    "size": c.size,
                    "length_bytes": c.representative.length_bytes,
                    "tag_sequence_hash": c.representative.tag_sequence_hash,
                    "title": c.representative.title,
                    "members": [str(m) for m in c.members],
                }
                for c in self.clusters
            ],
        }


def lengths_close(a: int, b: int, tolerance: float) -> bool:
    return abs(a - b) <= tolerance * max(a, b, 1)


def cluster_pages(pages: Sequence[tuple[Hashable, object]],
                  length_tolerance: float = DEFAULT_LENGTH_TOLERANCE,
                  min_cluster_size: int = DEFAULT_MIN_CLUSTER_SIZE) -> ClusterReport:
    """Group pages sharing a tag-sequence hash whose lengths are transitively close.

    Within one hash group, sorting by length makes the transitive closure a
    run of neighbours that are pairwise close.
    """
    if not 0 <= length_tolerance < 1:
        raise ValueError("length_tolerance must be in [0, 1)")
    groups: dict[str, list[tuple[int, PageSignature, Hashable, object]]] = {}
    order: list[str] = []
    for idx, (ref, page) in enumerate(pages):
        sig = signature_of_page(page)
        if sig.tag_sequence_hash not in groups:
            order.append(sig.tag_sequence_hash)
        groups.setdefault(sig.tag_sequence_hash, []).append((idx, sig, ref, page))

    raw_clusters: list[list[tuple[int, PageSignature, Hashable, object]]] = []
    for h in order:
        items = sorted(groups[h], key=lambda it: (it[1].length_bytes, it[0]))
        run = [items[0]]
        for prev, cur in zip(items, items[1:]):
            if lengths_close(prev[1].length_bytes, cur[1].length_bytes, length_tolerance):
                run.append(cur)
            else:
                raw_clusters.append(run)
                run = [cur]
        raw_clusters.append(run)

    report = ClusterReport([], length_tolerance, min_cluster_size)
    for members in sorted(raw_clusters, key=lambda ms: min(m[0] for m in ms)):
        members = sorted(members, key=lambda m: m[0])
        if len(members) < min_cluster_size:
            report.dropped_clusters += 1
            report.dropped_pages += len(members)
            continue
        report.clusters.append(
            Cluster(
                representative=members[0][1],
                members=[m[2] for m in members],
                size=len(members),
                pages=[m[3] for m in members],
            )
        )
    return report


def longest_common_substring(texts: Sequence[str]) -> str:
    """Longest string occurring in every text; earliest in the shortest text wins ties."""
    if not texts:
        return ""
    base = min(texts, key=len)
    others = [t for t in texts if t is not base]

    def common_of_length(n: int) -> str | None:
        if n == 0:
            return ""
        candidates = {base[i:i + n] for i in range(len(base) - n + 1)}
        for t in others:
            present = {t[i:i + n] for i in range(len(t) - n + 1)}
            candidates &= present
            if not candidates:
                return None
        for i in range(len(base) - n + 1):
            if base[i:i + n] in candidates:
                return base[i:i + n]
        return None

    lo, hi, best = 0, len(base), ""
    while lo < hi:
        mid = (lo + hi + 1) // 2
        found = common_of_length(mid)
        if found is None:
            hi = mid - 1
        else:
            lo, best = mid, found
    return best


def export_candidates(report: ClusterReport, country: str = "ZZ") -> list[Fingerprint]:
    """Draft one UNKNOWN fingerprint per cluster for a human to review.

    Titles are tried first, then bodies. Clusters with no common text of at
    least 12 characters get an empty pattern and ``needs_human``.
    """
    drafts = []
    for n, cluster in enumerate(report.clusters):
        text_pages = [p for p in cluster.pages if not _looks_binary(p.body)]
        pattern, where = "", Where.BODY
        if text_pages and len(text_pages) == len(cluster.pages):
            titles = [page_title(p.body.decode("utf-8", "replace")) for p in text_pages]
            if all(titles):
                pattern, where = longest_common_substring(titles), Where.TITLE
            if len(pattern.strip()) < MIN_PATTERN_LENGTH:
                bodies = [p.body[:DRAFT_SCAN_CHARS].decode("utf-8", "replace") for p in text_pages]
                pattern, where = longest_common_substring(bodies), Where.BODY
        needs_human = len(pattern) < MIN_PATTERN_LENGTH
        drafts.append(
            Fingerprint(
                id=f"draft-{n:04d}-{cluster.representative.tag_sequence_hash[:8] or 'nohtml'}",
                category=Category.UNKNOWN,
                where=where,
                pattern="" if needs_human else pattern,
                pattern_kind=PatternKind.SUBSTRING,
                country=country,
                source="auto-draft",
                needs_human=needs_human,
            )
        )
    return drafts
