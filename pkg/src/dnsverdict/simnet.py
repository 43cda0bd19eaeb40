"""Deterministic synthetic measurement corpora with ground truth.

Everything produced here is a pure function of a :class:`ScenarioSpec`.
Certificates use Ed25519 keys derived from the seed, and Ed25519
signatures are deterministic, so serialized outputs are byte-identical
across runs.
"""
from __future__ import annotations

import datetime as dt
import enum
import hashlib
import io
import json
import random
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.x509.oid import NameOID

from . import blockpage, certval, corpus
from .corpus import DnsResponse, IpMetadata
from .probe import ERR_REFUSED, FetchLimits, HttpPage, TransportError
from .verdict import ActorKind, Label

DAY = 86400
DEFAULT_REFERENCE_TIME = 1669852800  # 2022-12-01T00:00:00Z


class ConfigError(ValueError):
    pass


class Behavior(str, enum.Enum):
    CLEAN = "CLEAN"
    LOCALIZED_CLEAN = "LOCALIZED_CLEAN"
    SELF_SIGNED_BLOCKPAGE = "SELF_SIGNED_BLOCKPAGE"
    TRUSTED_ISP_BLOCKPAGE = "TRUSTED_ISP_BLOCKPAGE"
    BIG_CDN_INJECTION = "BIG_CDN_INJECTION"
    NXDOMAIN_CENSOR = "NXDOMAIN_CENSOR"
    CAPTIVE_PORTAL = "CAPTIVE_PORTAL"
    PRIVATE_IP_CENSOR = "PRIVATE_IP_CENSOR"
    MISCONFIGURED_DOMAIN = "MISCONFIGURED_DOMAIN"
    GEOBLOCKING_CDN = "GEOBLOCKING_CDN"
    CDN_HOSTED_BLOCKPAGE = "CDN_HOSTED_BLOCKPAGE"


ALL_BEHAVIORS = tuple((b, 1 / len(Behavior)) for b in Behavior)


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 1
    domains: int = 100
    resolvers: int = 50
    behaviors: tuple = ALL_BEHAVIORS
    control_resolvers: int = 3
    blocked_fraction: float = 0.3
    nxdomain_blocked: int = 47
    mixed_fraction: float = 0.1
    misconfigured_fraction: float = 0.05
    localized_cert_hash_coverage: float = 0.3
    reference_time: int = DEFAULT_REFERENCE_TIME

    def validate(self) -> None:
        if self.domains < 1 or self.resolvers < 1:
            raise ConfigError("scenario needs at least one domain and one resolver")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.behaviors:
            raise ConfigError("no behaviors given")
        total = sum(w for _, w in self.behaviors)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"behavior weights sum to {total}, expected 1")
        if any(w < 0 for _, w in self.behaviors):
            raise ConfigError("negative behavior weight")
        for name in ("blocked_fraction", "mixed_fraction", "misconfigured_fraction", "localized_cert_hash_coverage"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be within [0, 1]")
        if self.control_resolvers < 1:
            raise ConfigError("need at least one control resolver")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "behaviors":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for b, w in self.behaviors:
            lines.append(f"behavior.{b.value} = {w!r}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"seed", "domains", "resolvers", "control_resolvers", "nxdomain_blocked", "reference_time"}
_FLOAT_KEYS = {"blocked_fraction", "mixed_fraction", "misconfigured_fraction", "localized_cert_hash_coverage"}


def parse_spec(text: str) -> ScenarioSpec:
    """Read ``key = value`` lines; ``#`` starts a comment.

    Behavior weights are given as ``behavior.NAME = weight``. Unlisted
    behaviors get weight 0; with no behavior lines all eleven are equal.
    """
    kwargs: dict = {}
    behaviors: list = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        try:
            if key.startswith("behavior."):
                behaviors.append((Behavior(key.split(".", 1)[1].upper()), float(value)))
            elif key in _INT_KEYS:
                kwargs[key] = int(value, 0)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    if behaviors:
        kwargs["behaviors"] = tuple(behaviors)
    spec = ScenarioSpec(**kwargs)
    spec.validate()
    return spec


def load_spec(path) -> ScenarioSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    return parse_spec(text)


PRESETS: dict[str, ScenarioSpec] = {
    "mixed": ScenarioSpec(seed=20221201, domains=100, resolvers=55),
    "clean": ScenarioSpec(seed=7, domains=40, resolvers=10, behaviors=((Behavior.CLEAN, 1.0),),
                          misconfigured_fraction=0.0),
    "localization": ScenarioSpec(
        seed=11, domains=60, resolvers=20,
        behaviors=((Behavior.CLEAN, 0.2), (Behavior.LOCALIZED_CLEAN, 0.6), (Behavior.SELF_SIGNED_BLOCKPAGE, 0.2)),
        mixed_fraction=0.0,
    ),
    "cdn_blockpage": ScenarioSpec(
        seed=13, domains=60, resolvers=20,
        behaviors=((Behavior.CLEAN, 0.5), (Behavior.CDN_HOSTED_BLOCKPAGE, 0.5)),
        mixed_fraction=0.0,
    ),
    "shared_ip": ScenarioSpec(
        seed=17, domains=80, resolvers=20,
        behaviors=((Behavior.CLEAN, 0.3), (Behavior.LOCALIZED_CLEAN, 0.3), (Behavior.BIG_CDN_INJECTION, 0.4)),
        mixed_fraction=0.0,
    ),
}


# Certificates -----------------------------------------------------------------------------------

def _derive(seed: int, label: str, n: int = 32) -> bytes:
    return hashlib.sha256(f"{seed}/{label}".encode()).digest()[:n]


def _ts(t: int) -> dt.datetime:
    return dt.datetime.fromtimestamp(t, tz=dt.timezone.utc)


@dataclass(frozen=True)
class Issuer:
    name: x509.Name
    key: ed25519.Ed25519PrivateKey = field(repr=False)
    der: bytes = field(repr=False)


def _name(cn: str, org: str | None = None) -> x509.Name:
    attrs = []
    if org:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, org))
    attrs.append(x509.NameAttribute(NameOID.COMMON_NAME, cn))
    return x509.Name(attrs)


def make_cert(seed: int, label: str, subject: x509.Name, issuer: Issuer | None, not_before: int, not_after: int,
              *, ca: bool = False, sans: tuple[str, ...] = (), key_label: str | None = None,
              issuer_key: ed25519.Ed25519PrivateKey | None = None) -> Issuer:
    """Build one certificate; ``issuer=None`` means self-signed.

    ``key_label`` lets two certificates share a subject key (cross-signs).
    ``issuer_key`` overrides the signing key (wrong-signature fixtures).
    """
    key = ed25519.Ed25519PrivateKey.from_private_bytes(_derive(seed, f"key/{key_label or label}"))
    serial = int.from_bytes(_derive(seed, f"serial/{label}", 16), "big") >> 1 or 1
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer.name if issuer else subject)
        .public_key(key.public_key())
        .serial_number(serial)
        .not_valid_before(_ts(not_before))
        .not_valid_after(_ts(not_after))
        .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True)
    )
    if sans:
        builder = builder.add_extension(x509.SubjectAlternativeName([x509.DNSName(s) for s in sans]), critical=False)
    signer = issuer_key or (issuer.key if issuer else key)
    cert = builder.sign(signer, None)
    return Issuer(subject, key, cert.public_bytes(serialization.Encoding.DER))


@dataclass
class CaMaterial:
    trusted_root: Issuer
    trusted_intermediate: Issuer
    modern_root: Issuer
    legacy_root: Issuer
    cross_sign: Issuer
    modern_intermediate: Issuer
    federal_root: Issuer
    vendor_roots: dict[str, Issuer]

    def root_store(self) -> list[certval.ParsedCert]:
        return certval.parse_chain([self.trusted_root.der, self.modern_root.der, self.legacy_root.der])

    def policy(self, **overrides) -> certval.CertPolicy:
        return certval.CertPolicy(tuple(self.root_store()), **overrides)


def build_ca_material(seed: int, t: int) -> CaMaterial:
    long_ago, far = t - 3000 * DAY, t + 3000 * DAY
    root = make_cert(seed, "root", _name("Sim Trusted Root R1", "Sim Trust Services"), None, long_ago, far, ca=True)
    inter = make_cert(seed, "inter", _name("Sim Issuing CA 1", "Sim Trust Services"), root, long_ago, far, ca=True)
    modern = make_cert(seed, "modern-root", _name("Sim Root X1", "Sim Encrypt"), None, long_ago, far, ca=True)
    # legacy root and its cross-sign of the modern root both expired, as with the deprecated DST root
    legacy = make_cert(seed, "legacy-root", _name("Sim Legacy Root X3", "Sim Legacy Trust"), None,
                       long_ago, t - 60 * DAY, ca=True)
    cross = make_cert(seed, "cross", _name("Sim Root X1", "Sim Encrypt"), legacy, long_ago, t - 60 * DAY,
                      ca=True, key_label="modern-root")
    modern_inter = make_cert(seed, "modern-inter", _name("Sim R3", "Sim Encrypt"), modern, long_ago, far, ca=True)
    federal = make_cert(seed, "federal", _name("Sim Federal Common Policy CA", "Sim Federal PKI"), None,
                        long_ago, far, ca=True)
    vendors = {}
    for vendor in ("OpenDNS", "SkyDNS", "SafeDNS", "NextDNS", "Internet Positif", "Securly", "Infoblox", "Portal"):
        vendors[vendor] = make_cert(seed, f"vendor/{vendor}", _name(f"{vendor} Filtering CA", vendor), None,
                                    long_ago, far, ca=True)
    return CaMaterial(root, inter, modern, legacy, cross, modern_inter, federal, vendors)


# Servers ----------------------------------------------------------------------------------------

def _html(title: str, body: str) -> bytes:
    return (f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title}</title></head>"
            f"<body>{body}</body></html>\n").encode()


HEADERS = (("Server", "nginx"), ("Content-Type", "text/html; charset=utf-8"))


def legit_page(domain: str, region: str = "") -> HttpPage:
    extra = f"<p>Regional edition: {region}</p>" if region else ""
    return HttpPage(200, HEADERS, _html(f"{domain} home", f"<h1>Welcome to {domain}</h1>{extra}<p>Latest articles.</p>"))


def redirect_page(domain: str) -> HttpPage:
    return HttpPage(301, HEADERS + (("Location", f"https://{domain}/"),), b"")


BLOCKPAGES: dict[str, tuple[int, str, str]] = {
    # fingerprint id -> (status, title, body html); {domain} is substituted
    "product-opendns": (200, "Site Blocked", '<p>{domain} is blocked on this network.</p>'
                        '<img src="http://hit-adult.opendns.com/logo.png">'),
    "product-skydns": (451, "Access restricted", "<p>Access to {domain} is restricted by SkyDNS content filter.</p>"),
    "product-safedns": (451, "Access denied", '<p>{domain}</p><a href="https://blockpage.safedns.com/">details</a>'),
    "product-nextdns": (200, "Blocked", "<p>Blocked by NextDNS: {domain}</p>"),
    "product-securly": (200, "Blocked", '<p>{domain} is not allowed.</p><a href="https://www.securly.com/blocked">why</a>'),
    "product-infoblox": (403, "Blocked", "<p>This domain has been blocked by Infoblox. ({domain})</p>"),
    "national-id-internet-positif": (200, "Internet Sehat", "<p>Situs {domain} diblokir. Internet Positif.</p>"),
    "isp-ru-miralogic": (200, "Доступ ограничен", "<p>Ресурс {domain} заблокирован. MiraLogic</p>"),
    "isp-de-cuii": (200, "Gesperrt", '<p>{domain} ist gesperrt. <a href="https://cuii.info/">Info</a></p>'),
}


def blockpage_body(fp_id: str, domain: str) -> HttpPage:
    status, title, body = BLOCKPAGES[fp_id]
    return HttpPage(status, HEADERS, _html(title, body.format(domain=domain)))


NGINX_DEFAULT = HttpPage(200, HEADERS, _html("Welcome to nginx!", "<h1>Welcome to nginx!</h1>"))


class _Server:
    def http(self, host: str) -> HttpPage:
        raise TransportError(ERR_REFUSED)

    def https(self, sni: str, host: str) -> tuple[list[bytes], HttpPage | None]:
        raise TransportError(ERR_REFUSED)


class LegitServer(_Server):
    def __init__(self, chains: Mapping[str, list[bytes]], page: Callable[[str], HttpPage]):
        self.chains = dict(chains)
        self.page = page

    def http(self, host):
        return redirect_page(host)

    def https(self, sni, host):
        if sni in self.chains:
            return self.chains[sni], self.page(host)
        first = next(iter(self.chains))
        return self.chains[first], HttpPage(421, HEADERS, _html("Misdirected Request", "<h1>421</h1>"))


class BlockServer(_Server):
    def __init__(self, page: Callable[[str], HttpPage], chain: Callable[[str], list[bytes]] | None):
        self.page = page
        self.chain = chain

    def http(self, host):
        return self.page(host)

    def https(self, sni, host):
        if self.chain is None:
            raise TransportError(ERR_REFUSED)
        return self.chain(sni), self.page(host)


class SimulatedTransport:
    """In-memory transport; records every Host and SNI value it sees."""

    rate_limited = False

    def __init__(self, servers: Mapping[str, _Server], now: int):
        self.servers = dict(servers)
        self._now = now
        self.seen: list[tuple[str, str, str, str]] = []  # (port, ip, host, sni)
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def _server(self, ip: str) -> _Server:
        server = self.servers.get(ip)
        if server is None:
            raise TransportError(ERR_REFUSED, f"nothing listening at {ip}")
        return server

    def get_http(self, ip, host, limits: FetchLimits):
        with self._lock:
            self.seen.append(("http", ip, host, ""))
        return self._server(ip).http(host)

    def get_https(self, ip, sni, host, limits: FetchLimits):
        with self._lock:
            self.seen.append(("https", ip, host, sni))
        return self._server(ip).https(sni, host)


class _MitmIssuer:
    """Issues a leaf for whatever SNI arrives, signed by an untrusted vendor CA."""

    def __init__(self, seed: int, vendor: str, ca: Issuer, t: int):
        self.seed, self.vendor, self.ca, self.t = seed, vendor, ca, t
        self._cache: dict[str, list[bytes]] = {}
        self._lock = threading.Lock()

    def __call__(self, sni: str) -> list[bytes]:
        with self._lock:
            if sni not in self._cache:
                leaf = make_cert(self.seed, f"mitm/{self.vendor}/{sni}", _name(sni), self.ca,
                                 self.t - 30 * DAY, self.t + 335 * DAY, sans=(sni,))
                self._cache[sni] = [leaf.der, self.ca.der]
            return self._cache[sni]


# Ground truth -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthEntry:
    behavior: Behavior
    label: Label | None
    actor_kind: ActorKind | None = None
    actor_name: str | None = None
    excluded: corpus.ExclusionReason | None = None

    def to_record(self, resolver_ip: str, domain: str) -> dict:
        return {
            "resolver_ip": resolver_ip,
            "domain": domain,
            "behavior": self.behavior.value,
            "label": self.label.value if self.label else None,
            "actor_kind": self.actor_kind.value if self.actor_kind else None,
            "actor_name": self.actor_name,
            "excluded": self.excluded.value if self.excluded else None,
        }


GroundTruth = dict  # (resolver_ip, domain) -> TruthEntry


@dataclass
class Scenario:
    spec: ScenarioSpec
    snapshot: list[DnsResponse]
    transport: SimulatedTransport
    metadata: dict[str, IpMetadata]
    truth: dict[tuple[str, str], TruthEntry]
    ca: CaMaterial
    fingerprints: list[blockpage.Fingerprint]
    resolver_behaviors: dict[str, Behavior]
    misconfigured_domains: list[str]

    def policy(self, **overrides) -> certval.CertPolicy:
        return self.ca.policy(reference_time=self.spec.reference_time, **overrides)


# Generation -------------------------------------------------------------------------------------

PROVIDERS = (
    ("Amazon", (64600, 64601, 64602, 64603, 64604, 64605)),
    ("Akamai", (64610, 64611, 64612, 64613, 64614, 64615)),
    ("Fastly", (64620, 64621, 64622, 64623)),
    ("Cloudflare", (64630, 64631, 64632, 64633)),
)
MISCONFIGURED_NAMES = ("www.dtic.mil", "www.freeexpression.org", "www.kcna.kp")
TLDS = ("com", "org", "net", "info")
CONTROL_RESOLVERS = (("8.8.8.8", "US"), ("1.1.1.1", "US"), ("156.154.70.1", "US"), ("9.9.9.9", "CH"))
MITM_VENDORS = (
    # (vendor CA key, fingerprint id, actor kind, actor name, blockpage ip)
    ("OpenDNS", "product-opendns", ActorKind.VENDOR, "OpenDNS", "146.112.61.106"),
    ("SkyDNS", "product-skydns", ActorKind.VENDOR, "SkyDNS", "82.0.1.10"),
    ("SafeDNS", "product-safedns", ActorKind.VENDOR, "SafeDNS", "82.0.2.10"),
    ("NextDNS", "product-nextdns", ActorKind.VENDOR, "NextDNS", "82.0.3.10"),
    ("Internet Positif", "national-id-internet-positif", ActorKind.NATIONAL, "Internet Positif", "82.0.4.10"),
)
ISP_VARIANTS = (
    # (cert hostname, fingerprint id or None, actor kind, actor name)
    ("forbidden.citytelecom.ru", "isp-ru-miralogic", ActorKind.ISP, "MiraLogic"),
    ("illegal.mdes.go.th", None, ActorKind.ISP, "mdes.go.th"),
    ("blockpage.isp-{n}.example", "isp-de-cuii", ActorKind.ISP, "CUII"),
    ("allownet.isp-{n}.example", None, ActorKind.ISP, "isp-{n}.example"),
    ("fw.fortinet.example", None, ActorKind.VENDOR, "Fortinet"),
)
CDN_VENDORS = (("Securly", "product-securly"), ("Infoblox", "product-infoblox"))
BEHAVIOR_COUNTRIES = {
    Behavior.BIG_CDN_INJECTION: ("CN",),
    Behavior.NXDOMAIN_CENSOR: ("GB", "US", "SG"),
    Behavior.TRUSTED_ISP_BLOCKPAGE: ("RU", "TH", "DE", "RO"),
    Behavior.SELF_SIGNED_BLOCKPAGE: ("ID", "RU", "US", "AU"),
    Behavior.CDN_HOSTED_BLOCKPAGE: ("US",),
}
OTHER_COUNTRIES = ("US", "DE", "BR", "IN", "JP", "FR", "KE", "NP", "LV", "PL")


def _ip(*octets: int) -> str:
    return ".".join(str(o) for o in octets)


def _domain_name(i: int) -> str:
    return f"www.site{i:04d}.{TLDS[i % len(TLDS)]}"


def _allocate(behaviors, n: int, rng: random.Random) -> list[Behavior]:
    """Largest-remainder allocation, then a seeded shuffle."""
    quotas = [(b, w * n) for b, w in behaviors]
    counts = {b: int(q) for b, q in quotas}
    left = n - sum(counts.values())
    for b, q in sorted(quotas, key=lambda bq: (-(bq[1] - int(bq[1])), list(Behavior).index(bq[0])))[:left]:
        counts[b] += 1
    out = [b for b, _ in behaviors for _ in range(counts[b])]
    rng.shuffle(out)
    return out


def _page_hash(page: HttpPage) -> str:
    return hashlib.sha256(page.body).hexdigest()


def generate(spec: ScenarioSpec) -> Scenario:
    spec.validate()
    seed, t = spec.seed, spec.reference_time
    rng = random.Random(seed)
    ca = build_ca_material(seed, t)
    year_ago, year_ahead = t - 200 * DAY, t + 165 * DAY

    # domains and their honest hosting
    n_misconf = round(spec.domains * spec.misconfigured_fraction)
    names = [_domain_name(i) for i in range(spec.domains)]
    misconfigured = []
    for k in range(n_misconf):
        name = MISCONFIGURED_NAMES[k] if k < len(MISCONFIGURED_NAMES) else f"www.misconfigured{k:03d}.gov"
        names[k] = name
        misconfigured.append(name)
    misconf_set = set(misconfigured)

    metadata: dict[str, IpMetadata] = {}
    servers: dict[str, _Server] = {}
    chains: dict[str, list[bytes]] = {}
    control_ips: dict[str, list[str]] = {}
    provider_of: dict[str, int] = {}

    for i, d in enumerate(names):
        p = rng.randrange(len(PROVIDERS))
        provider_of[d] = p
        cdn, asns = PROVIDERS[p]
        n_as = rng.randint(1, len(asns))
        if d in misconf_set:
            k = misconfigured.index(d)
            if k % 2 == 0:
                leaf = make_cert(seed, f"leaf/{d}", _name(d, "Sim Federal Agency"), ca.federal_root, year_ago, year_ahead, sans=(d,))
                chain = [leaf.der, ca.federal_root.der]
            else:
                other = f"origin-{k}.hosting.example"
                leaf = make_cert(seed, f"leaf/{d}", _name(other), ca.trusted_intermediate, year_ago, year_ahead, sans=(other,))
                chain = [leaf.der, ca.trusted_intermediate.der]
        elif i % 10 == 3:
            leaf = make_cert(seed, f"leaf/{d}", _name(d), ca.modern_intermediate, year_ago, year_ahead, sans=(d,))
            chain = [leaf.der, ca.modern_intermediate.der, ca.cross_sign.der]
        elif i % 17 == 5:
            # expired two days ago: inside the expiry tolerance
            leaf = make_cert(seed, f"leaf/{d}", _name(d), ca.trusted_intermediate, t - 300 * DAY, t - 2 * DAY, sans=(d,))
            chain = [leaf.der, ca.trusted_intermediate.der]
        else:
            leaf = make_cert(seed, f"leaf/{d}", _name(d), ca.trusted_intermediate, year_ago, year_ahead,
                             sans=(d, d.removeprefix("www.")))
            chain = [leaf.der, ca.trusted_intermediate.der]
        chains[d] = chain
        cert_hash = certval.raw_fingerprint(chain[0])
        ips = []
        for j in range(n_as):
            ip = _ip(23, (i >> 8) & 255, i & 255, j + 1)
            asn = asns[j]
            metadata[ip] = IpMetadata(asn, f"{cdn.upper()}-{asn}", f"edge{j}.{cdn.lower()}.example", cdn,
                                      _page_hash(legit_page(d)), cert_hash)
            servers[ip] = LegitServer({d: chain}, legit_page)
            ips.append(ip)
        control_ips[d] = ips

    # shared censor infrastructure
    for vendor, fp_id, _, _, ip in MITM_VENDORS:
        mitm = _MitmIssuer(seed, vendor, ca.vendor_roots[vendor], t)
        servers[ip] = BlockServer(lambda host, fp_id=fp_id: blockpage_body(fp_id, host), mitm)
        metadata.setdefault(ip, IpMetadata(64700 + len(servers) % 50, f"{vendor.upper()}-NET", None, None,
                                           None, None))
    cdn_vendor_ips: dict[tuple[int, int], str] = {}
    for v, (vendor, fp_id) in enumerate(CDN_VENDORS):
        chain_leaf = make_cert(seed, f"cdnvendor/{vendor}", _name(f"filter.{vendor.lower()}.example"),
                               ca.vendor_roots[vendor], year_ago, year_ahead, sans=(f"filter.{vendor.lower()}.example",))
        vchain = [chain_leaf.der, ca.vendor_roots[vendor].der]
        for p, (cdn, asns) in enumerate(PROVIDERS):
            ip = _ip(52, p + 1, v + 1, 10)
            cdn_vendor_ips[(v, p)] = ip
            servers[ip] = BlockServer(lambda host, fp_id=fp_id: blockpage_body(fp_id, host), lambda sni, c=vchain: c)
            metadata[ip] = IpMetadata(asns[0], f"{cdn.upper()}-{asns[0]}", None, cdn, None, None)
    social_leaf = make_cert(seed, "socialnet", _name("*.socialnet.example", "SocialNet Inc"), ca.trusted_intermediate,
                            year_ago, year_ahead, sans=("*.socialnet.example", "socialnet.example"))
    social_chain = [social_leaf.der, ca.trusted_intermediate.der]
    social_ips = [_ip(157, 240, k, 35) for k in range(8)]
    for k, ip in enumerate(social_ips):
        status = 403 if k % 2 == 0 else 404
        page = HttpPage(status, HEADERS, _html(f"{status} Error", f"<h1>Sorry, something went wrong ({status})</h1>"))
        servers[ip] = BlockServer(lambda host, page=page: page, lambda sni: social_chain)
        metadata[ip] = IpMetadata(64900, "SOCIALNET", f"edge-{k}.socialnet.example", "SocialNet", _page_hash(page),
                                  certval.raw_fingerprint(social_chain[0]))

    # test resolvers
    assigned = _allocate(spec.behaviors, spec.resolvers, rng)
    blocked_n = max(1, round(spec.domains * spec.blocked_fraction))
    nx_n = min(spec.nxdomain_blocked, max(spec.domains - 1, 1))
    nx_domains = set(rng.sample(names, nx_n))
    snapshot: list[DnsResponse] = []
    truth: dict[tuple[str, str], TruthEntry] = {}
    resolver_behaviors: dict[str, Behavior] = {}

    for ctrl_ip, country in CONTROL_RESOLVERS[: spec.control_resolvers]:
        for d in names:
            snapshot.append(DnsResponse(ctrl_ip, country, d, 0, tuple(control_ips[d]), None, t, True))

    for r, behavior in enumerate(assigned):
        rip = _ip(62, 1 + (r >> 8), r & 255, 53)
        resolver_behaviors[rip] = behavior
        country = rng.choice(BEHAVIOR_COUNTRIES.get(behavior, OTHER_COUNTRIES))
        blocked = set(rng.sample(names, min(blocked_n, len(names))))
        mitm = MITM_VENDORS[r % len(MITM_VENDORS)]
        isp_cn, isp_fp, isp_kind, isp_name = ISP_VARIANTS[r % len(ISP_VARIANTS)]
        isp_cn, isp_name = isp_cn.format(n=r), isp_name.format(n=r)
        cdn_vendor = r % len(CDN_VENDORS)
        isp_ip = "208.91.112.55" if isp_name == "Fortinet" else _ip(81, 1 + (r >> 8), r & 255, 1)

        if behavior is Behavior.TRUSTED_ISP_BLOCKPAGE and isp_ip not in servers:
            isp_leaf = make_cert(seed, f"isp/{isp_cn}", _name(isp_cn), ca.trusted_intermediate, year_ago, year_ahead,
                                 sans=(isp_cn,))
            isp_chain = [isp_leaf.der, ca.trusted_intermediate.der]
            page_fn = (lambda host, fp=isp_fp: blockpage_body(fp, host)) if isp_fp else (lambda host: NGINX_DEFAULT)
            servers[isp_ip] = BlockServer(page_fn, lambda sni, c=isp_chain: c)
            metadata[isp_ip] = IpMetadata(64800 + r, f"ISP-{r}", None, None, None, None)
        if behavior is Behavior.CAPTIVE_PORTAL:
            portal_ip = _ip(84, 1 + (r >> 8), r & 255, 1)
            portal_leaf = make_cert(seed, f"portal/{r}", _name("portal.local"), ca.vendor_roots["Portal"],
                                    year_ago, year_ahead, sans=("portal.local",))
            portal_page = HttpPage(200, HEADERS, _html("Hotspot login", "<form><input name=user></form>"))
            servers[portal_ip] = BlockServer(lambda host: portal_page,
                                             lambda sni, c=[portal_leaf.der, ca.vendor_roots["Portal"].der]: c)

        for d in names:
            answers: list[str] = list(control_ips[d][: 1 + rng.randrange(len(control_ips[d]))])
            rcode = 0
            label = Label.UNMANIPULATED_CONTROL_IP
            kind = name = None
            excluded = None
            manipulated_ip = False

            if behavior is Behavior.LOCALIZED_CLEAN and d not in misconf_set:
                i = names.index(d)
                ip = _ip(45, r & 255, (i >> 8) & 255, i & 255)
                answers, label = [ip], Label.UNMANIPULATED_VALID_CERT
                if ip not in servers:
                    region = f"region-{r}"
                    servers[ip] = LegitServer({d: chains[d]}, lambda host, region=region: legit_page(host, region))
                    cert_hash = certval.raw_fingerprint(chains[d][0]) if rng.random() < spec.localized_cert_hash_coverage else None
                    metadata[ip] = IpMetadata(65000 + r, f"LOCAL-ISP-{r}", None, None,
                                              _page_hash(legit_page(d, region)), cert_hash)
            elif behavior is Behavior.GEOBLOCKING_CDN and d in blocked and d not in misconf_set:
                i = names.index(d)
                ip = _ip(46, r & 255, (i >> 8) & 255, i & 255)
                answers, label = [ip], Label.UNMANIPULATED_VALID_CERT
                geo_page = HttpPage(403, HEADERS, _html("403 Forbidden", "<h1>Access denied in your region</h1>"))
                servers[ip] = LegitServer({d: chains[d]}, lambda host, page=geo_page: page)
                metadata[ip] = IpMetadata(65100 + r, f"GEO-EDGE-{r}", None, None, _page_hash(geo_page), None)
            elif behavior is Behavior.MISCONFIGURED_DOMAIN and d in misconf_set:
                i = names.index(d)
                ip = _ip(47, r & 255, (i >> 8) & 255, i & 255)
                answers, label = [ip], Label.UNMANIPULATED_MALFORMED_DOMAIN
                servers[ip] = LegitServer({d: chains[d]}, legit_page)
                metadata[ip] = IpMetadata(65200 + r, f"MIRROR-{r}", None, None, None, None)
            elif behavior is Behavior.NXDOMAIN_CENSOR and d in nx_domains:
                answers, rcode, label = [], 3, Label.MANIPULATED_RCODE
                kind = ActorKind.UNKNOWN
            elif behavior is Behavior.CAPTIVE_PORTAL:
                answers, label = [_ip(84, 1 + (r >> 8), r & 255, 1)], None
                excluded = corpus.ExclusionReason.SAME_IP_SET
            elif behavior is Behavior.PRIVATE_IP_CENSOR and d in blocked:
                answers, label, kind = [_ip(10, 10, 34, 34)], Label.MANIPULATED_PRIVATE_IP, ActorKind.UNKNOWN
                manipulated_ip = True
            elif behavior is Behavior.SELF_SIGNED_BLOCKPAGE and d in blocked:
                answers, label = [mitm[4]], Label.MANIPULATED_BLOCKPAGE
                kind, name = mitm[2], mitm[3]
                manipulated_ip = True
            elif behavior is Behavior.TRUSTED_ISP_BLOCKPAGE and d in blocked:
                answers = [isp_ip]
                label = Label.MANIPULATED_BLOCKPAGE if isp_fp else Label.MANIPULATED_INVALID_CERT
                kind, name = isp_kind, isp_name
                manipulated_ip = True
            elif behavior is Behavior.BIG_CDN_INJECTION and d in blocked:
                answers = [social_ips[int(hashlib.sha256(d.encode()).hexdigest(), 16) % len(social_ips)]]
                label, kind = Label.MANIPULATED_INVALID_CERT, ActorKind.UNKNOWN
                manipulated_ip = True
            elif behavior is Behavior.CDN_HOSTED_BLOCKPAGE and d in blocked:
                answers = [cdn_vendor_ips[(cdn_vendor, provider_of[d])]]
                label, kind, name = Label.MANIPULATED_BLOCKPAGE, ActorKind.VENDOR, CDN_VENDORS[cdn_vendor][0]
                manipulated_ip = True

            if manipulated_ip and rng.random() < spec.mixed_fraction:
                answers.append(control_ips[d][0])
                label, kind, name = Label.UNMANIPULATED_MIXED, None, None

            snapshot.append(DnsResponse(rip, country, d, rcode, tuple(answers), None, t, False))
            truth[(rip, d)] = TruthEntry(behavior, label, kind, name, excluded)

    used = {fp for _, fp, *_ in MITM_VENDORS} | {v[1] for v in ISP_VARIANTS if v[1]} | {fp for _, fp in CDN_VENDORS}
    fps = [fp for fp in blockpage.default_db() if fp.id in used or fp.category is blockpage.Category.GENERAL]
    transport = SimulatedTransport(servers, t)
    return Scenario(spec, snapshot, transport, metadata, truth, ca, fps, resolver_behaviors, misconfigured)


# Fixture emission -------------------------------------------------------------------------------

FIXTURE_FILES = ("snapshot.jsonl", "metadata.jsonl", "fingerprints.jsonl", "roots.pem", "truth.jsonl")


def serialize(scenario: Scenario) -> dict[str, bytes]:
    snap, meta, fps, truth = io.StringIO(), io.StringIO(), io.StringIO(), io.StringIO()
    corpus.write_snapshot(scenario.snapshot, snap)
    corpus.write_metadata(scenario.metadata, meta)
    blockpage.write_db(scenario.fingerprints, fps)
    for (rip, d), entry in sorted(scenario.truth.items()):
        truth.write(json.dumps(entry.to_record(rip, d), sort_keys=True) + "\n")
    return {
        "snapshot.jsonl": snap.getvalue().encode(),
        "metadata.jsonl": meta.getvalue().encode(),
        "fingerprints.jsonl": fps.getvalue().encode(),
        "roots.pem": certval.roots_to_pem(scenario.ca.root_store()),
        "truth.jsonl": truth.getvalue().encode(),
    }


def emit_fixture(spec: ScenarioSpec, out_dir) -> dict:
    """Write the scenario files plus ``manifest.json`` with their SHA-256 hashes."""
    scenario = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": spec.to_text(), "files": {}}
    for name, data in serialize(scenario).items():
        (out / name).write_bytes(data)
        manifest["files"][name] = hashlib.sha256(data).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_truth(path) -> dict[tuple[str, str], TruthEntry]:
    truth = {}
    for rec in corpus.iter_jsonl(path):
        truth[(rec["resolver_ip"], rec["domain"])] = TruthEntry(
            Behavior(rec["behavior"]),
            Label(rec["label"]) if rec["label"] else None,
            ActorKind(rec["actor_kind"]) if rec["actor_kind"] else None,
            rec["actor_name"],
            corpus.ExclusionReason(rec["excluded"]) if rec["excluded"] else None,
        )
    return truth


# Misissuance pool fixture -----------------------------------------------------------------------

@dataclass
class MisissuanceFixture:
    control_responses: list[DnsResponse]
    control_fetches: list
    test_fetches: list
    invalid_domains: list[str]
    policy: certval.CertPolicy


def misissuance_fixture(seed: int = 5898, n_control: int = 5898, n_invalid: int = 72,
                        reference_time: int = DEFAULT_REFERENCE_TIME) -> MisissuanceFixture:
    """``n_control`` control certificates of which ``n_invalid`` are invalid by default.

    Test fetches re-serve each invalid control certificate from a
    non-control IP, so every test certificate matches the invalid pool.
    """
    from .probe import FetchResult
    from .corpus import ResolutionPair

    t = reference_time
    ca = build_ca_material(seed, t)
    rng = random.Random(seed)
    invalid_idx = set(rng.sample(range(n_control), n_invalid))
    responses, control_fetches, test_fetches, invalid_domains = [], [], [], []
    for i in range(n_control):
        d = f"www.control{i:05d}.example"
        ip = _ip(23, (i >> 8) & 255, i & 255, 1)
        if i in invalid_idx:
            kind = len(invalid_domains) % 3
            if kind == 0:
                leaf = make_cert(seed, f"m/{d}", _name(d), ca.federal_root, t - 100 * DAY, t + 100 * DAY, sans=(d,))
                chain = (leaf.der, ca.federal_root.der)
            elif kind == 1:
                leaf = make_cert(seed, f"m/{d}", _name("wrong.example"), ca.trusted_intermediate,
                                 t - 100 * DAY, t + 100 * DAY, sans=("wrong.example",))
                chain = (leaf.der, ca.trusted_intermediate.der)
            else:
                leaf = make_cert(seed, f"m/{d}", _name(d), ca.trusted_intermediate, t - 400 * DAY, t - 30 * DAY, sans=(d,))
                chain = (leaf.der, ca.trusted_intermediate.der)
            invalid_domains.append(d)
        else:
            leaf = make_cert(seed, f"m/{d}", _name(d), ca.trusted_intermediate, t - 100 * DAY, t + 100 * DAY, sans=(d,))
            chain = (leaf.der, ca.trusted_intermediate.der)
        page = legit_page(d)
        responses.append(DnsResponse("8.8.8.8", "US", d, 0, (ip,), None, t, True))
        control_fetches.append(FetchResult(ResolutionPair(d, ip), redirect_page(d), page, chain, None, None, t))
        if i in invalid_idx:
            test_ip = _ip(47, (i >> 8) & 255, i & 255, 9)
            test_fetches.append(FetchResult(ResolutionPair(d, test_ip), redirect_page(d), page, chain, None, None, t))
    return MisissuanceFixture(responses, control_fetches, test_fetches, invalid_domains,
                              ca.policy(reference_time=t))


# Shared-IP threshold fixture --------------------------------------------------------------------

def shared_ip_threshold_fixture(n_domains: int = 30, control_as_count: int = 5, shared_ip: str = "203.0.113.80",
                                n_decoys: int = 10, reference_time: int = DEFAULT_REFERENCE_TIME):
    """One test IP answers ``n_domains`` domains that each span ``control_as_count`` control ASes.

    Decoy domains resolve to their own single-AS IPs and are never flagged.
    Returns ``(snapshot, metadata)``.
    """
    t = reference_time
    snapshot, metadata = [], {}
    for i in range(n_domains + n_decoys):
        d = f"www.shared{i:03d}.example"
        k = control_as_count if i < n_domains else 1
        ips = tuple(_ip(23, 200, i, j + 1) for j in range(k))
        for j, ip in enumerate(ips):
            metadata[ip] = IpMetadata(64512 + j, f"HOST-{j}", None, None, None, None)
        snapshot.append(DnsResponse("8.8.8.8", "US", d, 0, ips, None, t, True))
        answer = shared_ip if i < n_domains else _ip(198, 51, 100, i)
        snapshot.append(DnsResponse("62.0.0.53", "ZZ", d, 0, (answer,), None, t, False))
    return snapshot, metadata
