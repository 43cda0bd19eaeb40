"""Certificate chain parsing, trust verification, and hostname matching.

A chain is judged as presented (leaf first): each certificate must be
signed by the next one, and the last presented certificate must either be
a trust anchor or be signed directly by one. Two tolerances relax this:

* EXPIRY: a leaf or intermediate that expired less than
  ``expiry_tolerance_secs`` before the reference time is still accepted,
  but only when the hostname matches.
* DEPRECATED_ROOT: when the full chain fails, a proper leaf-anchored prefix
  that verifies to a trust anchor is accepted (the expired cross-sign
  pattern).
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.x509.oid import ExtensionOID, NameOID

FIVE_DAYS = 5 * 24 * 3600


class CertCase(str, enum.Enum):
    VALID = "VALID"
    UNTRUSTED_MATCHED = "UNTRUSTED_MATCHED"
    TRUSTED_MISMATCHED = "TRUSTED_MISMATCHED"
    UNTRUSTED_MISMATCHED = "UNTRUSTED_MISMATCHED"
    PARSE_ERROR = "PARSE_ERROR"


INVALID_CASES = frozenset(
    {CertCase.UNTRUSTED_MATCHED, CertCase.TRUSTED_MISMATCHED, CertCase.UNTRUSTED_MISMATCHED}
)


class Tolerance(str, enum.Enum):
    EXPIRY = "EXPIRY"
    DEPRECATED_ROOT = "DEPRECATED_ROOT"


class InvalidReason(str, enum.Enum):
    UNTRUSTED_ROOT = "UNTRUSTED_ROOT"
    HOSTNAME_MISMATCH = "HOSTNAME_MISMATCH"
    EXPIRED = "EXPIRED"
    PARSE_ERROR = "PARSE_ERROR"
    OTHER = "OTHER"


class CertParseError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"certificate {index}: {message}")
        self.index = index


class ContractViolation(Exception):
    pass


def raw_fingerprint(der: bytes) -> str:
    return hashlib.sha256(der).hexdigest()


@dataclass(frozen=True)
class ParsedCert:
    subject_cn: str | None
    sans: tuple[str, ...]
    issuer: str
    not_before: int
    not_after: int
    is_ca: bool
    fingerprint: str
    raw: bytes = field(repr=False)
    issuer_cn: str | None = None
    issuer_org: str | None = None
    cert: x509.Certificate | None = field(default=None, repr=False, compare=False, hash=False)


def _first_attr(name: x509.Name, oid) -> str | None:
    attrs = name.get_attributes_for_oid(oid)
    if not attrs:
        return None
    value = attrs[0].value
    return value.decode("utf-8", "replace") if isinstance(value, bytes) else value


def parse_cert(der: bytes, index: int = 0) -> ParsedCert:
    try:
        cert = x509.load_der_x509_certificate(bytes(der))
        try:
            san_ext = cert.extensions.get_extension_for_oid(ExtensionOID.SUBJECT_ALTERNATIVE_NAME)
            sans = tuple(n.lower() for n in san_ext.value.get_values_for_type(x509.DNSName))
        except x509.ExtensionNotFound:
            sans = ()
        try:
            bc = cert.extensions.get_extension_for_oid(ExtensionOID.BASIC_CONSTRAINTS)
            is_ca = bool(bc.value.ca)
        except x509.ExtensionNotFound:
            is_ca = False
        return ParsedCert(
            subject_cn=_first_attr(cert.subject, NameOID.COMMON_NAME),
            sans=sans,
            issuer=cert.issuer.rfc4514_string(),
            not_before=int(cert.not_valid_before_utc.timestamp()),
            not_after=int(cert.not_valid_after_utc.timestamp()),
            is_ca=is_ca,
            fingerprint=raw_fingerprint(der),
            raw=bytes(der),
            issuer_cn=_first_attr(cert.issuer, NameOID.COMMON_NAME),
            issuer_org=_first_attr(cert.issuer, NameOID.ORGANIZATION_NAME),
            cert=cert,
        )
    except (ValueError, TypeError) as exc:
        raise CertParseError(index, str(exc)) from exc


def parse_chain(raw_chain: Sequence[bytes]) -> list[ParsedCert]:
    """Parse DER blobs in order; raises :class:`CertParseError` naming the bad index."""
    return [parse_cert(der, i) for i, der in enumerate(raw_chain)]


def load_root_store(path) -> list[ParsedCert]:
    with open(path, "rb") as fh:
        data = fh.read()
    certs = x509.load_pem_x509_certificates(data)
    return [parse_cert(c.public_bytes(serialization.Encoding.DER), i) for i, c in enumerate(certs)]


def roots_to_pem(roots: Sequence[ParsedCert]) -> bytes:
    out = []
    for r in roots:
        cert = r.cert or x509.load_der_x509_certificate(r.raw)
        out.append(cert.public_bytes(serialization.Encoding.PEM))
    return b"".join(out)


@dataclass(frozen=True)
class CertPolicy:
    root_store: tuple[ParsedCert, ...]
    expiry_tolerance_secs: int = FIVE_DAYS
    deprecated_root_tolerance: bool = True
    reference_time: int | None = None

    def __post_init__(self):
        if self.expiry_tolerance_secs < 0:
            raise ValueError("expiry_tolerance_secs must be >= 0")
        if not self.root_store:
            raise ValueError("root store is empty")
        object.__setattr__(self, "root_store", tuple(self.root_store))
        object.__setattr__(self, "_by_fp", {r.fingerprint: r for r in self.root_store})
        by_subject: dict[bytes, list[ParsedCert]] = {}
        for r in self.root_store:
            by_subject.setdefault(r.cert.subject.public_bytes(), []).append(r)
        object.__setattr__(self, "_by_subject", by_subject)

    def strict(self) -> "CertPolicy":
        return replace(self, expiry_tolerance_secs=0, deprecated_root_tolerance=False)

    def is_anchor(self, cert: ParsedCert) -> bool:
        return cert.fingerprint in self._by_fp

    def issuers_of(self, cert: ParsedCert) -> list[ParsedCert]:
        return self._by_subject.get(cert.cert.issuer.public_bytes(), [])


class TrustResult(NamedTuple):
    trusted: bool
    tolerances: frozenset
    detail: str
    failure: InvalidReason | None = None


def _issued_by(child: ParsedCert, parent: ParsedCert) -> bool:
    try:
        child.cert.verify_directly_issued_by(parent.cert)
    except (ValueError, TypeError, InvalidSignature):
        return False
    return True


class _Defect(NamedTuple):
    kind: str  # "expired", "not_yet_valid", "signature", "anchor"
    message: str


def _defect(chain: Sequence[ParsedCert], k: int, policy: CertPolicy, t: int, slack: int) -> _Defect | None:
    certs = chain[:k]
    for i, c in enumerate(certs):
        if t < c.not_before:
            return _Defect("not_yet_valid", f"certificate {i} not valid before {c.not_before}")
        if t > c.not_after + slack:
            return _Defect("expired", f"certificate {i} expired {t - c.not_after}s before reference time")
    for i in range(k - 1):
        parent = certs[i + 1]
        if not parent.is_ca:
            return _Defect("signature", f"certificate {i + 1} is not a CA")
        if not _issued_by(certs[i], parent):
            return _Defect("signature", f"certificate {i} not signed by certificate {i + 1}")
    top = certs[-1]
    if policy.is_anchor(top):
        return None
    for root in policy.issuers_of(top):
        if root.not_before <= t <= root.not_after and _issued_by(top, root):
            return None
    return _Defect("anchor", f"certificate {k - 1} does not chain to a trusted root")


def verify_trust(chain: Sequence[ParsedCert], policy: CertPolicy, reference_time: int | None = None) -> TrustResult:
    if not chain:
        return TrustResult(False, frozenset(), "empty chain", InvalidReason.OTHER)
    t = reference_time if reference_time is not None else policy.reference_time
    if t is None:
        raise ValueError("no reference time given")
    n = len(chain)
    at = f"reference_time={t}"

    defect = _defect(chain, n, policy, t, 0)
    if defect is None:
        return TrustResult(True, frozenset(), f"chain verified; {at}")

    # "less than 5 days" is strict, hence the -1
    slack = policy.expiry_tolerance_secs - 1 if policy.expiry_tolerance_secs > 0 else None
    if slack is not None and defect.kind == "expired" and _defect(chain, n, policy, t, slack) is None:
        return TrustResult(True, frozenset({Tolerance.EXPIRY}), f"{defect.message}, tolerated; {at}")

    if policy.deprecated_root_tolerance:
        for k in range(n - 1, 0, -1):
            if _defect(chain, k, policy, t, 0) is None:
                return TrustResult(
                    True, frozenset({Tolerance.DEPRECATED_ROOT}),
                    f"full chain failed ({defect.message}); first {k} certificate(s) verify; {at}",
                )
            if slack is not None and _defect(chain, k, policy, t, slack) is None:
                return TrustResult(
                    True, frozenset({Tolerance.DEPRECATED_ROOT, Tolerance.EXPIRY}),
                    f"full chain failed ({defect.message}); first {k} certificate(s) verify with expiry tolerance; {at}",
                )

    if defect.kind == "expired":
        ignoring_time = _defect(chain, n, policy, t, 2**62)
        failure = InvalidReason.EXPIRED if ignoring_time is None else InvalidReason.UNTRUSTED_ROOT
    elif defect.kind == "not_yet_valid":
        failure = InvalidReason.OTHER
    else:
        failure = InvalidReason.UNTRUSTED_ROOT
    return TrustResult(False, frozenset(), f"{defect.message}; {at}", failure)


def _name_matches(pattern: str, host: str) -> bool:
    pattern = pattern.lower().rstrip(".")
    if not pattern or not host:
        return False
    if "*" not in pattern:
        return pattern == host
    labels = pattern.split(".")
    if labels[0] != "*" or any("*" in label for label in labels[1:]):
        return False
    rest = labels[1:]
    if len(rest) < 2 or not all(rest):
        return False
    host_labels = host.split(".")
    if len(host_labels) != len(labels) or not host_labels[0]:
        return False
    return host_labels[1:] == rest


def match_hostname(leaf: ParsedCert, domain: str) -> bool:
    """RFC 6125 style matching; the CN is only consulted when there are no DNS SANs."""
    host = domain.lower().rstrip(".")
    names = leaf.sans if leaf.sans else ((leaf.subject_cn,) if leaf.subject_cn else ())
    return any(_name_matches(n, host) for n in names)


@dataclass(frozen=True)
class CertAssessment:
    case: CertCase
    trusted: bool
    hostname_match: bool
    tolerances_applied: frozenset = frozenset()
    detail: str = ""
    failure: InvalidReason | None = None

    @property
    def is_valid(self) -> bool:
        return self.case is CertCase.VALID

    def to_record(self) -> dict:
        return {
            "case": self.case.value,
            "trusted": self.trusted,
            "hostname_match": self.hostname_match,
            "tolerances": sorted(t.value for t in self.tolerances_applied),
            "failure": self.failure.value if self.failure else None,
            "detail": self.detail,
        }


def _case(trusted: bool, matched: bool) -> CertCase:
    if trusted:
        return CertCase.VALID if matched else CertCase.TRUSTED_MISMATCHED
    return CertCase.UNTRUSTED_MATCHED if matched else CertCase.UNTRUSTED_MISMATCHED


def assess(raw_chain: Sequence[bytes], domain: str, policy: CertPolicy,
           reference_time: int | None = None) -> CertAssessment:
    try:
        chain = parse_chain(raw_chain)
        note = ""
    except CertParseError as exc:
        if exc.index == 0:
            return CertAssessment(CertCase.PARSE_ERROR, False, False, frozenset(), str(exc), InvalidReason.PARSE_ERROR)
        chain = parse_chain(raw_chain[: exc.index])
        note = f"; chain cut at unparseable {exc}"
    if not chain:
        return CertAssessment(CertCase.PARSE_ERROR, False, False, frozenset(), "empty chain", InvalidReason.PARSE_ERROR)

    trust = verify_trust(chain, policy, reference_time)
    matched = match_hostname(chain[0], domain)
    trusted, tolerances, failure, detail = trust.trusted, trust.tolerances, trust.failure, trust.detail
    if Tolerance.EXPIRY in tolerances and not matched:
        trusted, tolerances, failure = False, frozenset(), InvalidReason.EXPIRED
        detail += "; expiry tolerance withheld for mismatched hostname"
    case = _case(trusted, matched)
    if trusted and not matched:
        failure = InvalidReason.HOSTNAME_MISMATCH
    elif trusted:
        failure = None
    return CertAssessment(case, trusted, matched, frozenset(tolerances), detail + note, failure)


@dataclass(frozen=True, order=True)
class CertSignature:
    leaf_fingerprint: str
    invalid_reason: InvalidReason

    def to_record(self) -> dict:
        return {"leaf_fingerprint": self.leaf_fingerprint, "invalid_reason": self.invalid_reason.value}


def signature_of(assessment: CertAssessment, leaf: ParsedCert | bytes) -> CertSignature:
    if assessment.case is CertCase.VALID:
        raise ContractViolation("signature_of called on a valid certificate")
    fp = leaf.fingerprint if isinstance(leaf, ParsedCert) else raw_fingerprint(leaf)
    return CertSignature(fp, assessment.failure or InvalidReason.OTHER)
