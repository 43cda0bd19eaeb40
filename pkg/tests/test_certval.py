import random

import pytest
from hypothesis import given, settings, strategies as st

from dnsverdict import certval
from dnsverdict.certval import CertCase, InvalidReason, Tolerance
from dnsverdict.simnet import DAY, make_cert, _name

from _certs import CA, SEED, T, leaf, parsed, policy, self_signed
from _oracles import oracle_trusted, random_chain

# (san list, cn, domain, expected)
HOSTNAME_VECTORS = [
    (["www.example.com"], None, "www.example.com", True),
    (["www.example.com"], None, "WWW.Example.COM", True),
    (["WWW.EXAMPLE.COM"], None, "www.example.com", True),
    (["www.example.com"], None, "www.example.com.", True),
    (["www.example.com"], None, "example.com", False),
    (["*.example.com"], None, "www.example.com", True),
    (["*.example.com"], None, "MAIL.EXAMPLE.COM", True),
    (["*.example.com"], None, "a.b.example.com", False),
    (["*.example.com"], None, "example.com", False),
    (["*.com"], None, "example.com", False),
    (["*"], None, "example", False),
    (["w*.example.com"], None, "www.example.com", False),
    (["www.*.com"], None, "www.example.com", False),
    (["*.*.example.com"], None, "a.b.example.com", False),
    ([], "www.example.com", "www.example.com", True),
    ([], "*.example.com", "shop.example.com", True),
    (["other.example.com"], "www.example.com", "www.example.com", False),
    (["a.example.com", "b.example.com"], None, "b.example.com", True),
    (["illegal.mdes.go.th"], None, "www.bbc.com", False),
    ([], "illegal.mdes.go.th", "www.bbc.com", False),
    (["*.onedns.net"], None, "www.facebook.com", False),
    (["*.onedns.net"], None, "onedns.net", False),
    (["*.onedns.net"], None, "block.onedns.net", True),
    (["xn--bcher-kva.example"], None, "xn--bcher-kva.example", True),
]


@pytest.mark.parametrize("sans,cn,domain,expected", HOSTNAME_VECTORS)
def test_hostname_vectors(sans, cn, domain, expected):
    cert = parsed(leaf(f"hv/{sans}/{cn}", cn=cn or "placeholder-no-dot", sans=sans))
    assert certval.match_hostname(cert, domain) is expected


def test_hostname_vector_count():
    assert len(HOSTNAME_VECTORS) >= 20


def test_chain_validation_agrees_with_oracle():
    rng = random.Random(1234)
    strict = policy().strict()
    store_der = [r.raw for r in strict.root_store]
    outcomes = {True: 0, False: 0}
    agree = 0
    for i in range(200):
        chain = random_chain(rng, i)
        got = certval.verify_trust(certval.parse_chain(chain), strict, T)
        want = oracle_trusted(chain, store_der, T)
        agree += got.trusted == want
        outcomes[want] += 1
        assert got.trusted == want, (i, got.detail)
        if got.trusted:
            assert got.tolerances == frozenset()
    assert agree == 200
    # the generator must exercise both outcomes
    assert outcomes[True] >= 20 and outcomes[False] >= 20


def test_expiry_tolerance_boundary():
    pol = policy()
    for secs, trusted in ((431_999, True), (432_000, False), (1, True), (0, True)):
        lf = leaf(f"exp-{secs}", sans=("exp.example",), nb=T - 90 * DAY, na=T - secs)
        res = certval.verify_trust(certval.parse_chain([lf.der, CA.trusted_intermediate.der]), pol, T)
        assert res.trusted is trusted, (secs, res.detail)
        if trusted and secs:
            assert res.tolerances == {Tolerance.EXPIRY}
        if not trusted:
            assert res.failure is InvalidReason.EXPIRED


def test_expiry_tolerance_only_with_hostname_match():
    lf = leaf("exp-mismatch", sans=("exp.example",), nb=T - 90 * DAY, na=T - DAY)
    chain = [lf.der, CA.trusted_intermediate.der]
    assert certval.assess(chain, "exp.example", policy()).case is CertCase.VALID
    other = certval.assess(chain, "other.example", policy())
    assert other.case is CertCase.UNTRUSTED_MISMATCHED
    assert other.failure is InvalidReason.EXPIRED


def test_deprecated_root_cross_sign():
    lf = leaf("xsign", sans=("xs.example",), issuer=CA.modern_intermediate)
    chain = certval.parse_chain([lf.der, CA.modern_intermediate.der, CA.cross_sign.der])
    res = certval.verify_trust(chain, policy(), T)
    assert res.trusted and res.tolerances == {Tolerance.DEPRECATED_ROOT}
    assert not certval.verify_trust(chain, policy().strict(), T).trusted
    assert not certval.verify_trust(chain, policy(deprecated_root_tolerance=False), T).trusted


def test_deprecated_root_needs_verifying_prefix():
    rogue = self_signed("rogue-xs", cn="Sim R3")
    lf = leaf("xsign-bad", sans=("xs.example",), issuer=rogue)
    chain = certval.parse_chain([lf.der, rogue.der, CA.cross_sign.der])
    assert not certval.verify_trust(chain, policy(), T).trusted


def test_reference_time_is_explicit():
    pol = CA.policy()
    chain = certval.parse_chain([leaf("rt", sans=("rt.example",)).der, CA.trusted_intermediate.der])
    with pytest.raises(ValueError):
        certval.verify_trust(chain, pol)
    res = certval.verify_trust(chain, pol, T)
    assert f"reference_time={T}" in res.detail


def test_empty_chain_and_parse_errors():
    assert not certval.verify_trust([], policy(), T).trusted
    a = certval.assess([b"garbage"], "x.example", policy())
    assert a.case is CertCase.PARSE_ERROR and a.failure is InvalidReason.PARSE_ERROR
    lf = leaf("cut", sans=("cut.example",))
    a = certval.assess([lf.der, CA.trusted_intermediate.der, b"junk"], "cut.example", policy())
    assert a.case is CertCase.VALID and "cut" in a.detail
    with pytest.raises(certval.CertParseError) as err:
        certval.parse_chain([lf.der, b"junk"])
    assert err.value.index == 1


def test_signature_of_contract():
    lf = leaf("sig", sans=("sig.example",))
    chain = [lf.der, CA.trusted_intermediate.der]
    valid = certval.assess(chain, "sig.example", policy())
    with pytest.raises(certval.ContractViolation):
        certval.signature_of(valid, chain[0])
    bad = certval.assess(chain, "nope.example", policy())
    sig = certval.signature_of(bad, chain[0])
    assert sig == certval.signature_of(bad, certval.parse_cert(chain[0]))
    assert sig.invalid_reason is InvalidReason.HOSTNAME_MISMATCH


def test_root_store_pem_round_trip(tmp_path):
    roots = CA.root_store()
    path = tmp_path / "roots.pem"
    path.write_bytes(certval.roots_to_pem(roots))
    assert [r.fingerprint for r in certval.load_root_store(path)] == [r.fingerprint for r in roots]


def test_parsed_fields():
    lf = parsed(leaf("fields", cn="Fields.Example", sans=("Fields.Example", "alt.example"), org="Org"))
    assert lf.sans == ("fields.example", "alt.example")
    assert lf.issuer_cn == "Sim Issuing CA 1" and lf.issuer_org == "Sim Trust Services"
    assert not lf.is_ca and lf.fingerprint == certval.raw_fingerprint(lf.raw)


# Case partition -----------------------------------------------------------------------------------

_ISSUERS = {
    "trusted": CA.trusted_intermediate,
    "federal": CA.federal_root,
    "vendor": CA.vendor_roots["SkyDNS"],
    "modern": CA.modern_intermediate,
}
_NAMES = ["www.example.com", "*.example.com", "example.com", "a.b.example.com", "mail.example.org", "*.org"]
_DOMAINS = ["www.example.com", "example.com", "a.b.example.com", "mail.example.org", "x.org"]
_PARTITION_POLICY = policy()


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(
    issuer=st.sampled_from(sorted(_ISSUERS)),
    sans=st.lists(st.sampled_from(_NAMES), max_size=3, unique=True),
    domain=st.sampled_from(_DOMAINS),
    expired_by=st.sampled_from([None, 1, DAY, 4 * DAY, 5 * DAY, 30 * DAY]),
    include_parent=st.booleans(),
    include_cross=st.booleans(),
    n=st.integers(0, 3),
)
def test_case_partition(issuer, sans, domain, expired_by, include_parent, include_cross, n):
    na = T + 60 * DAY if expired_by is None else T - expired_by
    parent = _ISSUERS[issuer]
    lf = make_cert(SEED, f"part/{issuer}/{sans}/{expired_by}/{n}", _name(sans[0] if sans else "cn.example.com"),
                   parent, T - 200 * DAY, na, sans=tuple(sans))
    chain = [lf.der]
    if include_parent:
        chain.append(parent.der)
    if include_cross and issuer == "modern":
        chain.append(CA.cross_sign.der)
    a = certval.assess(chain, domain, _PARTITION_POLICY)
    cases = [c for c in CertCase if c is not CertCase.PARSE_ERROR]
    assert sum(a.case is c for c in cases) == 1
    assert (a.case is CertCase.VALID) == (a.trusted and a.hostname_match)
    assert a.hostname_match == certval.match_hostname(certval.parse_cert(lf.der), domain)
    if a.case is not CertCase.VALID:
        assert certval.signature_of(a, chain[0]).invalid_reason is not None
