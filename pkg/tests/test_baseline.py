import pytest
from hypothesis import given, settings, strategies as st

from dnsverdict import baseline, corpus, simnet
from dnsverdict.baseline import ThresholdConfig
from dnsverdict.corpus import ControlSet, IpMetadata, ResolutionPair
from dnsverdict.verdict import Evidence, Label, Verdict

D = "www.example.com"


def hand_control():
    cs = ControlSet()
    cs.control_ips[D] = {"23.0.0.1"}
    cs.control_http_hashes[D] = {"h-ok"}
    cs.control_cert_hashes[D] = {"c-ok"}
    cs.control_asns[D] = {64600}
    cs.control_as_names[D] = {"AMAZON"}
    cs.control_cdns[D] = {"Amazon"}
    return cs


# (ip, metadata, certificate-method label, expected flagged, expected category)
HAND = [
    ("23.0.0.1", None, Label.UNMANIPULATED_CONTROL_IP, False, "unconfirmed"),
    ("1.0.0.1", IpMetadata(1, "X", None, None, None, None), Label.UNMANIPULATED_VALID_CERT, True, "fp"),
    ("1.0.0.2", IpMetadata(2, "Y", None, None, None, None), Label.UNMANIPULATED_VALID_CERT, True, "fp"),
    ("1.0.0.3", IpMetadata(3, "Z", None, None, "h-ok", None), Label.UNMANIPULATED_VALID_CERT, False, "agree"),
    ("1.0.0.4", IpMetadata(4, "W", None, None, None, "c-ok"), Label.UNMANIPULATED_VALID_CERT, False, "agree"),
    ("1.0.0.5", IpMetadata(64600, "V", None, None, None, None), Label.UNMANIPULATED_VALID_CERT, False, "agree"),
    ("1.0.0.6", IpMetadata(5, "AMAZON", None, None, None, None), Label.UNMANIPULATED_VALID_CERT, False, "agree"),
    ("1.0.0.7", IpMetadata(6, "U", None, "Amazon", None, None), Label.UNMANIPULATED_VALID_CERT, False, "agree"),
    ("2.0.0.1", IpMetadata(7, "T", None, None, None, None), Label.MANIPULATED_BLOCKPAGE, True, "agree"),
    ("2.0.0.2", IpMetadata(8, "S", None, None, None, None), Label.MANIPULATED_INVALID_CERT, True, "agree"),
    ("2.0.0.3", IpMetadata(64600, "AMAZON", None, "Amazon", None, None), Label.MANIPULATED_BLOCKPAGE, False, "fn"),
    ("2.0.0.4", IpMetadata(9, "R", None, "Amazon", None, None), Label.MANIPULATED_BLOCKPAGE, False, "fn"),
    ("2.0.0.5", IpMetadata(10, "Q", None, None, "h-ok", None), Label.MANIPULATED_INVALID_CERT, False, "fn"),
    ("2.0.0.6", None, Label.MANIPULATED_INVALID_CERT, True, "agree"),
    ("10.0.0.1", None, Label.MANIPULATED_PRIVATE_IP, True, "unconfirmed"),
    ("3.0.0.1", None, Label.UNKNOWN_HTTP_ONLY, True, "unconfirmed"),
    ("3.0.0.2", None, Label.UNKNOWN_CONNECTION_ERROR, True, "unconfirmed"),
    ("3.0.0.3", None, Label.UNMANIPULATED_MALFORMED_DOMAIN, True, "unconfirmed"),
    ("3.0.0.4", IpMetadata(11, "P", None, None, None, "c-ok"), Label.UNMANIPULATED_MALFORMED_DOMAIN, False, "unconfirmed"),
    ("1.0.0.8", IpMetadata(12, "O", "ptr", None, None, None), Label.UNMANIPULATED_VALID_CERT, True, "fp"),
]


def test_hand_corpus():
    assert len(HAND) == 20
    cs = hand_control()
    meta = {ip: m for ip, m, *_ in HAND if m is not None}
    cons = [baseline.consistency_check(ResolutionPair(D, ip), cs, meta) for ip, *_ in HAND]
    for c, (ip, _, _, flagged, _) in zip(cons, HAND):
        assert c.flagged_manipulated is flagged, ip
    verdicts = [Verdict(None, D, ip, label, Evidence()) for ip, _, label, _, _ in HAND]
    rep = baseline.compare(cons, verdicts)
    cats = [cat for *_, cat in HAND]
    assert rep.total == 20
    assert rep.false_positive_count == cats.count("fp") == 3
    assert rep.false_negative_count == cats.count("fn") == 3
    assert rep.agreement_count == cats.count("agree")
    assert rep.unconfirmed_count == cats.count("unconfirmed")
    assert rep.fn_breakdown == {"HTTP_HASH": 1, "CERT_HASH": 0, "ASN": 1, "AS_NAME": 1, "CDN": 2}
    flagged = sum(1 for *_, label, f, _ in HAND if f and label in baseline.DEFINITIVE_LABELS)
    assert rep.flagged_count == flagged and rep.false_positive_rate == pytest.approx(3 / flagged)
    manip = sum(1 for *_, label, _, _ in HAND if label in baseline.DEFINITIVE_LABELS and label.manipulated)
    assert rep.false_negative_rate == pytest.approx(3 / manip)
    rec = rep.to_record()
    assert rec["false_negative_breakdown"]["CDN"]["fraction"] == pytest.approx(2 / 3)


def test_compare_rejects_mismatched_inputs():
    c = baseline.ConsistencyVerdict(ResolutionPair(D, "1.1.1.1"), frozenset())
    v = Verdict(None, D, "2.2.2.2", Label.UNMANIPULATED_VALID_CERT)
    with pytest.raises(baseline.ComparisonError):
        baseline.compare([c], [v])


def test_theta_must_be_positive():
    with pytest.raises(ValueError):
        ThresholdConfig(0)


def brute_force_flagged(domain_resolutions, theta):
    flagged = set()
    for d, (ips, n_as) in domain_resolutions.items():
        for ip in ips:
            sharers = [o for o, (oips, _) in domain_resolutions.items() if ip in oips]
            if len(sharers) >= 2 and n_as > theta:
                flagged.add(d)
    return flagged


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(
    st.sampled_from([f"d{i}.example" for i in range(12)]),
    st.tuples(st.sets(st.sampled_from(["1.1.1.1", "2.2.2.2", "3.3.3.3", "4.4.4.4", "5.5.5.5"]), max_size=3),
              st.integers(0, 12)),
))
def test_as_threshold_monotone_and_matches_brute_force(resolutions):
    prev = None
    for theta in range(1, 11):
        flagged = baseline.as_threshold(resolutions, ThresholdConfig(theta))
        assert flagged == brute_force_flagged(resolutions, theta)
        if prev is not None:
            assert flagged <= prev
        prev = flagged


@pytest.mark.parametrize("n_as", [4, 5, 6])
def test_shared_ip_fixture_flags_by_theta(n_as):
    snapshot, meta = simnet.shared_ip_threshold_fixture(n_domains=30, control_as_count=n_as)
    cs = corpus.build_control_set(snapshot, meta)
    inputs = baseline.threshold_inputs(snapshot, cs)
    shared = {d for d, (ips, _) in inputs.items() if "203.0.113.80" in ips}
    assert len(shared) == 30
    for theta in range(1, 11):
        flagged = baseline.as_threshold(inputs, ThresholdConfig(theta))
        assert flagged == brute_force_flagged(inputs, theta)
        assert flagged == (shared if n_as > theta else set())
