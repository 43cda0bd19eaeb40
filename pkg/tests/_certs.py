"""Small certificate factory shared by the test modules."""
from dnsverdict import certval
from dnsverdict.simnet import DAY, DEFAULT_REFERENCE_TIME, Issuer, _name, build_ca_material, make_cert

T = DEFAULT_REFERENCE_TIME
SEED = 4242
CA = build_ca_material(SEED, T)


def leaf(label, cn=None, sans=(), issuer=None, nb=T - 30 * DAY, na=T + 30 * DAY, ca=False, org=None):
    issuer = CA.trusted_intermediate if issuer is None else issuer
    return make_cert(SEED, f"test/{label}", _name(cn or label, org), issuer, nb, na, ca=ca, sans=tuple(sans))


def self_signed(label, cn=None, sans=(), nb=T - 30 * DAY, na=T + 30 * DAY, ca=True):
    return make_cert(SEED, f"test/{label}", _name(cn or label), None, nb, na, ca=ca, sans=tuple(sans))


def parsed(issuer: Issuer) -> certval.ParsedCert:
    return certval.parse_cert(issuer.der)


def policy(**kw) -> certval.CertPolicy:
    return CA.policy(reference_time=T, **kw)
