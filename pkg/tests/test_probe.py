import io
import socket
import socketserver
import ssl
import threading

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import serialization

from dnsverdict import probe
from dnsverdict.corpus import ResolutionPair
from dnsverdict.probe import FetchLimits, FetchResult, HttpPage, TransportError

from _certs import CA, leaf

BODY = b"<html><title>hello</title></html>"


class FakeTransport:
    rate_limited = False

    def __init__(self, http=None, https=None, now=1000):
        self.http = http or {}
        self.https = https or {}
        self.calls = []
        self._now = now
        self.lock = threading.Lock()

    def now(self):
        return self._now

    def get_http(self, ip, host, limits):
        with self.lock:
            self.calls.append(("http", ip, host, None))
        v = self.http.get(ip, TransportError(probe.ERR_REFUSED))
        if isinstance(v, Exception):
            raise v
        return v

    def get_https(self, ip, sni, host, limits):
        with self.lock:
            self.calls.append(("https", ip, host, sni))
        v = self.https.get(ip, TransportError(probe.ERR_TIMEOUT))
        if isinstance(v, Exception):
            raise v
        return v


def test_fetch_pair_sets_host_and_sni_and_records_errors():
    t = FakeTransport(http={"5.5.5.5": HttpPage(301, (), b"")})
    r = probe.fetch_pair(ResolutionPair("www.example.com", "5.5.5.5"), t)
    assert r.http.status == 301 and r.https_error == probe.ERR_TIMEOUT and r.chain is None
    assert ("https", "5.5.5.5", "www.example.com", "www.example.com") in t.calls
    assert ("http", "5.5.5.5", "www.example.com", None) in t.calls
    assert r.fetched_at == 1000


def test_fetch_pair_private_ip_never_touches_network():
    t = FakeTransport()
    r = probe.fetch_pair(ResolutionPair("a.example", "10.1.1.1"), t)
    assert t.calls == [] and r.http_error == r.https_error == probe.ERR_PRIVATE


def test_fetch_pair_chain_without_page_and_truncation():
    t = FakeTransport(http={"5.5.5.5": HttpPage(200, (), b"x" * 100)}, https={"5.5.5.5": ([b"cert"], None)})
    r = probe.fetch_pair(ResolutionPair("a.example", "5.5.5.5"), t, FetchLimits(max_body_bytes=10))
    assert r.chain == (b"cert",) and r.https_error == probe.ERR_PROTOCOL
    assert r.http.body == b"x" * 10 and r.http.body_truncated


def test_fetch_all_preserves_order_and_counts():
    ips = [f"5.5.5.{i}" for i in range(1, 40)]
    t = FakeTransport(http={ip: HttpPage(200, (), ip.encode()) for ip in ips})
    pairs = [ResolutionPair("a.example", ip) for ip in ips] + [ResolutionPair("a.example", ips[0])]
    stats = probe.FetchStats()
    out = probe.fetch_all(pairs, t, FetchLimits(max_concurrency=8), stats)
    assert [r.pair for r in out] == pairs
    assert [r.http.body.decode() for r in out[:-1]] == ips
    assert stats.duplicates == 1 and stats.errors == {probe.ERR_TIMEOUT: 40}


def test_rate_limiter_spacing_with_fake_clock():
    clock = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        clock[0] += s

    lim = probe.RateLimiter(2.0, clock=lambda: clock[0], sleep=sleep)
    for _ in range(4):
        lim.acquire("1.1.1.1")
    lim.acquire("2.2.2.2")
    assert slept == [0.5, 0.5, 0.5]
    with pytest.raises(ValueError):
        probe.RateLimiter(0)


def test_archive_round_trip_and_replay():
    results = [
        FetchResult(ResolutionPair("a.example", "5.5.5.5"), HttpPage(200, (("A", "b"),), b"\x00bin"),
                    HttpPage(403, (), b"no"), (b"c1", b"c2"), None, None, 77),
        FetchResult(ResolutionPair("b.example", "6.6.6.6"), None, None, None, probe.ERR_REFUSED, probe.ERR_TLS, 78),
    ]
    buf = io.StringIO()
    probe.write_archive(results, buf)
    back = probe.read_archive(io.StringIO(buf.getvalue()))
    assert back == results
    replay = probe.ReplayTransport(back)
    again = [probe.fetch_pair(r.pair, replay) for r in back]
    assert [(r.http, r.https_page, r.chain, r.http_error, r.https_error) for r in again] == \
           [(r.http, r.https_page, r.chain, r.http_error, r.https_error) for r in results]
    missing = probe.fetch_pair(ResolutionPair("c.example", "7.7.7.7"), replay)
    assert missing.http_error == probe.ERR_REFUSED


# Live transport against local servers ------------------------------------------------------------

class _Recorder:
    def __init__(self):
        self.hosts = []
        self.snis = []


def _http_handler(rec: _Recorder):
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            head = b""
            while b"\r\n\r\n" not in head:
                chunk = self.request.recv(1024)
                if not chunk:
                    return
                head += chunk
            for line in head.decode().split("\r\n"):
                if line.lower().startswith("host:"):
                    rec.hosts.append(line.split(":", 1)[1].strip())
            self.request.sendall(b"HTTP/1.1 200 OK\r\nServer: test\r\nContent-Length: %d\r\n\r\n" % len(BODY) + BODY)
    return Handler


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


@pytest.fixture
def local_servers(tmp_path):
    rec = _Recorder()
    lf = leaf("live", sans=("live.example",))
    cert_path, key_path = tmp_path / "chain.pem", tmp_path / "key.pem"
    pem = b"".join(x509.load_der_x509_certificate(d).public_bytes(serialization.Encoding.PEM)
                   for d in (lf.der, CA.trusted_intermediate.der))
    cert_path.write_bytes(pem)
    key_path.write_bytes(lf.key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                              serialization.NoEncryption()))
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(cert_path, key_path)
    ctx.sni_callback = lambda sock, name, _ctx: rec.snis.append(name)

    http = _Server(("127.0.0.1", 0), _http_handler(rec))
    base = _http_handler(rec)

    class TlsHandler(base):
        def setup(self):
            self.request = ctx.wrap_socket(self.request, server_side=True)
            super().setup()

    https = _Server(("127.0.0.1", 0), TlsHandler)
    closed = socket.socket()
    closed.bind(("127.0.0.1", 0))
    closed_port = closed.getsockname()[1]
    closed.close()
    threads = [threading.Thread(target=s.serve_forever, daemon=True) for s in (http, https)]
    for th in threads:
        th.start()
    yield rec, http.server_address[1], https.server_address[1], closed_port, (lf.der, CA.trusted_intermediate.der)
    for s in (http, https):
        s.shutdown()
        s.server_close()


def test_live_transport_host_sni_and_chain(local_servers):
    rec, http_port, https_port, closed_port, chain = local_servers
    t = probe.LiveTransport(http_port=http_port, https_port=https_port)
    limits = FetchLimits(timeout_secs=5)
    page = t.get_http("127.0.0.1", "www.example.com", limits)
    assert page.status == 200 and page.body == BODY and ("Server", "test") in page.headers
    got_chain, tls_page = t.get_https("127.0.0.1", "sni.example", "host.example", limits)
    assert tls_page.status == 200 and tls_page.body == BODY
    assert rec.hosts == ["www.example.com", "host.example"]
    assert rec.snis == ["sni.example"]
    assert tuple(got_chain) == chain

    refused = probe.LiveTransport(http_port=closed_port, https_port=closed_port)
    with pytest.raises(TransportError) as err:
        refused.get_http("127.0.0.1", "x.example", limits)
    assert err.value.code == probe.ERR_REFUSED
    with pytest.raises(TransportError) as err:
        refused.get_https("127.0.0.1", "x.example", "x.example", limits)
    assert err.value.code == probe.ERR_REFUSED


def test_live_transport_tls_failure_code():
    class Junk(socketserver.BaseRequestHandler):
        def handle(self):
            self.request.sendall(b"HTTP/1.0 400 Bad Request\r\n\r\n")

    server = _Server(("127.0.0.1", 0), Junk)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        t = probe.LiveTransport(https_port=server.server_address[1])
        with pytest.raises(TransportError) as err:
            t.get_https("127.0.0.1", "x.example", "x.example", FetchLimits(timeout_secs=5))
        assert err.value.code in (probe.ERR_TLS, probe.ERR_RESET)
    finally:
        server.shutdown()
        server.server_close()


def test_traceroute_hook_is_declared():
    with pytest.raises(NotImplementedError):
        probe.LiveTransport().traceroute("1.1.1.1")
