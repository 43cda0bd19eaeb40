"""Fetch HTTP and HTTPS content from resolved IPs with Host and SNI set to the queried domain."""
from __future__ import annotations

import base64
import json
import logging
import socket
import ssl
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Callable, Iterable, Protocol, Sequence

from .corpus import ResolutionPair, is_private_ip

logger = logging.getLogger(__name__)

DEFAULT_MAX_BODY = 512 * 1024

# stable error codes recorded in FetchResult.http_error / https_error
ERR_TIMEOUT = "timeout"
ERR_REFUSED = "connection_refused"
ERR_RESET = "connection_reset"
ERR_UNREACHABLE = "unreachable"
ERR_PRIVATE = "private_ip"
ERR_TLS = "tls_handshake_failed"
ERR_PROTOCOL = "bad_http_response"
ERR_OTHER = "other"


class TransportError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class HttpPage:
    status: int
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    body_truncated: bool = False

    @property
    def status_class(self) -> int:
        return self.status // 100

    def to_record(self) -> dict:
        return {
            "status": self.status,
            "headers": [list(h) for h in self.headers],
            "body": base64.b64encode(self.body).decode("ascii"),
            "body_truncated": self.body_truncated,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HttpPage":
        return cls(
            status=int(rec["status"]),
            headers=tuple((str(n), str(v)) for n, v in rec.get("headers", [])),
            body=base64.b64decode(rec.get("body", "")),
            body_truncated=bool(rec.get("body_truncated", False)),
        )


@dataclass(frozen=True)
class FetchResult:
    pair: ResolutionPair
    http: HttpPage | None = None
    https_page: HttpPage | None = None
    chain: tuple[bytes, ...] | None = None
    http_error: str | None = None
    https_error: str | None = None
    fetched_at: int = 0

    @property
    def pages(self) -> list[HttpPage]:
        return [p for p in (self.http, self.https_page) if p is not None]

    def to_record(self) -> dict:
        return {
            "domain": self.pair.domain,
            "ip": self.pair.ip,
            "http": self.http.to_record() if self.http else None,
            "https_page": self.https_page.to_record() if self.https_page else None,
            "chain": [base64.b64encode(c).decode("ascii") for c in self.chain] if self.chain is not None else None,
            "http_error": self.http_error,
            "https_error": self.https_error,
            "fetched_at": self.fetched_at,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FetchResult":
        chain = rec.get("chain")
        return cls(
            pair=ResolutionPair(rec["domain"], rec["ip"]),
            http=HttpPage.from_record(rec["http"]) if rec.get("http") else None,
            https_page=HttpPage.from_record(rec["https_page"]) if rec.get("https_page") else None,
            chain=tuple(base64.b64decode(c) for c in chain) if chain is not None else None,
            http_error=rec.get("http_error"),
            https_error=rec.get("https_error"),
            fetched_at=int(rec.get("fetched_at", 0)),
        )


@dataclass(frozen=True)
class FetchLimits:
    timeout_secs: float = 10.0
    max_body_bytes: int = DEFAULT_MAX_BODY
    max_concurrency: int = 16
    per_ip_rate: float | None = None  # requests per second per IP, live transport only


class Transport(Protocol):
    """Fetch backend. Both methods raise :class:`TransportError` on network failure."""

    rate_limited: bool

    def get_http(self, ip: str, host: str, limits: FetchLimits) -> HttpPage: ...

    def get_https(self, ip: str, sni: str, host: str, limits: FetchLimits) -> tuple[list[bytes], HttpPage | None]: ...

    def now(self) -> int: ...


def _cap(page: HttpPage, limit: int) -> HttpPage:
    if len(page.body) <= limit:
        return page
    return HttpPage(page.status, page.headers, page.body[:limit], True)


def fetch_pair(pair: ResolutionPair, transport: Transport, limits: FetchLimits = FetchLimits()) -> FetchResult:
    """Fetch port 80 and port 443 independently; network failures become error codes."""
    http = https_page = chain = None
    http_error = https_error = None
    if is_private_ip(pair.ip):
        http_error = https_error = ERR_PRIVATE
    else:
        try:
            http = _cap(transport.get_http(pair.ip, pair.domain, limits), limits.max_body_bytes)
        except TransportError as exc:
            http_error = exc.code
        try:
            raw_chain, page = transport.get_https(pair.ip, pair.domain, pair.domain, limits)
            chain = tuple(raw_chain)
            if page is None:
                https_error = ERR_PROTOCOL
            else:
                https_page = _cap(page, limits.max_body_bytes)
        except TransportError as exc:
            https_error = exc.code
    return FetchResult(pair, http, https_page, chain, http_error, https_error, int(transport.now()))


class RateLimiter:
    """Per-key minimum spacing between requests, safe under threads."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self.clock = clock
        self.sleep = sleep
        self._next: dict[str, float] = {}
        self._lock = threading.Lock()

    def acquire(self, key: str) -> None:
        with self._lock:
            now = self.clock()
            slot = max(now, self._next.get(key, now))
            self._next[key] = slot + self.interval
        wait = slot - now
        if wait > 0:
            self.sleep(wait)


@dataclass
class FetchStats:
    duplicates: int = 0
    errors: dict = field(default_factory=dict)


def fetch_all(pairs: Sequence[ResolutionPair], transport: Transport, limits: FetchLimits = FetchLimits(),
              stats: FetchStats | None = None, limiter: RateLimiter | None = None) -> list[FetchResult]:
    """Fetch every pair with a bounded worker pool; results follow input order."""
    stats = stats if stats is not None else FetchStats()
    seen = set()
    for p in pairs:
        if p in seen:
            stats.duplicates += 1
        seen.add(p)
    if stats.duplicates:
        logger.warning("fetch_all received %d duplicate pairs", stats.duplicates)
    if limiter is None and limits.per_ip_rate and getattr(transport, "rate_limited", False):
        limiter = RateLimiter(limits.per_ip_rate)

    def work(pair: ResolutionPair) -> FetchResult:
        if limiter is not None:
            limiter.acquire(pair.ip)
        return fetch_pair(pair, transport, limits)

    if limits.max_concurrency <= 1 or len(pairs) <= 1:
        results = [work(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=limits.max_concurrency) as pool:
            results = list(pool.map(work, pairs))
    for r in results:
        for err in (r.http_error, r.https_error):
            if err:
                stats.errors[err] = stats.errors.get(err, 0) + 1
    return results


def write_archive(results: Iterable[FetchResult], stream: IO[str]) -> None:
    for r in results:
        stream.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_archive(stream: IO[str]) -> list[FetchResult]:
    return [FetchResult.from_record(json.loads(line)) for line in stream if line.strip()]


class ReplayTransport:
    """Serves archived fetches; unknown pairs look like closed ports."""

    rate_limited = False

    def __init__(self, results: Iterable[FetchResult]):
        self._by_pair = {r.pair: r for r in results}
        self._now = max((r.fetched_at for r in self._by_pair.values()), default=0)

    def _lookup(self, ip: str, domain: str) -> FetchResult:
        try:
            return self._by_pair[ResolutionPair(domain, ip)]
        except KeyError:
            raise TransportError(ERR_REFUSED, f"no archived fetch for {domain} at {ip}") from None

    def get_http(self, ip, host, limits):
        r = self._lookup(ip, host)
        if r.http is None:
            raise TransportError(r.http_error or ERR_OTHER)
        return r.http

    def get_https(self, ip, sni, host, limits):
        r = self._lookup(ip, sni)
        if r.chain is None:
            raise TransportError(r.https_error or ERR_OTHER)
        return list(r.chain), r.https_page

    def now(self):
        return self._now

    def fetched_at(self, pair: ResolutionPair) -> int:
        r = self._by_pair.get(pair)
        return r.fetched_at if r else self._now


def _classify_oserror(exc: BaseException) -> str:
    if isinstance(exc, (socket.timeout, TimeoutError)):
        return ERR_TIMEOUT
    if isinstance(exc, ConnectionRefusedError):
        return ERR_REFUSED
    if isinstance(exc, (ConnectionResetError, BrokenPipeError, ConnectionAbortedError)):
        return ERR_RESET
    if isinstance(exc, ssl.SSLError):
        return ERR_TLS
    if isinstance(exc, OSError):
        return ERR_UNREACHABLE
    return ERR_OTHER


def _read_response(sock, limit: int) -> HttpPage:
    buf = b""
    while b"\r\n\r\n" not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            break
        buf += chunk
        if len(buf) > 65536:
            raise TransportError(ERR_PROTOCOL, "header section too large")
    head, sep, body = buf.partition(b"\r\n\r\n")
    if not sep:
        raise TransportError(ERR_PROTOCOL, "no header terminator")
    lines = head.decode("iso-8859-1").split("\r\n")
    parts = lines[0].split(" ", 2)
    try:
        status = int(parts[1])
    except (IndexError, ValueError):
        raise TransportError(ERR_PROTOCOL, f"bad status line {lines[0]!r}") from None
    if not 100 <= status <= 599:
        raise TransportError(ERR_PROTOCOL, f"status {status} out of range")
    headers = []
    for line in lines[1:]:
        name, _, value = line.partition(":")
        headers.append((name.strip(), value.strip()))
    truncated = False
    while len(body) <= limit:
        try:
            chunk = sock.recv(65536)
        except (socket.timeout, TimeoutError):
            break
        if not chunk:
            break
        body += chunk
    if len(body) > limit:
        body, truncated = body[:limit], True
    return HttpPage(status, tuple(headers), body, truncated)


def _request(host: str) -> bytes:
    return (
        f"GET / HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0\r\n"
        "Accept: */*\r\nConnection: close\r\n\r\n"
    ).encode("ascii", "ignore")


class LiveTransport:
    """Plain sockets. Never follows redirects and never validates certificates.

    ``traceroute`` is a hook for origin verification of invalid certificates;
    nothing is implemented behind it.
    """

    rate_limited = True

    def __init__(self, http_port: int = 80, https_port: int = 443):
        self.http_port = http_port
        self.https_port = https_port
        self._ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        self._ctx.check_hostname = False
        self._ctx.verify_mode = ssl.CERT_NONE
        self._ctx.minimum_version = ssl.TLSVersion.MINIMUM_SUPPORTED
        try:
            self._ctx.set_ciphers("ALL:@SECLEVEL=0")
        except ssl.SSLError:
            pass

    def now(self) -> int:
        return int(time.time())

    def get_http(self, ip, host, limits):
        try:
            with socket.create_connection((ip, self.http_port), timeout=limits.timeout_secs) as sock:
                sock.sendall(_request(host))
                return _read_response(sock, limits.max_body_bytes)
        except TransportError:
            raise
        except OSError as exc:
            raise TransportError(_classify_oserror(exc), str(exc)) from exc

    def get_https(self, ip, sni, host, limits):
        try:
            raw = socket.create_connection((ip, self.https_port), timeout=limits.timeout_secs)
        except OSError as exc:
            raise TransportError(_classify_oserror(exc), str(exc)) from exc
        try:
            with self._ctx.wrap_socket(raw, server_hostname=sni) as tls:
                chain = self._peer_chain(tls)
                try:
                    tls.sendall(_request(host))
                    page = _read_response(tls, limits.max_body_bytes)
                except (OSError, TransportError):
                    page = None
                return chain, page
        except OSError as exc:
            raise TransportError(_classify_oserror(exc), str(exc)) from exc
        finally:
            raw.close()

    @staticmethod
    def _peer_chain(tls: ssl.SSLSocket) -> list[bytes]:
        sslobj = getattr(tls, "_sslobj", None)
        getter = getattr(sslobj, "get_unverified_chain", None)
        if getter is not None:
            chain = getter() or []
            return [c.public_bytes(ssl._ssl.ENCODING_DER) for c in chain]
        leaf = tls.getpeercert(binary_form=True)
        return [leaf] if leaf else []

    def traceroute(self, ip: str):
        raise NotImplementedError("origin verification needs raw sockets")
