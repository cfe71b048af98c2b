"""Line-delimited wire protocol, a threaded negotiation server, and remote negotiators.

Every frame is one UTF-8 line::

    NEGO/1 <TYPE> <session-id>[<TAB>field]...

Fields escape backslash, tab, CR and LF with backslash sequences; token blobs
travel hex-encoded.  One connection carries one session:

    Init -> Terms -> (Query -> Offer)* -> (Accept -> Invoice | Reject) or Terminate
"""
from __future__ import annotations

import json
import logging
import re
import socket
import socketserver
import threading
import uuid
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

from .config import ConfigType, format_config_type, parse_config_type, same_terms
from .engine import (
    AcceptanceError,
    BindingMismatchError,
    Invoice as InvoiceRecord,
    NegotiationFailure,
    Negotiator,
    QueryError,
    UnknownTokenError,
)
from .logic import Formula, LogicError
from .syntax import format_formula, parse_formula
from .tokens import ExtendedOffer, Opaque, var_from

log = logging.getLogger(__name__)

MAGIC = "NEGO/1"
MAX_LINE = 16 * 1024 * 1024
_SESSION_RE = re.compile(r"[A-Za-z0-9_-]+\Z")


class MalformedFrameError(ValueError):
    def __init__(self, message: str, line: str = ""):
        super().__init__(f"{message}: {line[:200]!r}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Init:
    session: str


@dataclass(frozen=True)
class Terms:
    session: str
    ct: ConfigType


@dataclass(frozen=True)
class Query:
    session: str
    formula: str


@dataclass(frozen=True)
class Offer:
    session: str
    formula: str
    token: bytes


@dataclass(frozen=True)
class Accept:
    session: str
    formula: str
    token: bytes


@dataclass(frozen=True)
class Invoice:
    session: str
    body: str


@dataclass(frozen=True)
class Reject:
    session: str
    reason: str


@dataclass(frozen=True)
class Terminate:
    session: str
    reason: str = ""


Message = Union[Init, Terms, Query, Offer, Accept, Invoice, Reject, Terminate]

_TYPES = {
    "INIT": Init, "TERMS": Terms, "QUERY": Query, "OFFER": Offer,
    "ACCEPT": Accept, "INVOICE": Invoice, "REJECT": Reject, "TERMINATE": Terminate,
}
_NAMES = {cls: name for name, cls in _TYPES.items()}

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _escape(s: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in s)


def _unescape(s: str, line: str) -> str:
    out = []
    chars = iter(s)
    for c in chars:
        if c != "\\":
            out.append(c)
            continue
        nxt = next(chars, None)
        if nxt not in _UNESCAPES:
            raise MalformedFrameError("bad escape sequence", line)
        out.append(_UNESCAPES[nxt])
    return "".join(out)


def _fields(m: Message) -> list[str]:
    if isinstance(m, Init):
        return []
    if isinstance(m, Terms):
        return [m.ct.name or "-", format_config_type(m.ct)]
    if isinstance(m, Query):
        return [m.formula]
    if isinstance(m, (Offer, Accept)):
        return [m.formula, m.token.hex()]
    if isinstance(m, Invoice):
        return [m.body]
    return [m.reason]


def encode(m: Message) -> bytes:
    if not _SESSION_RE.match(m.session):
        raise ValueError(f"invalid session id {m.session!r}")
    head = f"{MAGIC} {_NAMES[type(m)]} {m.session}"
    return ("\t".join([head, *map(_escape, _fields(m))]) + "\n").encode("utf-8")


def decode(data: bytes) -> Message:
    try:
        line = data.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedFrameError("frame is not UTF-8", repr(data)) from None
    if line.endswith("\n"):
        line = line[:-1]
    if "\n" in line or "\r" in line:
        raise MalformedFrameError("raw line break inside frame", line)
    head, *raw = line.split("\t")
    parts = head.split(" ")
    if len(parts) != 3 or parts[0] != MAGIC:
        raise MalformedFrameError("bad frame header", line)
    _, kind, session = parts
    cls = _TYPES.get(kind)
    if cls is None:
        raise MalformedFrameError(f"unknown frame type {kind}", line)
    if not _SESSION_RE.match(session):
        raise MalformedFrameError("bad session id", line)
    fields = [_unescape(f, line) for f in raw]
    expected = {Init: 0, Terms: 2, Offer: 2, Accept: 2}.get(cls, 1)
    if len(fields) != expected:
        raise MalformedFrameError(f"{kind} takes {expected} field(s), got {len(fields)}", line)
    try:
        if cls is Terms:
            name = None if fields[0] == "-" else fields[0]
            return Terms(session, parse_config_type(fields[1], name, check=False))
        if cls in (Offer, Accept):
            return cls(session, fields[0], bytes.fromhex(fields[1]))
    except (LogicError, ValueError) as exc:
        raise MalformedFrameError(f"bad {kind} payload ({exc})", line) from None
    return cls(session, *fields)


class FrameReader:
    """Splits a socket stream into frames; ``socket.timeout`` passes through."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()

    def read(self) -> Optional[Message]:
        """Next message, or None once the peer has closed the connection."""
        while True:
            idx = self.buf.find(b"\n")
            if idx >= 0:
                line = bytes(self.buf[: idx + 1])
                del self.buf[: idx + 1]
                return decode(line)
            if len(self.buf) > MAX_LINE:
                raise MalformedFrameError("frame too long")
            chunk = self.sock.recv(65536)
            if not chunk:
                if self.buf:
                    raise MalformedFrameError("truncated frame", self.buf.decode("utf-8", "replace"))
                return None
            self.buf.extend(chunk)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


# -- server -------------------------------------------------------------------


class _Session(socketserver.BaseRequestHandler):
    server: "_Server"

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.settimeout(self.server.poll_interval)
        reader = FrameReader(sock)
        n = self.server.negotiator
        session: Optional[str] = None
        last_token: Optional[bytes] = None

        def send(m: Message) -> None:
            sock.sendall(encode(m))

        while True:
            try:
                m = reader.read()
            except socket.timeout:
                if self.server.stopping.is_set():
                    if session:
                        send(Terminate(session, "server shutting down"))
                    return
                continue
            except MalformedFrameError as exc:
                log.info("malformed frame: %s", exc)
                send(Reject(session or "none", f"malformed frame: {exc}"))
                return
            except OSError:
                return
            if m is None:
                return
            if session is None:
                if not isinstance(m, Init):
                    send(Reject(m.session, "expected INIT"))
                    return
                session = m.session
                log.info("session %s opened", session)
                send(Terms(session, n.ct))
                continue
            if m.session != session:
                send(Reject(session, "session id mismatch"))
                return
            if isinstance(m, Terminate):
                log.info("session %s terminated by client", session)
                return
            if isinstance(m, Query):
                try:
                    eo = n.query(parse_formula(m.formula))
                except (LogicError, QueryError, NegotiationFailure) as exc:
                    send(Reject(session, f"query failed: {exc}"))
                    return
                last_token = n.token_blob(eo)
                send(Offer(session, format_formula(eo.formula), last_token))
                continue
            if isinstance(m, Accept):
                if last_token is None or m.token != last_token:
                    send(Reject(session, "stale or unknown token"))
                    return
                try:
                    inv = n.accept(n.lookup(m.token), parse_formula(m.formula), session_id=session)
                except (LogicError, AcceptanceError) as exc:
                    send(Reject(session, f"acceptance refused: {exc}"))
                    return
                send(Invoice(session, json.dumps(inv.to_json(), sort_keys=True)))
                log.info("session %s accepted", session)
                return
            send(Reject(session, f"unexpected {_NAMES[type(m)]}"))
            return


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, negotiator: Negotiator, poll_interval: float):
        self.negotiator = negotiator
        self.poll_interval = poll_interval
        self.stopping = threading.Event()
        super().__init__(address, _Session)


class ServiceHandle:
    def __init__(self, server: _Server):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, name="negpol-serve", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def shutdown(self) -> None:
        """Stop accepting connections, then wait for open sessions to drain."""
        self._server.stopping.set()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def wait(self) -> None:
        self._thread.join()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(n: Negotiator, endpoint: str = "127.0.0.1:0", poll_interval: float = 0.2) -> ServiceHandle:
    """Serve ``n`` on ``endpoint``; raises ``OSError`` if it cannot bind."""
    return ServiceHandle(_Server(parse_endpoint(endpoint), n, poll_interval))


# -- client side --------------------------------------------------------------


class ProtocolError(Exception):
    pass


class Client:
    """A single session with a negotiation server."""

    def __init__(self, endpoint: str, timeout: float = 10.0, session: Optional[str] = None):
        self.session = session or uuid.uuid4().hex
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.reader = FrameReader(self.sock)

    def _call(self, m: Message, want: type):
        self.sock.sendall(encode(m))
        reply = self.reader.read()
        if reply is None:
            raise ProtocolError("server closed the connection")
        if isinstance(reply, (Reject, Terminate)):
            raise ProtocolError(f"{_NAMES[type(reply)].lower()}: {reply.reason}")
        if not isinstance(reply, want) or reply.session != self.session:
            raise ProtocolError(f"unexpected reply {reply}")
        return reply

    def init(self) -> ConfigType:
        return self._call(Init(self.session), Terms).ct

    def query(self, q: Formula) -> tuple[Formula, bytes]:
        offer = self._call(Query(self.session, format_formula(q)), Offer)
        try:
            return parse_formula(offer.formula), offer.token
        except LogicError as exc:
            raise ProtocolError(f"unparsable offer: {exc}") from None

    def accept(self, acceptance: Formula, token: bytes) -> dict:
        inv = self._call(Accept(self.session, format_formula(acceptance), token), Invoice)
        return json.loads(inv.body)

    def terminate(self, reason: str = "") -> None:
        try:
            self.sock.sendall(encode(Terminate(self.session, reason)))
        except OSError:
            pass
        self.close()

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.terminate()


class RemoteNegotiator(Negotiator):
    """A negotiator reached over the network; offers carry the server's blob opaquely."""

    def __init__(self, endpoint: str, expected: Optional[ConfigType] = None,
                 timeout: float = 10.0, name: str = "", **kw):
        super().__init__(None, name or endpoint, **kw)
        self.endpoint = endpoint
        self.expected = expected
        self.timeout = timeout
        self._client: Optional[Client] = None
        self._last: Optional[bytes] = None
        self._lock = threading.RLock()

    def _connect(self) -> Client:
        if self._client is not None:
            return self._client
        try:
            client = Client(self.endpoint, self.timeout)
            ct = client.init()
        except (OSError, ProtocolError, MalformedFrameError) as exc:
            raise NegotiationFailure(f"{self.name}: {exc}") from None
        if self._ct is None:
            if self.expected is not None and not same_terms(ct, self.expected):
                client.terminate("type mismatch")
                raise BindingMismatchError(
                    f"{self.name} negotiates {format_config_type(ct)}, expected "
                    f"{format_config_type(self.expected)}")
            self._ct = ct
        elif not same_terms(ct, self._ct):
            client.terminate("type changed")
            raise NegotiationFailure(f"{self.name}: terms of negotiation changed")
        self._client = client
        return client

    def _drop(self) -> None:
        if self._client is not None:
            self._client.close()
        self._client = None
        self._last = None

    @property
    def ct(self) -> ConfigType:
        with self._lock:
            if self._ct is None:
                self._connect()
            return self._ct

    def query(self, q: Formula) -> ExtendedOffer:
        with self._lock:
            client = self._connect()
            self.check_query(q)
            try:
                formula, blob = client.query(q)
            except (OSError, ProtocolError, MalformedFrameError) as exc:
                self._drop()
                raise NegotiationFailure(f"{self.name}: {exc}") from None
            self._last = blob
            return self.issue(ExtendedOffer(formula, Opaque(blob)))

    def accept(self, offer: ExtendedOffer, acceptance: Formula, session_id: str = "") -> InvoiceRecord:
        with self._lock:
            offer = self.lookup(self.token_blob(offer))
            blob = offer.token.data
            if self._client is None or blob != self._last:
                raise UnknownTokenError(f"{self.name}: offer is no longer open on the remote session")
            try:
                body = self._client.accept(acceptance, blob)
            except ProtocolError as exc:
                raise AcceptanceError(f"{self.name}: {exc}") from None
            except (OSError, MalformedFrameError) as exc:
                raise NegotiationFailure(f"{self.name}: {exc}") from None
            finally:
                self._drop()
        values = {var_from(x): Fraction(v) for x, v in body.get("values", {}).items()}
        inv = InvoiceRecord(body["session"], acceptance, blob, values)
        inv.sub_invoices["remote"] = body
        return inv

    def close(self) -> None:
        with self._lock:
            if self._client is not None:
                self._client.terminate()
            self._client = None


def remote_negotiator(endpoint: str, expected: Optional[ConfigType] = None,
                      timeout: float = 10.0) -> RemoteNegotiator:
    return RemoteNegotiator(endpoint, expected, timeout)
