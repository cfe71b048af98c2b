import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import DATA
from negpol.config import parse_config_type, parse_registry
from negpol.engine import (
    BindingMismatchError,
    LeafNegotiator,
    NegotiationFailure,
    ScriptedNegotiator,
    close,
)
from negpol.logic import TRUE
from negpol.policy import load_policy
from negpol.protocol import (
    Accept,
    Client,
    FrameReader,
    Init,
    Invoice,
    MalformedFrameError,
    Offer,
    ProtocolError,
    Query,
    Reject,
    RemoteNegotiator,
    Terminate,
    Terms,
    decode,
    encode,
    parse_endpoint,
    serve,
)
from negpol.qe import equivalent
from negpol.syntax import parse_formula as P

REGISTRY = parse_registry((DATA / "storage.types").read_text())
STORAGE = REGISTRY["storage"]
_, CORE = load_policy((DATA / "storage-brokering.policy").read_text(), REGISTRY)
Q = P("capacity = 100 && price <= 5")
BROKERED = P("capacity = 100 && 33/10 <= price && price <= 5")


def broker(s1=None, s2=None):
    return close(CORE, {
        "s1": s1 or ScriptedNegotiator(STORAGE, [P("capacity = 50 && price = 3")] * 50, "s1"),
        "s2": s2 or LeafNegotiator(STORAGE, TRUE, "s2"),
    }, name="broker")


@pytest.fixture
def service():
    with serve(broker()) as handle:
        yield handle


# -- codec --------------------------------------------------------------------

sessions = st.from_regex(r"[A-Za-z0-9_-]{1,12}", fullmatch=True)
texts = st.text(max_size=40)
blobs = st.binary(max_size=40)
messages = st.one_of(
    st.builds(Init, sessions),
    st.builds(Query, sessions, texts),
    st.builds(Offer, sessions, texts, blobs),
    st.builds(Accept, sessions, texts, blobs),
    st.builds(Invoice, sessions, texts),
    st.builds(Reject, sessions, texts),
    st.builds(Terminate, sessions, texts),
    st.builds(Terms, sessions, st.sampled_from([STORAGE, parse_config_type("{x: decimal; x > 1}")])),
)


@settings(max_examples=300)
@given(messages)
def test_codec_roundtrip(m):
    frame = encode(m)
    assert frame.endswith(b"\n") and frame.count(b"\n") == 1
    assert decode(frame) == m


def test_offer_blob_is_byte_exact():
    m = Offer("s-1", "capacity = 1", bytes(range(256)))
    assert decode(encode(m)).token == bytes(range(256))


@pytest.mark.parametrize("frame", [
    b"NEGO/1 QUERY",
    b"NEGO/1 OFFER abc\tcapacity = 1",
    b"NEGO/2 INIT abc",
    b"NEGO/1 HELLO abc",
    b"NEGO/1 INIT a b",
    b"NEGO/1 OFFER abc\tx\tzz",
    b"NEGO/1 QUERY abc\tbad \\q escape",
    b"NEGO/1 TERMS abc\tstorage\t{x: decimal",
    b"\xff\xfe",
])
def test_malformed_frames(frame):
    with pytest.raises(MalformedFrameError) as err:
        decode(frame)
    assert err.value.line


def test_encode_rejects_bad_session():
    with pytest.raises(ValueError):
        encode(Init("has space"))


def test_truncated_stream():
    a, b = socket.socketpair()
    a.sendall(b"NEGO/1 QUERY abc\tcapacity")
    a.close()
    with pytest.raises(MalformedFrameError):
        FrameReader(b).read()
    b.close()


def test_parse_endpoint():
    assert parse_endpoint("localhost:7000") == ("localhost", 7000)
    assert parse_endpoint(":80") == ("127.0.0.1", 80)
    with pytest.raises(ValueError):
        parse_endpoint("nowhere")


# -- server -------------------------------------------------------------------


def test_init_query_accept(service):
    with Client(service.endpoint) as c:
        assert c.init() == STORAGE
        formula, token = c.query(Q)
        assert equivalent(formula, BROKERED)
        body = c.accept(P("capacity = 100 && price = 4"), token)
    assert body["values"] == {"capacity": "100", "price": "4"}


def test_stale_token_is_rejected(service):
    with Client(service.endpoint) as c:
        c.init()
        _, old = c.query(Q)
        c.query(Q)
        with pytest.raises(ProtocolError, match="reject"):
            c.accept(P("capacity = 100 && price = 4"), old)


def test_query_before_init_is_rejected(service):
    with Client(service.endpoint) as c:
        with pytest.raises(ProtocolError, match="reject"):
            c.query(Q)


def test_garbage_gets_reject(service):
    with socket.create_connection(service.address, timeout=5) as s:
        s.sendall(b"hello\n")
        reply = FrameReader(s).read()
    assert isinstance(reply, Reject)


def test_sessions_are_isolated(service):
    errors, tokens = [], {}

    def client(i):
        try:
            with Client(service.endpoint, session=f"c{i}") as c:
                c.init()
                formula, token = c.query(Q)
                assert equivalent(formula, BROKERED)
                tokens[i] = token
        except Exception as exc:  # collected for the main thread
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    # another session cannot redeem a token it was not given
    with Client(service.endpoint) as c:
        c.init()
        c.query(Q)
        with pytest.raises(ProtocolError):
            c.accept(P("capacity = 100 && price = 4"), tokens[0])


def test_graceful_shutdown_drains_open_session():
    handle = serve(broker(), poll_interval=0.05)
    c = Client(handle.endpoint)
    c.init()
    done = threading.Thread(target=handle.shutdown)
    done.start()
    done.join(timeout=5)
    assert not done.is_alive()
    with pytest.raises((OSError, ProtocolError)):
        c.query(Q)
    c.close()


def test_bind_failure_is_oserror(service):
    with pytest.raises(OSError):
        serve(broker(), service.endpoint)


# -- remote negotiator --------------------------------------------------------


def test_remote_sub_servers_match_local():
    with serve(ScriptedNegotiator(STORAGE, [P("capacity = 50 && price = 3")], "s1")) as h1, \
            serve(LeafNegotiator(STORAGE, TRUE, "s2")) as h2:
        s1 = RemoteNegotiator(h1.endpoint, STORAGE, name="s1")
        s2 = RemoteNegotiator(h2.endpoint, STORAGE, name="s2")
        remote = broker(s1, s2)
        eo = remote.query(Q)
        assert equivalent(eo.formula, broker().query(Q).formula)
        inv = remote.accept(eo, P("capacity = 100 && price = 4"))
        assert not inv.sub_failures and set(inv.sub_invoices) == {"s1", "s2"}
        s1.close()
        s2.close()


def test_unreachable_endpoint():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    n = RemoteNegotiator(f"127.0.0.1:{port}", STORAGE, timeout=1)
    with pytest.raises(NegotiationFailure):
        n.query(Q)


def test_type_mismatch():
    other = parse_config_type("{bandwidth: decimal; bandwidth > 0}")
    with serve(LeafNegotiator(other, TRUE)) as h:
        n = RemoteNegotiator(h.endpoint, STORAGE)
        with pytest.raises(BindingMismatchError):
            close(CORE, {"s1": n, "s2": LeafNegotiator(STORAGE, TRUE)})


def test_server_going_away_is_a_failure():
    h = serve(LeafNegotiator(STORAGE, TRUE), poll_interval=0.05)
    n = RemoteNegotiator(h.endpoint, STORAGE, timeout=2)
    n.query(Q)
    h.shutdown()
    with pytest.raises(NegotiationFailure):
        n.query(Q)
