"""Protocol state machines, message codecs, and end-to-end searches."""

import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hesearch.backend import (
    Ciphertext,
    PLAIN_FRESH_LEVEL,
    PlainBackend,
)
from hesearch.errors import InconsistencyError, ProtocolError, SerializationError
from hesearch.prodtree import DatasetHandle
from hesearch.protocol import (
    Children,
    ClientSession,
    Descend,
    ERR_PIVOT,
    ERR_STATE,
    ErrorFrame,
    MODE_ROBUST,
    MODE_STRICT,
    NotFoundMsg,
    Root,
    SearchOutcome,
    SearchRequest,
    ServerSession,
    decode_message,
    encode_message,
    expected_message_count,
    run_search,
    serve_session,
)
from hesearch import transport


# -- helpers -----------------------------------------------------------------


def make_world(values, seed=7):
    """Separate client/server backends so per-side counters stay honest."""
    server_be = PlainBackend()
    client_be = PlainBackend()
    keys = client_be.keygen(seed)
    cts = tuple(client_be.encrypt(keys.public_key, v) for v in values)
    return server_be, client_be, keys, DatasetHandle(cts, "plain")


def search_over_pipe(values, target, seed=7, **kwargs):
    server_be, client_be, keys, data = make_world(values, seed)
    cep, sep = transport.pipe_endpoints()
    th = threading.Thread(target=serve_session,
                          args=(sep, server_be, keys.public_key, keys.relin_key, data))
    th.start()
    try:
        outcome = run_search(cep, client_be.encrypt(keys.public_key, target),
                             client_be, keys.secret_key, **kwargs)
    finally:
        cep.close()
        th.join()
    return outcome


def leftmost_scan(values, target):
    for i, v in enumerate(values):
        if v == target:
            return i
    return None


def plain_ct(value, level=PLAIN_FRESH_LEVEL):
    import os
    return Ciphertext("plain", level, 1.0, struct.pack("!d", value) + os.urandom(16))


# -- codecs --------------------------------------------------------------------


def test_message_tags_pinned():
    ct = plain_ct(1.0)
    assert encode_message(SearchRequest(ct))[0] == 0
    assert encode_message(Root(ct))[0] == 1
    assert encode_message(Descend(5))[0] == 2
    assert encode_message(Children(ct, ct))[0] == 3
    assert encode_message(NotFoundMsg()) == b"\x04"
    err = encode_message(ErrorFrame(2, "bad"))
    assert err[0] == 255 and err[1:3] == struct.pack("!H", 2) and err[3:] == b"bad"


def test_descend_is_8_byte_big_endian():
    buf = encode_message(Descend(0x0102030405060708))
    assert buf == b"\x02" + bytes([1, 2, 3, 4, 5, 6, 7, 8])


def test_codec_roundtrips():
    ct = plain_ct(2.5, level=9)
    for msg in (SearchRequest(ct), Root(ct), Descend(3), Children(ct, plain_ct(-1)),
                NotFoundMsg(), ErrorFrame(7, "detail")):
        assert decode_message(encode_message(msg)) == msg


def test_codec_rejects_garbage():
    ct = plain_ct(1.0)
    with pytest.raises(SerializationError):
        decode_message(b"")
    with pytest.raises(SerializationError):
        decode_message(b"\x63")
    with pytest.raises(SerializationError):
        decode_message(b"\x02\x00\x00")  # short pivot
    with pytest.raises(SerializationError):
        decode_message(encode_message(Root(ct)) + b"junk")
    with pytest.raises(SerializationError):
        decode_message(b"\x04\x00")


def test_expected_message_count():
    assert expected_message_count(4) == 5
    assert expected_message_count(1024) == 21
    assert expected_message_count(1) == 1
    assert expected_message_count(2) == 3
    with pytest.raises(ValueError):
        expected_message_count(3)
    with pytest.raises(ValueError):
        expected_message_count(0)


# -- end-to-end on the plain backend --------------------------------------------


def test_search_found_with_message_count():
    out = search_over_pipe([5, 3, 7, 3], 7)
    assert out.found and out.index == 2
    assert out.messages_paper == 5
    assert out.messages_wire == 6  # + the SearchRequest itself
    assert out.bytes_sent > 0 and out.bytes_received > 0


def test_search_not_found_is_one_message():
    out = search_over_pipe([5, 3, 7, 3], 9)
    assert not out.found and out.index is None
    assert out.messages_paper == 1
    assert out.messages_wire == 2


def test_search_leftmost_duplicate():
    out = search_over_pipe([4, 4], 4)
    assert out.found and out.index == 0
    assert out.messages_paper == 3


def test_search_single_leaf():
    assert search_over_pipe([1], 1).index == 0
    assert search_over_pipe([1], 2).found is False
    assert search_over_pipe([1], 1).messages_paper == 1


@given(st.lists(st.integers(0, 7), min_size=1, max_size=48),
       st.integers(0, 7))
@settings(max_examples=120, deadline=None)
def test_oracle_equivalence(values, target):
    out = search_over_pipe(values, target)
    want = leftmost_scan(values, target)
    assert (out.index if out.found else None) == want
    padded = 1 << max(0, len(values) - 1).bit_length()
    if want is None and padded > 1:
        assert out.messages_paper == 1
    else:
        assert out.messages_paper == expected_message_count(padded)


def test_pivot_path_is_root_to_leaf():
    server_be, client_be, keys, data = make_world([5, 3, 7, 3, 9, 9, 2, 6])
    cep, sep = transport.pipe_endpoints()
    th = threading.Thread(target=serve_session,
                          args=(sep, server_be, keys.public_key, keys.relin_key, data))
    th.start()
    sess = ClientSession(client_be, keys.secret_key)
    cep.send_frame(encode_message(SearchRequest(client_be.encrypt(keys.public_key, 2))))
    step = sess.on_root(decode_message(cep.recv_frame()))
    while isinstance(step, Descend):
        cep.send_frame(encode_message(step))
        step = sess.on_children(decode_message(cep.recv_frame()))
    cep.close()
    th.join()
    assert step.found and step.index == 6
    assert sess.pivots[0] == 1
    for a, b in zip(sess.pivots, sess.pivots[1:]):
        assert b in (2 * a, 2 * a + 1)
    assert sess.pivots[-1] >= 8


# -- client session unit behavior ------------------------------------------------


def make_client(mode=MODE_STRICT, epsilon=1e-9):
    backend = PlainBackend()
    keys = backend.keygen(1)
    return ClientSession(backend, keys.secret_key, epsilon=epsilon, mode=mode)


def root_at_depth(value, depth):
    return Root(plain_ct(value, level=PLAIN_FRESH_LEVEL - depth))


def test_client_rejects_nonzero_root():
    sess = make_client()
    out = sess.on_root(root_at_depth(-336.0, 2))
    assert isinstance(out, SearchOutcome) and not out.found
    assert sess.messages_paper == 1


def test_client_descends_on_zero_root():
    sess = make_client()
    step = sess.on_root(root_at_depth(0.0, 2))
    assert step == Descend(1)
    with pytest.raises(ProtocolError):
        sess.on_root(root_at_depth(0.0, 2))


def test_client_depth_zero_root_resolves_directly():
    sess = make_client()
    out = sess.on_root(root_at_depth(0.0, 0))
    assert out.found and out.index == 0
    sess2 = make_client()
    out2 = sess2.on_root(root_at_depth(5.0, 0))
    assert not out2.found


def test_client_children_left_nonzero_goes_right():
    sess = make_client()
    sess.on_root(root_at_depth(0.0, 2))
    step = sess.on_children(Children(plain_ct(8.0), plain_ct(0.0)))
    assert step == Descend(3)


def test_client_reaches_leaf_level():
    sess = make_client()
    sess.on_root(root_at_depth(0.0, 2))
    sess.on_children(Children(plain_ct(8.0), plain_ct(0.0)))  # pivot 3
    out = sess.on_children(Children(plain_ct(0.0), plain_ct(-4.0)))  # pivot 6
    assert out.found and out.index == 2
    assert sess.messages_paper == 5


def test_client_zero_tie_prefers_left():
    for mode in (MODE_STRICT, MODE_ROBUST):
        sess = make_client(mode=mode)
        sess.on_root(root_at_depth(0.0, 2))
        step = sess.on_children(Children(plain_ct(0.0), plain_ct(0.0)))
        assert step == Descend(2)


def test_client_robust_raises_on_inconsistency():
    sess = make_client(mode=MODE_ROBUST)
    sess.on_root(root_at_depth(0.0, 2))
    with pytest.raises(InconsistencyError):
        sess.on_children(Children(plain_ct(5.0), plain_ct(7.0)))


def test_client_strict_trusts_right_child():
    # the paper's descent never decrypts the right child; with exact
    # arithmetic a zero parent with nonzero left implies a zero right
    sess = make_client(mode=MODE_STRICT)
    sess.on_root(root_at_depth(0.0, 1))
    out = sess.on_children(Children(plain_ct(3.0), plain_ct(99.0)))
    assert out.found and out.index == 1


def test_client_children_before_root_rejected():
    sess = make_client()
    with pytest.raises(ProtocolError):
        sess.on_children(Children(plain_ct(0.0), plain_ct(0.0)))


def test_client_epsilon_validation():
    backend = PlainBackend()
    keys = backend.keygen(1)
    with pytest.raises(ValueError):
        ClientSession(backend, keys.secret_key, epsilon=0.0)
    with pytest.raises(ValueError):
        ClientSession(backend, keys.secret_key, mode="psychic")


def test_client_default_modes(toy_backend, toy_keys):
    plain = PlainBackend()
    assert ClientSession(plain, b"").mode == MODE_STRICT
    assert ClientSession(toy_backend, toy_keys.secret_key).mode == MODE_ROBUST


# -- server session unit behavior -------------------------------------------------


def make_server(values):
    server_be, client_be, keys, data = make_world(values)
    sess = ServerSession(server_be, keys.public_key, keys.relin_key, data)
    return sess, client_be, keys


def test_server_state_machine_guards():
    sess, client_be, keys = make_server([5, 3, 7, 3])
    target = client_be.encrypt(keys.public_key, 7)
    with pytest.raises(ProtocolError) as err:
        sess.handle(Descend(1))
    assert err.value.code == ERR_STATE
    root = sess.handle(SearchRequest(target))
    assert isinstance(root, Root)
    assert sess.state == ServerSession.SERVING
    with pytest.raises(ProtocolError) as err:
        sess.handle(SearchRequest(target))
    assert err.value.code == ERR_STATE


def test_server_descend_bounds():
    sess, client_be, keys = make_server([5, 3, 7, 3])
    sess.handle(SearchRequest(client_be.encrypt(keys.public_key, 7)))
    kids = sess.handle(Descend(1))
    assert isinstance(kids, Children)
    for bad in (0, 4, 5, 10_000):
        with pytest.raises(ProtocolError) as err:
            sess.handle(Descend(bad))
        assert err.value.code == ERR_PIVOT


def test_server_completes_at_leaf_level():
    sess, client_be, keys = make_server([5, 3, 7, 3])
    sess.handle(SearchRequest(client_be.encrypt(keys.public_key, 7)))
    sess.handle(Descend(1))
    assert sess.state == ServerSession.SERVING
    sess.handle(Descend(2))  # children of 2 are leaves in a 4-leaf tree
    assert sess.state == ServerSession.DONE


def test_server_single_leaf_tree_is_immediately_done():
    sess, client_be, keys = make_server([5])
    sess.handle(SearchRequest(client_be.encrypt(keys.public_key, 5)))
    assert sess.state == ServerSession.DONE


def test_server_notfound_closes():
    sess, client_be, keys = make_server([5, 3])
    sess.handle(SearchRequest(client_be.encrypt(keys.public_key, 5)))
    assert sess.handle(NotFoundMsg()) is None
    assert sess.state == ServerSession.DONE


def test_error_frame_surfaces_as_protocol_error():
    server_be, client_be, keys, data = make_world([5, 3, 7, 3])
    cep, sep = transport.pipe_endpoints()
    th = threading.Thread(target=serve_session,
                          args=(sep, server_be, keys.public_key, keys.relin_key, data))
    th.start()
    cep.send_frame(encode_message(SearchRequest(client_be.encrypt(keys.public_key, 7))))
    cep.recv_frame()  # root
    cep.send_frame(encode_message(Descend(4)))  # leaf index: out of range
    reply = decode_message(cep.recv_frame())
    assert isinstance(reply, ErrorFrame) and reply.code == ERR_PIVOT
    cep.close()
    th.join()


def test_malicious_client_message_draws_error_frame():
    server_be, client_be, keys, data = make_world([1, 2])
    cep, sep = transport.pipe_endpoints()
    th = threading.Thread(target=serve_session,
                          args=(sep, server_be, keys.public_key, keys.relin_key, data))
    th.start()
    cep.send_frame(encode_message(Root(client_be.encrypt(keys.public_key, 0))))
    reply = decode_message(cep.recv_frame())
    assert isinstance(reply, ErrorFrame) and reply.code == ERR_STATE
    cep.close()
    th.join()


# -- server ignorance --------------------------------------------------------------


def _walk(obj, seen):
    if id(obj) in seen:
        return
    seen.add(id(obj))
    yield obj
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk(k, seen)
            yield from _walk(v, seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for v in obj:
            yield from _walk(v, seen)
    elif hasattr(obj, "__dict__"):
        for v in vars(obj).values():
            yield from _walk(v, seen)


def test_server_session_reachable_state_has_no_secret():
    server_be, client_be, keys, data = make_world([5, 3, 7, 3])
    sess = ServerSession(server_be, keys.public_key, keys.relin_key, data)
    sess.handle(SearchRequest(client_be.encrypt(keys.public_key, 7)))
    assert not hasattr(sess, "secret_key")
    secret = keys.secret_key
    assert len(secret) > 0
    for node in _walk(sess, set()):
        if isinstance(node, (bytes, bytearray)):
            assert secret not in bytes(node)


def test_server_never_decrypts():
    server_be, client_be, keys, data = make_world([5, 3, 7, 3])
    cep, sep = transport.pipe_endpoints()
    th = threading.Thread(target=serve_session,
                          args=(sep, server_be, keys.public_key, keys.relin_key, data))
    th.start()
    run_search(cep, client_be.encrypt(keys.public_key, 7), client_be, keys.secret_key)
    th.join()
    assert server_be.counters.snapshot()["decrypts"] == 0
    assert client_be.counters.snapshot()["decrypts"] > 0


# -- ckks end-to-end (toy scale; full scale lives in the acceptance suite) ---------


def test_ckks_search_roundtrip(toy_backend, toy_keys, warm_toy):
    client_be = toy_backend
    server_be = toy_backend  # same params; counters not asserted here
    # toy chain is minimal (3 primes), so a depth-2 tree bottoms out at
    # level 0, whose single prime only has headroom for values near 1;
    # keep difference products inside that envelope
    values = [0.3, 1.2, 2.1, 1.2]
    cts = tuple(client_be.encrypt(toy_keys.public_key, v) for v in values)
    data = DatasetHandle(cts, client_be.params_id)
    for target, want in ((2.1, 2), (0.0, None), (1.2, 1)):
        cep, sep = transport.pipe_endpoints()
        th = threading.Thread(
            target=serve_session,
            args=(sep, server_be, toy_keys.public_key, toy_keys.relin_key, data))
        th.start()
        out = run_search(cep, client_be.encrypt(toy_keys.public_key, target),
                         client_be, toy_keys.secret_key, epsilon=1e-4)
        th.join()
        assert (out.index if out.found else None) == want
