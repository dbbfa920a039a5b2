"""Client/server state machines for the interactive tree search.

Wire messages (tag byte + body):

    0  SearchRequest  target ciphertext (envelope)
    1  Root           root ciphertext (envelope)
    2  Descend        pivot, u64 big-endian, always an internal node index
    3  Children       two ciphertexts (envelopes), left then right
    4  NotFound       empty; reserved for graceful close, the reference
                      flows terminate by closing the connection instead
    255 Error         u16 code + utf-8 detail

A search exchanges SearchRequest, then Root, then per tree level one
Descend and one Children pair. The client never sends the final Descend:
once its pivot crosses into the leaf range it resolves the outcome locally
from the last Children pair. Counting Root + Descend + Children (the
request is tallied separately as wire traffic), a successful search over
2^d padded leaves uses exactly 1 + 2*d messages, and a root rejection
exactly 1.

The client re-derives the tree depth from metadata it already holds: a
fresh ciphertext starts at the backend's maximum level and each product
level consumes one (two when per-level normalization is on), so
depth = (fresh_level - root.level) / levels_per_tree_level. No extra wire
bytes are spent on it.

The server half never touches a secret key: ServerSession stores only the
public and relinearization keys, so decryption on the server side is
impossible by construction, not by discipline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .backend import (
    Ciphertext,
    HEBackend,
    PLAIN_FRESH_LEVEL,
    TAG_PLAIN,
    read_ciphertext,
    serialize_ciphertext,
)
from .errors import (
    HESearchError,
    InconsistencyError,
    ProtocolError,
    SerializationError,
)
from .prodtree import CipherTree, DatasetHandle, build_tree
from .transport import Endpoint

MSG_SEARCH_REQUEST = 0
MSG_ROOT = 1
MSG_DESCEND = 2
MSG_CHILDREN = 3
MSG_NOT_FOUND = 4
MSG_ERROR = 255

ERR_STATE = 1
ERR_PIVOT = 2
ERR_DEPTH = 3
ERR_PARAMS = 4
ERR_INTERNAL = 5
ERR_MALFORMED = 6

MODE_STRICT = "strict"
MODE_ROBUST = "robust"


@dataclass(frozen=True)
class SearchRequest:
    target: Ciphertext


@dataclass(frozen=True)
class Root:
    node: Ciphertext


@dataclass(frozen=True)
class Descend:
    pivot: int


@dataclass(frozen=True)
class Children:
    left: Ciphertext
    right: Ciphertext


@dataclass(frozen=True)
class NotFoundMsg:
    pass


@dataclass(frozen=True)
class ErrorFrame:
    code: int
    detail: str


@dataclass
class SearchOutcome:
    """Terminal result plus the traffic counters recorded along the way."""

    found: bool
    index: int | None
    messages_paper: int = 0
    messages_wire: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0


def encode_message(msg) -> bytes:
    if isinstance(msg, SearchRequest):
        return bytes([MSG_SEARCH_REQUEST]) + serialize_ciphertext(msg.target)
    if isinstance(msg, Root):
        return bytes([MSG_ROOT]) + serialize_ciphertext(msg.node)
    if isinstance(msg, Descend):
        return bytes([MSG_DESCEND]) + struct.pack("!Q", msg.pivot)
    if isinstance(msg, Children):
        return (bytes([MSG_CHILDREN]) + serialize_ciphertext(msg.left)
                + serialize_ciphertext(msg.right))
    if isinstance(msg, NotFoundMsg):
        return bytes([MSG_NOT_FOUND])
    if isinstance(msg, ErrorFrame):
        detail = msg.detail.encode("utf-8")
        return bytes([MSG_ERROR]) + struct.pack("!H", msg.code) + detail
    raise SerializationError(f"cannot encode {type(msg).__name__}")


def decode_message(buf: bytes):
    if not buf:
        raise SerializationError("empty message")
    tag = buf[0]
    if tag == MSG_SEARCH_REQUEST:
        ct, end = read_ciphertext(buf, 1)
        _expect_end(buf, end)
        return SearchRequest(ct)
    if tag == MSG_ROOT:
        ct, end = read_ciphertext(buf, 1)
        _expect_end(buf, end)
        return Root(ct)
    if tag == MSG_DESCEND:
        if len(buf) != 9:
            raise SerializationError("descend body must be 8 bytes")
        (pivot,) = struct.unpack_from("!Q", buf, 1)
        return Descend(pivot)
    if tag == MSG_CHILDREN:
        left, off = read_ciphertext(buf, 1)
        right, end = read_ciphertext(buf, off)
        _expect_end(buf, end)
        return Children(left, right)
    if tag == MSG_NOT_FOUND:
        _expect_end(buf, 1)
        return NotFoundMsg()
    if tag == MSG_ERROR:
        if len(buf) < 3:
            raise SerializationError("error frame truncated")
        (code,) = struct.unpack_from("!H", buf, 1)
        return ErrorFrame(code, buf[3:].decode("utf-8", errors="replace"))
    raise SerializationError(f"unknown message tag {tag}")


def _expect_end(buf: bytes, end: int) -> None:
    if end != len(buf):
        raise SerializationError(f"{len(buf) - end} trailing bytes in message")


def expected_message_count(n_padded: int) -> int:
    """Root plus one Descend/Children pair per level: 1 + 2*log2(n_padded)."""
    if n_padded < 1 or n_padded & (n_padded - 1):
        raise ValueError(f"n_padded must be a power of two, got {n_padded}")
    return 1 + 2 * (n_padded.bit_length() - 1)


def fresh_level_of(backend: HEBackend) -> int:
    return PLAIN_FRESH_LEVEL if backend.tag == TAG_PLAIN else backend.max_depth


class ClientSession:
    """Client half: decrypts one root-to-leaf path of tree nodes.

    Modes: "strict" decrypts only the left child of each pair, exactly the
    amount of information the descent needs under exact arithmetic;
    "robust" decrypts both children, prefers a below-threshold left child
    (the leftmost-match rule), and raises InconsistencyError when neither
    child passes the zero test under a zero parent, which flags a noise
    threshold failure instead of returning garbage.
    """

    def __init__(self, backend: HEBackend, secret_key: bytes,
                 epsilon: float | None = None, mode: str | None = None,
                 normalized: bool = False):
        self.backend = backend
        self.secret_key = secret_key
        self.epsilon = backend.default_epsilon if epsilon is None else float(epsilon)
        if self.epsilon <= 0:
            raise ValueError("zero threshold must be positive")
        if mode is None:
            mode = MODE_ROBUST if backend.tag == "ckks" else MODE_STRICT
        if mode not in (MODE_STRICT, MODE_ROBUST):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self._level_stride = 2 if (normalized and backend.tag == "ckks") else 1
        self.pivot: int | None = None
        self.depth: int | None = None
        self.messages_paper = 0
        self.pivots: list[int] = []
        self.done = False

    def _near_zero(self, ct: Ciphertext) -> bool:
        return abs(self.backend.decrypt(self.secret_key, ct)) < self.epsilon

    def _derive_depth(self, root: Ciphertext) -> int:
        consumed = fresh_level_of(self.backend) - root.level
        if consumed < 0 or consumed % self._level_stride:
            raise ProtocolError(ERR_MALFORMED,
                                f"root level {root.level} inconsistent with params")
        return consumed // self._level_stride

    def on_root(self, msg: Root):
        """Descend(1) when the root certifies a match; terminal otherwise."""
        if self.done or self.pivot is not None:
            raise ProtocolError(ERR_STATE, "root received twice")
        self.messages_paper += 1
        self.depth = self._derive_depth(msg.node)
        zero = self._near_zero(msg.node)
        if self.depth == 0:
            # single-leaf tree: the root is the only difference leaf
            self.done = True
            return SearchOutcome(found=zero, index=0 if zero else None)
        if not zero:
            self.done = True
            return SearchOutcome(found=False, index=None)
        self.pivot = 1
        self.pivots.append(1)
        self.messages_paper += 1
        return Descend(1)

    def on_children(self, msg: Children):
        """Pick a child, then either descend further or resolve locally."""
        if self.done or self.pivot is None or self.depth is None:
            raise ProtocolError(ERR_STATE, "children before root/descend")
        self.messages_paper += 1
        if self.mode == MODE_STRICT:
            # paper-faithful: only the left child is ever decrypted
            go_left = self._near_zero(msg.left)
        elif self._near_zero(msg.left):
            go_left = True  # leftmost-match rule: a zero left child wins ties
        elif self._near_zero(msg.right):
            go_left = False
        else:
            self.done = True
            raise InconsistencyError(
                f"no child of pivot {self.pivot} is below epsilon "
                f"{self.epsilon}; the zero threshold failed")
        self.pivot = 2 * self.pivot + (0 if go_left else 1)
        self.pivots.append(self.pivot)
        n_padded = 1 << self.depth
        if self.pivot >= n_padded:
            self.done = True
            return SearchOutcome(found=True, index=self.pivot - n_padded)
        self.messages_paper += 1
        return Descend(self.pivot)


class ServerSession:
    """Server half: builds the tree for one request, then serves node pairs.

    Holds only public material (public key and relinearization key); there
    is deliberately no field that could carry a secret key.
    """

    AWAITING = "awaiting-request"
    SERVING = "serving"
    DONE = "done"

    def __init__(self, backend: HEBackend, public_key: bytes, relin_key: bytes,
                 data: DatasetHandle, expected_gap: float = 1.0):
        self.backend = backend
        self.public_key = public_key
        self.relin_key = relin_key
        self.data = data
        self.expected_gap = expected_gap
        self.tree: CipherTree | None = None
        self.state = self.AWAITING
        self.messages_handled = 0

    def handle(self, msg):
        """Returns the reply message, or None when no reply is due."""
        self.messages_handled += 1
        if isinstance(msg, SearchRequest):
            if self.state != self.AWAITING:
                raise ProtocolError(ERR_STATE, "search already in progress")
            self.tree = build_tree(self.data, msg.target, self.backend,
                                   self.public_key, self.relin_key,
                                   expected_gap=self.expected_gap)
            self.state = self.DONE if self.tree.n_padded == 1 else self.SERVING
            return Root(self.tree.root())
        if isinstance(msg, Descend):
            if self.state != self.SERVING or self.tree is None:
                raise ProtocolError(ERR_STATE, f"descend in state {self.state}")
            if not 1 <= msg.pivot < self.tree.n_padded:
                raise ProtocolError(
                    ERR_PIVOT, f"pivot {msg.pivot} outside [1, {self.tree.n_padded})")
            left, right = self.tree.node_pair(msg.pivot)
            if 2 * msg.pivot >= self.tree.n_padded:
                self.state = self.DONE  # children are leaves; descent ends here
            return Children(left, right)
        if isinstance(msg, NotFoundMsg):
            self.state = self.DONE
            return None
        raise ProtocolError(ERR_STATE, f"unexpected {type(msg).__name__}")


def _error_code_for(exc: HESearchError) -> int:
    from .errors import (BackendMismatchError, DepthExhaustedError,
                         ParameterError, ScaleMismatchError)
    if isinstance(exc, DepthExhaustedError):
        return ERR_DEPTH
    if isinstance(exc, (ParameterError, ScaleMismatchError,
                        BackendMismatchError, SerializationError)):
        return ERR_PARAMS
    return ERR_INTERNAL


def serve_session(endpoint: Endpoint, backend: HEBackend, public_key: bytes,
                  relin_key: bytes, data: DatasetHandle,
                  expected_gap: float = 1.0, log_fn=None) -> ServerSession:
    """Drive one ServerSession over a connection until the peer closes."""
    sess = ServerSession(backend, public_key, relin_key, data,
                         expected_gap=expected_gap)
    try:
        while True:
            frame = endpoint.recv_frame()
            if frame is None:
                break
            try:
                msg = decode_message(frame)
                if isinstance(msg, (Root, Children, ErrorFrame)):
                    raise ProtocolError(ERR_STATE,
                                        f"client sent {type(msg).__name__}")
                reply = sess.handle(msg)
            except ProtocolError as exc:
                endpoint.send_frame(encode_message(ErrorFrame(exc.code, exc.detail)))
                break
            except HESearchError as exc:
                endpoint.send_frame(encode_message(
                    ErrorFrame(_error_code_for(exc), str(exc))))
                break
            if reply is not None:
                endpoint.send_frame(encode_message(reply))
    finally:
        endpoint.close()
        if log_fn is not None:
            log_fn({
                "n": data.n_real,
                "n_padded": sess.tree.n_padded if sess.tree else 0,
                "state": sess.state,
                "frames_in": endpoint.frames_received,
                "frames_out": endpoint.frames_sent,
                "bytes_in": endpoint.bytes_received,
                "bytes_out": endpoint.bytes_sent,
            })
    return sess


def run_search(endpoint: Endpoint, target: Ciphertext, backend: HEBackend,
               secret_key: bytes, epsilon: float | None = None,
               mode: str | None = None, normalized: bool = False,
               close: bool = True) -> SearchOutcome:
    """Drive a full search over an endpoint and return the outcome.

    Raises ProtocolError on an Error frame from the server, transport
    errors as-is, and InconsistencyError in robust mode when the zero
    threshold fails.
    """
    sess = ClientSession(backend, secret_key, epsilon=epsilon, mode=mode,
                         normalized=normalized)
    try:
        endpoint.send_frame(encode_message(SearchRequest(target)))
        step = sess.on_root(_expect(endpoint, Root))
        while isinstance(step, Descend):
            endpoint.send_frame(encode_message(step))
            step = sess.on_children(_expect(endpoint, Children))
        outcome: SearchOutcome = step
        outcome.messages_paper = sess.messages_paper
        outcome.messages_wire = endpoint.frames_sent + endpoint.frames_received
        outcome.bytes_sent = endpoint.bytes_sent
        outcome.bytes_received = endpoint.bytes_received
        return outcome
    finally:
        if close:
            endpoint.close()


def _expect(endpoint: Endpoint, kind):
    frame = endpoint.recv_frame()
    if frame is None:
        raise ProtocolError(ERR_STATE, "server closed mid-search")
    msg = decode_message(frame)
    if isinstance(msg, ErrorFrame):
        raise ProtocolError(msg.code, msg.detail)
    if not isinstance(msg, kind):
        raise ProtocolError(ERR_STATE,
                            f"expected {kind.__name__}, got {type(msg).__name__}")
    return msg
