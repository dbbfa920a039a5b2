"""Homomorphic-encryption backend contract, plain oracle backend, and the
shared ciphertext/key serialization formats.

Plaintexts are plain Python floats (finite, |v| <= the backend's bound).
Ciphertexts are immutable values: a backend tag, a level (remaining
multiplicative depth), an encoding scale, and an opaque payload. All
homomorphic operations are pure functions; the only stateful pieces are the
per-backend operation counters, which exist for benchmarks and tests.

Wire envelope (shared by transport and files):

    "HSC1" | tag (1 byte: 0=plain, 1=ckks) | level (u16 BE) |
    scale (f64 BE) | payload length (u32 BE) | payload

Key file:

    "HSK1" | u32 len + params-id (utf8) | u32 len + public key |
    u32 len + secret key (may be empty) | u32 len + relin key
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

from .errors import (
    BackendMismatchError,
    DepthExhaustedError,
    LevelMismatchError,
    ParameterError,
    PlaintextRangeError,
    SerializationError,
)

CIPHERTEXT_MAGIC = b"HSC1"
KEYFILE_MAGIC = b"HSK1"

TAG_PLAIN = "plain"
TAG_CKKS = "ckks"
_TAG_CODES = {TAG_PLAIN: 0, TAG_CKKS: 1}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}

DEFAULT_PLAINTEXT_BOUND = float(2 ** 20)

# Plain ciphertexts have unbounded depth; remaining_depth reports this
# sentinel. The stored level starts at the envelope maximum (the level field
# is 2 bytes on the wire) and still ticks down once per multiplication.
PLAIN_DEPTH_SENTINEL = 2 ** 30
PLAIN_FRESH_LEVEL = 0xFFFF


@dataclass(frozen=True)
class Ciphertext:
    backend_tag: str
    level: int
    scale: float
    payload: bytes


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes
    relin_key: bytes
    params_id: str

    def public_only(self) -> "KeyPair":
        return KeyPair(self.public_key, b"", self.relin_key, self.params_id)

    @property
    def has_secret(self) -> bool:
        return len(self.secret_key) > 0


@dataclass
class OpCounters:
    """Operation tallies; thread-safe because server sessions share backends."""

    encrypts: int = 0
    decrypts: int = 0
    subs: int = 0
    muls: int = 0
    plain_muls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def reset(self) -> None:
        with self._lock:
            self.encrypts = self.decrypts = self.subs = self.muls = self.plain_muls = 0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "encrypts": self.encrypts,
                "decrypts": self.decrypts,
                "subs": self.subs,
                "muls": self.muls,
                "plain_muls": self.plain_muls,
            }


def check_plaintext(value: float, bound: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise PlaintextRangeError(f"plaintext must be finite, got {value!r}")
    if abs(value) > bound:
        raise PlaintextRangeError(f"|{value}| exceeds plaintext bound {bound}")
    return value


class HEBackend(ABC):
    """Capability contract every backend implements.

    `strict_levels=True` turns level disagreement between operands into an
    error; by default the higher operand is aligned down to the lower level
    (a plaintext-preserving modulus reduction in the ckks backend).
    """

    tag: str
    params_id: str
    max_depth: int
    plaintext_bound: float
    default_epsilon: float

    def __init__(self) -> None:
        self.counters = OpCounters()

    @abstractmethod
    def keygen(self, seed: int) -> KeyPair:
        """Deterministic key generation from a 64-bit seed."""

    @abstractmethod
    def encrypt(self, public_key: bytes, value: float) -> Ciphertext:
        """Randomized encryption of a bounded scalar at the fresh level."""

    @abstractmethod
    def decrypt(self, secret_key: bytes, ct: Ciphertext) -> float:
        """Approximate inverse of the homomorphic computation."""

    @abstractmethod
    def hsub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        """Dec(result) ~ Dec(a) - Dec(b); level unchanged."""

    @abstractmethod
    def hmul(self, a: Ciphertext, b: Ciphertext, relin_key: bytes) -> Ciphertext:
        """Dec(result) ~ Dec(a) * Dec(b); consumes one level."""

    @abstractmethod
    def hmul_plain(self, a: Ciphertext, k: float) -> Ciphertext:
        """Dec(result) ~ k * Dec(a) for a public nonzero constant k."""

    # shared guards -------------------------------------------------------

    def _check_tags(self, *cts: Ciphertext) -> None:
        for ct in cts:
            if ct.backend_tag != self.tag:
                raise BackendMismatchError(
                    f"{self.tag} backend got a {ct.backend_tag!r} ciphertext")

    def _common_level(self, a: Ciphertext, b: Ciphertext, strict: bool) -> int:
        if a.level == b.level:
            return a.level
        if strict:
            raise LevelMismatchError(f"levels differ: {a.level} vs {b.level}")
        return min(a.level, b.level)


def remaining_depth(ct: Ciphertext) -> int:
    """Multiplications the ciphertext can still absorb.

    The plain backend is depth-unbounded and reports a large sentinel.
    """
    if ct.backend_tag == TAG_PLAIN:
        return PLAIN_DEPTH_SENTINEL
    return ct.level


class PlainBackend(HEBackend):
    """Exact-arithmetic reference backend.

    NOT an encryption scheme: the payload is the IEEE-754 value plus a
    random 16-byte nonce (so re-encryption yields distinct payloads). It
    exists as the bit-exact oracle that the ckks backend and the protocol
    are tested against.
    """

    tag = TAG_PLAIN
    params_id = "plain"
    max_depth = PLAIN_DEPTH_SENTINEL

    def __init__(self, plaintext_bound: float = DEFAULT_PLAINTEXT_BOUND,
                 default_epsilon: float = 1e-9, strict_levels: bool = False):
        super().__init__()
        self.plaintext_bound = float(plaintext_bound)
        self.default_epsilon = float(default_epsilon)
        self.strict_levels = strict_levels

    def keygen(self, seed: int) -> KeyPair:
        blob = hashlib.sha256(b"hesearch-plain-%d" % seed).digest()
        return KeyPair(public_key=blob[:8], secret_key=blob[8:16],
                       relin_key=blob[16:24], params_id=self.params_id)

    def _fresh(self, value: float, level: int) -> Ciphertext:
        payload = struct.pack("!d", value) + os.urandom(16)
        return Ciphertext(self.tag, level, 1.0, payload)

    def _value(self, ct: Ciphertext) -> float:
        return struct.unpack("!d", ct.payload[:8])[0]

    def encrypt(self, public_key: bytes, value: float) -> Ciphertext:
        value = check_plaintext(value, self.plaintext_bound)
        self.counters.bump("encrypts")
        return self._fresh(value, PLAIN_FRESH_LEVEL)

    def decrypt(self, secret_key: bytes, ct: Ciphertext) -> float:
        self._check_tags(ct)
        if len(ct.payload) != 24:
            raise SerializationError("malformed plain payload")
        self.counters.bump("decrypts")
        return self._value(ct)

    def hsub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_tags(a, b)
        level = self._common_level(a, b, self.strict_levels)
        self.counters.bump("subs")
        return self._fresh(self._value(a) - self._value(b), level)

    def hmul(self, a: Ciphertext, b: Ciphertext, relin_key: bytes) -> Ciphertext:
        self._check_tags(a, b)
        level = self._common_level(a, b, self.strict_levels)
        if level < 1:
            raise DepthExhaustedError("ciphertext level already 0")
        self.counters.bump("muls")
        return self._fresh(self._value(a) * self._value(b), level - 1)

    def hmul_plain(self, a: Ciphertext, k: float) -> Ciphertext:
        self._check_tags(a)
        k = float(k)
        if not math.isfinite(k) or k == 0.0:
            raise ParameterError("public factor must be finite and nonzero")
        self.counters.bump("plain_muls")
        return self._fresh(self._value(a) * k, a.level)


# ---------------------------------------------------------------------------
# Serialization


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    code = _TAG_CODES.get(ct.backend_tag)
    if code is None:
        raise SerializationError(f"unknown backend tag {ct.backend_tag!r}")
    if not 0 <= ct.level <= 0xFFFF:
        raise SerializationError(f"level {ct.level} does not fit the envelope")
    return b"".join((
        CIPHERTEXT_MAGIC,
        struct.pack("!B", code),
        struct.pack("!H", ct.level),
        struct.pack("!d", ct.scale),
        struct.pack("!I", len(ct.payload)),
        ct.payload,
    ))


def read_ciphertext(buf: bytes, offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse one envelope starting at `offset`; returns (ct, next offset)."""
    header = offset + 19
    if len(buf) < header:
        raise SerializationError("ciphertext envelope truncated")
    if buf[offset:offset + 4] != CIPHERTEXT_MAGIC:
        raise SerializationError("bad ciphertext magic")
    code, level = struct.unpack_from("!BH", buf, offset + 4)
    (scale,) = struct.unpack_from("!d", buf, offset + 7)
    (plen,) = struct.unpack_from("!I", buf, offset + 15)
    if len(buf) < header + plen:
        raise SerializationError("ciphertext payload truncated")
    tag = _TAG_NAMES.get(code)
    if tag is None:
        raise SerializationError(f"unknown backend code {code}")
    payload = bytes(buf[header:header + plen])
    return Ciphertext(tag, level, scale, payload), header + plen


def deserialize_ciphertext(buf: bytes) -> Ciphertext:
    ct, end = read_ciphertext(buf, 0)
    if end != len(buf):
        raise SerializationError(f"{len(buf) - end} trailing bytes after ciphertext")
    return ct


def _pack_blob(blob: bytes) -> bytes:
    return struct.pack("!I", len(blob)) + blob


def _read_blob(buf: bytes, offset: int) -> tuple[bytes, int]:
    if len(buf) < offset + 4:
        raise SerializationError("key file truncated")
    (n,) = struct.unpack_from("!I", buf, offset)
    end = offset + 4 + n
    if len(buf) < end:
        raise SerializationError("key file truncated")
    return bytes(buf[offset + 4:end]), end


def serialize_keys(keys: KeyPair, include_secret: bool = True) -> bytes:
    secret = keys.secret_key if include_secret else b""
    return b"".join((
        KEYFILE_MAGIC,
        _pack_blob(keys.params_id.encode("utf-8")),
        _pack_blob(keys.public_key),
        _pack_blob(secret),
        _pack_blob(keys.relin_key),
    ))


def deserialize_keys(buf: bytes) -> KeyPair:
    if buf[:4] != KEYFILE_MAGIC:
        raise SerializationError("bad key file magic")
    pid, off = _read_blob(buf, 4)
    pk, off = _read_blob(buf, off)
    sk, off = _read_blob(buf, off)
    rlk, off = _read_blob(buf, off)
    if off != len(buf):
        raise SerializationError("trailing bytes in key file")
    return KeyPair(pk, sk, rlk, pid.decode("utf-8"))


def write_key_file(path, keys: KeyPair, include_secret: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_keys(keys, include_secret=include_secret))


def read_key_file(path) -> KeyPair:
    with open(path, "rb") as fh:
        return deserialize_keys(fh.read())
