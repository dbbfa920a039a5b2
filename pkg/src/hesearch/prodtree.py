"""Server-side product tree over homomorphic ciphertext differences.

Given dataset ciphertexts c_0..c_{n-1} and an encrypted target c_t, the
tree's leaves hold the differences c_i - c_t (padded with encryptions of
the nonzero sentinel 1 up to a power of two) and every internal node is
the homomorphic product of its two children. A (near-)zero node therefore
certifies that some leaf in its subtree is (near) zero, i.e. that the
subtree contains a match.

Heap layout: nodes[k] is the parent of nodes[2k] and nodes[2k+1];
nodes[1] is the root and index 0 is unused. Leaves occupy
[n_padded, 2 * n_padded); real leaves come first, in dataset order, so the
left-first descent in the protocol returns the leftmost match.

Building a tree of n_padded = 2^d leaves performs exactly n_real
homomorphic subtractions and n_padded - 1 homomorphic multiplications,
tracked by the backend's counters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .backend import (
    Ciphertext,
    HEBackend,
    read_ciphertext,
    remaining_depth,
    serialize_ciphertext,
)
from .errors import (
    BackendMismatchError,
    DepthExhaustedError,
    HeapIndexError,
    ParameterError,
    SerializationError,
)

DATASET_MAGIC = b"HSD1"
PAD_SENTINEL = 1.0


@dataclass(frozen=True)
class DatasetHandle:
    """Ordered dataset ciphertexts bound to one parameter set."""

    ciphertexts: tuple[Ciphertext, ...]
    params_id: str

    def __post_init__(self):
        if len(self.ciphertexts) < 1:
            raise ParameterError("dataset must contain at least one ciphertext")
        tags = {ct.backend_tag for ct in self.ciphertexts}
        if len(tags) != 1:
            raise BackendMismatchError(f"dataset mixes backend tags {sorted(tags)}")

    @property
    def n_real(self) -> int:
        return len(self.ciphertexts)

    @property
    def backend_tag(self) -> str:
        return self.ciphertexts[0].backend_tag


@dataclass
class CipherTree:
    """1-based heap of ciphertexts: leaves are differences, parents products."""

    nodes: list  # length 2 * n_padded; nodes[0] is None
    depth: int
    n_real: int

    @property
    def n_padded(self) -> int:
        return 1 << self.depth

    @property
    def leaf_offset(self) -> int:
        return self.n_padded

    def root(self) -> Ciphertext:
        return self.nodes[1]

    def node_pair(self, pivot: int) -> tuple[Ciphertext, Ciphertext]:
        """Children (nodes[2*pivot], nodes[2*pivot + 1]) of an internal node."""
        if not 1 <= pivot < self.n_padded:
            raise HeapIndexError(
                f"pivot {pivot} is not an internal node of a {self.n_padded}-leaf tree")
        return self.nodes[2 * pivot], self.nodes[2 * pivot + 1]

    def heap_to_index(self, pivot: int) -> int | None:
        """Leaf heap position -> dataset index; None for a pad leaf."""
        if pivot < self.leaf_offset:
            raise HeapIndexError(f"pivot {pivot} is below the leaf offset "
                                 f"{self.leaf_offset}")
        if pivot >= 2 * self.n_padded:
            raise HeapIndexError(f"pivot {pivot} is beyond the last leaf")
        idx = pivot - self.leaf_offset
        return idx if idx < self.n_real else None


def pairwise_mul(level: list, backend: HEBackend, relin_key: bytes) -> list:
    """Products of consecutive pairs; a trailing odd element passes through."""
    if not level:
        raise ParameterError("pairwise_mul needs a nonempty list")
    out = []
    m = len(level)
    for i in range(0, m, 2):
        if i + 1 == m:
            out.append(level[i])
        else:
            out.append(backend.hmul(level[i], level[i + 1], relin_key))
    return out


def tree_depth_for(n_real: int) -> int:
    return max(0, n_real - 1).bit_length()


def build_tree(data: DatasetHandle, target: Ciphertext, backend: HEBackend,
               public_key: bytes, relin_key: bytes,
               expected_gap: float = 1.0) -> CipherTree:
    """Difference leaves, pad sentinels, then pairwise products bottom-up.

    `expected_gap` enables the optional per-level normalization: after each
    product level every node is scaled by the public constant
    (1/expected_gap)**2, which keeps magnitudes near 1 when non-match
    differences cluster around expected_gap. The default 1.0 disables it
    (multiplying by 1 would only waste depth).
    """
    if data.params_id != backend.params_id:
        raise ParameterError(
            f"dataset params {data.params_id!r} != backend {backend.params_id!r}")
    if target.backend_tag != backend.tag:
        raise BackendMismatchError(
            f"target is {target.backend_tag!r}, backend is {backend.tag!r}")
    depth = tree_depth_for(data.n_real)
    n_padded = 1 << depth
    gamma = 1.0 / (expected_gap * expected_gap)
    normalize = gamma != 1.0
    budget_needed = depth * (2 if normalize else 1)
    if remaining_depth(target) < budget_needed:
        raise DepthExhaustedError(
            f"tree depth {depth} needs budget {budget_needed}, target has "
            f"{remaining_depth(target)}")

    nodes: list = [None] * (2 * n_padded)
    for i, ct in enumerate(data.ciphertexts):
        nodes[n_padded + i] = backend.hsub(ct, target)
    for j in range(data.n_real, n_padded):
        nodes[n_padded + j] = backend.encrypt(public_key, PAD_SENTINEL)

    start = n_padded
    while start > 1:
        row = pairwise_mul(nodes[start:2 * start], backend, relin_key)
        if normalize:
            row = [backend.hmul_plain(ct, gamma) for ct in row]
        half = start // 2
        nodes[half:start] = row
        start = half
    return CipherTree(nodes=nodes, depth=depth, n_real=data.n_real)


# ---------------------------------------------------------------------------
# Dataset file format: "HSD1" | u32 len + params-id | u32 count | envelopes


def serialize_dataset(data: DatasetHandle) -> bytes:
    pid = data.params_id.encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("!I", len(pid)), pid,
             struct.pack("!I", data.n_real)]
    parts.extend(serialize_ciphertext(ct) for ct in data.ciphertexts)
    return b"".join(parts)


def deserialize_dataset(buf: bytes) -> DatasetHandle:
    if buf[:4] != DATASET_MAGIC:
        raise SerializationError("bad dataset magic")
    if len(buf) < 8:
        raise SerializationError("dataset header truncated")
    (pid_len,) = struct.unpack_from("!I", buf, 4)
    off = 8 + pid_len
    if len(buf) < off + 4:
        raise SerializationError("dataset header truncated")
    pid = buf[8:off].decode("utf-8")
    (count,) = struct.unpack_from("!I", buf, off)
    off += 4
    cts = []
    for _ in range(count):
        ct, off = read_ciphertext(buf, off)
        cts.append(ct)
    if off != len(buf):
        raise SerializationError("trailing bytes in dataset file")
    return DatasetHandle(tuple(cts), pid)


def write_dataset(path, data: DatasetHandle) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_dataset(data))


def read_dataset(path) -> DatasetHandle:
    with open(path, "rb") as fh:
        return deserialize_dataset(fh.read())
