"""Product tree construction: values checked against an independent
float-arithmetic oracle that builds the same tree shape over plaintexts."""

import numpy as np
import pytest

from hesearch.backend import PlainBackend
from hesearch.errors import (
    BackendMismatchError,
    DepthExhaustedError,
    HeapIndexError,
    ParameterError,
    SerializationError,
)
from hesearch.prodtree import (
    DatasetHandle,
    PAD_SENTINEL,
    build_tree,
    deserialize_dataset,
    pairwise_mul,
    read_dataset,
    serialize_dataset,
    tree_depth_for,
    write_dataset,
)


def float_tree_oracle(values, target):
    """Plaintext reference: same heap layout, same pads, float arithmetic."""
    depth = tree_depth_for(len(values))
    width = 1 << depth
    nodes = [None] * (2 * width)
    for i, v in enumerate(values):
        nodes[width + i] = float(v) - float(target)
    for j in range(len(values), width):
        nodes[width + j] = PAD_SENTINEL
    for k in range(width - 1, 0, -1):
        nodes[k] = nodes[2 * k] * nodes[2 * k + 1]
    return nodes


@pytest.fixture()
def setup():
    server = PlainBackend()
    client = PlainBackend()
    keys = client.keygen(7)
    def make(values):
        cts = tuple(client.encrypt(keys.public_key, v) for v in values)
        return DatasetHandle(cts, "plain")
    def dec(ct):
        return client.decrypt(keys.secret_key, ct)
    return server, client, keys, make, dec


def test_pairwise_even(setup):
    server, client, keys, make, dec = setup
    cts = [client.encrypt(keys.public_key, v) for v in (2, 3, 4, 5)]
    out = pairwise_mul(cts, server, keys.relin_key)
    assert [dec(c) for c in out] == [6.0, 20.0]


def test_pairwise_singleton_passthrough(setup):
    server, client, keys, make, dec = setup
    ct = client.encrypt(keys.public_key, 9.0)
    out = pairwise_mul([ct], server, keys.relin_key)
    assert out == [ct]


def test_pairwise_odd_tail(setup):
    server, client, keys, make, dec = setup
    cts = [client.encrypt(keys.public_key, v) for v in (2, 3, 7)]
    out = pairwise_mul(cts, server, keys.relin_key)
    assert [dec(c) for c in out] == [6.0, 7.0]
    assert out[1] is cts[2]


def test_pairwise_empty_rejected(setup):
    server, client, keys, make, dec = setup
    with pytest.raises(ParameterError):
        pairwise_mul([], server, keys.relin_key)


def test_build_matches_worked_example(setup):
    server, client, keys, make, dec = setup
    tree = build_tree(make([5, 3, 7, 3]), client.encrypt(keys.public_key, 7),
                      server, keys.public_key, keys.relin_key)
    got = [None] + [dec(c) for c in tree.nodes[1:]]
    want = float_tree_oracle([5, 3, 7, 3], 7)
    assert got[1:] == want[1:]
    assert got[4:8] == [-2.0, -4.0, 0.0, -4.0]
    assert got[2:4] == [8.0, 0.0]
    assert got[1] == 0.0


def test_build_pads_odd_dataset(setup):
    server, client, keys, make, dec = setup
    tree = build_tree(make([1, 2, 3]), client.encrypt(keys.public_key, 9),
                      server, keys.public_key, keys.relin_key)
    assert tree.n_padded == 4 and tree.n_real == 3
    got = [dec(c) for c in tree.nodes[1:]]
    assert got[3:7] == [-8.0, -7.0, -6.0, 1.0]  # pad leaf holds the sentinel
    assert got[1:3] == [56.0, -6.0]
    assert got[0] == -336.0
    assert got == float_tree_oracle([1, 2, 3], 9)[1:]


def test_build_single_leaf(setup):
    server, client, keys, make, dec = setup
    tree = build_tree(make([4]), client.encrypt(keys.public_key, 4),
                      server, keys.public_key, keys.relin_key)
    assert tree.depth == 0 and tree.n_padded == 1
    assert len(tree.nodes) == 2
    assert dec(tree.root()) == 0.0  # the single leaf is the root


def test_node_pair_heap_arithmetic(setup):
    server, client, keys, make, dec = setup
    tree = build_tree(make([5, 3, 7, 3]), client.encrypt(keys.public_key, 7),
                      server, keys.public_key, keys.relin_key)
    assert tree.node_pair(1) == (tree.nodes[2], tree.nodes[3])
    assert tree.node_pair(3) == (tree.nodes[6], tree.nodes[7])
    with pytest.raises(HeapIndexError):
        tree.node_pair(4)  # leaf
    with pytest.raises(HeapIndexError):
        tree.node_pair(0)


def test_heap_to_index(setup):
    server, client, keys, make, dec = setup
    tree = build_tree(make([1, 2, 3]), client.encrypt(keys.public_key, 0),
                      server, keys.public_key, keys.relin_key)
    assert tree.heap_to_index(6) == 2
    assert tree.heap_to_index(7) is None  # pad leaf
    with pytest.raises(HeapIndexError):
        tree.heap_to_index(2)
    with pytest.raises(HeapIndexError):
        tree.heap_to_index(8)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 17, 64])
def test_work_counters(setup, n):
    server, client, keys, make, dec = setup
    data = make(list(range(n)))
    before = server.counters.snapshot()
    tree = build_tree(data, client.encrypt(keys.public_key, 3),
                      server, keys.public_key, keys.relin_key)
    after = server.counters.snapshot()
    assert after["muls"] - before["muls"] == tree.n_padded - 1
    assert after["subs"] - before["subs"] == n
    assert len(tree.nodes) == 2 * tree.n_padded
    assert tree.nodes[0] is None
    assert all(ct is not None for ct in tree.nodes[1:])


def test_product_invariant_random_trees(setup):
    server, client, keys, make, dec = setup
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 33))
        values = rng.integers(0, 8, n).tolist()
        tree = build_tree(make(values),
                          client.encrypt(keys.public_key, float(rng.integers(0, 8))),
                          server, keys.public_key, keys.relin_key)
        for k in range(1, tree.n_padded):
            assert dec(tree.nodes[k]) == dec(tree.nodes[2 * k]) * dec(tree.nodes[2 * k + 1])


def test_zero_propagation(setup):
    server, client, keys, make, dec = setup
    rng = np.random.default_rng(6)
    for _ in range(60):
        n = int(rng.integers(1, 33))
        values = rng.integers(0, 6, n).tolist()
        target = int(rng.integers(0, 6))
        tree = build_tree(make(values), client.encrypt(keys.public_key, target),
                          server, keys.public_key, keys.relin_key)
        assert (dec(tree.root()) == 0.0) == (target in values)


def test_pad_sentinel_never_zero(setup):
    server, client, keys, make, dec = setup
    # target equal to the sentinel value: pads must not fake a match
    tree = build_tree(make([5, 3, 7]), client.encrypt(keys.public_key, 1.0),
                      server, keys.public_key, keys.relin_key)
    assert dec(tree.nodes[tree.leaf_offset + 3]) == PAD_SENTINEL
    assert dec(tree.root()) != 0.0


def test_normalized_build(setup):
    server, client, keys, make, dec = setup
    gap = 2.0
    tree = build_tree(make([5, 3, 7, 3]), client.encrypt(keys.public_key, 7),
                      server, keys.public_key, keys.relin_key, expected_gap=gap)
    gamma = 1.0 / gap ** 2
    for k in range(1, tree.n_padded):
        assert dec(tree.nodes[k]) == pytest.approx(
            gamma * dec(tree.nodes[2 * k]) * dec(tree.nodes[2 * k + 1]))
    assert dec(tree.root()) == 0.0  # zero still propagates


def test_levels_decrease_toward_root(toy_backend, toy_keys):
    cts = tuple(toy_backend.encrypt(toy_keys.public_key, v)
                for v in (1.1, 0.9, 1.05, 0.95))
    data = DatasetHandle(cts, toy_backend.params_id)
    tree = build_tree(data, toy_backend.encrypt(toy_keys.public_key, 2.0),
                      toy_backend, toy_keys.public_key, toy_keys.relin_key)
    fresh = toy_backend.max_depth
    for level in range(tree.depth + 1):
        for k in range(1 << level, 1 << (level + 1)):
            assert tree.nodes[k].level == fresh - (tree.depth - level)


def test_normalized_build_needs_double_depth(toy_backend, toy_keys):
    cts = tuple(toy_backend.encrypt(toy_keys.public_key, float(v))
                for v in (1, 2, 3, 4))
    data = DatasetHandle(cts, toy_backend.params_id)
    target = toy_backend.encrypt(toy_keys.public_key, 2.0)
    # depth-2 tree fits the toy budget plainly but not with normalization on
    build_tree(data, target, toy_backend, toy_keys.public_key, toy_keys.relin_key)
    with pytest.raises(DepthExhaustedError):
        build_tree(data, target, toy_backend, toy_keys.public_key,
                   toy_keys.relin_key, expected_gap=2.0)


def test_build_rejects_mismatched_params(setup):
    server, client, keys, make, dec = setup
    data = DatasetHandle(make([1, 2]).ciphertexts, "ckks:n1024:b42.40.40:s40")
    with pytest.raises(ParameterError):
        build_tree(data, client.encrypt(keys.public_key, 1),
                   server, keys.public_key, keys.relin_key)


def test_dataset_requires_uniform_backend(setup):
    server, client, keys, make, dec = setup
    from hesearch.backend import Ciphertext
    good = client.encrypt(keys.public_key, 1.0)
    alien = Ciphertext("ckks", 2, 2.0 ** 40, b"\x02\x02")
    with pytest.raises(BackendMismatchError):
        DatasetHandle((good, alien), "plain")
    with pytest.raises(ParameterError):
        DatasetHandle((), "plain")


def test_dataset_file_roundtrip(tmp_path, setup):
    server, client, keys, make, dec = setup
    data = make([5, 3, 7, 3])
    path = tmp_path / "d.hsd"
    write_dataset(path, data)
    back = read_dataset(path)
    assert back.params_id == "plain"
    assert [dec(ct) for ct in back.ciphertexts] == [5.0, 3.0, 7.0, 3.0]


def test_dataset_file_garbage(setup):
    server, client, keys, make, dec = setup
    blob = serialize_dataset(make([1]))
    with pytest.raises(SerializationError):
        deserialize_dataset(b"WRNG" + blob[4:])
    with pytest.raises(SerializationError):
        deserialize_dataset(blob[:-3])
    with pytest.raises(SerializationError):
        deserialize_dataset(blob + b"\x00")
