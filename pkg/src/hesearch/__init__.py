"""Encrypted membership search over homomorphic ciphertext product trees.

A server holds encrypted scalars and, per query, builds a balanced binary
tree whose leaves are homomorphic differences against the encrypted target
and whose internal nodes are pairwise homomorphic products; a client then
locates a match in a logarithmic number of round trips by decrypting only
the nodes along one root-to-leaf path.
"""

from .backend import (
    Ciphertext,
    HEBackend,
    KeyPair,
    PlainBackend,
    deserialize_ciphertext,
    remaining_depth,
    serialize_ciphertext,
)
from .ckks import CkksBackend, CkksParams
from .presets import backend_for_params_id, backend_for_preset, preset_names

__version__ = "0.1.0"

__all__ = [
    "Ciphertext",
    "HEBackend",
    "KeyPair",
    "PlainBackend",
    "CkksBackend",
    "CkksParams",
    "backend_for_params_id",
    "backend_for_preset",
    "preset_names",
    "serialize_ciphertext",
    "deserialize_ciphertext",
    "remaining_depth",
    "__version__",
]
