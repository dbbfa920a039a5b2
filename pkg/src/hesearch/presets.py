"""Named parameter presets and params-id resolution.

Presets:
  plain         exact-arithmetic oracle backend (no cryptography at all)
  toy-insecure  N=1024, 3 primes: fast unit-test parameters, PROVIDES NO
                SECURITY and is labeled accordingly wherever it surfaces
  desk          N=8192, 8 primes (~322-bit modulus), depth-6 budget sized
                for trees over up to 64 items

Security sizing is documentation-only; nothing in the package estimates
hardness. A params-id string ("plain", "ckks:n8192:b42.40...:s40") is
self-describing, so any id written into a key or dataset file can be
resolved back to a backend without a registry lookup.
"""

from __future__ import annotations

from .backend import HEBackend, PlainBackend, TAG_PLAIN
from .ckks import CkksBackend, CkksParams, parse_params_id
from .errors import ParameterError

TOY_PARAMS = CkksParams(n_ring=1024, prime_bits=(42, 40, 40))
DESK_PARAMS = CkksParams(n_ring=8192, prime_bits=(42,) + (40,) * 7)

PRESETS: dict[str, CkksParams | None] = {
    "plain": None,
    "toy-insecure": TOY_PARAMS,
    "desk": DESK_PARAMS,
}

INSECURE_PRESETS = {"plain", "toy-insecure"}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def backend_for_preset(name: str) -> HEBackend:
    if name not in PRESETS:
        raise ParameterError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    params = PRESETS[name]
    if params is None:
        return PlainBackend()
    return CkksBackend(params)


def backend_for_params_id(params_id: str) -> HEBackend:
    if params_id == TAG_PLAIN or params_id.startswith("plain"):
        return PlainBackend()
    if params_id.startswith("ckks:"):
        return CkksBackend(parse_params_id(params_id))
    raise ParameterError(f"unresolvable params id {params_id!r}")
