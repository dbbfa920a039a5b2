"""Negacyclic ring arithmetic in Z_q[X]/(X^N + 1) over word-size primes.

Residue vectors are numpy uint64 arrays; a batch is a (rows, N) matrix where
every row may live under a different prime. The module provides:

  * a schoolbook big-int negacyclic product (the correctness oracle),
  * vectorized numpy transforms,
  * numba-jitted transforms with Shoup multiplication (used when available).

All transform paths produce bit-identical residues; tests enforce this.

Primes must stay below 2**42 so that the split multiply-reduce fits in
uint64 without overflow.
"""

from __future__ import annotations

import os

# quietens the numba TBB-version probe; workqueue is fine for 2-4 cores
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import sympy

from .errors import ParameterError

MAX_PRIME_BITS = 42
_MASK21 = np.uint64((1 << 21) - 1)
_SH21 = np.uint64(21)


def is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def find_ntt_primes(n_ring: int, bits_list: list[int]) -> list[int]:
    """Distinct primes q ≡ 1 (mod 2N), each the largest below 2**bits.

    The search is deterministic, so a (N, bits_list) pair always names the
    same modulus chain.
    """
    if not is_pow2(n_ring):
        raise ParameterError(f"ring degree must be a power of two, got {n_ring}")
    step = 2 * n_ring
    primes: list[int] = []
    for bits in bits_list:
        if not 20 <= bits <= MAX_PRIME_BITS:
            raise ParameterError(f"prime size {bits} outside [20, {MAX_PRIME_BITS}] bits")
        q = ((1 << bits) - 2) // step * step + 1
        while q in primes or not sympy.isprime(q):
            q -= step
            if q <= step:
                raise ParameterError(f"no NTT prime of {bits} bits for N={n_ring}")
        primes.append(q)
    return primes


def primitive_root_2n(q: int, n_ring: int) -> int:
    """A primitive 2N-th root of unity mod q (requires 2N | q-1)."""
    if (q - 1) % (2 * n_ring) != 0:
        raise ParameterError(f"prime {q} is not NTT-friendly for N={n_ring}")
    factors = sympy.factorint(q - 1)
    for g in range(2, 10_000):
        if all(pow(g, (q - 1) // p, q) != 1 for p in factors):
            psi = pow(g, (q - 1) // (2 * n_ring), q)
            assert pow(psi, n_ring, q) == q - 1
            return psi
    raise ParameterError(f"no generator found for {q}")


def bitrev_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def negacyclic_mul_schoolbook(a, b, q: int) -> list[int]:
    """O(N^2) big-int negacyclic convolution: the oracle for every fast path."""
    n = len(a)
    if len(b) != n:
        raise ParameterError("operand lengths differ")
    res = [0] * n
    for i in range(n):
        ai = int(a[i])
        if ai == 0:
            continue
        for j in range(n):
            k = i + j
            p = ai * int(b[j])
            if k < n:
                res[k] = (res[k] + p) % q
            else:
                res[k - n] = (res[k - n] - p) % q
    return res


# ---------------------------------------------------------------------------
# numpy transform path (always available)

def _mulmod_np(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(a * b) mod q for uint64 operands below q < 2**42."""
    hi = ((a >> _SH21) * b) % q
    lo = ((a & _MASK21) * b) % q
    return ((hi << _SH21) + lo) % q


def _ntt_rows_np(a, psis_br, psis_br_sh, qs):
    rows, n = a.shape
    q = qs[:, None]
    t = n
    m = 1
    while m < n:
        t //= 2
        blk = a.reshape(rows, m, 2, t)
        s = psis_br[:, m:2 * m, None]
        u = blk[:, :, 0, :].copy()
        v = _mulmod_np(blk[:, :, 1, :], s, q[:, None])
        blk[:, :, 0, :] = (u + v) % q[:, None]
        blk[:, :, 1, :] = (u + q[:, None] - v) % q[:, None]
        m *= 2
    return a


def _intt_rows_np(a, ipsis_br, ipsis_br_sh, n_invs, n_invs_sh, qs):
    rows, n = a.shape
    q = qs[:, None]
    t = 1
    m = n
    while m > 1:
        h = m // 2
        blk = a.reshape(rows, h, 2, t)
        s = ipsis_br[:, h:2 * h, None]
        u = blk[:, :, 0, :].copy()
        v = blk[:, :, 1, :]
        blk[:, :, 0, :] = (u + v) % q[:, None]
        blk[:, :, 1, :] = _mulmod_np((u + q[:, None] - v) % q[:, None], s, q[:, None])
        t *= 2
        m = h
    a[:] = _mulmod_np(a, n_invs[:, None], q)
    return a


def _pw_mulmod_np(a, b, qs):
    return _mulmod_np(a, b, qs[:, None])


def _pw_mulmod_shoup_np(a, w, w_sh, qs):
    return _mulmod_np(a % qs[:, None], w, qs[:, None])


def _ks_accumulate_np(digits, rlk0, rlk0_sh, rlk1, rlk1_sh, qs):
    q = qs[:, None]
    acc0 = np.zeros_like(digits[0])
    acc1 = np.zeros_like(digits[0])
    for j in range(digits.shape[0]):
        acc0 = (acc0 + _mulmod_np(digits[j], rlk0[j], q)) % q
        acc1 = (acc1 + _mulmod_np(digits[j], rlk1[j], q)) % q
    return acc0, acc1


# ---------------------------------------------------------------------------
# numba transform path (same butterflies, Shoup multiplication)

_HAVE_NUMBA = False
if os.environ.get("HESEARCH_NO_NUMBA", "") != "1":
    try:
        import numba
        from numba import njit, prange

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False

if _HAVE_NUMBA:
    _U64 = numba.uint64

    @njit(_U64(_U64, _U64), inline="always", cache=True)
    def _mulhi64(a, b):
        a0 = a & _U64(0xFFFFFFFF)
        a1 = a >> _U64(32)
        b0 = b & _U64(0xFFFFFFFF)
        b1 = b >> _U64(32)
        mid = a1 * b0 + ((a0 * b0) >> _U64(32))
        mid2 = a0 * b1 + (mid & _U64(0xFFFFFFFF))
        return a1 * b1 + (mid >> _U64(32)) + (mid2 >> _U64(32))

    @njit(_U64(_U64, _U64, _U64, _U64), inline="always", cache=True)
    def _mulmod_shoup(a, w, w_sh, q):
        # valid for any a < 2**64 with q < 2**63; result in [0, q)
        hi = _mulhi64(a, w_sh)
        r = a * w - hi * q
        if r >= q:
            r -= q
        return r

    @njit(_U64(_U64, _U64, _U64), inline="always", cache=True)
    def _mulmod_split(a, b, q):
        hi = ((a >> _U64(21)) * b) % q
        return (((hi << _U64(21)) & _U64(0xFFFFFFFFFFFFFFFF)) + (a & _U64(0x1FFFFF)) * b) % q

    @njit(cache=True, parallel=True)
    def _ntt_rows_nb(a, psis_br, psis_br_sh, qs):
        rows, n = a.shape
        for r in prange(rows):
            q = qs[r]
            t = n
            m = 1
            while m < n:
                t //= 2
                for i in range(m):
                    s = psis_br[r, m + i]
                    s_sh = psis_br_sh[r, m + i]
                    j1 = 2 * i * t
                    for j in range(j1, j1 + t):
                        u = a[r, j]
                        v = _mulmod_shoup(a[r, j + t], s, s_sh, q)
                        tmp = u + v
                        if tmp >= q:
                            tmp -= q
                        a[r, j] = tmp
                        tmp2 = u + q - v
                        if tmp2 >= q:
                            tmp2 -= q
                        a[r, j + t] = tmp2
                m *= 2
        return a

    @njit(cache=True, parallel=True)
    def _intt_rows_nb(a, ipsis_br, ipsis_br_sh, n_invs, n_invs_sh, qs):
        rows, n = a.shape
        for r in prange(rows):
            q = qs[r]
            t = 1
            m = n
            while m > 1:
                h = m // 2
                j1 = 0
                for i in range(h):
                    s = ipsis_br[r, h + i]
                    s_sh = ipsis_br_sh[r, h + i]
                    for j in range(j1, j1 + t):
                        u = a[r, j]
                        v = a[r, j + t]
                        tmp = u + v
                        if tmp >= q:
                            tmp -= q
                        a[r, j] = tmp
                        a[r, j + t] = _mulmod_shoup(u + q - v, s, s_sh, q)
                    j1 += 2 * t
                t *= 2
                m = h
            for j in range(n):
                a[r, j] = _mulmod_shoup(a[r, j], n_invs[r], n_invs_sh[r], q)
        return a

    @njit(cache=True, parallel=True)
    def _pw_mulmod_nb(a, b, qs):
        rows, n = a.shape
        out = np.empty_like(a)
        for r in prange(rows):
            q = qs[r]
            for j in range(n):
                out[r, j] = _mulmod_split(a[r, j], b[r, j], q)
        return out

    @njit(cache=True, parallel=True)
    def _pw_mulmod_shoup_nb(a, w, w_sh, qs):
        rows, n = a.shape
        out = np.empty_like(a)
        for r in prange(rows):
            q = qs[r]
            for j in range(n):
                out[r, j] = _mulmod_shoup(a[r, j], w[r, j], w_sh[r, j], q)
        return out

    @njit(_U64(_U64, _U64), inline="always", cache=True)
    def _shoup_div(w, q):
        # floor((w << 64) / q) by shift-subtract; w < q < 2**63
        rem = w
        quo = _U64(0)
        for _ in range(64):
            quo <<= _U64(1)
            rem <<= _U64(1)
            if rem >= q:
                rem -= q
                quo |= _U64(1)
        return quo

    @njit(cache=True, parallel=True)
    def _shoup_table_nb(w_flat, q_flat):
        out = np.empty_like(w_flat)
        for i in prange(w_flat.size):
            out[i] = _shoup_div(w_flat[i], q_flat[i])
        return out

    @njit(cache=True, parallel=True)
    def _ks_accumulate_nb(digits, rlk0, rlk0_sh, rlk1, rlk1_sh, qs):
        ndig, rows, n = digits.shape
        acc0 = np.zeros((rows, n), dtype=np.uint64)
        acc1 = np.zeros((rows, n), dtype=np.uint64)
        for r in prange(rows):
            q = qs[r]
            for j in range(ndig):
                for k in range(n):
                    d = digits[j, r, k]
                    t0 = acc0[r, k] + _mulmod_shoup(d, rlk0[j, r, k], rlk0_sh[j, r, k], q)
                    if t0 >= q:
                        t0 -= q
                    acc0[r, k] = t0
                    t1 = acc1[r, k] + _mulmod_shoup(d, rlk1[j, r, k], rlk1_sh[j, r, k], q)
                    if t1 >= q:
                        t1 -= q
                    acc1[r, k] = t1
        return acc0, acc1


def shoup_precompute(w: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """floor(w * 2**64 / q) companions for Shoup multiplication.

    `qs` holds one prime per leading row of `w` (or per element when `w`
    is one-dimensional).
    """
    flat_w = np.ascontiguousarray(w).reshape(-1)
    if w.ndim == 1:
        flat_q = np.ascontiguousarray(qs).reshape(-1)
    else:
        lead = w.shape[:-1]
        flat_q = np.broadcast_to(qs.reshape(lead + (1,)), w.shape).reshape(-1).copy()
    if _HAVE_NUMBA:
        out = _shoup_table_nb(flat_w, flat_q)
    else:
        out = np.array([(int(x) << 64) // int(q) for x, q in zip(flat_w, flat_q)],
                       dtype=np.uint64)
    return out.reshape(w.shape)


class NttPlan:
    """Precomputed transform tables for one (N, prime chain) pair.

    Row batches are tagged with per-row prime indices; gathered tables are
    cached per index pattern because key-switching reuses a few patterns
    thousands of times.
    """

    def __init__(self, n_ring: int, primes: list[int]):
        if not is_pow2(n_ring):
            raise ParameterError(f"ring degree must be a power of two, got {n_ring}")
        self.n = n_ring
        self.primes = list(primes)
        self.qs = np.array(primes, dtype=np.uint64)
        rev = bitrev_indices(n_ring)
        psis, ipsis = [], []
        n_inv = []
        for q in primes:
            psi = primitive_root_2n(q, n_ring)
            ipsi = pow(psi, -1, q)
            pw = np.array([pow(psi, int(i), q) for i in range(n_ring)], dtype=np.uint64)
            ipw = np.array([pow(ipsi, int(i), q) for i in range(n_ring)], dtype=np.uint64)
            psis.append(pw[rev])
            ipsis.append(ipw[rev])
            n_inv.append(pow(n_ring, -1, q))
        self.psis_br = np.stack(psis)
        self.ipsis_br = np.stack(ipsis)
        self.n_invs = np.array(n_inv, dtype=np.uint64)
        self.psis_br_sh = shoup_precompute(self.psis_br, self.qs)
        self.ipsis_br_sh = shoup_precompute(self.ipsis_br, self.qs)
        self.n_invs_sh = shoup_precompute(self.n_invs, self.qs)
        self._gather_cache: dict[tuple[int, ...], tuple] = {}

    def _gathered(self, prime_rows: tuple[int, ...]):
        hit = self._gather_cache.get(prime_rows)
        if hit is None:
            idx = np.array(prime_rows, dtype=np.int64)
            hit = (
                self.qs[idx],
                np.ascontiguousarray(self.psis_br[idx]),
                np.ascontiguousarray(self.psis_br_sh[idx]),
                np.ascontiguousarray(self.ipsis_br[idx]),
                np.ascontiguousarray(self.ipsis_br_sh[idx]),
                self.n_invs[idx],
                self.n_invs_sh[idx],
            )
            self._gather_cache[prime_rows] = hit
        return hit

    def forward(self, mat: np.ndarray, prime_rows: tuple[int, ...]) -> np.ndarray:
        """Negacyclic NTT of each row (natural -> bit-reversed order).

        Transforms in place when `mat` is C-contiguous; always use the
        returned array.
        """
        mat = np.ascontiguousarray(mat)
        qs, pb, pbs, _, _, _, _ = self._gathered(prime_rows)
        if _HAVE_NUMBA:
            return _ntt_rows_nb(mat, pb, pbs, qs)
        return _ntt_rows_np(mat, pb, pbs, qs)

    def inverse(self, mat: np.ndarray, prime_rows: tuple[int, ...]) -> np.ndarray:
        """Inverse transform (bit-reversed -> natural order); see forward()."""
        mat = np.ascontiguousarray(mat)
        qs, _, _, ipb, ipbs, ninv, ninvsh = self._gathered(prime_rows)
        if _HAVE_NUMBA:
            return _intt_rows_nb(mat, ipb, ipbs, ninv, ninvsh, qs)
        return _intt_rows_np(mat, ipb, ipbs, ninv, ninvsh, qs)

    def pw_mul(self, a: np.ndarray, b: np.ndarray, prime_rows: tuple[int, ...]) -> np.ndarray:
        """Pointwise (a*b) mod q per row, both operands arbitrary residues."""
        qs = self.qs[np.array(prime_rows, dtype=np.int64)]
        a = np.ascontiguousarray(a)
        b = np.ascontiguousarray(b)
        if _HAVE_NUMBA:
            return _pw_mulmod_nb(a, b, qs)
        return _pw_mulmod_np(a, b, qs)

    def pw_mul_shoup(self, a: np.ndarray, w: np.ndarray, w_sh: np.ndarray,
                     prime_rows: tuple[int, ...]) -> np.ndarray:
        """Pointwise a*w mod q where w carries precomputed Shoup companions."""
        qs = self.qs[np.array(prime_rows, dtype=np.int64)]
        a = np.ascontiguousarray(a)
        if _HAVE_NUMBA:
            return _pw_mulmod_shoup_nb(a, np.ascontiguousarray(w),
                                       np.ascontiguousarray(w_sh), qs)
        return _pw_mulmod_shoup_np(a, w, w_sh, qs)

    def ks_accumulate(self, digits, rlk0, rlk0_sh, rlk1, rlk1_sh,
                      prime_rows: tuple[int, ...]):
        """sum_j digits[j] * rlk[j] for both relinearization-key halves."""
        qs = self.qs[np.array(prime_rows, dtype=np.int64)]
        if _HAVE_NUMBA:
            return _ks_accumulate_nb(digits, rlk0, rlk0_sh, rlk1, rlk1_sh, qs)
        return _ks_accumulate_np(digits, rlk0, rlk0_sh, rlk1, rlk1_sh, qs)


def center_lift(mat: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """Residues (rows, N) -> signed int64 representatives in (-q/2, q/2]."""
    q = qs[:, None]
    out = mat.astype(np.int64)
    out -= (mat > (q >> np.uint64(1))).astype(np.int64) * q.astype(np.int64)
    return out


def reduce_signed(mat: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """Signed int64 coefficients -> residues under each row's prime."""
    q = qs[:, None].astype(np.int64)
    return ((mat % q) + q).astype(np.uint64) % qs[:, None]


def reduce_signed_small(mat: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """Like reduce_signed but division-free; requires |mat| < q per row."""
    q = qs[:, None].astype(np.int64)
    return (mat + (mat < 0) * q).astype(np.uint64)


def add_mod(a: np.ndarray, b: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """(a + b) mod q per row without division; operands must be < q."""
    q = qs[:, None]
    s = a + b
    return s - (s >= q) * q


def sub_mod(a: np.ndarray, b: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """(a - b) mod q per row without division; operands must be < q."""
    q = qs[:, None]
    s = a + (q - b)
    return s - (s >= q) * q


def negacyclic_mul_ntt(a, b, q: int, n_ring: int | None = None) -> list[int]:
    """Single-prime negacyclic product via the transform path.

    Convenience wrapper used by the transform-equivalence tests; heavy-duty
    callers go through NttPlan directly.
    """
    n = n_ring or len(a)
    plan = NttPlan(n, [q])
    am = np.array([[int(x) % q for x in a]], dtype=np.uint64)
    bm = np.array([[int(x) % q for x in b]], dtype=np.uint64)
    plan.forward(am, (0,))
    plan.forward(bm, (0,))
    cm = plan.pw_mul(am, bm, (0,))
    plan.inverse(cm, (0,))
    return [int(x) for x in cm[0]]
