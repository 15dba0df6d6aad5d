"""Keccak-f[200] permutation and a byte-oriented sponge over it.

The state is 25 one-byte lanes. Lane ``(x, y)`` lives at byte ``x + 5*y``,
so the state serializes row-major with x fastest; an 8-bit lane needs no
further byte ordering.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

WIDTH_BYTES = 25
ROUNDS = 18

# Low 8 bits of the Keccak round constants for the first 18 rounds.
ROUND_CONSTANTS = (
    0x01, 0x82, 0x8A, 0x00, 0x8B, 0x01, 0x81, 0x09, 0x8A,
    0x88, 0x09, 0x0A, 0x8B, 0x8B, 0x89, 0x03, 0x02, 0x80,
)

# Rotation offset for lane x + 5*y, reduced mod 8.
_RHO = (
    0, 1, 62, 28, 27,
    36, 44, 6, 55, 20,
    3, 10, 43, 25, 39,
    41, 45, 15, 21, 8,
    18, 2, 61, 56, 14,
)
RHO_OFFSETS = tuple(r % 8 for r in _RHO)

# Combined rho+pi: B[pi_dest[i]] = rot(A[i], rho[i]) with (x, y) -> (y, 2x+3y).
_PI_DEST = tuple(((i // 5) + 5 * ((2 * (i % 5) + 3 * (i // 5)) % 5)) for i in range(25))
_PI_SRC = tuple(_PI_DEST.index(j) for j in range(25))
_RHO_SRC = tuple(RHO_OFFSETS[_PI_SRC[j]] for j in range(25))

_ROTL = [[((v << r) | (v >> (8 - r))) & 0xFF if r else v for v in range(256)] for r in range(8)]
_ROTR = [[((v >> r) | (v << (8 - r))) & 0xFF if r else v for v in range(256)] for r in range(8)]


def keccak_f200_py(state: bytes | bytearray | list[int]) -> bytes:
    """Pure-Python Keccak-f[200]; same result as :func:`keccak_f200`."""
    if len(state) != WIDTH_BYTES:
        raise ValueError(f"state must be {WIDTH_BYTES} bytes, got {len(state)}")
    a = list(state)
    rotl = _ROTL
    rho_src = _RHO_SRC
    pi_src = _PI_SRC
    r1 = rotl[1]
    for rc in ROUND_CONSTANTS:
        # theta
        c0 = a[0] ^ a[5] ^ a[10] ^ a[15] ^ a[20]
        c1 = a[1] ^ a[6] ^ a[11] ^ a[16] ^ a[21]
        c2 = a[2] ^ a[7] ^ a[12] ^ a[17] ^ a[22]
        c3 = a[3] ^ a[8] ^ a[13] ^ a[18] ^ a[23]
        c4 = a[4] ^ a[9] ^ a[14] ^ a[19] ^ a[24]
        d = (c4 ^ r1[c1], c0 ^ r1[c2], c1 ^ r1[c3], c2 ^ r1[c4], c3 ^ r1[c0])
        a = [a[i] ^ d[i % 5] for i in range(25)]
        # rho + pi
        b = [rotl[rho_src[j]][a[pi_src[j]]] for j in range(25)]
        # chi
        for y in range(0, 25, 5):
            b0, b1, b2, b3, b4 = b[y], b[y + 1], b[y + 2], b[y + 3], b[y + 4]
            a[y] = b0 ^ (~b1 & b2)
            a[y + 1] = b1 ^ (~b2 & b3)
            a[y + 2] = b2 ^ (~b3 & b4)
            a[y + 3] = b3 ^ (~b4 & b0)
            a[y + 4] = b4 ^ (~b0 & b1)
        # iota
        a[0] ^= rc
    return bytes(x & 0xFF for x in a)


_PI_ARR = np.array(_PI_SRC, dtype=np.int64)
_RHO_ARR = np.array(_RHO_SRC, dtype=np.int64)
_RC_ARR = np.array(ROUND_CONSTANTS, dtype=np.uint8)


def _f200_kernel(a, pi_src, rho_src, rcs):  # pragma: no cover - runs jitted
    c = np.empty(5, np.uint8)
    d = np.empty(5, np.uint8)
    b = np.empty(25, np.uint8)
    for rnd in range(18):
        for x in range(5):
            c[x] = a[x] ^ a[x + 5] ^ a[x + 10] ^ a[x + 15] ^ a[x + 20]
        for x in range(5):
            v = c[(x + 1) % 5]
            d[x] = c[(x + 4) % 5] ^ np.uint8(((v << 1) | (v >> 7)) & 255)
        for i in range(25):
            a[i] ^= d[i % 5]
        for j in range(25):
            v = a[pi_src[j]]
            r = rho_src[j]
            if r:
                b[j] = np.uint8(((v << r) | (v >> (8 - r))) & 255)
            else:
                b[j] = v
        for y in range(0, 25, 5):
            for i in range(5):
                a[y + i] = b[y + i] ^ ((~b[y + (i + 1) % 5]) & b[y + (i + 2) % 5])
        a[0] ^= rcs[rnd]


if numba is not None:
    _f200_jit = numba.njit(cache=True)(_f200_kernel)

    def keccak_f200(state: bytes | bytearray | list[int]) -> bytes:
        """Apply one full Keccak-f[200] (18 rounds) to a 25-byte state."""
        if len(state) != WIDTH_BYTES:
            raise ValueError(f"state must be {WIDTH_BYTES} bytes, got {len(state)}")
        a = np.frombuffer(bytes(state), dtype=np.uint8).copy()
        _f200_jit(a, _PI_ARR, _RHO_ARR, _RC_ARR)
        return a.tobytes()
    def _permute_inplace(buf: bytearray) -> None:
        _f200_jit(np.frombuffer(buf, dtype=np.uint8), _PI_ARR, _RHO_ARR, _RC_ARR)
else:  # pragma: no cover
    keccak_f200 = keccak_f200_py

    def _permute_inplace(buf: bytearray) -> None:
        buf[:] = keccak_f200_py(buf)


def _chi5(v: int) -> int:
    bits = [(v >> i) & 1 for i in range(5)]
    return sum((bits[i] ^ ((bits[(i + 1) % 5] ^ 1) & bits[(i + 2) % 5])) << i for i in range(5))


_CHI_INV = [0] * 32
for _v in range(32):
    _CHI_INV[_chi5(_v)] = _v


def _theta_column_map(c: list[int]) -> list[int]:
    return [c[x] ^ c[(x - 1) % 5] ^ _ROTL[1][c[(x + 1) % 5]] for x in range(5)]


def _pack40(c: list[int]) -> int:
    return sum(c[x] << (8 * x) for x in range(5))


def _theta_column_inverse_table() -> list[int]:
    """Rows of the inverse of the column-parity map, one per output bit.

    Output parities of theta are P = C ^ D, a linear map of the 40 input
    column-parity bits; invert it by Gauss-Jordan over GF(2).
    """
    n = 40
    images = []
    for bit in range(n):
        c = [0] * 5
        c[bit // 8] = 1 << (bit % 8)
        images.append(_pack40(_theta_column_map(c)))
    # augmented rows: [matrix row | identity row]
    rows = []
    for out_bit in range(n):
        row = 0
        for in_bit in range(n):
            row |= ((images[in_bit] >> out_bit) & 1) << in_bit
        rows.append(row | (1 << (n + out_bit)))
    for col in range(n):
        sel = next(r for r in range(col, n) if (rows[r] >> col) & 1)
        rows[col], rows[sel] = rows[sel], rows[col]
        for r in range(n):
            if r != col and (rows[r] >> col) & 1:
                rows[r] ^= rows[col]
    # inverse column j (as an int over input bits) for target bit j
    inv_cols = [0] * n
    for r in range(n):
        inv_row = rows[r] >> n
        for j in range(n):
            if (inv_row >> j) & 1:
                inv_cols[j] |= 1 << r
    return inv_cols


_THETA_INV_COLS = _theta_column_inverse_table()


def _f200_inverse_kernel(a, pi_src, rho_src, rcs, chi_inv, theta_inv_cols):  # pragma: no cover - jitted
    b = np.empty(25, np.uint8)
    t = np.empty(25, np.uint8)
    for k in range(18):
        rnd = 17 - k
        a[0] ^= rcs[rnd]
        for y in range(0, 25, 5):
            for i in range(5):
                b[y + i] = 0
            for bit in range(8):
                v = 0
                for i in range(5):
                    v |= ((a[y + i] >> bit) & 1) << i
                w = chi_inv[v]
                for i in range(5):
                    b[y + i] |= np.uint8(((w >> i) & 1) << bit)
        for j in range(25):
            r = rho_src[j]
            v = b[j]
            if r:
                t[pi_src[j]] = np.uint8(((v >> r) | (v << (8 - r))) & 255)
            else:
                t[pi_src[j]] = v
        par = np.uint64(0)
        for x in range(5):
            p = t[x] ^ t[x + 5] ^ t[x + 10] ^ t[x + 15] ^ t[x + 20]
            par |= np.uint64(p) << np.uint64(8 * x)
        sol = np.uint64(0)
        for bit in range(40):
            if (par >> np.uint64(bit)) & np.uint64(1):
                sol ^= theta_inv_cols[bit]
        for i in range(25):
            x = i % 5
            cm = np.uint8((sol >> np.uint64(8 * ((x + 4) % 5))) & np.uint64(255))
            cp = np.uint8((sol >> np.uint64(8 * ((x + 1) % 5))) & np.uint64(255))
            a[i] = t[i] ^ cm ^ np.uint8(((cp << 1) | (cp >> 7)) & 255)


_CHI_INV_ARR = np.array(_CHI_INV, dtype=np.int64)
_THETA_INV_ARR = np.array(_THETA_INV_COLS, dtype=np.uint64)

if numba is not None:
    _f200_inverse_jit = numba.njit(cache=True)(_f200_inverse_kernel)
else:  # pragma: no cover
    _f200_inverse_jit = _f200_inverse_kernel


def keccak_f200_inverse(state: bytes | bytearray | list[int]) -> bytes:
    """Undo :func:`keccak_f200`, round by inverted round."""
    if len(state) != WIDTH_BYTES:
        raise ValueError(f"state must be {WIDTH_BYTES} bytes, got {len(state)}")
    a = np.frombuffer(bytes(state), dtype=np.uint8).copy()
    _f200_inverse_jit(a, _PI_ARR, _RHO_ARR, _RC_ARR, _CHI_INV_ARR, _THETA_INV_ARR)
    return a.tobytes()


class Phase(enum.Enum):
    ABSORBING = "absorbing"
    SQUEEZING = "squeezing"


@dataclass(frozen=True)
class SpongeParams:
    rate_bits: int = 64
    capacity_bits: int = 136
    width_bits: int = 200

    def __post_init__(self) -> None:
        if self.width_bits != 200 or self.rate_bits + self.capacity_bits != self.width_bits:
            raise ValueError("rate + capacity must equal the 200-bit width")
        if self.rate_bits <= 0 or self.rate_bits % 8:
            raise ValueError("rate must be a positive multiple of 8 bits")

    @property
    def rate_bytes(self) -> int:
        return self.rate_bits // 8


@dataclass
class SpongeState:
    """Sponge over Keccak-f[200]; pad10*1 is applied when squeezing starts.

    Absorbing after squeezing restarts absorption from the current state
    (the previous output block position is dropped), which is how reseeding
    works.
    """

    params: SpongeParams = field(default_factory=SpongeParams)
    lanes: bytearray = field(default_factory=lambda: bytearray(WIDTH_BYTES))
    phase: Phase = Phase.ABSORBING
    offset_bits: int = 0
    permutations: int = 0

    def __post_init__(self) -> None:
        if len(self.lanes) != WIDTH_BYTES:
            raise ValueError("sponge state must be exactly 25 bytes")
        self.lanes = bytearray(self.lanes)

    def copy(self) -> SpongeState:
        return SpongeState(self.params, bytearray(self.lanes), self.phase, self.offset_bits, self.permutations)

    def _permute(self) -> None:
        _permute_inplace(self.lanes)
        self.permutations += 1

    def permute(self) -> SpongeState:
        self._permute()
        return self

    def absorb(self, data: bytes | bytearray) -> SpongeState:
        rate = self.params.rate_bytes
        if self.phase is Phase.SQUEEZING:
            self.phase = Phase.ABSORBING
            self.offset_bits = 0
        off = self.offset_bits // 8
        lanes = self.lanes
        for byte in data:
            lanes[off] ^= byte
            off += 1
            if off == rate:
                self._permute()
                off = 0
        self.offset_bits = off * 8
        return self

    def _finalize(self) -> None:
        rate = self.params.rate_bytes
        off = self.offset_bits // 8
        self.lanes[off] ^= 0x01
        self.lanes[rate - 1] ^= 0x80
        self._permute()
        self.phase = Phase.SQUEEZING
        self.offset_bits = 0

    def squeeze(self, n_bits: int) -> bytes:
        if n_bits < 0 or n_bits % 8:
            raise ValueError("n_bits must be a non-negative multiple of 8")
        if self.phase is Phase.ABSORBING:
            self._finalize()
        rate = self.params.rate_bytes
        out = bytearray()
        need = n_bits // 8
        off = self.offset_bits // 8
        while need:
            if off == rate:
                self._permute()
                off = 0
            take = min(need, rate - off)
            out += self.lanes[off:off + take]
            off += take
            need -= take
        # Keep offset strictly inside the block: an exhausted block is
        # permuted eagerly on the next request instead.
        if off == rate:
            self._permute()
            off = 0
        self.offset_bits = off * 8
        return bytes(out)


def permute(state: SpongeState) -> SpongeState:
    return state.copy().permute()


def absorb(state: SpongeState, data: bytes) -> SpongeState:
    return state.copy().absorb(data)


def squeeze(state: SpongeState, n_bits: int) -> tuple[bytes, SpongeState]:
    """Functional squeeze: returns the output and the advanced state."""
    s = state.copy()
    return s.squeeze(n_bits), s
